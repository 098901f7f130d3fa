#pragma once

// Unified MSA layer. One parameter set produces the MSA output and every
// candidate bottleneck-convolution output: the convolution path never runs an
// explicit convolution during search, it indexes and scales the value
// projection V through the per-kernel head ensemble. Binary gates pick the
// operation; a cumulative rule keeps at most one gate open.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "spvit/autodiff.hpp"
#include "spvit/errors.hpp"
#include "spvit/rng.hpp"
#include "spvit/tensor.hpp"

namespace spvit {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

// Per-kernel pieces of the shared parameter set: ensemble logits z and an
// independent batch norm so candidates do not pollute each other's statistics.
struct KernelShare {
    std::size_t k = 0;
    Param z;           // [n_h x k x k]
    Param bn_gamma;    // [c_h]
    Param bn_beta;     // [c_h]
    BnState bn_state;  // running stats, carried across phases
};

// Projection layouts: w_qry/w_key/w_val are [c_in x c_in] with head-block
// columns (head h owns columns h*c_h .. (h+1)*c_h); w_o is [c_in x c_in] with
// head-block rows. theta holds one gate logit per candidate operation,
// ordered by ascending complexity: conv-k for each k ascending, then MSA.
struct UmsaParams {
    std::size_t c_in = 0;
    std::size_t n_h = 0;
    std::size_t c_h = 0;
    std::vector<std::size_t> kernels;  // ascending

    Param w_qry, w_key, w_val, w_o;
    Param b_qry, b_key, b_val, b_o;
    std::vector<KernelShare> shares;  // one per kernel size
    Param theta;                      // [|K| + 1]

    std::size_t n_ops() const { return kernels.size() + 1; }

    UmsaParams() = default;

    UmsaParams(const std::string& prefix, std::size_t c_in_, std::size_t n_h_,
               std::vector<std::size_t> kernels_, double theta_init, Rng& rng, double init_std = 0.02)
        : c_in(c_in_), n_h(n_h_), kernels(std::move(kernels_)) {
        if (c_in % n_h != 0) {
            throw ConfigError("umsa: c_in " + std::to_string(c_in) + " not divisible by n_h " +
                              std::to_string(n_h));
        }
        c_h = c_in / n_h;
        for (std::size_t i = 1; i < kernels.size(); ++i)
            if (kernels[i] <= kernels[i - 1]) throw ConfigError("umsa: kernel sizes must be ascending");
        for (std::size_t k : kernels)
            if (k % 2 == 0) throw KernelError("umsa: even kernel size " + std::to_string(k));
        auto mat = [&](const std::string& n) {
            Param p(prefix + n, Tensor({c_in, c_in}));
            for (double& v : p.value.data) v = init_std * rng.normal();
            return p;
        };
        w_qry = mat(".w_qry");
        w_key = mat(".w_key");
        w_val = mat(".w_val");
        w_o = mat(".w_o");
        b_qry = Param(prefix + ".b_qry", Tensor({c_in}));
        b_key = Param(prefix + ".b_key", Tensor({c_in}));
        b_val = Param(prefix + ".b_val", Tensor({c_in}));
        b_o = Param(prefix + ".b_o", Tensor({c_in}));
        for (std::size_t k : kernels) {
            KernelShare s;
            s.k = k;
            s.z = Param(prefix + ".z" + std::to_string(k), Tensor({n_h, k, k}));
            s.bn_gamma = Param(prefix + ".bn" + std::to_string(k) + ".gamma", Tensor::full({c_h}, 1.0));
            s.bn_beta = Param(prefix + ".bn" + std::to_string(k) + ".beta", Tensor({c_h}));
            s.bn_state = BnState(c_h);
            shares.push_back(std::move(s));
        }
        theta = Param(prefix + ".theta", Tensor::full({n_ops()}, theta_init));
    }

    void weight_params(std::vector<Param*>& out) {
        out.insert(out.end(), {&w_qry, &w_key, &w_val, &w_o, &b_qry, &b_key, &b_val, &b_o});
        for (KernelShare& s : shares) out.insert(out.end(), {&s.z, &s.bn_gamma, &s.bn_beta});
    }

    void gate_params(std::vector<Param*>& out) { out.push_back(&theta); }
};

// ---------------------------------------------------------------------------
// Gates
// ---------------------------------------------------------------------------

// g_hat_p = g_p * prod_{q>p} (1 - g_q): the highest open gate wins, all-zero
// input stays all-zero.
inline std::vector<int> cumulative_gates(const std::vector<int>& g) {
    std::vector<int> ghat(g.size(), 0);
    for (std::size_t p = 0; p < g.size(); ++p) {
        int v = g[p];
        for (std::size_t q = p + 1; q < g.size(); ++q) v *= 1 - g[q];
        ghat[p] = v;
    }
    return ghat;
}

struct GateState {
    std::vector<int> g;            // sampled Bernoulli draws
    std::vector<int> g_hat;        // cumulative, at most one 1
    std::vector<double> probs;     // Sigmoid(theta)
};

inline GateState sample_gates(const Tensor& theta, Rng& rng) {
    GateState s;
    s.probs.resize(theta.numel());
    s.g.resize(theta.numel());
    for (std::size_t p = 0; p < theta.numel(); ++p) {
        s.probs[p] = sigmoid_scalar(theta.data[p]);
        s.g[p] = rng.uniform() < s.probs[p] ? 1 : 0;
    }
    s.g_hat = cumulative_gates(s.g);
    return s;
}

// Deterministic gates for freezing: open iff Sigmoid(theta) >= 0.5.
inline std::vector<int> deterministic_gates(const Tensor& theta) {
    std::vector<int> g(theta.numel());
    for (std::size_t p = 0; p < theta.numel(); ++p) g[p] = theta.data[p] >= 0.0 ? 1 : 0;
    return g;
}

// Straight-through Bernoulli: forward takes the sampled binary draw, backward
// substitutes the sigmoid derivative, d g_p / d theta_p := sigmoid'(theta_p).
inline Var ste_bernoulli(Var theta, const std::vector<int>& draws) {
    if (theta.val().numel() != draws.size()) {
        throw ShapeError("ste_bernoulli: theta " + theta.val().shape_str() + " vs " +
                         std::to_string(draws.size()) + " draws");
    }
    Tensor y(theta.val().shape);
    for (std::size_t i = 0; i < draws.size(); ++i) y.data[i] = static_cast<double>(draws[i]);
    return theta.tape->make(std::move(y), {theta.id}, [](Tape& t, Tape::Node& n) {
        const Tensor& th = t.node(n.parents[0]).value;
        Tensor& dth = t.sweep_of(n.parents[0]);
        for (std::size_t i = 0; i < n.sweep.numel(); ++i) {
            const double s = sigmoid_scalar(th.data[i]);
            dth.data[i] += n.sweep.data[i] * s * (1.0 - s);
        }
    });
}

// Graph form of the cumulative rule; works on binary forward values during
// search and on probabilities when building the expected-FLOPs relaxation.
inline Var cumulative_gates_var(Var g) {
    const Tensor& gv = g.val();
    const std::size_t n = gv.numel();
    Tensor y(gv.shape);
    for (std::size_t p = 0; p < n; ++p) {
        double v = gv.data[p];
        for (std::size_t q = p + 1; q < n; ++q) v *= 1.0 - gv.data[q];
        y.data[p] = v;
    }
    return g.tape->make(std::move(y), {g.id}, [n](Tape& t, Tape::Node& n_) {
        const Tensor& gv2 = t.node(n_.parents[0]).value;
        Tensor& dg = t.sweep_of(n_.parents[0]);
        for (std::size_t p = 0; p < n; ++p) {
            const double dyp = n_.sweep.data[p];
            if (dyp == 0.0) continue;
            double tail = 1.0;
            for (std::size_t q = p + 1; q < n; ++q) tail *= 1.0 - gv2.data[q];
            dg.data[p] += dyp * tail;
            for (std::size_t q = p + 1; q < n; ++q) {
                double cof = gv2.data[p];
                for (std::size_t r = p + 1; r < n; ++r)
                    if (r != q) cof *= 1.0 - gv2.data[r];
                dg.data[q] -= dyp * cof;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Weight-sharing machinery
// ---------------------------------------------------------------------------

// Softmax over heads, independently per kernel position: every (d1, d2)
// column of the result sums to one.
inline Tensor head_ensemble(const Tensor& z) {
    const std::size_t n_h = z.shape[0];
    const std::size_t kk = z.numel() / n_h;
    Tensor s = z;
    for (std::size_t d = 0; d < kk; ++d) {
        double m = -1e308;
        for (std::size_t h = 0; h < n_h; ++h) m = std::max(m, z.data[h * kk + d]);
        double sum = 0.0;
        for (std::size_t h = 0; h < n_h; ++h) {
            s.data[h * kk + d] = std::exp(z.data[h * kk + d] - m);
            sum += s.data[h * kk + d];
        }
        for (std::size_t h = 0; h < n_h; ++h) s.data[h * kk + d] /= sum;
    }
    return s;
}

inline Var head_ensemble_var(Var z) { return softmax(z, 0); }

// conv_out[(i,j), c] = sum_h sum_{(d1,d2)} sigma[h,d1,d2] * V[(i+o1, j+o2), h*c_h + c]
// with zero padding at the borders. V carries spatial tokens only.
inline Var local_aggregate(Var v, Var sigma, std::size_t n_w, std::size_t n_e, std::size_t n_h,
                           std::size_t c_h) {
    const Tensor& vv = v.val();
    const Tensor& sv = sigma.val();
    if (sv.rank() != 3 || sv.shape[0] != n_h || sv.shape[1] != sv.shape[2]) {
        throw ShapeError("local_aggregate: sigma " + sv.shape_str());
    }
    const std::size_t k = sv.shape[1];
    if (k % 2 == 0) throw KernelError("local_aggregate: even kernel size " + std::to_string(k));
    if (vv.rank() != 2 || vv.shape[0] != n_w * n_e || vv.shape[1] != n_h * c_h) {
        throw ShapeError("local_aggregate: V " + vv.shape_str() + " vs grid " + std::to_string(n_w) + "x" +
                         std::to_string(n_e) + " heads " + std::to_string(n_h) + "x" + std::to_string(c_h));
    }
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k / 2);
    const std::size_t c_in = n_h * c_h;
    Tensor y({n_w * n_e, c_h});
    for (std::size_t i = 0; i < n_w; ++i)
        for (std::size_t j = 0; j < n_e; ++j) {
            double* yo = &y.data[(i * n_e + j) * c_h];
            for (std::size_t d1 = 0; d1 < k; ++d1) {
                const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + d1) - r;
                if (si < 0 || si >= static_cast<std::ptrdiff_t>(n_w)) continue;
                for (std::size_t d2 = 0; d2 < k; ++d2) {
                    const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + d2) - r;
                    if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(n_e)) continue;
                    const double* vs =
                        &vv.data[(static_cast<std::size_t>(si) * n_e + static_cast<std::size_t>(sj)) * c_in];
                    for (std::size_t h = 0; h < n_h; ++h) {
                        const double w = sv.data[(h * k + d1) * k + d2];
                        const double* vh = &vs[h * c_h];
                        for (std::size_t c = 0; c < c_h; ++c) yo[c] += w * vh[c];
                    }
                }
            }
        }
    return v.tape->make(std::move(y), {v.id, sigma.id},
                        [n_w, n_e, n_h, c_h, k, r, c_in](Tape& t, Tape::Node& n) {
        const Tensor& vv2 = t.node(n.parents[0]).value;
        const Tensor& sv2 = t.node(n.parents[1]).value;
        Tensor& dv = t.sweep_of(n.parents[0]);
        Tensor& ds = t.sweep_of(n.parents[1]);
        for (std::size_t i = 0; i < n_w; ++i)
            for (std::size_t j = 0; j < n_e; ++j) {
                const double* dy = &n.sweep.data[(i * n_e + j) * c_h];
                for (std::size_t d1 = 0; d1 < k; ++d1) {
                    const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + d1) - r;
                    if (si < 0 || si >= static_cast<std::ptrdiff_t>(n_w)) continue;
                    for (std::size_t d2 = 0; d2 < k; ++d2) {
                        const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + d2) - r;
                        if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(n_e)) continue;
                        const std::size_t src =
                            (static_cast<std::size_t>(si) * n_e + static_cast<std::size_t>(sj)) * c_in;
                        for (std::size_t h = 0; h < n_h; ++h) {
                            const double w = sv2.data[(h * k + d1) * k + d2];
                            double acc = 0.0;
                            for (std::size_t c = 0; c < c_h; ++c) {
                                dv.data[src + h * c_h + c] += w * dy[c];
                                acc += vv2.data[src + h * c_h + c] * dy[c];
                            }
                            ds.data[(h * k + d1) * k + d2] += acc;
                        }
                    }
                }
            }
    });
}

// W_o_bar = sum_h (sum_{d1,d2} sigma[h,d1,d2]) * W_o[h-block rows]; the sum
// runs over all k^2 positions with no renormalization.
inline Var wo_ensemble(Var sigma, Var w_o, std::size_t n_h, std::size_t c_h) {
    const Tensor& sv = sigma.val();
    const Tensor& wv = w_o.val();
    const std::size_t c_in = wv.shape[1];
    if (wv.rank() != 2 || wv.shape[0] != n_h * c_h) {
        throw ShapeError("wo_ensemble: w_o " + wv.shape_str());
    }
    const std::size_t kk = sv.numel() / n_h;
    Tensor y({c_h, c_in});
    for (std::size_t h = 0; h < n_h; ++h) {
        double mass = 0.0;
        for (std::size_t d = 0; d < kk; ++d) mass += sv.data[h * kk + d];
        for (std::size_t c = 0; c < c_h; ++c)
            for (std::size_t j = 0; j < c_in; ++j) y.data[c * c_in + j] += mass * wv.data[(h * c_h + c) * c_in + j];
    }
    return sigma.tape->make(std::move(y), {sigma.id, w_o.id}, [n_h, c_h, c_in, kk](Tape& t, Tape::Node& n) {
        const Tensor& sv2 = t.node(n.parents[0]).value;
        const Tensor& wv2 = t.node(n.parents[1]).value;
        Tensor& ds = t.sweep_of(n.parents[0]);
        Tensor& dw = t.sweep_of(n.parents[1]);
        for (std::size_t h = 0; h < n_h; ++h) {
            double inner = 0.0;
            for (std::size_t c = 0; c < c_h; ++c)
                for (std::size_t j = 0; j < c_in; ++j)
                    inner += n.sweep.data[c * c_in + j] * wv2.data[(h * c_h + c) * c_in + j];
            double mass = 0.0;
            for (std::size_t d = 0; d < kk; ++d) {
                ds.data[h * kk + d] += inner;
                mass += sv2.data[h * kk + d];
            }
            for (std::size_t c = 0; c < c_h; ++c)
                for (std::size_t j = 0; j < c_in; ++j)
                    dw.data[(h * c_h + c) * c_in + j] += mass * n.sweep.data[c * c_in + j];
        }
    });
}

// Collapses the shared parameters into standalone convolution weights.
// W[d1,d2,:,:] = sum_h sigma[h,d1,d2] * W_val head block, laid out row-major
// over (d1, d2); the value bias folds into per-tap offsets the same way.
struct ProfiledKernel {
    Tensor w;          // [k x k x c_in x c_h]
    Tensor wo_bar;     // [c_h x c_in]
    Tensor bias_taps;  // [k x k x c_h]
};

inline ProfiledKernel profile_kernel(const UmsaParams& p, std::size_t kernel_index) {
    const KernelShare& s = p.shares.at(kernel_index);
    const std::size_t k = s.k;
    const Tensor sigma = head_ensemble(s.z.value);
    ProfiledKernel out;
    out.w = Tensor({k, k, p.c_in, p.c_h});
    out.bias_taps = Tensor({k, k, p.c_h});
    out.wo_bar = Tensor({p.c_h, p.c_in});
    for (std::size_t d1 = 0; d1 < k; ++d1)
        for (std::size_t d2 = 0; d2 < k; ++d2)
            for (std::size_t h = 0; h < p.n_h; ++h) {
                const double w = sigma.at(h, d1, d2);
                for (std::size_t ci = 0; ci < p.c_in; ++ci)
                    for (std::size_t c = 0; c < p.c_h; ++c)
                        out.w.at(d1, d2, ci, c) += w * p.w_val.value.at(ci, h * p.c_h + c);
                for (std::size_t c = 0; c < p.c_h; ++c)
                    out.bias_taps.at(d1, d2, c) += w * p.b_val.value.data[h * p.c_h + c];
            }
    for (std::size_t h = 0; h < p.n_h; ++h) {
        double mass = 0.0;
        for (std::size_t d1 = 0; d1 < k; ++d1)
            for (std::size_t d2 = 0; d2 < k; ++d2) mass += sigma.at(h, d1, d2);
        for (std::size_t c = 0; c < p.c_h; ++c)
            for (std::size_t j = 0; j < p.c_in; ++j)
                out.wo_bar.at(c, j) += mass * p.w_o.value.at(h * p.c_h + c, j);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layer forward paths
// ---------------------------------------------------------------------------

struct AttentionOut {
    Var out;  // [N x c_in]
    Var v;    // [N x c_in], head-block columns; reused by the conv branches
};

// Softmax(Q K^T / sqrt(c_h)) per head applied to V, head outputs projected
// through their W_o row blocks and summed.
inline AttentionOut attention_forward(Tape& tape, Var x, UmsaParams& p) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2 || xv.shape[1] != p.c_in) {
        throw ShapeError("attention_forward: X " + xv.shape_str() + " vs c_in " + std::to_string(p.c_in));
    }
    Var q = add_rowvec(matmul(x, tape.param(p.w_qry)), tape.param(p.b_qry));
    Var k = add_rowvec(matmul(x, tape.param(p.w_key)), tape.param(p.b_key));
    Var v = add_rowvec(matmul(x, tape.param(p.w_val)), tape.param(p.b_val));
    Var w_o = tape.param(p.w_o);
    std::vector<Var> head_outs;
    head_outs.reserve(p.n_h);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(p.c_h));
    for (std::size_t h = 0; h < p.n_h; ++h) {
        const std::size_t c0 = h * p.c_h, c1 = (h + 1) * p.c_h;
        Var qh = slice_cols(q, c0, c1);
        Var kh = slice_cols(k, c0, c1);
        Var vh = slice_cols(v, c0, c1);
        Var att = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
        Var oh = matmul(att, vh);
        head_outs.push_back(matmul(oh, slice_rows(w_o, c0, c1)));
    }
    Var out = add_rowvec(sum_vars(head_outs), tape.param(p.b_o));
    return AttentionOut{out, v};
}

// Search-mode bottleneck convolution: Conv(X) is obtained by indexing V, then
// ReLU, the kernel's own BN, and the ensemble output projection.
inline Var bconv_search(Tape& tape, Var v_spatial, UmsaParams& p, std::size_t kernel_index,
                        std::size_t n_w, std::size_t n_e, bool bn_train) {
    KernelShare& s = p.shares.at(kernel_index);
    Var sigma = head_ensemble_var(tape.param(s.z));
    Var conv = local_aggregate(v_spatial, sigma, n_w, n_e, p.n_h, p.c_h);
    Var normed = batchnorm(relu(conv), tape.param(s.bn_gamma), tape.param(s.bn_beta), s.bn_state, bn_train);
    Var wobar = wo_ensemble(sigma, tape.param(p.w_o), p.n_h, p.c_h);
    return add_rowvec(matmul(normed, wobar), tape.param(p.b_o));
}

// Materialized bottleneck convolution parameters (search parameters profiled
// and slimmed).
struct ConvParams {
    std::size_t k = 0;
    Param w;          // [k x k x c_in x c_h]
    Param bias_taps;  // [k x k x c_h]
    Param wo_bar;     // [c_h x c_in]
    Param b_o;        // [c_in]
    Param bn_gamma, bn_beta;
    BnState bn_state;
};

inline Var bconv_materialized(Tape& tape, Var x_spatial, ConvParams& cp, std::size_t n_w,
                              std::size_t n_e, bool bn_train) {
    Var conv = conv2d(x_spatial, tape.param(cp.w), n_w, n_e, tape.param(cp.bias_taps));
    Var normed = batchnorm(relu(conv), tape.param(cp.bn_gamma), tape.param(cp.bn_beta), cp.bn_state, bn_train);
    return add_rowvec(matmul(normed, tape.param(cp.wo_bar)), tape.param(cp.b_o));
}

// ---------------------------------------------------------------------------
// Unified layer forward
// ---------------------------------------------------------------------------

enum class UmsaMode { Search, Frozen };

// Layer output before the residual. In search mode all candidate outputs are
// combined through the sampled cumulative gates (straight-through backward);
// in frozen mode deterministic gates select at most one branch and only that
// branch is evaluated. nullopt means all gates closed: the block's residual
// passes X unchanged. With a class token, only the spatial rows enter the
// convolution branches; the token's row of a conv output stays zero.
inline std::optional<Var> umsa_forward(Tape& tape, Var x, UmsaParams& p, UmsaMode mode,
                                       const GateState* gates, std::size_t n_w, std::size_t n_e,
                                       bool class_token, bool bn_train) {
    const std::size_t n = x.val().shape[0];
    const std::size_t spatial_rows = n - (class_token ? 1 : 0);
    if (spatial_rows != n_w * n_e) {
        throw ConfigError("umsa_forward: " + std::to_string(spatial_rows) + " spatial tokens vs grid " +
                          std::to_string(n_w) + "x" + std::to_string(n_e));
    }
    auto spatial = [&](Var tokens) { return class_token ? slice_rows(tokens, 1, n) : tokens; };
    auto embed = [&](Var sp) { return class_token ? pad_rows(sp, n, 1) : sp; };

    if (mode == UmsaMode::Search) {
        if (gates == nullptr || gates->g.size() != p.n_ops()) {
            throw ContractError("umsa_forward: search mode needs sampled gates");
        }
        AttentionOut att = attention_forward(tape, x, p);
        Var v_sp = spatial(att.v);
        std::vector<Var> branches;
        for (std::size_t ki = 0; ki < p.kernels.size(); ++ki)
            branches.push_back(embed(bconv_search(tape, v_sp, p, ki, n_w, n_e, bn_train)));
        branches.push_back(att.out);
        Var ghat = cumulative_gates_var(ste_bernoulli(tape.param(p.theta), gates->g));
        std::vector<Var> terms;
        terms.reserve(branches.size());
        for (std::size_t pi = 0; pi < branches.size(); ++pi)
            terms.push_back(scale_by(branches[pi], select(ghat, pi)));
        return sum_vars(terms);
    }

    // Frozen: Eq.-style three-case rule on deterministic gates.
    const std::vector<int> ghat = cumulative_gates(deterministic_gates(p.theta.value));
    std::ptrdiff_t open = -1;
    for (std::size_t pi = 0; pi < ghat.size(); ++pi)
        if (ghat[pi] == 1) open = static_cast<std::ptrdiff_t>(pi);
    if (open < 0) return std::nullopt;
    if (static_cast<std::size_t>(open) == p.n_ops() - 1) {
        return attention_forward(tape, x, p).out;
    }
    Var v = add_rowvec(matmul(x, tape.param(p.w_val)), tape.param(p.b_val));
    Var out_sp = bconv_search(tape, spatial(v), p, static_cast<std::size_t>(open), n_w, n_e, bn_train);
    return embed(out_sp);
}

}  // namespace spvit
