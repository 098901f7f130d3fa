#pragma once

// Independent reference implementations used for verification only. Nothing
// here shares code with the production paths it checks: convolutions and
// attention are direct nested-loop transcriptions, gradients come from
// central finite differences.

#include <cmath>
#include <functional>
#include <vector>

#include "spvit/autodiff.hpp"
#include "spvit/rng.hpp"
#include "spvit/tensor.hpp"

namespace spvit::oracle {

// Direct six-nested-loop convolution with same zero padding. x is a
// [n_w*n_e x c_in] token grid, w is [k x k x c_in x c_out].
inline Tensor conv2d_naive(const Tensor& x, const Tensor& w, std::size_t n_w, std::size_t n_e) {
    const std::size_t k = w.shape[0];
    const std::size_t c_in = w.shape[2], c_out = w.shape[3];
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k / 2);
    Tensor y({n_w * n_e, c_out});
    for (std::size_t i = 0; i < n_w; ++i)
        for (std::size_t j = 0; j < n_e; ++j)
            for (std::size_t d1 = 0; d1 < k; ++d1)
                for (std::size_t d2 = 0; d2 < k; ++d2) {
                    const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + d1) - r;
                    const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + d2) - r;
                    if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(n_w) ||
                        sj >= static_cast<std::ptrdiff_t>(n_e))
                        continue;
                    for (std::size_t ci = 0; ci < c_in; ++ci)
                        for (std::size_t co = 0; co < c_out; ++co)
                            y.at(i * n_e + j, co) +=
                                x.at(static_cast<std::size_t>(si) * n_e + static_cast<std::size_t>(sj), ci) *
                                w.at(d1, d2, ci, co);
                }
    return y;
}

// Per-position, per-head attention reference. Weights are the flat layouts
// used by the layer: wq/wk/wv [c_in x c_in] with head-block columns, wo
// [c_in x c_in] with head-block rows. Biases optional (empty tensors skip).
inline Tensor msa_naive(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                        const Tensor& wo, const Tensor& bq, const Tensor& bk, const Tensor& bv,
                        const Tensor& bo, std::size_t n_h) {
    const std::size_t n = x.shape[0], c_in = x.shape[1];
    const std::size_t c_h = c_in / n_h;
    auto proj = [&](const Tensor& w, const Tensor& b) {
        Tensor p({n, c_in});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c_in; ++j) {
                double acc = b.numel() == c_in ? b.data[j] : 0.0;
                for (std::size_t m = 0; m < c_in; ++m) acc += x.at(i, m) * w.at(m, j);
                p.at(i, j) = acc;
            }
        return p;
    };
    const Tensor q = proj(wq, bq), kk = proj(wk, bk), v = proj(wv, bv);
    Tensor y({n, c_in});
    for (std::size_t i = 0; i < n; ++i) {
        if (bo.numel() == c_in)
            for (std::size_t j = 0; j < c_in; ++j) y.at(i, j) = bo.data[j];
        for (std::size_t h = 0; h < n_h; ++h) {
            std::vector<double> scores(n);
            double mx = -1e308;
            for (std::size_t l = 0; l < n; ++l) {
                double s = 0.0;
                for (std::size_t c = 0; c < c_h; ++c) s += q.at(i, h * c_h + c) * kk.at(l, h * c_h + c);
                scores[l] = s / std::sqrt(static_cast<double>(c_h));
                mx = std::max(mx, scores[l]);
            }
            double z = 0.0;
            for (std::size_t l = 0; l < n; ++l) {
                scores[l] = std::exp(scores[l] - mx);
                z += scores[l];
            }
            for (std::size_t l = 0; l < n; ++l) {
                const double a = scores[l] / z;
                for (std::size_t c = 0; c < c_h; ++c) {
                    const double vel = a * v.at(l, h * c_h + c);
                    for (std::size_t j = 0; j < c_in; ++j) y.at(i, j) += vel * wo.at(h * c_h + c, j);
                }
            }
        }
    }
    return y;
}

// Locality-restricted attention: every in-window attention score fixed to 1,
// everything else 0, heads summed through their output projections.
inline Tensor msa_local_restricted_naive(const Tensor& v, const Tensor& wo, std::size_t n_w,
                                         std::size_t n_e, std::size_t n_h, std::size_t k) {
    const std::size_t c_in = v.shape[1];
    const std::size_t c_h = c_in / n_h;
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k / 2);
    Tensor y({n_w * n_e, c_in});
    for (std::size_t i = 0; i < n_w; ++i)
        for (std::size_t j = 0; j < n_e; ++j)
            for (std::size_t h = 0; h < n_h; ++h)
                for (std::ptrdiff_t d1 = -r; d1 <= r; ++d1)
                    for (std::ptrdiff_t d2 = -r; d2 <= r; ++d2) {
                        const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + d1;
                        const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + d2;
                        if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(n_w) ||
                            sj >= static_cast<std::ptrdiff_t>(n_e))
                            continue;
                        for (std::size_t c = 0; c < c_h; ++c) {
                            const double vel =
                                v.at(static_cast<std::size_t>(si) * n_e + static_cast<std::size_t>(sj), h * c_h + c);
                            for (std::size_t m = 0; m < c_in; ++m)
                                y.at(i * n_e + j, m) += vel * wo.at(h * c_h + c, m);
                        }
                    }
    return y;
}

// Central finite-difference gradient of a scalar function of flat inputs.
// f sees the current contents of xs; the probe restores each element.
inline std::vector<Tensor> finite_difference(const std::function<double(const std::vector<Tensor>&)>& f,
                                             std::vector<Tensor> xs, double eps = 1e-6) {
    std::vector<Tensor> grads;
    grads.reserve(xs.size());
    for (std::size_t t = 0; t < xs.size(); ++t) grads.push_back(Tensor::zeros(xs[t].shape));
    for (std::size_t t = 0; t < xs.size(); ++t) {
        for (std::size_t i = 0; i < xs[t].numel(); ++i) {
            const double keep = xs[t].data[i];
            xs[t].data[i] = keep + eps;
            const double fp = f(xs);
            xs[t].data[i] = keep - eps;
            const double fm = f(xs);
            xs[t].data[i] = keep;
            grads[t].data[i] = (fp - fm) / (2.0 * eps);
        }
    }
    return grads;
}

// Worst relative error between analytic and finite-difference gradients.
// Central differences at eps on an O(1) forward value carry absolute noise
// around machine_eps / eps ~ 1e-10, so gradients far below the floor cannot
// be resolved relatively; they compare against the floor instead.
inline double max_rel_err(const std::vector<Tensor>& analytic, const std::vector<Tensor>& fd,
                          double floor = 1e-4) {
    double worst = 0.0;
    for (std::size_t t = 0; t < analytic.size(); ++t)
        for (std::size_t i = 0; i < analytic[t].numel(); ++i) {
            const double a = analytic[t].data[i];
            const double b = fd[t].data[i];
            const double denom = std::max({std::abs(a), std::abs(b), floor});
            worst = std::max(worst, std::abs(a - b) / denom);
        }
    return worst;
}

// Monte Carlo estimate of E[g_hat] under independent Bernoulli(sigmoid(theta))
// draws with the cumulative at-most-one-open rule.
inline std::vector<double> mc_cumulative_expectation(const std::vector<double>& probs,
                                                     std::size_t n_draws, Rng& rng) {
    std::vector<double> hits(probs.size(), 0.0);
    std::vector<int> g(probs.size());
    for (std::size_t d = 0; d < n_draws; ++d) {
        for (std::size_t p = 0; p < probs.size(); ++p) g[p] = rng.uniform() < probs[p] ? 1 : 0;
        std::ptrdiff_t open = -1;
        for (std::ptrdiff_t p = static_cast<std::ptrdiff_t>(probs.size()) - 1; p >= 0; --p)
            if (g[static_cast<std::size_t>(p)] == 1) {
                open = p;
                break;
            }
        if (open >= 0) hits[static_cast<std::size_t>(open)] += 1.0;
    }
    for (double& h : hits) h /= static_cast<double>(n_draws);
    return hits;
}

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = scale * rng.normal();
    return t;
}

// Gradient-check harness: `build` maps tape leaves to a scalar loss. The
// analytic gradient comes from the tape; the reference from central finite
// differences over the same forward. Returns the worst relative error.
template <class BuildFn>
double grad_check_rel_err(BuildFn build, const std::vector<Tensor>& inputs, double eps = 1e-6,
                          double floor = 1e-4) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
    Var loss = build(tape, leaves);
    tape.backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(inputs.size());
    for (const Var& v : leaves) {
        analytic.push_back(v.grad().numel() > 0 ? v.grad() : Tensor::zeros(v.val().shape));
    }
    auto f = [&build](const std::vector<Tensor>& xs) {
        Tape t2;
        std::vector<Var> ls;
        ls.reserve(xs.size());
        for (const Tensor& x : xs) ls.push_back(t2.leaf(x));
        return build(t2, ls).val().data[0];
    };
    const std::vector<Tensor> fd = finite_difference(f, inputs, eps);
    return max_rel_err(analytic, fd, floor);
}

}  // namespace spvit::oracle
