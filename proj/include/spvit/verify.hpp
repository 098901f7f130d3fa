#pragma once

// Self-contained verification suites behind the `verify` subcommand:
// weight-sharing equivalence, gradient integrity, gate algebra, and the cost
// model regression. Each suite reports pass/fail with a short detail line.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "spvit/cost.hpp"
#include "spvit/linalg.hpp"
#include "spvit/model.hpp"
#include "spvit/oracles.hpp"
#include "spvit/pipeline.hpp"
#include "spvit/search.hpp"

namespace spvit {

struct SuiteResult {
    std::string name;
    bool passed = true;
    std::string detail;
};

namespace verify_detail {

inline UmsaParams random_umsa(std::size_t c_in, std::size_t n_h, std::vector<std::size_t> kernels,
                              Rng& rng, bool with_bias) {
    UmsaParams p("v", c_in, n_h, std::move(kernels), 1.5, rng, 0.2);
    for (KernelShare& s : p.shares)
        for (double& v : s.z.value.data) v = rng.normal();
    if (with_bias) {
        for (double& v : p.b_val.value.data) v = 0.1 * rng.normal();
        for (double& v : p.b_o.value.data) v = 0.1 * rng.normal();
    }
    return p;
}

}  // namespace verify_detail

// local_aggregate on V must equal the explicit convolution with the profiled
// kernel; the two bconv paths must agree with biases folded.
inline SuiteResult verify_equivalence(std::size_t cases = 24) {
    SuiteResult res{"equivalence", true, ""};
    Rng rng(20240901);
    double worst = 0.0;
    const std::vector<std::size_t> heads{2, 4, 8};
    const std::vector<std::size_t> dims{16, 32, 64};
    for (std::size_t i = 0; i < cases; ++i) {
        const std::size_t n_h = heads[i % heads.size()];
        const std::size_t c_in = dims[(i / 3) % dims.size()];
        const std::size_t n_w = 4 + rng.below(7);
        const std::size_t n_e = 4 + rng.below(7);
        const std::size_t k = (i % 2 == 0) ? 1 : 3;
        UmsaParams p = verify_detail::random_umsa(c_in, n_h, {k}, rng, false);
        const Tensor x = oracle::random_tensor({n_w * n_e, c_in}, rng);

        Tape tape;
        Var xv = tape.leaf(x);
        Var v = matmul(xv, tape.leaf(p.w_val.value));
        Var sigma = head_ensemble_var(tape.leaf(p.shares[0].z.value));
        Var agg = local_aggregate(v, sigma, n_w, n_e, n_h, p.c_h);

        const ProfiledKernel pk = profile_kernel(p, 0);
        const Tensor conv_ref = oracle::conv2d_naive(x, pk.w, n_w, n_e);
        worst = std::max(worst, max_abs_diff(agg.val(), conv_ref));

        // Full bottleneck path with biases, search vs materialized.
        UmsaParams pb = verify_detail::random_umsa(c_in, n_h, {k}, rng, true);
        Tape t2;
        Var xv2 = t2.leaf(x);
        Var v2 = add_rowvec(matmul(xv2, t2.leaf(pb.w_val.value)), t2.leaf(pb.b_val.value));
        Var search_out = bconv_search(t2, v2, pb, 0, n_w, n_e, /*bn_train=*/false);
        ConvParams cp;
        const ProfiledKernel pk2 = profile_kernel(pb, 0);
        cp.k = k;
        cp.w = Param("w", pk2.w);
        cp.bias_taps = Param("bt", pk2.bias_taps);
        cp.wo_bar = Param("wo", pk2.wo_bar);
        cp.b_o = Param("bo", pb.b_o.value);
        cp.bn_gamma = Param("g", pb.shares[0].bn_gamma.value);
        cp.bn_beta = Param("b", pb.shares[0].bn_beta.value);
        cp.bn_state = pb.shares[0].bn_state;
        Tape t3;
        Var mat_out = bconv_materialized(t3, t3.leaf(x), cp, n_w, n_e, /*bn_train=*/false);
        worst = std::max(worst, max_abs_diff(search_out.val(), mat_out.val()));
    }
    std::ostringstream os;
    os << cases << " cases, max abs diff " << worst;
    res.detail = os.str();
    res.passed = worst <= 1e-10;
    return res;
}

inline SuiteResult verify_gradients() {
    SuiteResult res{"gradients", true, ""};
    Rng rng(7771);
    double worst = 0.0;
    for (int rep = 0; rep < 4; ++rep) {
        const Tensor a = oracle::random_tensor({3, 4}, rng);
        const Tensor b = oracle::random_tensor({4, 2}, rng);
        worst = std::max(worst, oracle::grad_check_rel_err(
                                    [](Tape&, const std::vector<Var>& v) {
                                        return sum_all(relu(matmul(v[0], v[1])));
                                    },
                                    {a, b}));
        const Tensor x = oracle::random_tensor({2, 5}, rng);
        worst = std::max(worst, oracle::grad_check_rel_err(
                                    [](Tape&, const std::vector<Var>& v) {
                                        return sum_all(mul(softmax(v[0], 1), gelu(v[0])));
                                    },
                                    {x}));
        const Tensor logits = oracle::random_tensor({1, 6}, rng);
        worst = std::max(worst, oracle::grad_check_rel_err(
                                    [rep](Tape&, const std::vector<Var>& v) {
                                        return cross_entropy(v[0], static_cast<std::size_t>(rep % 6));
                                    },
                                    {logits}));
        const Tensor xc = oracle::random_tensor({9, 3}, rng);
        const Tensor w = oracle::random_tensor({3, 3, 3, 2}, rng);
        worst = std::max(worst, oracle::grad_check_rel_err(
                                    [](Tape&, const std::vector<Var>& v) {
                                        return sum_all(conv2d(v[0], v[1], 3, 3));
                                    },
                                    {xc, w}));
    }
    std::ostringstream os;
    os << "max rel err " << worst;
    res.detail = os.str();
    res.passed = worst <= 1e-5;
    return res;
}

inline SuiteResult verify_gate_algebra() {
    SuiteResult res{"gate-algebra", true, ""};
    // Exhaustive cumulative rule for |P| in {2, 3, 4}.
    for (std::size_t n = 2; n <= 4; ++n) {
        for (std::size_t bits = 0; bits < (1u << n); ++bits) {
            std::vector<int> g(n);
            for (std::size_t p = 0; p < n; ++p) g[p] = (bits >> p) & 1u;
            const std::vector<int> ghat = cumulative_gates(g);
            std::ptrdiff_t expect = -1;
            for (std::ptrdiff_t p = static_cast<std::ptrdiff_t>(n) - 1; p >= 0; --p)
                if (g[static_cast<std::size_t>(p)] == 1) {
                    expect = p;
                    break;
                }
            int ones = 0;
            for (std::size_t p = 0; p < n; ++p) {
                ones += ghat[p];
                const int want = (expect >= 0 && static_cast<std::size_t>(expect) == p) ? 1 : 0;
                if (ghat[p] != want) {
                    res.passed = false;
                    res.detail = "cumulative rule broken at |P|=" + std::to_string(n);
                    return res;
                }
            }
            if (ones > 1) {
                res.passed = false;
                res.detail = "more than one open gate";
                return res;
            }
        }
    }
    // Head-ensemble normalization and the rank bound of the pre-activation
    // bottleneck output.
    Rng rng(5150);
    double worst_sum = 0.0, worst_rank = 0.0;
    for (int rep = 0; rep < 8; ++rep) {
        const std::size_t n_h = 2 + rng.below(7);
        Tensor z = oracle::random_tensor({n_h, 3, 3}, rng);
        const Tensor sigma = head_ensemble(z);
        for (std::size_t d1 = 0; d1 < 3; ++d1)
            for (std::size_t d2 = 0; d2 < 3; ++d2) {
                double s = 0.0;
                for (std::size_t h = 0; h < n_h; ++h) s += sigma.at(h, d1, d2);
                worst_sum = std::max(worst_sum, std::abs(s - 1.0));
            }
        const std::size_t c_in = 32;
        UmsaParams p = verify_detail::random_umsa(c_in, 4, {3}, rng, false);
        const Tensor x = oracle::random_tensor({36, c_in}, rng);
        const ProfiledKernel pk = profile_kernel(p, 0);
        const Tensor conv = oracle::conv2d_naive(x, pk.w, 6, 6);
        Tensor pre({36, c_in});
        for (std::size_t i = 0; i < 36; ++i)
            for (std::size_t j = 0; j < c_in; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < p.c_h; ++c) acc += conv.at(i, c) * pk.wo_bar.at(c, j);
                pre.at(i, j) = acc;
            }
        const std::vector<double> sv = singular_values(pre);
        for (std::size_t i = p.c_h; i < sv.size(); ++i)
            worst_rank = std::max(worst_rank, sv[i] / std::max(sv[0], 1e-300));
    }
    std::ostringstream os;
    os << "exhaustive |P|<=4 ok, sigma sum err " << worst_sum << ", rank tail " << worst_rank;
    res.detail = os.str();
    res.passed = worst_sum <= 1e-12 && worst_rank <= 1e-8;
    return res;
}

inline SuiteResult verify_cost_model() {
    SuiteResult res{"cost-regression", true, ""};
    std::ostringstream os;
    bool ok = true;
    // Published dense totals (Mult-Adds) for the three full-scale variants.
    struct Anchor {
        const char* name;
        std::size_t c_in, n_h;
        double published;
        double tol;
    };
    const Anchor anchors[] = {{"deit-ti", 192, 3, 1.3e9, 0.03},
                              {"deit-s", 384, 6, 4.6e9, 0.03},
                              {"deit-b", 768, 12, 17.5e9, 0.03}};
    for (const Anchor& a : anchors) {
        const std::int64_t f = transformer_dense_flops(224, 16, 3, 12, a.c_in, a.n_h, 4.0, 1000);
        const double rel = std::abs(static_cast<double>(f) - a.published) / a.published;
        os << a.name << "=" << static_cast<double>(f) / 1e9 << "G(" << rel * 100 << "%) ";
        if (rel > a.tol) ok = false;
    }
    const std::int64_t ffn_b = transformer_ffn_flops(224, 16, 3, 12, 768, 12, 4.0, 1000);
    const double rel_ffn = std::abs(static_cast<double>(ffn_b) - 11.1e9) / 11.1e9;
    os << "deit-b-ffn=" << static_cast<double>(ffn_b) / 1e9 << "G(" << rel_ffn * 100 << "%) ";
    if (rel_ffn > 0.02) ok = false;

    // Expected-FLOPs relaxation against a Monte Carlo run of the sampled
    // cumulative gates.
    ModelConfig cfg;
    cfg.n_blocks = 2;
    cfg.c_in = 32;
    cfg.n_h = 4;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    const CostTable table = build_cost_table(cfg);
    Rng rng(99);
    std::vector<std::vector<double>> up, fp;
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        std::vector<double> probs;
        for (std::size_t i = 0; i < cfg.kernels.size() + 1; ++i) probs.push_back(rng.uniform(0.1, 0.9));
        up.push_back(probs);
        std::vector<double> f(table.ffn_dims, 0.0);
        for (double& v : f) v = rng.uniform(0.1, 0.9);
        fp.push_back(f);
    }
    const double expect = expected_flops_plain(table, up, fp);
    double mc = static_cast<double>(table.fixed);
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        Rng mcr(derive_seed(4242, "mc", b));
        const std::vector<double> eg = oracle::mc_cumulative_expectation(up[b], 100000, mcr);
        for (std::size_t i = 0; i < eg.size(); ++i) mc += eg[i] * static_cast<double>(table.umsa_ops[b][i]);
        for (double pv : fp[b]) mc += pv * static_cast<double>(table.ffn_per_dim);
    }
    const double mc_rel = std::abs(expect - mc) / std::max(std::abs(mc), 1.0);
    os << "mc-gap=" << mc_rel * 100 << "%";
    if (mc_rel > 0.01) ok = false;

    res.detail = os.str();
    res.passed = ok;
    return res;
}

inline std::vector<SuiteResult> run_verify_suites() {
    return {verify_equivalence(), verify_gradients(), verify_gate_algebra(), verify_cost_model()};
}

}  // namespace spvit
