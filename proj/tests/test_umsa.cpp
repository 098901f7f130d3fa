#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "spvit/linalg.hpp"
#include "spvit/oracles.hpp"
#include "spvit/umsa.hpp"

using namespace spvit;

namespace {

UmsaParams random_params(std::size_t c_in, std::size_t n_h, std::vector<std::size_t> kernels, Rng& rng,
                         bool with_bias) {
    UmsaParams p("t", c_in, n_h, std::move(kernels), 1.5, rng, 0.3);
    for (KernelShare& s : p.shares)
        for (double& v : s.z.value.data) v = rng.normal();
    if (with_bias) {
        for (Param* b : {&p.b_qry, &p.b_key, &p.b_val, &p.b_o})
            for (double& v : b->value.data) v = 0.2 * rng.normal();
    }
    return p;
}

}  // namespace

TEST_CASE("attention with zero query/key weights is uniform over positions") {
    Rng rng(11);
    const std::size_t n = 12, c_in = 16, n_h = 4;
    UmsaParams p = random_params(c_in, n_h, {1}, rng, true);
    std::fill(p.w_qry.value.data.begin(), p.w_qry.value.data.end(), 0.0);
    std::fill(p.w_key.value.data.begin(), p.w_key.value.data.end(), 0.0);
    std::fill(p.b_qry.value.data.begin(), p.b_qry.value.data.end(), 0.0);
    std::fill(p.b_key.value.data.begin(), p.b_key.value.data.end(), 0.0);
    const Tensor x = oracle::random_tensor({n, c_in}, rng);
    Tape t;
    AttentionOut att = attention_forward(t, t.leaf(x), p);
    // Expected row: sum_h mean_l V[l, h-block] W_o[h-block] + b_o.
    Tensor expected({1, c_in});
    for (std::size_t j = 0; j < c_in; ++j) expected.at(0, j) = p.b_o.value.data[j];
    for (std::size_t hc = 0; hc < c_in; ++hc) {
        double mean_v = 0.0;
        for (std::size_t l = 0; l < n; ++l) mean_v += att.v.val().at(l, hc);
        mean_v /= static_cast<double>(n);
        for (std::size_t j = 0; j < c_in; ++j) expected.at(0, j) += mean_v * p.w_o.value.at(hc, j);
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c_in; ++j)
            REQUIRE(att.out.val().at(i, j) == Catch::Approx(expected.at(0, j)).margin(1e-12));
}

TEST_CASE("single-token single-head attention reduces to the value path") {
    Rng rng(12);
    const std::size_t c_in = 8;
    UmsaParams p = random_params(c_in, 1, {1}, rng, true);
    const Tensor x = oracle::random_tensor({1, c_in}, rng);
    Tape t;
    AttentionOut att = attention_forward(t, t.leaf(x), p);
    for (std::size_t j = 0; j < c_in; ++j) {
        double want = p.b_o.value.data[j];
        for (std::size_t m = 0; m < c_in; ++m) {
            double v_m = p.b_val.value.data[m];
            for (std::size_t q = 0; q < c_in; ++q) v_m += x.at(0, q) * p.w_val.value.at(q, m);
            want += v_m * p.w_o.value.at(m, j);
        }
        REQUIRE(att.out.val().at(0, j) == Catch::Approx(want).margin(1e-12));
    }
}

TEST_CASE("attention matches the naive per-position per-head loop") {
    Rng rng(13);
    for (int rep = 0; rep < 5; ++rep) {
        const std::size_t n = 16, c_in = 32, n_h = 4;
        UmsaParams p = random_params(c_in, n_h, {1}, rng, true);
        const Tensor x = oracle::random_tensor({n, c_in}, rng);
        Tape t;
        AttentionOut att = attention_forward(t, t.leaf(x), p);
        const Tensor ref =
            oracle::msa_naive(x, p.w_qry.value, p.w_key.value, p.w_val.value, p.w_o.value, p.b_qry.value,
                              p.b_key.value, p.b_val.value, p.b_o.value, n_h);
        REQUIRE(max_abs_diff(att.out.val(), ref) <= 1e-10);
    }
}

TEST_CASE("head ensemble normalization") {
    Rng rng(14);
    Tensor z({4, 3, 3});
    SECTION("zero logits spread mass uniformly") {
        const Tensor s = head_ensemble(z);
        for (double v : s.data) REQUIRE(v == Catch::Approx(0.25).margin(1e-15));
    }
    SECTION("a dominant logit saturates its position") {
        z.at(2, 1, 1) = 20.0;
        const Tensor s = head_ensemble(z);
        REQUIRE(s.at(2, 1, 1) >= 1.0 - 1e-8);
    }
    SECTION("random logits: per-position head sums equal one") {
        for (int rep = 0; rep < 20; ++rep) {
            for (double& v : z.data) v = 3.0 * rng.normal();
            const Tensor s = head_ensemble(z);
            for (std::size_t d1 = 0; d1 < 3; ++d1)
                for (std::size_t d2 = 0; d2 < 3; ++d2) {
                    double sum = 0.0;
                    for (std::size_t h = 0; h < 4; ++h) sum += s.at(h, d1, d2);
                    REQUIRE(std::abs(sum - 1.0) <= 1e-12);
                }
        }
    }
}

TEST_CASE("local_aggregate with k=1 is a pure head ensemble") {
    Rng rng(15);
    const std::size_t n_w = 3, n_e = 4, n_h = 3, c_h = 2;
    const Tensor v = oracle::random_tensor({n_w * n_e, n_h * c_h}, rng);
    Tensor z = oracle::random_tensor({n_h, 1, 1}, rng);
    const Tensor sigma = head_ensemble(z);
    Tape t;
    Var out = local_aggregate(t.leaf(v), t.leaf(sigma), n_w, n_e, n_h, c_h);
    for (std::size_t i = 0; i < n_w * n_e; ++i)
        for (std::size_t c = 0; c < c_h; ++c) {
            double want = 0.0;
            for (std::size_t h = 0; h < n_h; ++h) want += sigma.at(h, 0, 0) * v.at(i, h * c_h + c);
            REQUIRE(out.val().at(i, c) == Catch::Approx(want).margin(1e-14));
        }
}

TEST_CASE("local_aggregate on a constant field collapses to sigma masses") {
    Rng rng(16);
    const std::size_t n_w = 5, n_e = 5, n_h = 2, c_h = 3, k = 3;
    Tensor v({n_w * n_e, n_h * c_h});
    std::vector<double> head_vals{1.25, -0.5};
    for (std::size_t i = 0; i < n_w * n_e; ++i)
        for (std::size_t h = 0; h < n_h; ++h)
            for (std::size_t c = 0; c < c_h; ++c) v.at(i, h * c_h + c) = head_vals[h];
    Tensor z = oracle::random_tensor({n_h, k, k}, rng);
    const Tensor sigma = head_ensemble(z);
    Tape t;
    Var out = local_aggregate(t.leaf(v), t.leaf(sigma), n_w, n_e, n_h, c_h);
    // Interior position: every tap in range.
    const std::size_t mid = 2 * n_e + 2;
    for (std::size_t c = 0; c < c_h; ++c) {
        double want = 0.0;
        for (std::size_t h = 0; h < n_h; ++h) {
            double mass = 0.0;
            for (std::size_t d = 0; d < k * k; ++d) mass += sigma.data[h * k * k + d];
            want += mass * head_vals[h];
        }
        REQUIRE(out.val().at(mid, c) == Catch::Approx(want).margin(1e-12));
    }
}

TEST_CASE("local_aggregate rejects even kernels") {
    Tape t;
    Var v = t.leaf(Tensor({4, 4}));
    Var sigma = t.leaf(Tensor({2, 2, 2}));
    REQUIRE_THROWS_AS(local_aggregate(v, sigma, 2, 2, 2, 2), KernelError);
}

TEST_CASE("central equivalence: local_aggregate on V equals convolution with the profiled kernel") {
    Rng rng(17);
    double worst = 0.0;
    for (int rep = 0; rep < 30; ++rep) {
        const std::size_t n_h = std::vector<std::size_t>{2, 4, 8}[rep % 3];
        const std::size_t c_in = std::vector<std::size_t>{16, 32, 64}[(rep / 3) % 3];
        const std::size_t n_w = 4 + rng.below(7), n_e = 4 + rng.below(7);
        const std::size_t k = rep % 2 == 0 ? 3 : 1;
        UmsaParams p = random_params(c_in, n_h, {k}, rng, false);
        const Tensor x = oracle::random_tensor({n_w * n_e, c_in}, rng);
        Tape t;
        Var v = matmul(t.leaf(x), t.leaf(p.w_val.value));
        Var sigma = head_ensemble_var(t.leaf(p.shares[0].z.value));
        Var agg = local_aggregate(v, sigma, n_w, n_e, n_h, p.c_h);
        const ProfiledKernel pk = profile_kernel(p, 0);
        worst = std::max(worst, max_abs_diff(agg.val(), oracle::conv2d_naive(x, pk.w, n_w, n_e)));
    }
    REQUIRE(worst <= 1e-10);
}

TEST_CASE("profile_kernel closed forms") {
    Rng rng(18);
    SECTION("single head: softmax over heads is identically one") {
        UmsaParams p = random_params(12, 1, {3}, rng, true);
        const ProfiledKernel pk = profile_kernel(p, 0);
        for (std::size_t d1 = 0; d1 < 3; ++d1)
            for (std::size_t d2 = 0; d2 < 3; ++d2)
                for (std::size_t ci = 0; ci < 12; ++ci)
                    for (std::size_t c = 0; c < 12; ++c)
                        REQUIRE(pk.w.at(d1, d2, ci, c) == Catch::Approx(p.w_val.value.at(ci, c)).margin(1e-14));
        // k^2 coefficient mass lands on the output projection, no renormalization.
        for (std::size_t c = 0; c < 12; ++c)
            for (std::size_t j = 0; j < 12; ++j)
                REQUIRE(pk.wo_bar.at(c, j) == Catch::Approx(9.0 * p.w_o.value.at(c, j)).margin(1e-12));
    }
    SECTION("zero ensemble logits average the head value slices") {
        UmsaParams p = random_params(8, 4, {1}, rng, false);
        std::fill(p.shares[0].z.value.data.begin(), p.shares[0].z.value.data.end(), 0.0);
        const ProfiledKernel pk = profile_kernel(p, 0);
        for (std::size_t ci = 0; ci < 8; ++ci)
            for (std::size_t c = 0; c < 2; ++c) {
                double mean = 0.0;
                for (std::size_t h = 0; h < 4; ++h) mean += p.w_val.value.at(ci, h * 2 + c);
                mean /= 4.0;
                REQUIRE(pk.w.at(0, 0, ci, c) == Catch::Approx(mean).margin(1e-14));
            }
    }
}

TEST_CASE("rank of the pre-activation bottleneck output is bounded by c_h") {
    Rng rng(19);
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t n_h = 4, c_in = 32, c_h = c_in / n_h;
        const std::size_t n_w = 6, n_e = 6;
        UmsaParams p = random_params(c_in, n_h, {3}, rng, false);
        const Tensor x = oracle::random_tensor({n_w * n_e, c_in}, rng);
        const ProfiledKernel pk = profile_kernel(p, 0);
        const Tensor conv = oracle::conv2d_naive(x, pk.w, n_w, n_e);
        Tensor pre({n_w * n_e, c_in});
        for (std::size_t i = 0; i < n_w * n_e; ++i)
            for (std::size_t j = 0; j < c_in; ++j)
                for (std::size_t c = 0; c < c_h; ++c) pre.at(i, j) += conv.at(i, c) * pk.wo_bar.at(c, j);
        const std::vector<double> sv = singular_values(pre);
        REQUIRE(sv[0] > 0.0);
        for (std::size_t i = c_h; i < sv.size(); ++i) REQUIRE(sv[i] / sv[0] <= 1e-8);
    }
}

TEST_CASE("bconv on zero input with zero biases stays zero") {
    Rng rng(20);
    UmsaParams p = random_params(16, 4, {3}, rng, false);
    const std::size_t n_w = 4, n_e = 4;
    Tape t;
    Var v = matmul(t.leaf(Tensor({n_w * n_e, 16})), t.leaf(p.w_val.value));
    Var out = bconv_search(t, v, p, 0, n_w, n_e, /*bn_train=*/false);
    REQUIRE(max_abs(out.val()) == 0.0);
}

TEST_CASE("search-mode and materialized bconv agree, including folded biases") {
    Rng rng(21);
    double worst = 0.0;
    for (int rep = 0; rep < 10; ++rep) {
        const std::size_t c_in = 24, n_h = 4, n_w = 5, n_e = 7;
        const std::size_t k = rep % 2 == 0 ? 3 : 1;
        UmsaParams p = random_params(c_in, n_h, {k}, rng, true);
        // Make the BN state non-trivial before comparing in eval mode.
        for (std::size_t c = 0; c < p.c_h; ++c) {
            p.shares[0].bn_state.running_mean.data[c] = 0.1 * rng.normal();
            p.shares[0].bn_state.running_var.data[c] = 1.0 + 0.2 * rng.uniform();
            p.shares[0].bn_gamma.value.data[c] = 1.0 + 0.1 * rng.normal();
            p.shares[0].bn_beta.value.data[c] = 0.1 * rng.normal();
        }
        const Tensor x = rep == 0 ? Tensor({n_w * n_e, c_in}) : oracle::random_tensor({n_w * n_e, c_in}, rng);

        Tape t;
        Var v = add_rowvec(matmul(t.leaf(x), t.leaf(p.w_val.value)), t.leaf(p.b_val.value));
        Var search_out = bconv_search(t, v, p, 0, n_w, n_e, /*bn_train=*/false);

        const ProfiledKernel pk = profile_kernel(p, 0);
        ConvParams cp;
        cp.k = k;
        cp.w = Param("w", pk.w);
        cp.bias_taps = Param("bt", pk.bias_taps);
        cp.wo_bar = Param("wo", pk.wo_bar);
        cp.b_o = Param("bo", p.b_o.value);
        cp.bn_gamma = Param("g", p.shares[0].bn_gamma.value);
        cp.bn_beta = Param("b", p.shares[0].bn_beta.value);
        cp.bn_state = p.shares[0].bn_state;
        Tape t2;
        Var mat_out = bconv_materialized(t2, t2.leaf(x), cp, n_w, n_e, /*bn_train=*/false);
        worst = std::max(worst, max_abs_diff(search_out.val(), mat_out.val()));

        // Train mode: identical pre-BN activations give identical batch stats
        // and keep the two running states synchronized.
        UmsaParams p2 = p;
        ConvParams cp2;
        cp2.k = k;
        cp2.w = Param("w", pk.w);
        cp2.bias_taps = Param("bt", pk.bias_taps);
        cp2.wo_bar = Param("wo", pk.wo_bar);
        cp2.b_o = Param("bo", p.b_o.value);
        cp2.bn_gamma = Param("g", p.shares[0].bn_gamma.value);
        cp2.bn_beta = Param("b", p.shares[0].bn_beta.value);
        cp2.bn_state = p.shares[0].bn_state;
        Tape t3;
        Var v3 = add_rowvec(matmul(t3.leaf(x), t3.leaf(p2.w_val.value)), t3.leaf(p2.b_val.value));
        Var search_train = bconv_search(t3, v3, p2, 0, n_w, n_e, /*bn_train=*/true);
        Tape t4;
        Var mat_train = bconv_materialized(t4, t4.leaf(x), cp2, n_w, n_e, /*bn_train=*/true);
        worst = std::max(worst, max_abs_diff(search_train.val(), mat_train.val()));
        worst = std::max(worst, max_abs_diff(p2.shares[0].bn_state.running_mean, cp2.bn_state.running_mean));
        worst = std::max(worst, max_abs_diff(p2.shares[0].bn_state.running_var, cp2.bn_state.running_var));
    }
    REQUIRE(worst <= 1e-10);
}

TEST_CASE("locality-restricted attention oracle agrees with per-head indicator aggregation") {
    Rng rng(22);
    const std::size_t c_in = 12, n_h = 3, c_h = 4, n_w = 4, n_e = 5, k = 3;
    const Tensor v = oracle::random_tensor({n_w * n_e, c_in}, rng);
    const Tensor wo = oracle::random_tensor({c_in, c_in}, rng);
    const Tensor ref = oracle::msa_local_restricted_naive(v, wo, n_w, n_e, n_h, k);
    Tensor got({n_w * n_e, c_in});
    for (std::size_t h = 0; h < n_h; ++h) {
        Tensor indicator({n_h, k, k});
        for (std::size_t d = 0; d < k * k; ++d) indicator.data[h * k * k + d] = 1.0;
        Tape t;
        Var agg = local_aggregate(t.leaf(v), t.leaf(indicator), n_w, n_e, n_h, c_h);
        for (std::size_t i = 0; i < n_w * n_e; ++i)
            for (std::size_t j = 0; j < c_in; ++j)
                for (std::size_t c = 0; c < c_h; ++c)
                    got.at(i, j) += agg.val().at(i, c) * wo.at(h * c_h + c, j);
    }
    REQUIRE(max_abs_diff(got, ref) <= 1e-10);
}

TEST_CASE("cumulative gates: trivial and exhaustive cases") {
    REQUIRE(cumulative_gates({0, 0, 0}) == std::vector<int>{0, 0, 0});
    REQUIRE(cumulative_gates({1, 1, 0}) == std::vector<int>{0, 1, 0});
    REQUIRE(cumulative_gates({1, 0, 1}) == std::vector<int>{0, 0, 1});
    for (std::size_t n : {3u, 4u}) {
        for (std::size_t bits = 0; bits < (1u << n); ++bits) {
            std::vector<int> g(n);
            for (std::size_t p = 0; p < n; ++p) g[p] = (bits >> p) & 1;
            const std::vector<int> ghat = cumulative_gates(g);
            std::ptrdiff_t max_open = -1;
            for (std::size_t p = 0; p < n; ++p)
                if (g[p] == 1) max_open = static_cast<std::ptrdiff_t>(p);
            for (std::size_t p = 0; p < n; ++p)
                REQUIRE(ghat[p] == ((max_open >= 0 && static_cast<std::size_t>(max_open) == p) ? 1 : 0));
        }
    }
}

TEST_CASE("gate sampling: saturation, the init probability, and the empirical rate") {
    Rng rng(23);
    GateState sat = sample_gates(Tensor::full({3}, 20.0), rng);
    REQUIRE(sat.g == std::vector<int>{1, 1, 1});
    REQUIRE(sat.g_hat == std::vector<int>{0, 0, 1});

    GateState init = sample_gates(Tensor::full({3}, 1.5), rng);
    for (double p : init.probs) REQUIRE(p == Catch::Approx(0.8175744761936437).margin(1e-12));

    std::size_t open = 0;
    const std::size_t draws = 100000;
    for (std::size_t i = 0; i < draws; ++i) {
        GateState s = sample_gates(Tensor({1}), rng);
        open += static_cast<std::size_t>(s.g[0]);
    }
    const double rate = static_cast<double>(open) / static_cast<double>(draws);
    REQUIRE(std::abs(rate - 0.5) <= 0.01);
}

TEST_CASE("straight-through contract on the cumulative gate combine") {
    Rng rng(24);
    for (int rep = 0; rep < 10; ++rep) {
        const std::size_t n = 3;
        Tensor theta({n});
        for (double& v : theta.data) v = rng.uniform(-2.0, 2.0);
        const std::vector<int> forced(n, 1);  // gates forced open
        const std::vector<double> w{0.3, -1.2, 2.1};

        Tape t;
        Var th = t.leaf(theta);
        Var g = ste_bernoulli(th, forced);
        Var loss = weighted_sum(cumulative_gates_var(g), w);
        t.backward(loss);

        // Finite differences on the relaxed gate values around the forced
        // forward point, scaled by sigmoid'(theta).
        for (std::size_t p = 0; p < n; ++p) {
            auto loss_of_g = [&w, n](const std::vector<double>& gv) {
                double total = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    double ghat = gv[i];
                    for (std::size_t q = i + 1; q < n; ++q) ghat *= 1.0 - gv[q];
                    total += ghat * w[i];
                }
                return total;
            };
            std::vector<double> gv(n, 1.0);
            const double eps = 1e-6;
            gv[p] = 1.0 + eps;
            const double fp = loss_of_g(gv);
            gv[p] = 1.0 - eps;
            const double fm = loss_of_g(gv);
            const double dg = (fp - fm) / (2.0 * eps);
            const double s = sigmoid_scalar(theta.data[p]);
            const double want = s * (1.0 - s) * dg;
            const double got = th.grad().data[p];
            REQUIRE(std::abs(got - want) / std::max({std::abs(want), std::abs(got), 1e-4}) <= 1e-4);
        }
    }
}

TEST_CASE("umsa_forward selects branches per the frozen rule") {
    Rng rng(25);
    const std::size_t c_in = 16, n_h = 4, n_w = 3, n_e = 3;
    const Tensor x = oracle::random_tensor({n_w * n_e, c_in}, rng);

    SECTION("all gates closed yields no contribution") {
        UmsaParams p = random_params(c_in, n_h, {1, 3}, rng, true);
        std::fill(p.theta.value.data.begin(), p.theta.value.data.end(), -2.0);
        Tape t;
        auto out = umsa_forward(t, t.leaf(x), p, UmsaMode::Frozen, nullptr, n_w, n_e, false, false);
        REQUIRE_FALSE(out.has_value());
    }
    SECTION("only the MSA gate open equals attention_forward") {
        UmsaParams p = random_params(c_in, n_h, {1, 3}, rng, true);
        p.theta.value.data = {-3.0, -3.0, 2.0};
        Tape t;
        Var xv = t.leaf(x);
        auto out = umsa_forward(t, xv, p, UmsaMode::Frozen, nullptr, n_w, n_e, false, false);
        REQUIRE(out.has_value());
        Tape t2;
        AttentionOut att = attention_forward(t2, t2.leaf(x), p);
        REQUIRE(max_abs_diff(out->val(), att.out.val()) == 0.0);
    }
    SECTION("frozen conv choice equals the sampled-gate search path with the same gates") {
        UmsaParams p = random_params(c_in, n_h, {1, 3}, rng, true);
        p.theta.value.data = {-1.0, 2.0, -2.0};  // conv3 wins
        UmsaParams p2 = p;
        Tape t;
        auto frozen = umsa_forward(t, t.leaf(x), p, UmsaMode::Frozen, nullptr, n_w, n_e, false, false);
        REQUIRE(frozen.has_value());
        GateState gs;
        gs.g = deterministic_gates(p2.theta.value);
        gs.g_hat = cumulative_gates(gs.g);
        gs.probs.assign(3, 0.0);
        Tape t2;
        auto search = umsa_forward(t2, t2.leaf(x), p2, UmsaMode::Search, &gs, n_w, n_e, false, false);
        REQUIRE(search.has_value());
        REQUIRE(max_abs_diff(frozen->val(), search->val()) <= 1e-10);
    }
}

TEST_CASE("frozen umsa forward is deterministic and rng-independent") {
    Rng rng(26);
    UmsaParams p = random_params(16, 4, {1, 3}, rng, true);
    const Tensor x = oracle::random_tensor({9, 16}, rng);
    auto run = [&] {
        UmsaParams q = p;
        Tape t;
        auto out = umsa_forward(t, t.leaf(x), q, UmsaMode::Frozen, nullptr, 3, 3, false, false);
        return out->val().data;
    };
    REQUIRE(run() == run());
}
