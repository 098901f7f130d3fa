#include <catch2/catch_amalgamated.hpp>

#include "spvit/cost.hpp"
#include "spvit/oracles.hpp"

using namespace spvit;

TEST_CASE("op_flops closed forms") {
    REQUIRE(op_flops(OpKind::Skip, 10, 8, 2) == 0);
    // MSA: 4 N c^2 + 2 N^2 c.
    REQUIRE(op_flops(OpKind::Msa, 10, 8, 2) == 4 * 10 * 64 + 2 * 100 * 8);
    // Bottleneck conv: k^2 N c c_h + N c_h c + N c_h.
    REQUIRE(op_flops(OpKind::Conv, 10, 8, 2, 3) == 9 * 10 * 8 * 2 + 10 * 2 * 8 + 10 * 2);
    REQUIRE(op_flops(OpKind::FfnDim, 10, 8, 2) == 2 * 10 * 8);
    REQUIRE_THROWS_AS(op_flops(OpKind::Msa, 0, 8, 2), ConfigError);
}

TEST_CASE("published full-scale totals") {
    // Totals follow the projection/score arithmetic exactly; the published
    // numbers are rounded to two significant figures.
    const std::int64_t ti = transformer_dense_flops(224, 16, 3, 12, 192, 3, 4.0, 1000);
    const std::int64_t s = transformer_dense_flops(224, 16, 3, 12, 384, 6, 4.0, 1000);
    const std::int64_t b = transformer_dense_flops(224, 16, 3, 12, 768, 12, 4.0, 1000);
    REQUIRE(ti == 1253683200);
    REQUIRE(std::abs(static_cast<double>(s) - 4.6e9) / 4.6e9 <= 0.03);
    REQUIRE(std::abs(static_cast<double>(b) - 17.5e9) / 17.5e9 <= 0.03);
    const std::int64_t ffn_b = transformer_ffn_flops(224, 16, 3, 12, 768, 12, 4.0, 1000);
    REQUIRE(std::abs(static_cast<double>(ffn_b) - 11.1e9) / 11.1e9 <= 0.02);
    // The smaller variants keep the same structure at lower width.
    REQUIRE(ti < s);
    REQUIRE(s < b);
}

TEST_CASE("cost table ordering premise holds and is enforced") {
    ModelConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 4;
    cfg.n_blocks = 4;
    cfg.c_in = 64;
    cfg.n_h = 4;
    const CostTable t = build_cost_table(cfg);
    for (std::size_t b = 0; b < t.n_blocks(); ++b) {
        REQUIRE(t.umsa_ops[b].back() > t.umsa_ops[b][1]);  // msa > conv3
        REQUIRE(t.umsa_ops[b][1] > t.umsa_ops[b][0]);      // conv3 > conv1
        REQUIRE(t.umsa_ops[b][0] > 0);                     // conv1 > skip
    }
    // A single giant-kernel single-head config would invert the ordering.
    ModelConfig bad = cfg;
    bad.n_h = 1;
    bad.kernels = {1, 9};
    REQUIRE_THROWS_AS(build_cost_table(bad), ConfigError);
}

TEST_CASE("expected flops saturates to the dense total and to fixed costs") {
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.n_blocks = 3;
    cfg.c_in = 32;
    cfg.n_h = 4;
    const CostTable t = build_cost_table(cfg);
    std::vector<std::vector<double>> up_hi(3, std::vector<double>(3, 1.0));
    std::vector<std::vector<double>> fp_hi(3, std::vector<double>(t.ffn_dims, 1.0));
    REQUIRE(expected_flops_plain(t, up_hi, fp_hi) == Catch::Approx(static_cast<double>(t.f_dense)));
    std::vector<std::vector<double>> up_lo(3, std::vector<double>(3, 0.0));
    std::vector<std::vector<double>> fp_lo(3, std::vector<double>(t.ffn_dims, 0.0));
    REQUIRE(expected_flops_plain(t, up_lo, fp_lo) == Catch::Approx(static_cast<double>(t.fixed)));
}

TEST_CASE("expected cumulative gate mass matches Monte Carlo within 1%") {
    Rng rng(55);
    for (int rep = 0; rep < 3; ++rep) {
        std::vector<double> probs{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
        Rng mc_rng(derive_seed(900 + static_cast<std::uint64_t>(rep), "mc"));
        const std::vector<double> mc = oracle::mc_cumulative_expectation(probs, 100000, mc_rng);
        for (std::size_t p = 0; p < 3; ++p) {
            double expect = probs[p];
            for (std::size_t q = p + 1; q < 3; ++q) expect *= 1.0 - probs[q];
            REQUIRE(std::abs(expect - mc[p]) <= 0.01);
        }
    }
}

TEST_CASE("expected flops is monotone non-decreasing in each FFN logit") {
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.n_blocks = 1;
    cfg.c_in = 16;
    cfg.n_h = 4;
    cfg.mlp_ratio = 2.0;
    const CostTable t = build_cost_table(cfg);
    Rng rng(56);
    std::vector<std::vector<double>> up{{0.5, 0.5, 0.5}};
    std::vector<std::vector<double>> fp{std::vector<double>(t.ffn_dims, 0.0)};
    for (double& v : fp[0]) v = rng.uniform();
    const double base = expected_flops_plain(t, up, fp);
    for (std::size_t i = 0; i < t.ffn_dims; ++i) {
        std::vector<std::vector<double>> fp2 = fp;
        fp2[0][i] = std::min(1.0, fp[0][i] + 0.1);
        REQUIRE(expected_flops_plain(t, up, fp2) >= base);
    }
}

TEST_CASE("complexity loss closed forms and gradient") {
    Tape t;
    Var f_eq = t.leaf(Tensor::scalar(123.0));
    REQUIRE(complexity_loss(f_eq, 123.0, 1000.0).val().data[0] == 0.0);
    Var f_dense = t.leaf(Tensor::scalar(1000.0));
    REQUIRE(complexity_loss(f_dense, 500.0, 1000.0).val().data[0] == Catch::Approx(0.25).margin(1e-15));
    REQUIRE_THROWS_AS(complexity_loss(f_eq, 1.0, 0.0), ConfigError);

    // Gradient through the full theta -> expected flops -> loss chain.
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.n_blocks = 2;
    cfg.c_in = 16;
    cfg.n_h = 2;
    cfg.mlp_ratio = 2.0;
    const CostTable table = build_cost_table(cfg);
    ViTModel m = make_dense_model(cfg, 3);
    Rng rng(57);
    for (Block& b : m.blocks) {
        for (double& v : b.umsa.theta.value.data) v = rng.uniform(-1.5, 1.5);
        for (double& v : b.ffn.theta.value.data) v = rng.uniform(-1.5, 1.5);
    }
    const double f_target = 0.6 * static_cast<double>(table.f_dense);
    for (Param* p : m.gate_params()) p->zero_grad();
    Tape t2;
    Var loss = complexity_loss(expected_flops(t2, table, m), f_target, static_cast<double>(table.f_dense));
    t2.backward(loss);

    auto loss_at = [&](void) {
        std::vector<std::vector<double>> up, fp;
        for (Block& b : m.blocks) {
            std::vector<double> u;
            for (double v : b.umsa.theta.value.data) u.push_back(sigmoid_scalar(v));
            up.push_back(u);
            std::vector<double> f;
            for (double v : b.ffn.theta.value.data) f.push_back(sigmoid_scalar(v));
            fp.push_back(f);
        }
        return complexity_loss_plain(expected_flops_plain(table, up, fp), f_target,
                                     static_cast<double>(table.f_dense));
    };
    const double eps = 1e-6;
    double worst = 0.0;
    for (Block& b : m.blocks) {
        for (Param* p : {&b.umsa.theta, &b.ffn.theta}) {
            for (std::size_t i = 0; i < p->value.numel(); i += 7) {  // sample coordinates
                const double keep = p->value.data[i];
                p->value.data[i] = keep + eps;
                const double fp_ = loss_at();
                p->value.data[i] = keep - eps;
                const double fm_ = loss_at();
                p->value.data[i] = keep;
                const double fd = (fp_ - fm_) / (2.0 * eps);
                const double an = p->grad.data[i];
                worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4}));
            }
        }
    }
    REQUIRE(worst <= 1e-4);
}

TEST_CASE("descriptor flops equal the expectation with hard gates exactly") {
    ModelConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 4;
    cfg.n_blocks = 4;
    cfg.c_in = 64;
    cfg.n_h = 4;
    const CostTable t = build_cost_table(cfg);
    Rng rng(58);
    for (int rep = 0; rep < 10; ++rep) {
        ArchitectureDescriptor d;
        std::vector<std::vector<double>> up, fp;
        for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
            BlockChoice c;
            const std::size_t pick = rng.below(4);
            std::vector<double> u(3, 0.0);
            if (pick == 1) {
                c.op = UmsaOp::Conv;
                c.kernel = 1;
                u[0] = 1.0;
            } else if (pick == 2) {
                c.op = UmsaOp::Conv;
                c.kernel = 3;
                u[1] = 1.0;
            } else if (pick == 3) {
                c.op = UmsaOp::Msa;
                u[2] = 1.0;
            } else {
                c.op = UmsaOp::Skip;
            }
            std::vector<double> f(t.ffn_dims, 0.0);
            for (std::size_t i = 0; i < t.ffn_dims; ++i) {
                if (rng.bernoulli(0.5)) {
                    c.kept_dims.push_back(i);
                    f[i] = 1.0;
                }
            }
            up.push_back(u);
            fp.push_back(f);
            d.blocks.push_back(std::move(c));
        }
        const double expect = expected_flops_plain(t, up, fp);
        REQUIRE(static_cast<double>(descriptor_flops(t, d)) == expect);
    }
}

TEST_CASE("cost table serializes for audit") {
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.n_blocks = 2;
    cfg.c_in = 32;
    cfg.n_h = 4;
    const CostTable t = build_cost_table(cfg);
    const nlohmann::json j = cost_table_to_json(t);
    REQUIRE(j["blocks"].size() == 2);
    REQUIRE(j["f_dense"].get<std::int64_t>() == t.f_dense);
    REQUIRE(j["blocks"][0]["msa"].get<std::int64_t>() == t.umsa_ops[0].back());
    REQUIRE(j["blocks"][0]["skip"].get<std::int64_t>() == 0);
}
