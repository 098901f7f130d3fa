#pragma once

// Mult-Add lookup table and the differentiable complexity loss. Counts cover
// the projection/convolution arithmetic: MSA is the four projections plus the
// score and weighted-sum terms, the bottleneck convolution adds its output
// projection and a BN/ReLU term, FFN costs scale per hidden dimension.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "spvit/arch.hpp"
#include "spvit/autodiff.hpp"
#include "spvit/errors.hpp"
#include "spvit/model.hpp"
#include "spvit/umsa.hpp"

namespace spvit {

enum class OpKind { Skip, Conv, Msa, FfnDim };

// Exact Mult-Add count for one candidate operation. N is the token count the
// operation actually sees (conv operations exclude the class token).
inline std::int64_t op_flops(OpKind kind, std::int64_t n, std::int64_t c_in, std::int64_t c_h,
                             std::int64_t k = 0) {
    if (n <= 0 || c_in <= 0) throw ConfigError("op_flops: non-positive dimensions");
    switch (kind) {
        case OpKind::Skip:
            return 0;
        case OpKind::Msa:
            return 4 * n * c_in * c_in + 2 * n * n * c_in;
        case OpKind::Conv:
            if (c_h <= 0 || k <= 0) throw ConfigError("op_flops: conv needs c_h and k");
            return k * k * n * c_in * c_h  // convolution at width c_h
                   + n * c_h * c_in        // output ensemble projection
                   + n * c_h;              // BN/ReLU
        case OpKind::FfnDim:
            return 2 * n * c_in;
    }
    return 0;
}

struct CostTable {
    // Per block, one entry per candidate op ordered like theta: conv-k
    // ascending, then MSA. Skip is implicit at zero.
    std::vector<std::vector<std::int64_t>> umsa_ops;
    std::vector<std::size_t> kernels;
    std::int64_t ffn_per_dim = 0;
    std::size_t ffn_dims = 0;  // dense hidden width per block
    std::int64_t fixed = 0;    // patch embedding + classification head
    std::int64_t f_dense = 0;

    std::size_t n_blocks() const { return umsa_ops.size(); }
};

inline CostTable build_cost_table(const ModelConfig& cfg) {
    cfg.validate();
    CostTable t;
    t.kernels = cfg.kernels;
    const std::int64_t n_tok = static_cast<std::int64_t>(cfg.n_tokens());
    const std::int64_t n_sp = static_cast<std::int64_t>(cfg.n_patches());
    const std::int64_t c = static_cast<std::int64_t>(cfg.c_in);
    const std::int64_t ch = static_cast<std::int64_t>(cfg.c_in / cfg.n_h);
    std::vector<std::int64_t> ops;
    for (std::size_t k : cfg.kernels)
        ops.push_back(op_flops(OpKind::Conv, n_sp, c, ch, static_cast<std::int64_t>(k)));
    ops.push_back(op_flops(OpKind::Msa, n_tok, c, ch));
    // Ordering premise of the gate set: strictly ascending complexity with
    // MSA on top. Reject configurations that break it.
    for (std::size_t i = 1; i < ops.size(); ++i) {
        if (ops[i] <= ops[i - 1]) {
            throw ConfigError("cost table: candidate ordering violated (op " + std::to_string(i - 1) +
                              " costs " + std::to_string(ops[i - 1]) + ", op " + std::to_string(i) +
                              " costs " + std::to_string(ops[i]) + ")");
        }
    }
    t.umsa_ops.assign(cfg.n_blocks, ops);
    t.ffn_per_dim = op_flops(OpKind::FfnDim, n_tok, c, ch);
    t.ffn_dims = cfg.hidden();
    t.fixed = static_cast<std::int64_t>(cfg.n_patches()) * static_cast<std::int64_t>(cfg.patch_dim()) * c +
              c * static_cast<std::int64_t>(cfg.n_classes);
    t.f_dense = t.fixed;
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        t.f_dense += ops.back();
        t.f_dense += t.ffn_per_dim * static_cast<std::int64_t>(t.ffn_dims);
    }
    return t;
}

// FLOPs of a frozen architecture, exact integer bookkeeping.
inline std::int64_t descriptor_flops(const CostTable& t, const ArchitectureDescriptor& d) {
    if (d.blocks.size() != t.n_blocks()) {
        throw IntegrityError("descriptor blocks " + std::to_string(d.blocks.size()) + " vs cost table " +
                             std::to_string(t.n_blocks()));
    }
    std::int64_t total = t.fixed;
    for (std::size_t b = 0; b < d.blocks.size(); ++b) {
        const BlockChoice& bc = d.blocks[b];
        if (bc.op == UmsaOp::Msa) {
            total += t.umsa_ops[b].back();
        } else if (bc.op == UmsaOp::Conv) {
            bool found = false;
            for (std::size_t ki = 0; ki < t.kernels.size(); ++ki)
                if (t.kernels[ki] == bc.kernel) {
                    total += t.umsa_ops[b][ki];
                    found = true;
                }
            if (!found) throw IntegrityError("descriptor kernel " + std::to_string(bc.kernel) + " not in table");
        }
        total += t.ffn_per_dim * static_cast<std::int64_t>(bc.kept_dims.size());
    }
    return total;
}

// E[g_hat_p] = Sigmoid(theta_p) prod_{q>p} (1 - Sigmoid(theta_q)); plain
// probability-space version used for cross-checks.
inline double expected_flops_plain(const CostTable& t, const std::vector<std::vector<double>>& umsa_probs,
                                   const std::vector<std::vector<double>>& ffn_probs) {
    if (umsa_probs.size() != t.n_blocks() || ffn_probs.size() != t.n_blocks()) {
        throw IntegrityError("expected_flops: probability lists mismatch block count");
    }
    double total = static_cast<double>(t.fixed);
    for (std::size_t b = 0; b < t.n_blocks(); ++b) {
        const std::vector<double>& p = umsa_probs[b];
        for (std::size_t i = 0; i < p.size(); ++i) {
            double e = p[i];
            for (std::size_t q = i + 1; q < p.size(); ++q) e *= 1.0 - p[q];
            total += e * static_cast<double>(t.umsa_ops[b][i]);
        }
        for (double pt : ffn_probs[b]) total += pt * static_cast<double>(t.ffn_per_dim);
    }
    return total;
}

// Differentiable expected FLOPs built from the live gate logits of a unified
// model. Gradient flows to every theta.
inline Var expected_flops(Tape& tape, const CostTable& t, ViTModel& m) {
    if (m.blocks.size() != t.n_blocks()) throw IntegrityError("expected_flops: block count mismatch");
    std::vector<Var> parts;
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        Block& blk = m.blocks[b];
        if (blk.kind != AttnKind::Unified || !blk.ffn.searchable()) {
            throw ContractError("expected_flops: needs a unified searchable model");
        }
        Var probs = sigmoid(tape.param(blk.umsa.theta));
        Var eg = cumulative_gates_var(probs);
        std::vector<double> w(t.umsa_ops[b].size());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<double>(t.umsa_ops[b][i]);
        parts.push_back(weighted_sum(eg, w));
        Var fprobs = sigmoid(tape.param(blk.ffn.theta));
        parts.push_back(weighted_sum(fprobs, std::vector<double>(t.ffn_dims, static_cast<double>(t.ffn_per_dim))));
    }
    return add_const(sum_vars(parts), static_cast<double>(t.fixed));
}

// L_comp = ((F - F_target) / F_dense)^2, normalized so the trade-off weight
// is scale-free across model sizes.
inline Var complexity_loss(Var flops, double f_target, double f_dense) {
    if (f_dense <= 0.0) throw ConfigError("complexity_loss: F_dense must be positive");
    return square(scale(add_const(flops, -f_target), 1.0 / f_dense));
}

inline double complexity_loss_plain(double f, double f_target, double f_dense) {
    if (f_dense <= 0.0) throw ConfigError("complexity_loss: F_dense must be positive");
    const double r = (f - f_target) / f_dense;
    return r * r;
}

inline nlohmann::json cost_table_to_json(const CostTable& t) {
    nlohmann::json j;
    j["fixed"] = t.fixed;
    j["f_dense"] = t.f_dense;
    j["ffn_per_dim"] = t.ffn_per_dim;
    j["ffn_dims"] = t.ffn_dims;
    j["blocks"] = nlohmann::json::array();
    for (std::size_t b = 0; b < t.n_blocks(); ++b) {
        nlohmann::json jb;
        jb["skip"] = 0;
        for (std::size_t ki = 0; ki < t.kernels.size(); ++ki)
            jb["conv" + std::to_string(t.kernels[ki])] = t.umsa_ops[b][ki];
        jb["msa"] = t.umsa_ops[b].back();
        jb["ffn_dense"] = t.ffn_per_dim * static_cast<std::int64_t>(t.ffn_dims);
        j["blocks"].push_back(jb);
    }
    return j;
}

// Published-scale helper: total Mult-Adds for a DeiT-style dense transformer.
inline std::int64_t transformer_dense_flops(std::size_t image, std::size_t patch, std::size_t channels,
                                            std::size_t n_blocks, std::size_t c_in, std::size_t n_heads,
                                            double mlp_ratio, std::size_t n_classes,
                                            bool class_token = true) {
    ModelConfig cfg;
    cfg.image_size = image;
    cfg.patch_size = patch;
    cfg.channels = channels;
    cfg.n_blocks = n_blocks;
    cfg.c_in = c_in;
    cfg.n_h = n_heads;
    cfg.kernels = {1, 3};
    cfg.mlp_ratio = mlp_ratio;
    cfg.n_classes = n_classes;
    cfg.class_token = class_token;
    return build_cost_table(cfg).f_dense;
}

// DeiT-B style FFN subtotal (all blocks, all hidden dims).
inline std::int64_t transformer_ffn_flops(std::size_t image, std::size_t patch, std::size_t channels,
                                          std::size_t n_blocks, std::size_t c_in, std::size_t n_heads,
                                          double mlp_ratio, std::size_t n_classes,
                                          bool class_token = true) {
    ModelConfig cfg;
    cfg.image_size = image;
    cfg.patch_size = patch;
    cfg.channels = channels;
    cfg.n_blocks = n_blocks;
    cfg.c_in = c_in;
    cfg.n_h = n_heads;
    cfg.kernels = {1, 3};
    cfg.mlp_ratio = mlp_ratio;
    cfg.n_classes = n_classes;
    cfg.class_token = class_token;
    const CostTable t = build_cost_table(cfg);
    return t.ffn_per_dim * static_cast<std::int64_t>(t.ffn_dims) * static_cast<std::int64_t>(n_blocks);
}

}  // namespace spvit
