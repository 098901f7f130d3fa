#pragma once

// Toy standard ViT assembly: patch embedding, positional embedding, stacked
// blocks of (UMSA, residual, LayerNorm) and (UFFN, residual, LayerNorm), and
// a classification head fed by the class token (or mean pooling).

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "spvit/arch.hpp"
#include "spvit/autodiff.hpp"
#include "spvit/errors.hpp"
#include "spvit/rng.hpp"
#include "spvit/uffn.hpp"
#include "spvit/umsa.hpp"

namespace spvit {

struct ModelConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::size_t channels = 3;
    std::size_t n_blocks = 4;
    std::size_t c_in = 64;
    std::size_t n_h = 4;
    std::vector<std::size_t> kernels{1, 3};
    double mlp_ratio = 4.0;
    std::size_t n_classes = 8;
    bool class_token = true;
    bool pre_norm = false;  // sensitivity switch; default follows post-norm wiring
    double theta_init = 1.5;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t n_patches() const { return grid() * grid(); }
    std::size_t n_tokens() const { return n_patches() + (class_token ? 1 : 0); }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t hidden() const {
        return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(c_in)));
    }

    void validate() const {
        if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
            throw ConfigError("image size " + std::to_string(image_size) + " not divisible by patch size " +
                              std::to_string(patch_size));
        }
        if (c_in == 0 || n_h == 0 || c_in % n_h != 0) {
            throw ConfigError("embed dim " + std::to_string(c_in) + " not divisible by heads " +
                              std::to_string(n_h));
        }
        const double h = mlp_ratio * static_cast<double>(c_in);
        if (h <= 0.0 || std::abs(h - std::llround(h)) > 1e-9) {
            throw ConfigError("mlp_ratio * c_in must be a positive integer");
        }
        if (n_blocks == 0 || n_classes < 2) throw ConfigError("need blocks >= 1 and classes >= 2");
        if (kernels.empty()) throw ConfigError("need at least one candidate kernel size");
    }
};

struct LayerNormParams {
    Param gamma, beta;
};

enum class AttnKind { Unified, Msa, Conv, Skip };

struct Block {
    AttnKind kind = AttnKind::Unified;
    UmsaParams umsa;   // Unified: full set; Msa: projections only
    ConvParams conv;   // materialized convolution
    UffnParams ffn;
    LayerNormParams ln1, ln2;
};

struct ViTModel {
    ModelConfig cfg;
    Param patch_w;  // [patch_dim x c_in]
    Param patch_b;  // [c_in]
    Param pos;      // [n_tokens x c_in]
    Param cls;      // [1 x c_in] when class_token
    Param head_w;   // [c_in x n_classes]
    Param head_b;   // [n_classes]
    std::vector<Block> blocks;
    bool materialized = false;

    std::vector<Param*> weight_params() {
        std::vector<Param*> out{&patch_w, &patch_b, &pos, &head_w, &head_b};
        if (cfg.class_token) out.push_back(&cls);
        for (Block& b : blocks) {
            if (b.kind == AttnKind::Unified) {
                b.umsa.weight_params(out);
            } else if (b.kind == AttnKind::Msa) {
                out.insert(out.end(), {&b.umsa.w_qry, &b.umsa.w_key, &b.umsa.w_val, &b.umsa.w_o,
                                       &b.umsa.b_qry, &b.umsa.b_key, &b.umsa.b_val, &b.umsa.b_o});
            } else if (b.kind == AttnKind::Conv) {
                out.insert(out.end(), {&b.conv.w, &b.conv.bias_taps, &b.conv.wo_bar, &b.conv.b_o,
                                       &b.conv.bn_gamma, &b.conv.bn_beta});
            }
            b.ffn.weight_params(out);
            out.insert(out.end(), {&b.ln1.gamma, &b.ln1.beta, &b.ln2.gamma, &b.ln2.beta});
        }
        return out;
    }

    std::vector<Param*> gate_params() {
        std::vector<Param*> out;
        for (Block& b : blocks) {
            if (b.kind == AttnKind::Unified) b.umsa.gate_params(out);
            b.ffn.gate_params(out);
        }
        return out;
    }
};

inline ViTModel make_dense_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ViTModel m;
    m.cfg = cfg;
    Rng rng(derive_seed(seed, "init"));
    const double std0 = 0.02;
    m.patch_w = Param("patch.w", Tensor({cfg.patch_dim(), cfg.c_in}));
    for (double& v : m.patch_w.value.data) v = std0 * rng.normal();
    m.patch_b = Param("patch.b", Tensor({cfg.c_in}));
    m.pos = Param("pos", Tensor({cfg.n_tokens(), cfg.c_in}));
    for (double& v : m.pos.value.data) v = std0 * rng.normal();
    if (cfg.class_token) {
        m.cls = Param("cls", Tensor({1, cfg.c_in}));
        for (double& v : m.cls.value.data) v = std0 * rng.normal();
    }
    m.head_w = Param("head.w", Tensor({cfg.c_in, cfg.n_classes}));
    for (double& v : m.head_w.value.data) v = std0 * rng.normal();
    m.head_b = Param("head.b", Tensor({cfg.n_classes}));
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
        const std::string pre = "block" + std::to_string(i);
        Block b;
        b.kind = AttnKind::Unified;
        b.umsa = UmsaParams(pre + ".umsa", cfg.c_in, cfg.n_h, cfg.kernels, cfg.theta_init, rng, std0);
        b.ffn = UffnParams(pre + ".ffn", cfg.c_in, cfg.hidden(), cfg.theta_init, rng, std0);
        b.ln1 = LayerNormParams{Param(pre + ".ln1.gamma", Tensor::full({cfg.c_in}, 1.0)),
                                Param(pre + ".ln1.beta", Tensor({cfg.c_in}))};
        b.ln2 = LayerNormParams{Param(pre + ".ln2.gamma", Tensor::full({cfg.c_in}, 1.0)),
                                Param(pre + ".ln2.beta", Tensor({cfg.c_in}))};
        m.blocks.push_back(std::move(b));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

enum class ModelMode { Search, Frozen, Materialized };

struct BlockGates {
    GateState umsa;
    std::vector<int> ffn;
};

// Row-major patch extraction: token (pi, pj) covers image rows pi*P..,
// columns pj*P..; within a patch the layout is (di, dj, channel).
inline Tensor tokens_from_image(const ModelConfig& cfg, const Tensor& image) {
    const std::size_t s = cfg.image_size, p = cfg.patch_size, ch = cfg.channels, g = cfg.grid();
    if (image.rank() != 3 || image.shape[0] != s || image.shape[1] != s || image.shape[2] != ch) {
        throw ConfigError("image " + image.shape_str() + " vs configured " + std::to_string(s) + "x" +
                          std::to_string(s) + "x" + std::to_string(ch));
    }
    Tensor t({g * g, cfg.patch_dim()});
    for (std::size_t pi = 0; pi < g; ++pi)
        for (std::size_t pj = 0; pj < g; ++pj)
            for (std::size_t di = 0; di < p; ++di)
                for (std::size_t dj = 0; dj < p; ++dj)
                    for (std::size_t c = 0; c < ch; ++c)
                        t.at(pi * g + pj, (di * p + dj) * ch + c) = image.at(pi * p + di, pj * p + dj, c);
    return t;
}

namespace detail {

inline std::optional<Var> block_attn_forward(Tape& tape, Block& b, Var x, const ModelConfig& cfg,
                                             ModelMode mode, const BlockGates* gates, bool bn_train) {
    const std::size_t g = cfg.grid();
    switch (mode) {
        case ModelMode::Search:
            if (b.kind != AttnKind::Unified) throw ContractError("search forward on a materialized block");
            return umsa_forward(tape, x, b.umsa, UmsaMode::Search, gates ? &gates->umsa : nullptr, g, g,
                                cfg.class_token, bn_train);
        case ModelMode::Frozen:
            if (b.kind != AttnKind::Unified) throw ContractError("frozen forward on a materialized block");
            return umsa_forward(tape, x, b.umsa, UmsaMode::Frozen, nullptr, g, g, cfg.class_token, bn_train);
        case ModelMode::Materialized:
            switch (b.kind) {
                case AttnKind::Unified:
                    throw ContractError("materialized forward on a unified block");
                case AttnKind::Msa:
                    return attention_forward(tape, x, b.umsa).out;
                case AttnKind::Conv: {
                    const std::size_t n = x.val().shape[0];
                    Var sp = cfg.class_token ? slice_rows(x, 1, n) : x;
                    Var out = bconv_materialized(tape, sp, b.conv, g, g, bn_train);
                    return cfg.class_token ? pad_rows(out, n, 1) : out;
                }
                case AttnKind::Skip:
                    return std::nullopt;
            }
    }
    return std::nullopt;
}

}  // namespace detail

// Forward for one sample's token input [n_patches x patch_dim] to logits
// [1 x n_classes].
inline Var model_forward(Tape& tape, ViTModel& m, const Tensor& token_input, ModelMode mode,
                         const std::vector<BlockGates>* gates, bool bn_train) {
    const ModelConfig& cfg = m.cfg;
    if (token_input.rank() != 2 || token_input.shape[0] != cfg.n_patches() ||
        token_input.shape[1] != cfg.patch_dim()) {
        throw ConfigError("token input " + token_input.shape_str() + " vs expected " +
                          std::to_string(cfg.n_patches()) + "x" + std::to_string(cfg.patch_dim()));
    }
    if (mode == ModelMode::Search && (gates == nullptr || gates->size() != m.blocks.size())) {
        throw ContractError("model_forward: search mode needs gates for every block");
    }
    Var patches = add_rowvec(matmul(tape.leaf(token_input), tape.param(m.patch_w)), tape.param(m.patch_b));
    Var x = cfg.class_token ? concat_rows(tape.param(m.cls), patches) : patches;
    x = add(x, tape.param(m.pos));
    for (std::size_t bi = 0; bi < m.blocks.size(); ++bi) {
        Block& b = m.blocks[bi];
        const BlockGates* bg = gates ? &(*gates)[bi] : nullptr;
        UffnMode fmode = mode == ModelMode::Search   ? UffnMode::Search
                         : mode == ModelMode::Frozen ? UffnMode::Frozen
                                                     : UffnMode::Dense;
        if (b.kind != AttnKind::Unified || !b.ffn.searchable()) fmode = UffnMode::Dense;
        if (!cfg.pre_norm) {
            std::optional<Var> a = detail::block_attn_forward(tape, b, x, cfg, mode, bg, bn_train);
            x = layernorm(a ? add(x, *a) : x, tape.param(b.ln1.gamma), tape.param(b.ln1.beta));
            Var f = uffn_forward(tape, x, b.ffn, fmode, bg ? &bg->ffn : nullptr);
            x = layernorm(add(x, f), tape.param(b.ln2.gamma), tape.param(b.ln2.beta));
        } else {
            Var nx = layernorm(x, tape.param(b.ln1.gamma), tape.param(b.ln1.beta));
            std::optional<Var> a = detail::block_attn_forward(tape, b, nx, cfg, mode, bg, bn_train);
            if (a) x = add(x, *a);
            Var nf = layernorm(x, tape.param(b.ln2.gamma), tape.param(b.ln2.beta));
            x = add(x, uffn_forward(tape, nf, b.ffn, fmode, bg ? &bg->ffn : nullptr));
        }
    }
    Var pooled = cfg.class_token ? slice_rows(x, 0, 1) : mean_rows(x);
    return add_rowvec(matmul(pooled, tape.param(m.head_w)), tape.param(m.head_b));
}

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

struct ParamCountReport {
    std::int64_t embeddings = 0;
    std::int64_t head = 0;
    std::int64_t norms = 0;
    std::int64_t attn = 0;
    std::int64_t ffn_weights = 0;  // fc1 + fc2 weight matrices only
    std::int64_t ffn_other = 0;    // biases
    std::int64_t total() const { return embeddings + head + norms + attn + ffn_weights + ffn_other; }
};

// Exact retained scalars after materializing `desc`. Conv blocks keep the
// profiled kernel, its bias taps, the ensemble output projection and BN state;
// the ensemble logits z are consumed by profiling and not counted.
inline ParamCountReport param_count_report(const ModelConfig& cfg, const ArchitectureDescriptor& desc) {
    if (desc.blocks.size() != cfg.n_blocks) {
        throw IntegrityError("descriptor has " + std::to_string(desc.blocks.size()) + " blocks, model " +
                             std::to_string(cfg.n_blocks));
    }
    ParamCountReport r;
    const std::int64_t c = static_cast<std::int64_t>(cfg.c_in);
    const std::int64_t ch = static_cast<std::int64_t>(cfg.c_in / cfg.n_h);
    r.embeddings = static_cast<std::int64_t>(cfg.patch_dim()) * c + c +  // patch projection + bias
                   static_cast<std::int64_t>(cfg.n_tokens()) * c +       // positional table
                   (cfg.class_token ? c : 0);
    r.head = c * static_cast<std::int64_t>(cfg.n_classes) + static_cast<std::int64_t>(cfg.n_classes);
    for (const BlockChoice& b : desc.blocks) {
        r.norms += 4 * c;  // two LayerNorms
        switch (b.op) {
            case UmsaOp::Msa:
                r.attn += 4 * c * c + 4 * c;
                break;
            case UmsaOp::Conv: {
                const std::int64_t kk = static_cast<std::int64_t>(b.kernel * b.kernel);
                r.attn += kk * c * ch         // profiled kernel
                          + kk * ch           // bias taps
                          + ch * c + c        // output ensemble projection + bias
                          + 4 * ch;           // BN gamma/beta + running stats
                break;
            }
            case UmsaOp::Skip:
                break;
        }
        const std::int64_t kept = static_cast<std::int64_t>(b.kept_dims.size());
        r.ffn_weights += 2 * c * kept;
        r.ffn_other += kept + c;
    }
    return r;
}

inline std::int64_t count_params(const ModelConfig& cfg, const ArchitectureDescriptor& desc) {
    return param_count_report(cfg, desc).total();
}

// The dense architecture: every block MSA, every hidden dimension kept.
inline ArchitectureDescriptor dense_descriptor(const ModelConfig& cfg) {
    ArchitectureDescriptor d;
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
        BlockChoice b;
        b.op = UmsaOp::Msa;
        b.kept_dims.resize(cfg.hidden());
        for (std::size_t t = 0; t < cfg.hidden(); ++t) b.kept_dims[t] = t;
        d.blocks.push_back(std::move(b));
    }
    return d;
}

}  // namespace spvit
