#pragma once

// Frozen search output: one operation choice per block plus the kept FFN
// dimension set. This is the contract between search, materialization and
// reporting.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "spvit/errors.hpp"

namespace spvit {

enum class UmsaOp { Skip, Conv, Msa };

struct BlockChoice {
    UmsaOp op = UmsaOp::Msa;
    std::size_t kernel = 0;                 // only meaningful for Conv
    std::vector<std::size_t> kept_dims;     // FFN subset T, ascending

    bool operator==(const BlockChoice& o) const {
        return op == o.op && (op != UmsaOp::Conv || kernel == o.kernel) && kept_dims == o.kept_dims;
    }
};

struct ArchitectureDescriptor {
    std::vector<BlockChoice> blocks;
    std::int64_t total_flops = 0;
    std::int64_t total_params = 0;
    std::uint64_t seed = 0;
    std::string config_hash;

    // False when parsed from JSON that carried only per-block counts; the
    // sets must then be recovered from checkpoint gate logits.
    bool kept_dims_explicit = true;
    std::vector<std::size_t> declared_kept;

    bool same_architecture(const ArchitectureDescriptor& o) const { return blocks == o.blocks; }
};

inline std::string umsa_op_name(const BlockChoice& b) {
    switch (b.op) {
        case UmsaOp::Skip: return "skip";
        case UmsaOp::Conv: return "conv" + std::to_string(b.kernel);
        case UmsaOp::Msa: return "msa";
    }
    return "?";
}

inline BlockChoice parse_umsa_op(const std::string& s) {
    BlockChoice b;
    if (s == "skip") {
        b.op = UmsaOp::Skip;
    } else if (s == "msa") {
        b.op = UmsaOp::Msa;
    } else if (s.rfind("conv", 0) == 0) {
        b.op = UmsaOp::Conv;
        b.kernel = static_cast<std::size_t>(std::stoul(s.substr(4)));
    } else {
        throw FormatError("unknown umsa op '" + s + "'");
    }
    return b;
}

inline nlohmann::json descriptor_to_json(const ArchitectureDescriptor& d, std::size_t c_in) {
    nlohmann::json j;
    j["blocks"] = nlohmann::json::array();
    for (const BlockChoice& b : d.blocks) {
        nlohmann::json jb;
        jb["umsa"] = umsa_op_name(b);
        jb["ffn_kept"] = b.kept_dims.size();
        jb["alpha_prime"] = static_cast<double>(b.kept_dims.size()) / static_cast<double>(c_in);
        jb["kept_dims"] = b.kept_dims;
        j["blocks"].push_back(jb);
    }
    j["totals"] = {{"flops", d.total_flops}, {"params", d.total_params}};
    j["provenance"] = {{"seed", d.seed}, {"config_hash", d.config_hash}};
    return j;
}

// Validates the required schema fields and rebuilds the descriptor. The
// optional kept_dims list is honored when present; otherwise only the count
// is known and materialization must recover T from the checkpoint's logits.
inline ArchitectureDescriptor descriptor_from_json(const nlohmann::json& j) {
    ArchitectureDescriptor d;
    if (!j.contains("blocks") || !j["blocks"].is_array() || !j.contains("totals") ||
        !j.contains("provenance")) {
        throw FormatError("descriptor: missing blocks/totals/provenance");
    }
    for (const auto& jb : j["blocks"]) {
        if (!jb.contains("umsa") || !jb.contains("ffn_kept") || !jb.contains("alpha_prime")) {
            throw FormatError("descriptor: block entry missing umsa/ffn_kept/alpha_prime");
        }
        BlockChoice b = parse_umsa_op(jb["umsa"].get<std::string>());
        d.declared_kept.push_back(jb["ffn_kept"].get<std::size_t>());
        if (jb.contains("kept_dims")) {
            b.kept_dims = jb["kept_dims"].get<std::vector<std::size_t>>();
            if (b.kept_dims.size() != d.declared_kept.back()) {
                throw FormatError("descriptor: kept_dims length disagrees with ffn_kept");
            }
        } else {
            d.kept_dims_explicit = false;
        }
        d.blocks.push_back(std::move(b));
    }
    d.total_flops = j["totals"].at("flops").get<std::int64_t>();
    d.total_params = j["totals"].at("params").get<std::int64_t>();
    d.seed = j["provenance"].value("seed", 0ull);
    d.config_hash = j["provenance"].value("config_hash", std::string{});
    return d;
}

}  // namespace spvit
