#pragma once

// Materialization, fine-tuning with optional hard-label distillation,
// evaluation, and the binary checkpoint format.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spvit/cost.hpp"
#include "spvit/data.hpp"
#include "spvit/model.hpp"
#include "spvit/optim.hpp"
#include "spvit/search.hpp"

namespace spvit {

// ---------------------------------------------------------------------------
// Materialization
// ---------------------------------------------------------------------------

// Recovers the FFN dimension sets from the model's gate logits when the
// descriptor carried only counts.
inline void resolve_kept_dims(ArchitectureDescriptor& d, const ViTModel& m) {
    if (d.kept_dims_explicit) return;
    if (d.blocks.size() != m.blocks.size()) throw IntegrityError("descriptor/model block count mismatch");
    for (std::size_t b = 0; b < d.blocks.size(); ++b) {
        if (m.blocks[b].kind != AttnKind::Unified || !m.blocks[b].ffn.searchable()) {
            throw IntegrityError("descriptor lacks kept_dims and the model has no gate logits");
        }
        std::vector<std::size_t> kept = select_dims(m.blocks[b].ffn.theta.value);
        if (b < d.declared_kept.size() && kept.size() != d.declared_kept[b]) {
            throw IntegrityError("checkpoint gate logits keep " + std::to_string(kept.size()) +
                                 " dims, descriptor declares " + std::to_string(d.declared_kept[b]));
        }
        d.blocks[b].kept_dims = std::move(kept);
    }
    d.kept_dims_explicit = true;
}

// Builds the pruned model: conv-chosen blocks get the profiled kernel (z is
// consumed), MSA-chosen blocks drop the conv-only parameters, skip blocks
// drop the layer, FFNs are sliced to T. BN state carries over.
inline ViTModel materialize(const ViTModel& m, const ArchitectureDescriptor& desc) {
    if (m.materialized) throw IntegrityError("materialize: model is already materialized");
    if (desc.blocks.size() != m.blocks.size()) {
        throw IntegrityError("materialize: descriptor has " + std::to_string(desc.blocks.size()) +
                             " blocks, model has " + std::to_string(m.blocks.size()));
    }
    if (!desc.kept_dims_explicit) throw IntegrityError("materialize: descriptor kept_dims unresolved");
    ViTModel out;
    out.cfg = m.cfg;
    out.materialized = true;
    out.patch_w = m.patch_w;
    out.patch_b = m.patch_b;
    out.pos = m.pos;
    out.cls = m.cls;
    out.head_w = m.head_w;
    out.head_b = m.head_b;
    for (std::size_t bi = 0; bi < m.blocks.size(); ++bi) {
        const Block& src = m.blocks[bi];
        const BlockChoice& choice = desc.blocks[bi];
        if (src.kind != AttnKind::Unified) throw IntegrityError("materialize: block not unified");
        Block b;
        b.ln1 = src.ln1;
        b.ln2 = src.ln2;
        const std::string pre = "block" + std::to_string(bi);
        switch (choice.op) {
            case UmsaOp::Msa: {
                b.kind = AttnKind::Msa;
                b.umsa.c_in = src.umsa.c_in;
                b.umsa.n_h = src.umsa.n_h;
                b.umsa.c_h = src.umsa.c_h;
                b.umsa.w_qry = src.umsa.w_qry;
                b.umsa.w_key = src.umsa.w_key;
                b.umsa.w_val = src.umsa.w_val;
                b.umsa.w_o = src.umsa.w_o;
                b.umsa.b_qry = src.umsa.b_qry;
                b.umsa.b_key = src.umsa.b_key;
                b.umsa.b_val = src.umsa.b_val;
                b.umsa.b_o = src.umsa.b_o;
                break;
            }
            case UmsaOp::Conv: {
                std::ptrdiff_t ki = -1;
                for (std::size_t i = 0; i < src.umsa.kernels.size(); ++i)
                    if (src.umsa.kernels[i] == choice.kernel) ki = static_cast<std::ptrdiff_t>(i);
                if (ki < 0) {
                    throw IntegrityError("materialize: kernel " + std::to_string(choice.kernel) +
                                         " not a candidate of block " + std::to_string(bi));
                }
                b.kind = AttnKind::Conv;
                ProfiledKernel pk = profile_kernel(src.umsa, static_cast<std::size_t>(ki));
                const KernelShare& share = src.umsa.shares[static_cast<std::size_t>(ki)];
                b.conv.k = choice.kernel;
                b.conv.w = Param(pre + ".conv.w", std::move(pk.w));
                b.conv.bias_taps = Param(pre + ".conv.bias_taps", std::move(pk.bias_taps));
                b.conv.wo_bar = Param(pre + ".conv.wo_bar", std::move(pk.wo_bar));
                b.conv.b_o = Param(pre + ".conv.b_o", src.umsa.b_o.value);
                b.conv.bn_gamma = Param(pre + ".conv.bn.gamma", share.bn_gamma.value);
                b.conv.bn_beta = Param(pre + ".conv.bn.beta", share.bn_beta.value);
                b.conv.bn_state = share.bn_state;
                break;
            }
            case UmsaOp::Skip:
                b.kind = AttnKind::Skip;
                break;
        }
        for (std::size_t t : choice.kept_dims)
            if (t >= src.ffn.hidden) {
                throw IntegrityError("materialize: kept dim " + std::to_string(t) + " out of range");
            }
        b.ffn = materialize_ffn(src.ffn, choice.kept_dims);
        out.blocks.push_back(std::move(b));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    double top1 = 0.0;
    double top5 = 0.0;
};

inline std::size_t eval_threads() {
    const char* env = std::getenv("SPVIT_THREADS");
    if (env == nullptr) return 1;
    const long v = std::strtol(env, nullptr, 10);
    if (v < 1) return 1;
    return std::min<std::size_t>(static_cast<std::size_t>(v), 64);
}

inline std::vector<double> logits_of(ViTModel& m, const Tensor& image) {
    Tape tape;
    const ModelMode mode = m.materialized ? ModelMode::Materialized : ModelMode::Frozen;
    Var logits = model_forward(tape, m, tokens_from_image(m.cfg, image), mode, nullptr, /*bn_train=*/false);
    return logits.val().data;
}

// Top-1 / top-5 accuracy over explicit samples. Threads shard the index
// range; per-shard counts merge in shard order, so the result is identical to
// the serial evaluation.
inline EvalResult evaluate_samples(ViTModel& m, const std::vector<Sample>& samples) {
    if (samples.empty()) throw ContractError("evaluate: empty sample set");
    const std::size_t n_threads = std::min(eval_threads(), samples.size());
    std::vector<std::size_t> hit1(n_threads, 0), hit5(n_threads, 0);
    auto work = [&](std::size_t tid) {
        const std::size_t lo = tid * samples.size() / n_threads;
        const std::size_t hi = (tid + 1) * samples.size() / n_threads;
        for (std::size_t i = lo; i < hi; ++i) {
            const std::vector<double> logits = logits_of(m, samples[i].image);
            const double mine = logits[samples[i].label];
            std::size_t above = 0;
            for (std::size_t c = 0; c < logits.size(); ++c) {
                if (c == samples[i].label) continue;
                if (logits[c] > mine || (logits[c] == mine && c < samples[i].label)) ++above;
            }
            if (above == 0) ++hit1[tid];
            if (above < 5) ++hit5[tid];
        }
    };
    if (n_threads == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work, t);
        for (std::thread& th : pool) th.join();
    }
    std::size_t h1 = 0, h5 = 0;
    for (std::size_t t = 0; t < n_threads; ++t) {
        h1 += hit1[t];
        h5 += hit5[t];
    }
    EvalResult r;
    r.top1 = static_cast<double>(h1) / static_cast<double>(samples.size());
    r.top5 = static_cast<double>(h5) / static_cast<double>(samples.size());
    return r;
}

inline EvalResult evaluate(ViTModel& m, const SyntheticTask& task, Split split) {
    std::vector<Sample> samples;
    for (std::size_t i = 0; i < task.split_size(split); ++i) samples.push_back(task.sample(split, i));
    return evaluate_samples(m, samples);
}

// ---------------------------------------------------------------------------
// Fine-tuning with optional hard-label distillation
// ---------------------------------------------------------------------------

struct TeacherHandle {
    std::string id;
    std::size_t n_classes = 0;
    std::function<std::vector<std::size_t>(const std::vector<Tensor>&)> predict_hard;
};

inline TeacherHandle teacher_from_model(std::shared_ptr<ViTModel> model, std::string id) {
    TeacherHandle t;
    t.id = std::move(id);
    t.n_classes = model->cfg.n_classes;
    t.predict_hard = [model](const std::vector<Tensor>& images) {
        std::vector<std::size_t> labels;
        labels.reserve(images.size());
        for (const Tensor& img : images) {
            const std::vector<double> logits = logits_of(*model, img);
            std::size_t best = 0;
            for (std::size_t c = 1; c < logits.size(); ++c)
                if (logits[c] > logits[best]) best = c;
            labels.push_back(best);
        }
        return labels;
    };
    return t;
}

struct FinetuneConfig {
    std::size_t epochs = 13;
    std::size_t batch_size = 16;
    double lr = 1e-4;
    double weight_decay = 0.01;
    double lambda_dist = 1.0;
    std::uint64_t seed = 42;
};

// Minimizes CE on true labels plus lambda_dist * CE on the teacher's argmax
// labels. Without a teacher the distillation term is forced off. Works on
// materialized models and on unified models (deterministic gates), which is
// also how the dense baseline trains.
inline void finetune(ViTModel& m, const SyntheticTask& task, const TeacherHandle* teacher,
                     const FinetuneConfig& cfg, std::ostream& log = std::cout) {
    if (teacher != nullptr && teacher->n_classes != m.cfg.n_classes) {
        throw ConfigError("teacher predicts " + std::to_string(teacher->n_classes) + " classes, model has " +
                          std::to_string(m.cfg.n_classes));
    }
    const double lambda = teacher != nullptr ? cfg.lambda_dist : 0.0;
    std::vector<Param*> weights = m.weight_params();
    AdamW opt(cfg.lr, cfg.weight_decay);
    const ModelMode mode = m.materialized ? ModelMode::Materialized : ModelMode::Frozen;
    const std::size_t steps = std::max<std::size_t>(1, task.n_train / cfg.batch_size);
    log << "epoch,loss,ce,dist\n";
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(task.n_train, cfg.seed, epoch);
        double sum_loss = 0.0, sum_ce = 0.0, sum_dist = 0.0;
        for (std::size_t s = 0; s < steps; ++s) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s * cfg.batch_size),
                                         order.begin() + static_cast<std::ptrdiff_t>((s + 1) * cfg.batch_size));
            const Batch batch = task.batch(Split::Train, idx);
            std::vector<std::size_t> hard;
            if (lambda > 0.0) hard = teacher->predict_hard(batch.images);
            for (Param* p : weights) p->zero_grad();
            Tape tape;
            std::vector<Var> ces, dists;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                Var logits = model_forward(tape, m, tokens_from_image(m.cfg, batch.images[i]), mode, nullptr,
                                           /*bn_train=*/true);
                ces.push_back(cross_entropy(logits, batch.labels[i]));
                if (lambda > 0.0) dists.push_back(cross_entropy(logits, hard[i]));
            }
            Var ce = scale(sum_vars(ces), 1.0 / static_cast<double>(batch.size()));
            Var loss = ce;
            double dist_val = 0.0;
            if (lambda > 0.0) {
                Var dist = scale(sum_vars(dists), 1.0 / static_cast<double>(batch.size()));
                dist_val = dist.val().data[0];
                loss = add(ce, scale(dist, lambda));
            }
            sum_loss += loss.val().data[0];
            sum_ce += ce.val().data[0];
            sum_dist += dist_val;
            tape.backward(loss);
            opt.step(weights);
        }
        log << epoch << "," << sum_loss / static_cast<double>(steps) << ","
            << sum_ce / static_cast<double>(steps) << "," << sum_dist / static_cast<double>(steps)
            << std::endl;
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------
//
// magic "SPVT" | u32 version | u64 meta_len | meta JSON | u32 tensor_count |
// per tensor: u32 name_len | name | u32 rank | u64 extents[rank] | f32 data.
// All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

struct Reader {
    std::istream& is;
    std::uint64_t offset = 0;

    void read(void* dst, std::size_t n) {
        is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is.gcount()) != n) {
            throw FormatError("truncated checkpoint at offset " + std::to_string(offset));
        }
        offset += n;
    }

    std::uint32_t u32() {
        unsigned char b[4];
        read(b, 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        unsigned char b[8];
        read(b, 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }

    float f32() { return std::bit_cast<float>(u32()); }
};

}  // namespace detail

// Every tensor a model owns, in a fixed order: parameters plus BN running
// statistics. Gate logits are included while the model is still unified.
inline std::vector<std::pair<std::string, Tensor*>> tensor_inventory(ViTModel& m) {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto add = [&out](Param& p) {
        if (p.value.numel() > 0) out.emplace_back(p.name, &p.value);
    };
    add(m.patch_w);
    add(m.patch_b);
    add(m.pos);
    if (m.cfg.class_token) add(m.cls);
    add(m.head_w);
    add(m.head_b);
    for (std::size_t bi = 0; bi < m.blocks.size(); ++bi) {
        Block& b = m.blocks[bi];
        const std::string pre = "block" + std::to_string(bi);
        if (b.kind == AttnKind::Unified || b.kind == AttnKind::Msa) {
            add(b.umsa.w_qry);
            add(b.umsa.w_key);
            add(b.umsa.w_val);
            add(b.umsa.w_o);
            add(b.umsa.b_qry);
            add(b.umsa.b_key);
            add(b.umsa.b_val);
            add(b.umsa.b_o);
        }
        if (b.kind == AttnKind::Unified) {
            for (KernelShare& s : b.umsa.shares) {
                add(s.z);
                add(s.bn_gamma);
                add(s.bn_beta);
                out.emplace_back(pre + ".umsa.bn" + std::to_string(s.k) + ".running_mean", &s.bn_state.running_mean);
                out.emplace_back(pre + ".umsa.bn" + std::to_string(s.k) + ".running_var", &s.bn_state.running_var);
            }
            add(b.umsa.theta);
        }
        if (b.kind == AttnKind::Conv) {
            add(b.conv.w);
            add(b.conv.bias_taps);
            add(b.conv.wo_bar);
            add(b.conv.b_o);
            add(b.conv.bn_gamma);
            add(b.conv.bn_beta);
            out.emplace_back(pre + ".conv.bn.running_mean", &b.conv.bn_state.running_mean);
            out.emplace_back(pre + ".conv.bn.running_var", &b.conv.bn_state.running_var);
        }
        add(b.ffn.w_fc1);
        add(b.ffn.b_fc1);
        add(b.ffn.w_fc2);
        add(b.ffn.b_fc2);
        if (b.ffn.searchable()) add(b.ffn.theta);
        add(b.ln1.gamma);
        add(b.ln1.beta);
        add(b.ln2.gamma);
        add(b.ln2.beta);
    }
    return out;
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"image_size", c.image_size}, {"patch_size", c.patch_size},
                          {"channels", c.channels},     {"n_blocks", c.n_blocks},
                          {"embed_dim", c.c_in},        {"n_heads", c.n_h},
                          {"kernel_sizes", c.kernels},  {"mlp_ratio", c.mlp_ratio},
                          {"n_classes", c.n_classes},   {"class_token", c.class_token},
                          {"pre_norm", c.pre_norm},     {"theta_init", c.theta_init}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.image_size = j.at("image_size").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.n_blocks = j.at("n_blocks").get<std::size_t>();
    c.c_in = j.at("embed_dim").get<std::size_t>();
    c.n_h = j.at("n_heads").get<std::size_t>();
    c.kernels = j.at("kernel_sizes").get<std::vector<std::size_t>>();
    c.mlp_ratio = j.at("mlp_ratio").get<double>();
    c.n_classes = j.at("n_classes").get<std::size_t>();
    c.class_token = j.at("class_token").get<bool>();
    c.pre_norm = j.value("pre_norm", false);
    c.theta_init = j.value("theta_init", 1.5);
    c.validate();
    return c;
}

struct Provenance {
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string phase;  // "init" | "search" | "finetune"
};

inline void save_model(ViTModel& m, const std::string& path,
                       const ArchitectureDescriptor* desc = nullptr, const Provenance& prov = {}) {
    if (m.materialized && desc == nullptr) {
        throw IntegrityError("save_model: materialized model needs its descriptor");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    std::vector<std::pair<std::string, Tensor*>> inv = tensor_inventory(m);
    nlohmann::json meta;
    meta["model"] = model_config_to_json(m.cfg);
    meta["arch"] = m.materialized ? descriptor_to_json(*desc, m.cfg.c_in) : nlohmann::json("dense");
    meta["provenance"] = {{"seed", prov.seed}, {"config_hash", prov.config_hash}, {"phase", prov.phase}};
    std::vector<std::string> names;
    for (const auto& [name, t] : inv) names.push_back(name);
    meta["tensors"] = names;
    const std::string meta_str = meta.dump();

    os.write("SPVT", 4);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u64(os, meta_str.size());
    os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(inv.size()));
    for (const auto& [name, t] : inv) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(t->rank()));
        for (std::size_t e : t->shape) detail::put_u64(os, e);
        for (double v : t->data) detail::put_f32(os, static_cast<float>(v));
    }
    if (!os) throw FormatError("write failure on " + path);
}

// Skeleton with the block kinds and shapes a descriptor implies; values zero.
inline ViTModel make_materialized_skeleton(const ModelConfig& cfg, const ArchitectureDescriptor& desc) {
    ViTModel dense = make_dense_model(cfg, 0);
    ArchitectureDescriptor resolved = desc;
    resolve_kept_dims(resolved, dense);
    return materialize(dense, resolved);
}

struct LoadedCheckpoint {
    ViTModel model;
    std::optional<ArchitectureDescriptor> descriptor;  // empty for dense checkpoints
    Provenance provenance;
};

inline LoadedCheckpoint load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    detail::Reader rd{is};
    char magic[4];
    rd.read(magic, 4);
    if (std::memcmp(magic, "SPVT", 4) != 0) throw FormatError("bad magic at offset 0");
    const std::uint32_t version = rd.u32();
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported version " + std::to_string(version) + " at offset 4");
    }
    const std::uint64_t meta_len = rd.u64();
    std::string meta_str(meta_len, '\0');
    rd.read(meta_str.data(), meta_len);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_str);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("metadata parse: " + std::string(e.what()));
    }

    LoadedCheckpoint out;
    const ModelConfig cfg = model_config_from_json(meta.at("model"));
    if (meta.at("arch").is_string() && meta.at("arch").get<std::string>() == "dense") {
        out.model = make_dense_model(cfg, 0);
    } else {
        out.descriptor = descriptor_from_json(meta.at("arch"));
        out.model = make_materialized_skeleton(cfg, *out.descriptor);
    }
    out.provenance.seed = meta.at("provenance").value("seed", 0ull);
    out.provenance.config_hash = meta.at("provenance").value("config_hash", std::string{});
    out.provenance.phase = meta.at("provenance").value("phase", std::string{});

    std::vector<std::pair<std::string, Tensor*>> inv = tensor_inventory(out.model);
    const std::vector<std::string> declared = meta.at("tensors").get<std::vector<std::string>>();
    if (declared.size() != inv.size()) {
        throw FormatError("metadata declares " + std::to_string(declared.size()) + " tensors, model needs " +
                          std::to_string(inv.size()));
    }
    for (std::size_t i = 0; i < inv.size(); ++i) {
        if (declared[i] != inv[i].first) {
            throw FormatError("tensor inventory mismatch at entry " + std::to_string(i) + ": '" +
                              declared[i] + "' vs '" + inv[i].first + "'");
        }
    }

    const std::uint32_t count = rd.u32();
    if (count != inv.size()) {
        throw FormatError("tensor count " + std::to_string(count) + " does not match inventory " +
                          std::to_string(inv.size()));
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = rd.u32();
        std::string name(name_len, '\0');
        rd.read(name.data(), name_len);
        if (name != inv[i].first) {
            throw FormatError("tensor " + std::to_string(i) + " named '" + name + "', expected '" +
                              inv[i].first + "' at offset " + std::to_string(rd.offset));
        }
        const std::uint32_t rank = rd.u32();
        std::vector<std::size_t> shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) shape[d] = rd.u64();
        Tensor* dst = inv[i].second;
        if (shape != dst->shape) {
            throw FormatError("tensor '" + name + "' has shape " + Tensor::shape_str(shape) + ", expected " +
                              dst->shape_str());
        }
        for (std::size_t e = 0; e < dst->numel(); ++e) dst->data[e] = static_cast<double>(rd.f32());
    }
    char extra;
    if (is.read(&extra, 1)) throw FormatError("trailing bytes at offset " + std::to_string(rd.offset));
    return out;
}

}  // namespace spvit
