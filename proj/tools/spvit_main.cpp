// spvit: search, fine-tune, evaluate and report single-path pruned ViT models.
//
// Subcommands:
//   search    joint gate/weight optimization toward a FLOPs target
//   finetune  train a checkpoint (optionally materialized through a
//             descriptor, optionally distilled from a teacher checkpoint)
//   eval      top-1 / top-5 on the validation split
//   report    per-block architecture table from a checkpoint
//   verify    run the oracle suites (equivalence, gradients, gates, cost)
//
// Exit codes: 0 success, 1 verification failure, 2 usage/configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "spvit/config.hpp"
#include "spvit/cost.hpp"
#include "spvit/pipeline.hpp"
#include "spvit/search.hpp"
#include "spvit/verify.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::int64_t seed = -1;
    std::string out_dir;
};

struct LoadedRun {
    spvit::RunConfig cfg;
    nlohmann::json raw;
    std::string hash;
};

LoadedRun load_run(const CommonArgs& args, bool config_required) {
    nlohmann::json j = nlohmann::json::object();
    if (!args.config_path.empty()) {
        j = spvit::load_json_file(args.config_path);
    } else if (config_required) {
        throw spvit::ConfigError("--config is required for this subcommand");
    }
    for (const std::string& kv : args.overrides) spvit::apply_override(j, kv);
    if (args.seed >= 0) j["seed"] = static_cast<std::uint64_t>(args.seed);
    if (!args.out_dir.empty()) j["out_dir"] = args.out_dir;
    LoadedRun run;
    run.cfg = spvit::run_config_from_json(j);
    run.raw = j;
    run.hash = spvit::config_hash(j);
    return run;
}

void ensure_out_dir(const spvit::RunConfig& cfg) {
    std::filesystem::create_directories(cfg.out_dir);
}

void reset_gate_logits(spvit::ViTModel& m, double theta_init) {
    for (spvit::Block& b : m.blocks) {
        if (b.kind != spvit::AttnKind::Unified) continue;
        std::fill(b.umsa.theta.value.data.begin(), b.umsa.theta.value.data.end(), theta_init);
        std::fill(b.ffn.theta.value.data.begin(), b.ffn.theta.value.data.end(), theta_init);
    }
}

int cmd_search(const CommonArgs& args) {
    LoadedRun run = load_run(args, true);
    spvit::RunConfig& cfg = run.cfg;
    cfg.search.seed = cfg.seed;
    ensure_out_dir(cfg);

    spvit::ViTModel model;
    if (!cfg.search_init_checkpoint.empty()) {
        spvit::LoadedCheckpoint ck = spvit::load_model(cfg.search_init_checkpoint);
        if (ck.model.materialized) {
            throw spvit::ConfigError("search.init_checkpoint must be a dense (unified) checkpoint");
        }
        model = std::move(ck.model);
        if (model.cfg.n_blocks != cfg.model.n_blocks || model.cfg.c_in != cfg.model.c_in) {
            throw spvit::ConfigError("init checkpoint model does not match configured model");
        }
    } else {
        model = spvit::make_dense_model(cfg.model, cfg.seed);
    }
    reset_gate_logits(model, cfg.search.theta_init);

    const spvit::CostTable table = spvit::build_cost_table(cfg.model);
    spvit::SearchResult res = spvit::run_search(model, cfg.task(), table, cfg.search, run.hash, std::cout);
    if (!res.converged) {
        std::cerr << "warning: architecture did not converge within " << cfg.search.epochs << " epochs\n";
    }

    const std::string desc_path = cfg.out_dir + "/descriptor.json";
    std::ofstream df(desc_path);
    df << spvit::descriptor_to_json(res.descriptor, cfg.model.c_in).dump(2) << "\n";
    if (!df) throw spvit::FormatError("cannot write " + desc_path);

    spvit::Provenance prov{cfg.seed, run.hash, "search"};
    spvit::save_model(model, cfg.out_dir + "/search.ckpt", nullptr, prov);
    std::cout << "descriptor=" << desc_path << " checkpoint=" << cfg.out_dir << "/search.ckpt"
              << " converged=" << (res.converged ? 1 : 0) << " flops=" << res.descriptor.total_flops
              << " params=" << res.descriptor.total_params << "\n";
    return 0;
}

int cmd_finetune(const CommonArgs& args) {
    LoadedRun run = load_run(args, true);
    spvit::RunConfig& cfg = run.cfg;
    ensure_out_dir(cfg);

    spvit::ViTModel model;
    std::optional<spvit::ArchitectureDescriptor> desc;
    if (cfg.finetune.checkpoint.empty()) {
        model = spvit::make_dense_model(cfg.model, cfg.seed);
    } else {
        spvit::LoadedCheckpoint ck = spvit::load_model(cfg.finetune.checkpoint);
        model = std::move(ck.model);
        desc = ck.descriptor;
    }
    if (!cfg.finetune.descriptor.empty()) {
        if (model.materialized) {
            throw spvit::ConfigError("descriptor given but the checkpoint is already materialized");
        }
        spvit::ArchitectureDescriptor d =
            spvit::descriptor_from_json(spvit::load_json_file(cfg.finetune.descriptor));
        spvit::resolve_kept_dims(d, model);
        model = spvit::materialize(model, d);
        desc = d;
    }

    std::unique_ptr<spvit::TeacherHandle> teacher;
    if (!cfg.finetune.teacher_checkpoint.empty()) {
        auto tm = std::make_shared<spvit::ViTModel>(spvit::load_model(cfg.finetune.teacher_checkpoint).model);
        teacher = std::make_unique<spvit::TeacherHandle>(
            spvit::teacher_from_model(tm, cfg.finetune.teacher_checkpoint));
    }

    spvit::FinetuneConfig fcfg;
    fcfg.epochs = cfg.finetune.epochs;
    fcfg.batch_size = cfg.finetune.batch_size;
    fcfg.lr = cfg.finetune.lr;
    fcfg.weight_decay = cfg.finetune.weight_decay;
    fcfg.lambda_dist = cfg.finetune.lambda_dist;
    fcfg.seed = cfg.seed;
    spvit::finetune(model, cfg.task(), teacher.get(), fcfg, std::cout);

    spvit::Provenance prov{cfg.seed, run.hash, "finetune"};
    const std::string path = cfg.out_dir + "/finetune.ckpt";
    spvit::save_model(model, path, desc ? &*desc : nullptr, prov);
    std::cout << "checkpoint=" << path << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args) {
    LoadedRun run = load_run(args, true);
    if (run.cfg.eval_checkpoint.empty()) throw spvit::ConfigError("eval.checkpoint is required");
    spvit::LoadedCheckpoint ck = spvit::load_model(run.cfg.eval_checkpoint);
    spvit::RunConfig cfg = run.cfg;
    cfg.model = ck.model.cfg;  // the checkpoint defines the model; data settings come from the config
    const spvit::EvalResult r = spvit::evaluate(ck.model, cfg.task(), spvit::Split::Val);
    std::printf("top1=%.6f top5=%.6f\n", r.top1, r.top5);
    return 0;
}

int cmd_report(const CommonArgs& args) {
    LoadedRun run = load_run(args, true);
    spvit::RunConfig& cfg = run.cfg;
    if (cfg.report_checkpoint.empty()) throw spvit::ConfigError("report.checkpoint is required");
    ensure_out_dir(cfg);
    spvit::LoadedCheckpoint ck = spvit::load_model(cfg.report_checkpoint);
    const spvit::CostTable table = spvit::build_cost_table(ck.model.cfg);
    spvit::ArchitectureDescriptor desc;
    if (ck.descriptor) {
        desc = *ck.descriptor;
    } else {
        desc = spvit::freeze(ck.model, table, ck.provenance.seed, ck.provenance.config_hash);
    }

    const double dense = static_cast<double>(table.f_dense);
    std::printf("%-8s %-8s %-10s %-8s %-12s\n", "block", "umsa", "ffn_kept", "alpha'", "flops_share");
    for (std::size_t b = 0; b < desc.blocks.size(); ++b) {
        const spvit::BlockChoice& c = desc.blocks[b];
        std::int64_t block_flops = table.ffn_per_dim * static_cast<std::int64_t>(c.kept_dims.size());
        if (c.op == spvit::UmsaOp::Msa) block_flops += table.umsa_ops[b].back();
        if (c.op == spvit::UmsaOp::Conv) {
            for (std::size_t ki = 0; ki < table.kernels.size(); ++ki)
                if (table.kernels[ki] == c.kernel) block_flops += table.umsa_ops[b][ki];
        }
        std::printf("%-8zu %-8s %-10zu %-8.3f %-12.4f\n", b, spvit::umsa_op_name(c).c_str(),
                    c.kept_dims.size(),
                    static_cast<double>(c.kept_dims.size()) / static_cast<double>(ck.model.cfg.c_in),
                    static_cast<double>(block_flops) / dense);
    }
    const double frac = static_cast<double>(desc.total_flops) / dense;
    std::printf("total: flops=%lld (%.4f of dense) params=%lld\n",
                static_cast<long long>(desc.total_flops), frac, static_cast<long long>(desc.total_params));

    nlohmann::json j = spvit::descriptor_to_json(desc, ck.model.cfg.c_in);
    j["totals"]["flops_fraction_of_dense"] = frac;
    j["cost_table"] = spvit::cost_table_to_json(table);
    const std::string path = cfg.out_dir + "/report.json";
    std::ofstream rf(path);
    rf << j.dump(2) << "\n";
    if (!rf) throw spvit::FormatError("cannot write " + path);
    std::cout << "report=" << path << "\n";
    return 0;
}

int cmd_verify(const CommonArgs& args) {
    (void)load_run(args, false);  // config optional; validates it when given
    const std::vector<spvit::SuiteResult> suites = spvit::run_verify_suites();
    bool all = true;
    for (const spvit::SuiteResult& s : suites) {
        std::printf("[%s] %-16s %s\n", s.passed ? "PASS" : "FAIL", s.name.c_str(), s.detail.c_str());
        all = all && s.passed;
    }
    std::printf("verify: %s\n", all ? "all suites passed" : "FAILURES PRESENT");
    return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"single-path ViT pruning"};
    app.require_subcommand(1);

    CommonArgs args;
    auto add_common = [&args](CLI::App* sub) {
        sub->add_option("--config", args.config_path, "run configuration JSON");
        sub->add_option("--set", args.overrides, "override config values, dotted.key=value");
        sub->add_option("--seed", args.seed, "override the config seed");
        sub->add_option("--out", args.out_dir, "override the output directory");
    };
    CLI::App* s_search = app.add_subcommand("search", "architecture search under a FLOPs target");
    CLI::App* s_finetune = app.add_subcommand("finetune", "train a checkpoint, optionally pruned/distilled");
    CLI::App* s_eval = app.add_subcommand("eval", "evaluate a checkpoint");
    CLI::App* s_report = app.add_subcommand("report", "architecture report for a checkpoint");
    CLI::App* s_verify = app.add_subcommand("verify", "run the oracle suites");
    for (CLI::App* s : {s_search, s_finetune, s_eval, s_report, s_verify}) add_common(s);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (s_search->parsed()) return cmd_search(args);
        if (s_finetune->parsed()) return cmd_finetune(args);
        if (s_eval->parsed()) return cmd_eval(args);
        if (s_report->parsed()) return cmd_report(args);
        if (s_verify->parsed()) return cmd_verify(args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
