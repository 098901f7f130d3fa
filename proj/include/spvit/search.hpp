#pragma once

// Joint optimization of gates and weights: L = L_CE + lambda_comp * L_comp,
// stochastic gates resampled per batch, two optimizer groups with their own
// learning rates. Freezing thresholds the gate logits into a descriptor.

#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "spvit/cost.hpp"
#include "spvit/data.hpp"
#include "spvit/model.hpp"
#include "spvit/optim.hpp"

namespace spvit {

struct SearchConfig {
    double lambda_comp = 30.0;
    double flops_target_fraction = 0.6;  // of F_dense; ignored if an absolute target is set
    double flops_target_abs = 0.0;       // > 0 selects an absolute Mult-Add target
    double lr_gates = 1e-3;
    double lr_weights = 1e-4;
    double weight_decay = 0.01;  // weights only; gate logits are never decayed
    double theta_init = 1.5;
    std::size_t epochs = 15;
    std::size_t batch_size = 8;
    std::uint64_t seed = 42;

    double target(double f_dense) const {
        if (flops_target_abs > 0.0) return flops_target_abs;
        if (flops_target_fraction <= 0.0 || flops_target_fraction > 1.0) {
            throw ConfigError("flops target fraction must be in (0, 1]");
        }
        return flops_target_fraction * f_dense;
    }
};

struct StepStats {
    double loss = 0.0;
    double ce = 0.0;
    double comp = 0.0;
    double expected_flops = 0.0;
};

inline std::vector<BlockGates> draw_gates(ViTModel& m, Rng& rng) {
    std::vector<BlockGates> out;
    out.reserve(m.blocks.size());
    for (Block& b : m.blocks) {
        BlockGates g;
        g.umsa = sample_gates(b.umsa.theta.value, rng);
        g.ffn = sample_ffn_gates(b.ffn.theta.value, rng);
        out.push_back(std::move(g));
    }
    return out;
}

// One optimization step over a batch. Gates are sampled once per step and
// shared across the batch; backward runs through the straight-through
// estimators and the expected-FLOPs relaxation.
inline StepStats search_step(ViTModel& m, const Batch& batch, const CostTable& table,
                             const SearchConfig& cfg, Rng& gate_rng, AdamW& opt_weights,
                             AdamW& opt_gates, const std::vector<Param*>& weights,
                             const std::vector<Param*>& gates) {
    if (batch.size() == 0) throw ContractError("search_step: empty batch");
    for (Param* p : weights) p->zero_grad();
    for (Param* p : gates) p->zero_grad();

    Tape tape;
    std::vector<BlockGates> draws = draw_gates(m, gate_rng);
    std::vector<Var> ces;
    ces.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Var logits = model_forward(tape, m, tokens_from_image(m.cfg, batch.images[i]), ModelMode::Search,
                                   &draws, /*bn_train=*/true);
        ces.push_back(cross_entropy(logits, batch.labels[i]));
    }
    Var ce = scale(sum_vars(ces), 1.0 / static_cast<double>(batch.size()));
    Var eflops = expected_flops(tape, table, m);
    Var comp = complexity_loss(eflops, cfg.target(static_cast<double>(table.f_dense)),
                               static_cast<double>(table.f_dense));
    Var loss = add(ce, scale(comp, cfg.lambda_comp));

    StepStats stats;
    stats.loss = loss.val().data[0];
    stats.ce = ce.val().data[0];
    stats.comp = comp.val().data[0];
    stats.expected_flops = eflops.val().data[0];
    if (!std::isfinite(stats.loss)) {
        std::ostringstream os;
        os << "search_step: non-finite loss (ce=" << stats.ce << ", comp=" << stats.comp << "); gate logits:";
        for (Block& b : m.blocks) {
            os << " umsa[";
            for (double v : b.umsa.theta.value.data) os << " " << v;
            os << " ]";
        }
        throw ContractError(os.str());
    }

    tape.backward(loss);
    opt_weights.step(weights);
    opt_gates.step(gates);
    return stats;
}

// Deterministic gates, one operation per block via the cumulative rule, FFN
// dims thresholded; totals recomputed exactly from the cost table.
inline ArchitectureDescriptor freeze(ViTModel& m, const CostTable& table, std::uint64_t seed,
                                     const std::string& config_hash) {
    ArchitectureDescriptor d;
    for (Block& b : m.blocks) {
        if (b.kind != AttnKind::Unified) throw ContractError("freeze: model is already materialized");
        const std::vector<int> ghat = cumulative_gates(deterministic_gates(b.umsa.theta.value));
        BlockChoice c;
        c.op = UmsaOp::Skip;
        for (std::size_t p = 0; p < ghat.size(); ++p) {
            if (ghat[p] == 1) {
                if (p == ghat.size() - 1) {
                    c.op = UmsaOp::Msa;
                } else {
                    c.op = UmsaOp::Conv;
                    c.kernel = b.umsa.kernels[p];
                }
            }
        }
        c.kept_dims = select_dims(b.ffn.theta.value);
        d.blocks.push_back(std::move(c));
    }
    d.seed = seed;
    d.config_hash = config_hash;
    d.total_flops = descriptor_flops(table, d);
    d.total_params = count_params(m.cfg, d);
    return d;
}

struct SearchResult {
    ArchitectureDescriptor descriptor;
    bool converged = false;
    std::size_t epochs_run = 0;
};

// Trains for at most cfg.epochs epochs and declares architecture convergence
// once the frozen descriptor is unchanged across a full epoch while the gate
// mass has stopped moving (the expected-FLOPs relaxation shifted by less than
// 0.5% of dense over the epoch). Descriptor stability alone would fire on the
// very first epoch, while the logits are still traveling toward the target.
// Emits one CSV line per epoch.
inline SearchResult run_search(ViTModel& m, const SyntheticTask& task, const CostTable& table,
                               const SearchConfig& cfg, const std::string& config_hash,
                               std::ostream& log = std::cout) {
    std::vector<Param*> weights = m.weight_params();
    std::vector<Param*> gates = m.gate_params();
    AdamW opt_weights(cfg.lr_weights, cfg.weight_decay);
    AdamW opt_gates(cfg.lr_gates, 0.0);
    Rng gate_rng(derive_seed(cfg.seed, "gates"));

    const std::size_t steps = std::max<std::size_t>(1, task.n_train / cfg.batch_size);
    SearchResult res;
    ArchitectureDescriptor prev = freeze(m, table, cfg.seed, config_hash);
    double prev_eflops = -1.0;
    log << "epoch,loss,ce,comp,expected_flops,frozen_flops,changed\n";
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(task.n_train, cfg.seed, epoch);
        double sum_loss = 0.0, sum_ce = 0.0, sum_comp = 0.0, last_eflops = 0.0;
        for (std::size_t s = 0; s < steps; ++s) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s * cfg.batch_size),
                                         order.begin() + static_cast<std::ptrdiff_t>((s + 1) * cfg.batch_size));
            const StepStats st = search_step(m, task.batch(Split::Train, idx), table, cfg, gate_rng,
                                             opt_weights, opt_gates, weights, gates);
            sum_loss += st.loss;
            sum_ce += st.ce;
            sum_comp += st.comp;
            last_eflops = st.expected_flops;
        }
        ArchitectureDescriptor cur = freeze(m, table, cfg.seed, config_hash);
        const bool changed = !cur.same_architecture(prev);
        const bool mass_settled =
            prev_eflops >= 0.0 &&
            std::abs(last_eflops - prev_eflops) < 0.005 * static_cast<double>(table.f_dense);
        log << epoch << "," << sum_loss / static_cast<double>(steps) << ","
            << sum_ce / static_cast<double>(steps) << "," << sum_comp / static_cast<double>(steps) << ","
            << last_eflops << "," << cur.total_flops << "," << (changed ? 1 : 0) << std::endl;
        res.descriptor = cur;
        res.epochs_run = epoch + 1;
        if (!changed && mass_settled) {
            res.converged = true;
            break;
        }
        prev = cur;
        prev_eflops = last_eflops;
    }
    return res;
}

}  // namespace spvit
