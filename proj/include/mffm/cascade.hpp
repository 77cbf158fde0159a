#pragma once

#include <atomic>
#include <cmath>
#include <vector>

#include "mffm/core.hpp"
#include "mffm/net.hpp"
#include "mffm/residual.hpp"
#include "mffm/rng.hpp"
#include "mffm/thread_pool.hpp"

namespace mffm {

/// The trained artifact: per-level velocity networks, residual statistics
/// and source construction over a grid hierarchy. field_mode marks the
/// FM-field ablation, whose networks emit the field itself instead of a
/// residual correction.
struct CascadeModel {
    GridHierarchy hierarchy;
    std::vector<NetParams> levels;
    std::vector<ResidualStats> stats;
    std::vector<SourceSpec> sources;
    bool field_mode = false;

    int n_levels() const { return static_cast<int>(levels.size()); }

    void validate() const {
        if (static_cast<int>(levels.size()) != hierarchy.levels())
            throw dimension_error("CascadeModel: need one network per hierarchy level pair");
        if (stats.size() != levels.size() || sources.size() != levels.size())
            throw dimension_error("CascadeModel: stats/sources count mismatch");
    }
};

/// One-step deterministic cascade: at each level the residual state is
/// zero, the velocity is evaluated at t = 1/2, and the prolonged state is
/// corrected additively. Exactly L network evaluations.
inline Field predict_deterministic(const CascadeModel& model, const Field& u0,
                                   std::atomic<long>* eval_counter = nullptr,
                                   std::vector<Field>* intermediates = nullptr) {
    model.validate();
    if (u0.height != model.hierarchy.coarsest())
        throw dimension_error("predict_deterministic: input is not at the coarsest resolution");
    Field u = u0;
    for (int l = 0; l < model.n_levels(); ++l) {
        Field lifted = prolong_bilinear(u, model.hierarchy.resolutions[l + 1]);
        Field zero(lifted.channels, lifted.height, lifted.width);
        Field v = net_forward(model.levels[l], zero, 0.5, lifted, eval_counter);
        if (model.field_mode) {
            u = std::move(v);
        } else {
            u = std::move(lifted);
            for (size_t i = 0; i < u.values.size(); ++i) u.values[i] += v.values[i];
        }
        if (intermediates) intermediates->push_back(u);
    }
    return u;
}

/// Multi-evaluation rollout used by the NFE scan. nfe == 1 is the midpoint
/// operating point the end-to-end stage optimizes (identical to
/// predict_deterministic); nfe >= 2 integrates the inference ODE from zero
/// with left-endpoint Euler steps at t in {0, 1/nfe, ...}.
inline Field rollout_euler(const CascadeModel& model, const Field& u0, int nfe_per_level,
                           std::atomic<long>* eval_counter = nullptr) {
    if (nfe_per_level < 1) throw config_error("rollout_euler: nfe_per_level must be >= 1");
    if (nfe_per_level == 1) return predict_deterministic(model, u0, eval_counter);
    model.validate();
    if (u0.height != model.hierarchy.coarsest())
        throw dimension_error("rollout_euler: input is not at the coarsest resolution");
    Field u = u0;
    const double dt = 1.0 / nfe_per_level;
    for (int l = 0; l < model.n_levels(); ++l) {
        Field lifted = prolong_bilinear(u, model.hierarchy.resolutions[l + 1]);
        Field state(lifted.channels, lifted.height, lifted.width);
        for (int k = 0; k < nfe_per_level; ++k) {
            Field v = net_forward(model.levels[l], state, k * dt, lifted, eval_counter);
            for (size_t i = 0; i < state.values.size(); ++i) state.values[i] += dt * v.values[i];
        }
        if (model.field_mode) {
            u = std::move(state);
        } else {
            u = std::move(lifted);
            for (size_t i = 0; i < u.values.size(); ++i) u.values[i] += state.values[i];
        }
    }
    return u;
}

/// K stochastic cascade rollouts with per-coordinate summary statistics.
struct EnsemblePrediction {
    std::vector<Field> members;
    Field mean;
    Field std_dev;   // per-coordinate population standard deviation
    double spread = 0.0;  // mean over coordinates of std_dev
};

/// Single stochastic rollout: each level starts from a source draw and
/// applies nfe velocity evaluations (1 = midpoint step, 2 = two half
/// steps at t in {0, 1/2}).
inline Field rollout_stochastic(const CascadeModel& model, const Field& u0, RngStream& rng, int nfe = 1,
                                std::atomic<long>* eval_counter = nullptr) {
    model.validate();
    if (nfe < 1 || nfe > 2) throw config_error("rollout_stochastic: nfe must be 1 or 2");
    if (u0.height != model.hierarchy.coarsest())
        throw dimension_error("rollout_stochastic: input is not at the coarsest resolution");
    Field u = u0;
    for (int l = 0; l < model.n_levels(); ++l) {
        Field lifted = prolong_bilinear(u, model.hierarchy.resolutions[l + 1]);
        Field state = sample_source(model.stats[l], model.sources[l], rng);
        if (nfe == 1) {
            Field v = net_forward(model.levels[l], state, 0.5, lifted, eval_counter);
            for (size_t i = 0; i < state.values.size(); ++i) state.values[i] += v.values[i];
        } else {
            Field v = net_forward(model.levels[l], state, 0.0, lifted, eval_counter);
            for (size_t i = 0; i < state.values.size(); ++i) state.values[i] += 0.5 * v.values[i];
            v = net_forward(model.levels[l], state, 0.5, lifted, eval_counter);
            for (size_t i = 0; i < state.values.size(); ++i) state.values[i] += 0.5 * v.values[i];
        }
        if (model.field_mode) {
            u = std::move(state);
        } else {
            u = std::move(lifted);
            for (size_t i = 0; i < u.values.size(); ++i) u.values[i] += state.values[i];
        }
    }
    return u;
}

/// Draws K ensemble members with per-member random sub-streams derived
/// from (seed, member index); members may be computed in parallel.
inline EnsemblePrediction sample_stochastic_ensemble(const CascadeModel& model, const Field& u0, int K,
                                                     uint64_t seed, int nfe = 1, int threads = 1,
                                                     std::atomic<long>* eval_counter = nullptr) {
    if (K < 1) throw config_error("sample_stochastic_ensemble: K must be >= 1");
    EnsemblePrediction ens;
    ens.members.resize(K);
    parallel_chunks(static_cast<size_t>(K), threads, [&](int, size_t begin, size_t end) {
        for (size_t k = begin; k < end; ++k) {
            RngStream rng(derive_seed(seed, "ensemble.member", k));
            ens.members[k] = rollout_stochastic(model, u0, rng, nfe, eval_counter);
        }
    });

    const Field& first = ens.members.front();
    ens.mean = Field(first.channels, first.height, first.width);
    ens.std_dev = Field(first.channels, first.height, first.width);
    const double inv_k = 1.0 / K;
    for (const Field& m : ens.members)
        for (size_t i = 0; i < m.values.size(); ++i) ens.mean.values[i] += m.values[i];
    for (double& v : ens.mean.values) v *= inv_k;
    for (const Field& m : ens.members)
        for (size_t i = 0; i < m.values.size(); ++i) {
            const double d = m.values[i] - ens.mean.values[i];
            ens.std_dev.values[i] += d * d;
        }
    double spread = 0.0;
    for (double& v : ens.std_dev.values) {
        v = std::sqrt(v * inv_k);
        spread += v;
    }
    ens.spread = spread / ens.std_dev.values.size();
    return ens;
}

struct NfeScanRow {
    int nfe_per_level = 0;
    long total_nfe = 0;  // measured network evaluations per query
    double nrmse = 0.0;
};

/// Evaluates rollout_euler across nfe values and reports the mean test
/// NRMSE per setting; total NFE is counted, not assumed.
inline std::vector<NfeScanRow> nfe_scan(const CascadeModel& model, const std::vector<Field>& inputs,
                                        const std::vector<Field>& truths,
                                        const std::vector<int>& nfe_list = {1, 2, 5, 10, 50},
                                        int threads = 1) {
    if (inputs.size() != truths.size() || inputs.empty())
        throw dimension_error("nfe_scan: inputs/truths size mismatch or empty");
    std::vector<NfeScanRow> rows;
    for (int nfe : nfe_list) {
        std::atomic<long> counter{0};
        std::vector<double> errs(inputs.size());
        parallel_chunks(inputs.size(), threads, [&](int, size_t begin, size_t end) {
            for (size_t i = begin; i < end; ++i)
                errs[i] = nrmse(rollout_euler(model, inputs[i], nfe, &counter), truths[i]);
        });
        double mean_err = 0.0;
        for (double e : errs) mean_err += e;
        rows.push_back({nfe, counter.load() / static_cast<long>(inputs.size()),
                        mean_err / static_cast<double>(inputs.size())});
    }
    return rows;
}

}  // namespace mffm
