#pragma once

#include <vector>

#include "mffm/burgers.hpp"
#include "mffm/core.hpp"
#include "mffm/darcy.hpp"
#include "mffm/grf.hpp"
#include "mffm/rng.hpp"
#include "mffm/thread_pool.hpp"

namespace mffm {

/// Disjoint train/validation/test index lists covering all samples.
struct DatasetSplit {
    std::vector<int> train, val, test;

    /// 4/1/1 ratio split in sample order (train first).
    static DatasetSplit ratio_4_1_1(int n_samples) {
        DatasetSplit s;
        const int n_hold = n_samples / 6;
        const int n_train = n_samples - 2 * n_hold;
        for (int i = 0; i < n_train; ++i) s.train.push_back(i);
        for (int i = n_train; i < n_train + n_hold; ++i) s.val.push_back(i);
        for (int i = n_train + n_hold; i < n_samples; ++i) s.test.push_back(i);
        return s;
    }
};

/// Paired multi-resolution Darcy fields: one lognormal permeability
/// realization restricted to every level, solved separately per grid.
struct DarcySample {
    std::vector<Field> coefficient;  // per hierarchy level
    std::vector<Field> solution;     // per hierarchy level
};

/// Space-time Burgers field per level, shape 1 x s x s at resolution s
/// (rows = time snapshots, columns = space; row 0 is the initial condition).
struct BurgersSample {
    std::vector<Field> spacetime;
};

struct DarcyDataset {
    std::vector<DarcySample> samples;
    DatasetSplit split;
};

struct BurgersDataset {
    std::vector<BurgersSample> samples;
    DatasetSplit split;
};

/// Per-sample random streams are derived from (seed, sample index), so the
/// result is identical regardless of execution order or parallelism.
inline DarcyDataset generate_darcy_dataset(int n_samples, const GridHierarchy& hierarchy, const GrfSpec& grf,
                                           uint64_t seed, double forcing = 1.0, int threads = 1) {
    if (grf.resolution != hierarchy.finest())
        throw config_error("generate_darcy_dataset: GRF resolution must match the finest hierarchy level");
    DarcyDataset ds;
    ds.samples.resize(n_samples);
    ds.split = DatasetSplit::ratio_4_1_1(n_samples);

    std::vector<std::string> failures(n_samples);
    parallel_chunks(static_cast<size_t>(n_samples), threads, [&](int, size_t begin, size_t end) {
        for (size_t i = begin; i < end; ++i) {
            try {
                GrfSpec local = grf;
                local.seed = derive_seed(seed, "darcy.grf", i);
                Field g = sample_grf_2d(local);
                Field a_fine = g;
                for (double& v : a_fine.values) v = std::exp(v);
                DarcySample& s = ds.samples[i];
                for (int res : hierarchy.resolutions) {
                    Field a = restrict_average(a_fine, res);
                    s.solution.push_back(solve_darcy_fd(a, forcing));
                    s.coefficient.push_back(std::move(a));
                }
            } catch (const std::exception& e) {
                failures[i] = e.what();
            }
        }
    });
    for (int i = 0; i < n_samples; ++i)
        if (!failures[i].empty())
            throw solver_error("generate_darcy_dataset: sample " + std::to_string(i) + " failed: " + failures[i],
                               0.0);
    return ds;
}

/// One continuous 1-D GRF initial condition per sample, subsampled (not
/// averaged) to each resolution and solved at that resolution.
inline BurgersDataset generate_burgers_dataset(int n_samples, const GridHierarchy& hierarchy,
                                               const GrfSpec& grf_1d, double viscosity, double horizon,
                                               uint64_t seed, int threads = 1) {
    if (grf_1d.resolution != hierarchy.finest())
        throw config_error("generate_burgers_dataset: GRF resolution must match the finest hierarchy level");
    BurgersDataset ds;
    ds.samples.resize(n_samples);
    ds.split = DatasetSplit::ratio_4_1_1(n_samples);

    std::vector<std::string> failures(n_samples);
    parallel_chunks(static_cast<size_t>(n_samples), threads, [&](int, size_t begin, size_t end) {
        for (size_t i = begin; i < end; ++i) {
            try {
                GrfSpec local = grf_1d;
                local.seed = derive_seed(seed, "burgers.grf", i);
                std::vector<double> ic_fine = sample_grf_1d(local);
                BurgersSample& s = ds.samples[i];
                for (int res : hierarchy.resolutions) {
                    const int stride = hierarchy.finest() / res;
                    std::vector<double> ic(res);
                    for (int j = 0; j < res; ++j) ic[j] = ic_fine[static_cast<size_t>(j) * stride];
                    s.spacetime.push_back(solve_burgers(ic, viscosity, horizon));
                }
            } catch (const std::exception& e) {
                failures[i] = e.what();
            }
        }
    });
    for (int i = 0; i < n_samples; ++i)
        if (!failures[i].empty())
            throw integration_error(
                "generate_burgers_dataset: sample " + std::to_string(i) + " failed: " + failures[i], 0.0);
    return ds;
}

/// Multi-fidelity premise check: correlation between the finest field
/// restricted to the coarsest resolution and the coarse solver output.
inline double multi_fidelity_correlation(const Field& finest, const Field& coarsest) {
    Field restricted = restrict_average(finest, coarsest.height);
    require_same_shape(restricted, coarsest, "multi_fidelity_correlation");
    return pearson_correlation(restricted.values.data(), coarsest.values.data(), restricted.values.size());
}

/// Level-major in-memory dataset consumed by training and inference.
struct Dataset {
    GridHierarchy hierarchy;
    int channels = 1;
    std::vector<std::vector<Field>> levels;  // levels[l][sample]
    DatasetSplit split;
    std::string hash_hex;  // array-payload hash when loaded from disk

    int n_samples() const { return levels.empty() ? 0 : static_cast<int>(levels[0].size()); }

    static Dataset from_darcy(const GridHierarchy& h, DarcyDataset&& d) {
        Dataset ds;
        ds.hierarchy = h;
        ds.split = std::move(d.split);
        ds.levels.resize(h.resolutions.size());
        for (size_t l = 0; l < h.resolutions.size(); ++l) {
            ds.levels[l].reserve(d.samples.size());
            for (auto& s : d.samples) ds.levels[l].push_back(std::move(s.solution[l]));
        }
        return ds;
    }

    static Dataset from_burgers(const GridHierarchy& h, BurgersDataset&& d) {
        Dataset ds;
        ds.hierarchy = h;
        ds.split = std::move(d.split);
        ds.levels.resize(h.resolutions.size());
        for (size_t l = 0; l < h.resolutions.size(); ++l) {
            ds.levels[l].reserve(d.samples.size());
            for (auto& s : d.samples) ds.levels[l].push_back(std::move(s.spacetime[l]));
        }
        return ds;
    }
};

}  // namespace mffm
