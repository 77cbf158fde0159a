#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mffm/cascade.hpp"
#include "mffm/core.hpp"

namespace mffm {

struct singularity_error : error {
    using error::error;
};

/// Marginal Bayes-optimal velocity for two independent zero-mean Gaussians
/// with equal covariance: (2t - 1) / (2t^2 - 2t + 1) * z.
inline double marginal_gaussian_velocity(double z, double t) {
    if (t < 0.0 || t > 1.0) throw config_error("marginal_gaussian_velocity: t must be in [0,1]");
    return (2.0 * t - 1.0) / (2.0 * t * t - 2.0 * t + 1.0) * z;
}

/// Conditional Bayes-optimal regressor (g - z) / (1 - t); constant g - eps
/// along the interpolation path, singular at t = 1.
inline Field conditional_bayes_velocity(const Field& g, const Field& z, double t) {
    require_same_shape(g, z, "conditional_bayes_velocity");
    if (t >= 1.0) throw singularity_error("conditional_bayes_velocity: singular at t >= 1");
    Field out(g.channels, g.height, g.width);
    const double inv = 1.0 / (1.0 - t);
    for (size_t i = 0; i < out.values.size(); ++i) out.values[i] = (g.values[i] - z.values[i]) * inv;
    return out;
}

/// Residual-to-target variance ratio 2 (1 - rho) under equal fidelity
/// variances.
inline double residual_variance_ratio(double rho) {
    if (rho < -1.0 || rho > 1.0) throw config_error("residual_variance_ratio: rho must be in [-1, 1]");
    return 2.0 * (1.0 - rho);
}

/// General per-coordinate residual variance
/// sigma_hf^2 + sigma_lf^2 - 2 rho sigma_hf sigma_lf.
inline double residual_variance_general(double sigma_hf, double sigma_lf, double rho) {
    if (sigma_hf < 0.0 || sigma_lf < 0.0) throw config_error("residual_variance_general: sigmas must be >= 0");
    return sigma_hf * sigma_hf + sigma_lf * sigma_lf - 2.0 * rho * sigma_hf * sigma_lf;
}

/// Ensemble-forecast quality summary. Serialized as one CSV row in the
/// column order NRMSE, CRPS, Cov90, Sharp90, spread/RMSE, rho(sigma,|err|),
/// cal-err.
struct UqReport {
    double nrmse = 0.0;
    double crps = 0.0;
    double coverage90 = 0.0;
    double sharpness90 = 0.0;
    double spread_over_rmse = 0.0;
    double corr_sigma_abserr = 0.0;
    double cal_err = 0.0;
};

namespace detail {

/// Linear-interpolated quantile of an ascending sample (R-7 convention).
inline double sorted_quantile(const std::vector<double>& x, double q) {
    const size_t K = x.size();
    const double h = q * static_cast<double>(K - 1);
    const size_t lo = static_cast<size_t>(h);
    if (lo + 1 >= K) return x[K - 1];
    const double frac = h - static_cast<double>(lo);
    return x[lo] + (x[lo + 1] - x[lo]) * frac;
}

}  // namespace detail

/// Empirical-ensemble metrics over matching (ensemble, truth) pairs, all
/// coordinates pooled. Calibration error averages |nominal - observed|
/// over the 10 central-interval levels {0.1, ..., 0.9, 0.95}. Degenerate
/// denominators (zero RMSE, zero variance) are reported as 0.
inline UqReport uq_metrics(const std::vector<EnsemblePrediction>& ensembles, const std::vector<Field>& truths) {
    if (ensembles.size() != truths.size() || ensembles.empty())
        throw dimension_error("uq_metrics: ensembles/truths size mismatch or empty");
    for (const auto& e : ensembles)
        if (e.members.size() < 2) throw dimension_error("uq_metrics: need K >= 2 members per ensemble");

    static const std::vector<double> kLevels = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95};
    std::vector<double> covered(kLevels.size(), 0.0);
    double crps_sum = 0.0, sharp_sum = 0.0, spread_sum = 0.0, se_sum = 0.0;
    double nrmse_sum = 0.0;
    size_t n_coords_total = 0;
    std::vector<double> sig_all, err_all;

    std::vector<double> members;
    for (size_t s = 0; s < ensembles.size(); ++s) {
        const EnsemblePrediction& ens = ensembles[s];
        const Field& truth = truths[s];
        require_same_shape(ens.mean, truth, "uq_metrics");
        const size_t K = ens.members.size();
        const size_t n = truth.size();
        members.resize(K);
        nrmse_sum += nrmse(ens.mean, truth);
        for (size_t j = 0; j < n; ++j) {
            for (size_t k = 0; k < K; ++k) members[k] = ens.members[k].values[j];
            std::sort(members.begin(), members.end());
            const double y = truth.values[j];

            double t1 = 0.0, t2 = 0.0;
            for (size_t k = 0; k < K; ++k) {
                t1 += std::abs(members[k] - y);
                t2 += (2.0 * static_cast<double>(k) - static_cast<double>(K) + 1.0) * members[k];
            }
            crps_sum += t1 / K - t2 / (static_cast<double>(K) * K);

            for (size_t q = 0; q < kLevels.size(); ++q) {
                const double a = (1.0 - kLevels[q]) / 2.0;
                const double lo = detail::sorted_quantile(members, a);
                const double hi = detail::sorted_quantile(members, 1.0 - a);
                if (y >= lo && y <= hi) covered[q] += 1.0;
                if (kLevels[q] == 0.9) sharp_sum += hi - lo;
            }

            const double err = ens.mean.values[j] - y;
            se_sum += err * err;
            spread_sum += ens.std_dev.values[j];
            sig_all.push_back(ens.std_dev.values[j]);
            err_all.push_back(std::abs(err));
        }
        n_coords_total += n;
    }

    UqReport r;
    r.nrmse = nrmse_sum / static_cast<double>(ensembles.size());
    r.crps = crps_sum / static_cast<double>(n_coords_total);
    const size_t i90 = 8;  // index of 0.9 in kLevels
    r.coverage90 = covered[i90] / static_cast<double>(n_coords_total);
    r.sharpness90 = sharp_sum / static_cast<double>(n_coords_total);
    const double rmse = std::sqrt(se_sum / static_cast<double>(n_coords_total));
    const double mean_spread = spread_sum / static_cast<double>(n_coords_total);
    r.spread_over_rmse = (rmse == 0.0) ? 0.0 : mean_spread / rmse;
    r.corr_sigma_abserr = pearson_correlation(sig_all.data(), err_all.data(), sig_all.size());
    double cal = 0.0;
    for (size_t q = 0; q < kLevels.size(); ++q)
        cal += std::abs(kLevels[q] - covered[q] / static_cast<double>(n_coords_total));
    r.cal_err = cal / static_cast<double>(kLevels.size());
    return r;
}

}  // namespace mffm
