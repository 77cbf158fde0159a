#pragma once

#include <cmath>
#include <vector>

#include "mffm/core.hpp"
#include "mffm/rng.hpp"

namespace mffm {

/// Per-coordinate residual variance for one cascade level, floored so the
/// source scale never collapses to zero.
struct ResidualStats {
    static constexpr double kFloor = 1e-8;

    int level = 0;
    int channels = 0, height = 0, width = 0;
    std::vector<double> sigma2;  // one value per channel x row x column

    bool matches(const Field& f) const {
        return channels == f.channels && height == f.height && width == f.width;
    }
};

enum class SourceKind { calibrated_blur, diagonal, iid_matched };

/// Source-construction parameters. tau (blur standard deviation, pixels)
/// only applies to the calibrated_blur kind.
struct SourceSpec {
    SourceKind kind = SourceKind::calibrated_blur;
    double tau = 1.5;
    double eps_num = 1e-8;
};

inline SourceKind source_kind_from_string(const std::string& s) {
    if (s == "calibrated_blur") return SourceKind::calibrated_blur;
    if (s == "diagonal") return SourceKind::diagonal;
    if (s == "iid_matched") return SourceKind::iid_matched;
    throw config_error("unknown source kind '" + s + "'");
}

inline std::string to_string(SourceKind k) {
    switch (k) {
        case SourceKind::calibrated_blur: return "calibrated_blur";
        case SourceKind::diagonal: return "diagonal";
        case SourceKind::iid_matched: return "iid_matched";
    }
    return "?";
}

/// Residual of a target field against the prolonged conditioning field:
/// target - I(conditioning).
inline Field level_residual(const Field& target, const Field& conditioning) {
    Field prolonged = prolong_bilinear(conditioning, target.height);
    require_same_shape(target, prolonged, "level_residual");
    Field out = target;
    for (size_t i = 0; i < out.values.size(); ++i) out.values[i] -= prolonged.values[i];
    return out;
}

/// Per-coordinate population variance about the per-coordinate mean,
/// floored at ResidualStats::kFloor.
inline ResidualStats compute_residual_stats(const std::vector<Field>& residuals, int level = 0) {
    if (residuals.empty()) throw dimension_error("compute_residual_stats: empty residual list");
    const Field& first = residuals.front();
    for (const Field& r : residuals) require_same_shape(first, r, "compute_residual_stats");

    ResidualStats stats;
    stats.level = level;
    stats.channels = first.channels;
    stats.height = first.height;
    stats.width = first.width;
    const size_t n = first.size();
    const double inv = 1.0 / residuals.size();

    std::vector<double> mean(n, 0.0);
    for (const Field& r : residuals)
        for (size_t i = 0; i < n; ++i) mean[i] += r.values[i];
    for (size_t i = 0; i < n; ++i) mean[i] *= inv;

    stats.sigma2.assign(n, 0.0);
    for (const Field& r : residuals)
        for (size_t i = 0; i < n; ++i) {
            const double d = r.values[i] - mean[i];
            stats.sigma2[i] += d * d;
        }
    for (size_t i = 0; i < n; ++i) stats.sigma2[i] = std::max(stats.sigma2[i] * inv, ResidualStats::kFloor);
    return stats;
}

/// Depthwise Gaussian blur: per-channel 2-D convolution with a normalized
/// kernel of standard deviation tau, truncated at radius ceil(3 tau),
/// reflect padding. Separable implementation.
inline Field gaussian_blur_depthwise(const Field& f, double tau) {
    if (tau <= 0.0) throw config_error("gaussian_blur_depthwise: tau must be positive");
    const int radius = static_cast<int>(std::ceil(3.0 * tau));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (tau * tau));
        sum += k[i + radius];
    }
    for (double& v : k) v /= sum;

    auto reflect = [](int i, int n) {
        // reflect-101: index -1 maps to 1, index n maps to n-2
        while (i < 0 || i >= n) {
            if (i < 0) i = -i;
            if (i >= n) i = 2 * (n - 1) - i;
        }
        return i;
    };

    const int H = f.height, W = f.width;
    Field tmp(f.channels, H, W), out(f.channels, H, W);
    for (int c = 0; c < f.channels; ++c) {
        const double* src = f.channel(c);
        double* mid = tmp.channel(c);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i) s += k[i + radius] * src[static_cast<size_t>(y) * W + reflect(x + i, W)];
                mid[static_cast<size_t>(y) * W + x] = s;
            }
        double* dst = out.channel(c);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i) s += k[i + radius] * mid[static_cast<size_t>(reflect(y + i, H)) * W + x];
                dst[static_cast<size_t>(y) * W + x] = s;
            }
    }
    return out;
}

/// Draws one source sample. calibrated_blur: iid normal noise, depthwise
/// Gaussian blur, samplewise standardization over all coordinates jointly,
/// then per-coordinate residual-standard-deviation scaling. diagonal drops
/// the blur; iid_matched uses isotropic noise of matched average variance.
/// The draw depends only on (stats, spec, rng) - never on the conditioning
/// field.
inline Field sample_source(const ResidualStats& stats, const SourceSpec& spec, RngStream& rng) {
    Field z(stats.channels, stats.height, stats.width);
    for (double& v : z.values) v = rng.normal();

    switch (spec.kind) {
        case SourceKind::calibrated_blur: {
            if (spec.tau <= 0.0) throw config_error("sample_source: calibrated_blur requires tau > 0");
            Field zb = gaussian_blur_depthwise(z, spec.tau);
            double mean = 0.0;
            for (double v : zb.values) mean += v;
            mean /= zb.values.size();
            double var = 0.0;
            for (double v : zb.values) var += (v - mean) * (v - mean);
            const double std_dev = std::sqrt(var / zb.values.size());
            const double inv = 1.0 / (std_dev + spec.eps_num);
            for (size_t i = 0; i < zb.values.size(); ++i) zb.values[i] *= inv * std::sqrt(stats.sigma2[i]);
            return zb;
        }
        case SourceKind::diagonal: {
            for (size_t i = 0; i < z.values.size(); ++i) z.values[i] *= std::sqrt(stats.sigma2[i]);
            return z;
        }
        case SourceKind::iid_matched: {
            double mean_var = 0.0;
            for (double s2 : stats.sigma2) mean_var += s2;
            mean_var /= stats.sigma2.size();
            const double sigma_bar = std::sqrt(mean_var);
            for (double& v : z.values) v *= sigma_bar;
            return z;
        }
    }
    throw config_error("sample_source: unknown kind");
}

/// Monte-Carlo estimate of the transport scale E||delta - eps||^2 with
/// delta drawn uniformly from the residual list and eps from the source.
inline double transport_scale_estimate(const std::vector<Field>& residuals, const ResidualStats& stats,
                                       const SourceSpec& spec, int n_draws, RngStream& rng) {
    if (residuals.empty()) throw dimension_error("transport_scale_estimate: empty residual list");
    double acc = 0.0;
    for (int d = 0; d < n_draws; ++d) {
        const Field& delta = residuals[rng.integer(residuals.size())];
        Field eps = sample_source(stats, spec, rng);
        double s = 0.0;
        for (size_t i = 0; i < delta.values.size(); ++i) {
            const double diff = delta.values[i] - eps.values[i];
            s += diff * diff;
        }
        acc += s;
    }
    return acc / n_draws;
}

}  // namespace mffm
