#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace mffm {

/// Base class for all library errors.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Incompatible grid sizes or array shapes.
struct dimension_error : error {
    using error::error;
};

/// Reference field has zero norm, relative error undefined.
struct degenerate_reference_error : error {
    using error::error;
};

/// Iterative solver failed to reach its tolerance.
struct solver_error : error {
    solver_error(const std::string& msg, double residual)
        : error(msg), final_residual(residual) {}
    double final_residual;
};

/// Malformed on-disk data.
struct format_error : error {
    using error::error;
};

/// Invalid configuration value.
struct config_error : error {
    using error::error;
};

/// Dense C x H x W array of real values, row-major (channel, row, column).
/// Grids in this library are square (height == width); the struct keeps
/// both extents so shape mismatches fail loudly instead of silently.
struct Field {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> values;

    Field() = default;
    Field(int c, int h, int w) : channels(c), height(h), width(w), values(static_cast<size_t>(c) * h * w, 0.0) {
        if (c <= 0 || h <= 0 || w <= 0) throw dimension_error("Field: extents must be positive");
    }

    static Field constant(int c, int h, int w, double value) {
        Field f(c, h, w);
        std::fill(f.values.begin(), f.values.end(), value);
        return f;
    }

    size_t size() const { return values.size(); }
    size_t plane() const { return static_cast<size_t>(height) * width; }

    double& at(int c, int y, int x) { return values[(static_cast<size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return values[(static_cast<size_t>(c) * height + y) * width + x]; }

    double* channel(int c) { return values.data() + static_cast<size_t>(c) * plane(); }
    const double* channel(int c) const { return values.data() + static_cast<size_t>(c) * plane(); }

    bool same_shape(const Field& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }

    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void require_same_shape(const Field& a, const Field& b, const char* where) {
    if (!a.same_shape(b))
        throw dimension_error(std::string(where) + ": shape mismatch " + std::to_string(a.channels) + "x" +
                              std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                              std::to_string(b.channels) + "x" + std::to_string(b.height) + "x" +
                              std::to_string(b.width));
}

inline void require_square(const Field& f, const char* where) {
    if (f.height != f.width)
        throw dimension_error(std::string(where) + ": field must be square, got " + std::to_string(f.height) + "x" +
                              std::to_string(f.width));
}

/// Nested square resolutions n_0 < n_1 < ... < n_L. Data hierarchies use
/// strict adjacent doubling; the single-shot model variant jumps from the
/// coarsest to the finest grid directly, so the constructor admits any
/// power-of-two adjacent ratio and callers that generate data check
/// strictly_doubling().
struct GridHierarchy {
    std::vector<int> resolutions;

    GridHierarchy() = default;
    explicit GridHierarchy(std::vector<int> res) : resolutions(std::move(res)) {
        if (resolutions.size() < 2) throw dimension_error("GridHierarchy: need at least two resolutions");
        for (size_t i = 0; i + 1 < resolutions.size(); ++i) {
            const int a = resolutions[i], b = resolutions[i + 1];
            if (a <= 0 || b <= a || b % a != 0 || ((b / a) & (b / a - 1)) != 0)
                throw dimension_error("GridHierarchy: adjacent resolutions must grow by powers of two");
        }
    }

    bool strictly_doubling() const {
        for (size_t i = 0; i + 1 < resolutions.size(); ++i)
            if (resolutions[i + 1] != 2 * resolutions[i]) return false;
        return true;
    }

    int levels() const { return static_cast<int>(resolutions.size()) - 1; }
    int coarsest() const { return resolutions.front(); }
    int finest() const { return resolutions.back(); }
};

/// Align-corners bilinear interpolation to a finer (or equal) square grid.
/// Corner samples map to corner samples, so constants and bilinear
/// functions are reproduced exactly; target == source returns a copy.
inline Field prolong_bilinear(const Field& f, int target_resolution) {
    require_square(f, "prolong_bilinear");
    const int n = f.height;
    if (target_resolution < n)
        throw dimension_error("prolong_bilinear: target resolution " + std::to_string(target_resolution) +
                              " below source " + std::to_string(n));
    if (target_resolution == n) return f;

    Field out(f.channels, target_resolution, target_resolution);
    const double scale = (n == 1) ? 0.0 : static_cast<double>(n - 1) / (target_resolution - 1);

    // Precompute 1-D interpolation stencils shared by rows and columns.
    std::vector<int> lo(target_resolution);
    std::vector<double> w(target_resolution);
    for (int j = 0; j < target_resolution; ++j) {
        double pos = j * scale;
        int l = static_cast<int>(pos);
        if (l >= n - 1) l = n - 2 >= 0 ? n - 2 : 0;
        lo[j] = l;
        w[j] = pos - l;
    }
    if (n == 1)
        for (int j = 0; j < target_resolution; ++j) lo[j] = 0, w[j] = 0.0;

    for (int c = 0; c < f.channels; ++c) {
        const double* src = f.channel(c);
        double* dst = out.channel(c);
        for (int y = 0; y < target_resolution; ++y) {
            const int y0 = lo[y];
            const int y1 = (n == 1) ? 0 : y0 + 1;
            const double wy = w[y];
            const double* r0 = src + static_cast<size_t>(y0) * n;
            const double* r1 = src + static_cast<size_t>(y1) * n;
            for (int x = 0; x < target_resolution; ++x) {
                const int x0 = lo[x];
                const int x1 = (n == 1) ? 0 : x0 + 1;
                const double wx = w[x];
                const double top = r0[x0] + wx * (r0[x1] - r0[x0]);
                const double bot = r1[x0] + wx * (r1[x1] - r1[x0]);
                dst[static_cast<size_t>(y) * target_resolution + x] = top + wy * (bot - top);
            }
        }
    }
    return out;
}

/// Adjoint of prolong_bilinear: scatters a fine-grid field back to the
/// coarse grid with the transposed interpolation weights. Used by
/// reverse-mode differentiation through the cascade.
inline Field prolong_bilinear_adjoint(const Field& g, int source_resolution) {
    require_square(g, "prolong_bilinear_adjoint");
    const int nt = g.height;
    const int n = source_resolution;
    if (nt < n) throw dimension_error("prolong_bilinear_adjoint: target below source resolution");
    if (nt == n) return g;

    Field out(g.channels, n, n);
    const double scale = (n == 1) ? 0.0 : static_cast<double>(n - 1) / (nt - 1);
    std::vector<int> lo(nt);
    std::vector<double> w(nt);
    for (int j = 0; j < nt; ++j) {
        double pos = j * scale;
        int l = static_cast<int>(pos);
        if (l >= n - 1) l = n - 2 >= 0 ? n - 2 : 0;
        lo[j] = l;
        w[j] = (n == 1) ? 0.0 : pos - l;
    }

    for (int c = 0; c < g.channels; ++c) {
        const double* src = g.channel(c);
        double* dst = out.channel(c);
        for (int y = 0; y < nt; ++y) {
            const int y0 = lo[y], y1 = (n == 1) ? 0 : lo[y] + 1;
            const double wy = w[y];
            for (int x = 0; x < nt; ++x) {
                const int x0 = lo[x], x1 = (n == 1) ? 0 : lo[x] + 1;
                const double wx = w[x];
                const double v = src[static_cast<size_t>(y) * nt + x];
                dst[static_cast<size_t>(y0) * n + x0] += (1 - wy) * (1 - wx) * v;
                dst[static_cast<size_t>(y0) * n + x1] += (1 - wy) * wx * v;
                dst[static_cast<size_t>(y1) * n + x0] += wy * (1 - wx) * v;
                dst[static_cast<size_t>(y1) * n + x1] += wy * wx * v;
            }
        }
    }
    return out;
}

/// Non-overlapping block (cell) average per channel down to a coarser grid.
/// Conservative: preserves the global mean of each channel.
inline Field restrict_average(const Field& f, int target_resolution) {
    require_square(f, "restrict_average");
    const int n = f.height;
    if (target_resolution <= 0 || n % target_resolution != 0)
        throw dimension_error("restrict_average: source " + std::to_string(n) + " not divisible by target " +
                              std::to_string(target_resolution));
    const int b = n / target_resolution;
    if (b == 1) return f;

    Field out(f.channels, target_resolution, target_resolution);
    const double inv = 1.0 / (static_cast<double>(b) * b);
    for (int c = 0; c < f.channels; ++c) {
        const double* src = f.channel(c);
        double* dst = out.channel(c);
        for (int y = 0; y < target_resolution; ++y)
            for (int x = 0; x < target_resolution; ++x) {
                double s = 0.0;
                for (int dy = 0; dy < b; ++dy) {
                    const double* row = src + (static_cast<size_t>(y) * b + dy) * n + static_cast<size_t>(x) * b;
                    for (int dx = 0; dx < b; ++dx) s += row[dx];
                }
                dst[static_cast<size_t>(y) * target_resolution + x] = s * inv;
            }
    }
    return out;
}

inline double l2_norm(const Field& f) {
    double s = 0.0;
    for (double v : f.values) s += v * v;
    return std::sqrt(s);
}

inline double l2_diff(const Field& a, const Field& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.values.size(); ++i) {
        double d = a.values[i] - b.values[i];
        s += d * d;
    }
    return std::sqrt(s);
}

/// Global normalized RMSE: ||prediction - truth||_2 / ||truth||_2 over all
/// channels and coordinates jointly.
inline double nrmse(const Field& prediction, const Field& truth) {
    require_same_shape(prediction, truth, "nrmse");
    const double denom = l2_norm(truth);
    if (denom == 0.0) throw degenerate_reference_error("nrmse: reference field has zero norm");
    return l2_diff(prediction, truth) / denom;
}

/// Pearson correlation of two equally sized samples; 0 when either side
/// is degenerate (zero variance).
inline double pearson_correlation(const double* a, const double* b, size_t n) {
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

/// Relative L2 loss ||prediction - truth||_2 / (||truth||_2 + eps);
/// differs from nrmse only by the eps guard in the denominator.
inline double relative_l2_loss(const Field& prediction, const Field& truth, double eps) {
    require_same_shape(prediction, truth, "relative_l2_loss");
    if (eps <= 0.0) throw config_error("relative_l2_loss: eps must be positive");
    return l2_diff(prediction, truth) / (l2_norm(truth) + eps);
}

}  // namespace mffm
