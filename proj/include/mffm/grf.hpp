#pragma once

#include <complex>
#include <vector>

#include "mffm/core.hpp"
#include "mffm/rng.hpp"

namespace mffm {

namespace detail {

/// In-place complex FFT, radix-2 iterative for power-of-two sizes with a
/// dense O(n^2) DFT fallback otherwise. Unnormalized forward transform;
/// inverse = conj(FFT(conj(x))) / n.
inline void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
    const size_t n = a.size();
    if (n <= 1) return;
    if ((n & (n - 1)) != 0) {
        std::vector<std::complex<double>> out(n);
        const double sign = inverse ? 2.0 : -2.0;
        for (size_t k = 0; k < n; ++k) {
            std::complex<double> s = 0.0;
            for (size_t j = 0; j < n; ++j) {
                double ang = sign * M_PI * static_cast<double>(k * j % n) / static_cast<double>(n);
                s += a[j] * std::complex<double>(std::cos(ang), std::sin(ang));
            }
            out[k] = s;
        }
        a = std::move(out);
        if (inverse)
            for (auto& v : a) v /= static_cast<double>(n);
        return;
    }
    // Bit-reversal permutation.
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = (inverse ? 2.0 : -2.0) * M_PI / static_cast<double>(len);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w = 1.0;
            for (size_t j = 0; j < len / 2; ++j) {
                auto u = a[i + j];
                auto v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
    if (inverse)
        for (auto& v : a) v /= static_cast<double>(n);
}

/// 2-D transform of an n x n complex grid (rows then columns).
inline void fft2_inplace(std::vector<std::complex<double>>& a, int n, bool inverse) {
    std::vector<std::complex<double>> line(n);
    for (int r = 0; r < n; ++r) {
        std::copy(a.begin() + static_cast<size_t>(r) * n, a.begin() + static_cast<size_t>(r + 1) * n, line.begin());
        fft_inplace(line, inverse);
        std::copy(line.begin(), line.end(), a.begin() + static_cast<size_t>(r) * n);
    }
    for (int c = 0; c < n; ++c) {
        for (int r = 0; r < n; ++r) line[r] = a[static_cast<size_t>(r) * n + c];
        fft_inplace(line, inverse);
        for (int r = 0; r < n; ++r) a[static_cast<size_t>(r) * n + c] = line[r];
    }
}

}  // namespace detail

/// Stationary Gaussian random field with squared-exponential covariance on
/// the periodic grid. length_scale is in grid units.
struct GrfSpec {
    int resolution = 0;
    double length_scale = 0.0;
    double variance = 1.0;
    uint64_t seed = 0;

    void validate() const {
        if (resolution < 4) throw config_error("GrfSpec: resolution must be >= 4");
        if (length_scale <= 0.0) throw config_error("GrfSpec: length_scale must be positive");
        if (variance < 0.0) throw config_error("GrfSpec: variance must be non-negative");
    }
};

/// Spectral synthesis: white noise is filtered in the frequency domain by
/// the square root of the periodized covariance spectrum (exact circulant
/// embedding on the torus), so the marginal variance equals spec.variance.
inline Field sample_grf_2d(const GrfSpec& spec) {
    spec.validate();
    const int n = spec.resolution;
    const size_t nn = static_cast<size_t>(n) * n;
    Field out(1, n, n);
    if (spec.variance == 0.0) return out;

    // Periodized squared-exponential covariance kernel and its spectrum.
    std::vector<double> d2(n);
    for (int r = 0; r < n; ++r) {
        const double d = std::min(r, n - r);
        d2[r] = d * d;
    }
    const double inv2l2 = 1.0 / (2.0 * spec.length_scale * spec.length_scale);
    std::vector<std::complex<double>> lambda(nn);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c)
            lambda[static_cast<size_t>(r) * n + c] = spec.variance * std::exp(-(d2[r] + d2[c]) * inv2l2);
    detail::fft2_inplace(lambda, n, false);

    RngStream rng(spec.seed);
    std::vector<std::complex<double>> w(nn);
    for (auto& v : w) v = rng.normal();
    detail::fft2_inplace(w, n, false);
    for (size_t i = 0; i < nn; ++i) {
        const double lam = std::max(0.0, lambda[i].real());  // clamp tiny negative eigenvalues
        w[i] *= std::sqrt(lam);
    }
    detail::fft2_inplace(w, n, true);
    for (size_t i = 0; i < nn; ++i) out.values[i] = w[i].real();
    return out;
}

/// 1-D analogue used for Burgers initial conditions.
inline std::vector<double> sample_grf_1d(const GrfSpec& spec) {
    spec.validate();
    const int n = spec.resolution;
    std::vector<double> out(n, 0.0);
    if (spec.variance == 0.0) return out;

    const double inv2l2 = 1.0 / (2.0 * spec.length_scale * spec.length_scale);
    std::vector<std::complex<double>> lambda(n);
    for (int r = 0; r < n; ++r) {
        const double d = std::min(r, n - r);
        lambda[r] = spec.variance * std::exp(-d * d * inv2l2);
    }
    detail::fft_inplace(lambda, false);

    RngStream rng(spec.seed);
    std::vector<std::complex<double>> w(n);
    for (auto& v : w) v = rng.normal();
    detail::fft_inplace(w, false);
    for (int i = 0; i < n; ++i) w[i] *= std::sqrt(std::max(0.0, lambda[i].real()));
    detail::fft_inplace(w, true);
    for (int i = 0; i < n; ++i) out[i] = w[i].real();
    return out;
}

}  // namespace mffm
