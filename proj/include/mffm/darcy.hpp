#pragma once

#include <vector>

#include "mffm/core.hpp"

namespace mffm {

/// Solves -div(a grad u) = f on the unit square with homogeneous Dirichlet
/// boundary. Vertex-centered 5-point finite differences with harmonic-mean
/// face coefficients; Jacobi-preconditioned conjugate gradients to relative
/// residual <= tol. The returned field carries the boundary zeros.
inline Field solve_darcy_fd(const Field& coefficient, const Field& forcing, double tol = 1e-8,
                            int max_iterations = 0) {
    require_square(coefficient, "solve_darcy_fd");
    require_same_shape(coefficient, forcing, "solve_darcy_fd");
    if (coefficient.channels != 1) throw dimension_error("solve_darcy_fd: coefficient must be single channel");
    const int n = coefficient.height;
    if (n < 3) throw dimension_error("solve_darcy_fd: need at least a 3x3 grid");
    for (double a : coefficient.values)
        if (!(a > 0.0)) throw config_error("solve_darcy_fd: coefficient must be strictly positive");

    const int m = n - 2;  // interior nodes per direction
    const size_t mm = static_cast<size_t>(m) * m;
    const double h = 1.0 / (n - 1);
    const double inv_h2 = 1.0 / (h * h);

    auto a_at = [&](int i, int j) { return coefficient.values[static_cast<size_t>(i) * n + j]; };
    auto harmonic = [](double x, double y) { return 2.0 * x * y / (x + y); };

    // Face coefficients around each interior node (i, j), i = row 1..n-2.
    std::vector<double> aN(mm), aS(mm), aW(mm), aE(mm), diag(mm), rhs(mm);
    for (int i = 1; i <= m; ++i)
        for (int j = 1; j <= m; ++j) {
            const size_t k = static_cast<size_t>(i - 1) * m + (j - 1);
            aN[k] = harmonic(a_at(i, j), a_at(i - 1, j)) * inv_h2;
            aS[k] = harmonic(a_at(i, j), a_at(i + 1, j)) * inv_h2;
            aW[k] = harmonic(a_at(i, j), a_at(i, j - 1)) * inv_h2;
            aE[k] = harmonic(a_at(i, j), a_at(i, j + 1)) * inv_h2;
            diag[k] = aN[k] + aS[k] + aW[k] + aE[k];
            rhs[k] = forcing.values[static_cast<size_t>(i) * n + j];
        }

    auto apply = [&](const std::vector<double>& x, std::vector<double>& y) {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) {
                const size_t k = static_cast<size_t>(i) * m + j;
                double v = diag[k] * x[k];
                if (i > 0) v -= aN[k] * x[k - m];
                if (i < m - 1) v -= aS[k] * x[k + m];
                if (j > 0) v -= aW[k] * x[k - 1];
                if (j < m - 1) v -= aE[k] * x[k + 1];
                y[k] = v;
            }
    };

    std::vector<double> x(mm, 0.0), r(rhs), z(mm), p(mm), q(mm);
    double rhs_norm = 0.0;
    for (double v : rhs) rhs_norm += v * v;
    rhs_norm = std::sqrt(rhs_norm);
    Field out(1, n, n);
    if (rhs_norm == 0.0) return out;  // zero data, unique solution is zero

    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };

    for (size_t k = 0; k < mm; ++k) z[k] = r[k] / diag[k];
    p = z;
    double rz = dot(r, z);
    if (max_iterations <= 0) max_iterations = 20 * n * n;
    double rel = 1.0;
    for (int it = 0; it < max_iterations; ++it) {
        apply(p, q);
        const double alpha = rz / dot(p, q);
        for (size_t k = 0; k < mm; ++k) {
            x[k] += alpha * p[k];
            r[k] -= alpha * q[k];
        }
        double rn = std::sqrt(dot(r, r));
        rel = rn / rhs_norm;
        if (rel <= tol) break;
        for (size_t k = 0; k < mm; ++k) z[k] = r[k] / diag[k];
        const double rz_new = dot(r, z);
        const double beta = rz_new / rz;
        rz = rz_new;
        for (size_t k = 0; k < mm; ++k) p[k] = z[k] + beta * p[k];
    }
    if (rel > tol)
        throw solver_error("solve_darcy_fd: PCG stalled at relative residual " + std::to_string(rel), rel);

    for (int i = 1; i <= m; ++i)
        for (int j = 1; j <= m; ++j)
            out.values[static_cast<size_t>(i) * n + j] = x[static_cast<size_t>(i - 1) * m + (j - 1)];
    return out;
}

/// Constant-forcing convenience overload (the dataset configuration).
inline Field solve_darcy_fd(const Field& coefficient, double forcing, double tol = 1e-8,
                            int max_iterations = 0) {
    return solve_darcy_fd(coefficient,
                          Field::constant(coefficient.channels, coefficient.height, coefficient.width, forcing),
                          tol, max_iterations);
}

}  // namespace mffm
