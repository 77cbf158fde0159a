#pragma once

#include <vector>

#include "mffm/core.hpp"

namespace mffm {

/// Non-finite state during time integration.
struct integration_error : error {
    integration_error(const std::string& msg, double t) : error(msg), failing_time(t) {}
    double failing_time;
};

namespace detail {

/// Conservative central-difference right-hand side of
/// u_t = -1/2 (u^2)_x + nu u_xx on the periodic unit interval.
inline void burgers_rhs(const std::vector<double>& u, double viscosity, double dx, std::vector<double>& out) {
    const int s = static_cast<int>(u.size());
    const double inv_2dx = 1.0 / (2.0 * dx);
    const double nu_dx2 = viscosity / (dx * dx);
    for (int i = 0; i < s; ++i) {
        const int im = (i == 0) ? s - 1 : i - 1;
        const int ip = (i == s - 1) ? 0 : i + 1;
        const double flux = (u[ip] * u[ip] - u[im] * u[im]) * inv_2dx * 0.5;
        out[i] = -flux + nu_dx2 * (u[ip] - 2.0 * u[i] + u[im]);
    }
}

}  // namespace detail

/// Integrates viscous Burgers with RK4 and CFL-limited substeps, recording
/// s equispaced snapshots spanning [0, horizon]; row 0 is the initial
/// condition and row s-1 is u(horizon). Returns a 1 x s x s space-time
/// field (rows = time snapshots, columns = space).
inline Field solve_burgers(const std::vector<double>& initial, double viscosity, double horizon,
                           double cfl = 0.4) {
    const int s = static_cast<int>(initial.size());
    if (s < 8) throw dimension_error("solve_burgers: need at least 8 spatial points");
    if (viscosity <= 0.0) throw config_error("solve_burgers: viscosity must be positive");
    if (horizon <= 0.0) throw config_error("solve_burgers: horizon must be positive");

    const double dx = 1.0 / s;
    Field out(1, s, s);
    std::vector<double> u(initial), k1(s), k2(s), k3(s), k4(s), tmp(s);

    auto max_dt = [&]() {
        double umax = 0.0;
        for (double v : u) umax = std::max(umax, std::abs(v));
        const double dt_adv = umax > 0.0 ? dx / umax : horizon;
        const double dt_diff = dx * dx / (2.0 * viscosity);
        return cfl * std::min(dt_adv, dt_diff);
    };

    auto rk4_step = [&](double dt) {
        detail::burgers_rhs(u, viscosity, dx, k1);
        for (int i = 0; i < s; ++i) tmp[i] = u[i] + 0.5 * dt * k1[i];
        detail::burgers_rhs(tmp, viscosity, dx, k2);
        for (int i = 0; i < s; ++i) tmp[i] = u[i] + 0.5 * dt * k2[i];
        detail::burgers_rhs(tmp, viscosity, dx, k3);
        for (int i = 0; i < s; ++i) tmp[i] = u[i] + dt * k3[i];
        detail::burgers_rhs(tmp, viscosity, dx, k4);
        for (int i = 0; i < s; ++i) u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    };

    std::copy(u.begin(), u.end(), out.values.begin());  // snapshot 0 = initial condition
    const double snap_dt = horizon / (s - 1);
    double t = 0.0;
    for (int snap = 1; snap < s; ++snap) {
        const double t_target = snap * snap_dt;
        while (t < t_target - 1e-14) {
            const int n_sub = std::max(1, static_cast<int>(std::ceil((t_target - t) / max_dt())));
            const double dt = (t_target - t) / n_sub;
            for (int k = 0; k < n_sub; ++k) rk4_step(dt);
            t = t_target;
        }
        for (int i = 0; i < s; ++i) {
            if (!std::isfinite(u[i])) throw integration_error("solve_burgers: state blew up", t);
            out.values[static_cast<size_t>(snap) * s + i] = u[i];
        }
    }
    return out;
}

}  // namespace mffm
