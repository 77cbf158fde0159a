#pragma once

#include <cmath>
#include <vector>

#include "mffm/core.hpp"

namespace mffm {

/// Cosine decay over the full training horizon, no warmup:
/// base_lr * (1 + cos(pi step/total)) / 2.
inline double cosine_lr(long step, long total_steps, double base_lr) {
    if (step < 0 || step > total_steps) throw config_error("cosine_lr: step outside [0, total_steps]");
    if (total_steps == 0) return base_lr;
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total_steps)));
}

/// Scales the flat gradient so its global L2 norm is at most clip_norm.
/// Returns the pre-clip norm.
inline double clip_global_norm(std::vector<double>& grad, double clip_norm) {
    double sq = 0.0;
    for (double g : grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > clip_norm && norm > 0.0) {
        const double s = clip_norm / norm;
        for (double& g : grad) g *= s;
    }
    return norm;
}

struct AdamWState {
    std::vector<double> m, v;
    long step = 0;

    explicit AdamWState(size_t n) : m(n, 0.0), v(n, 0.0) {}
};

/// One AdamW step with decoupled weight decay (decay applied directly to
/// the parameters, scaled by the current learning rate, separate from the
/// adaptive gradient step).
inline void adamw_step(std::vector<double>& params, const std::vector<double>& grad, AdamWState& st,
                       double lr, double beta1, double beta2, double eps, double weight_decay) {
    st.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
    for (size_t i = 0; i < params.size(); ++i) {
        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * grad[i];
        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grad[i] * grad[i];
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        params[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * params[i]);
    }
}

/// ema <- decay * ema + (1 - decay) * params.
inline void ema_update(std::vector<double>& ema, const std::vector<double>& params, double decay) {
    for (size_t i = 0; i < ema.size(); ++i) ema[i] = decay * ema[i] + (1.0 - decay) * params[i];
}

}  // namespace mffm
