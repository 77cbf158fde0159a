#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mffm/cascade.hpp"
#include "mffm/core.hpp"
#include "mffm/dataset.hpp"
#include "mffm/net.hpp"
#include "mffm/optim.hpp"
#include "mffm/residual.hpp"
#include "mffm/rng.hpp"
#include "mffm/thread_pool.hpp"

namespace mffm {

struct TrainConfig {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-6;
    double clip_norm = 1.0;
    double ema_decay = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 32;
    int epochs_pretrain = 200;
    int epochs_e2e = 100;
    double e2e_lr_factor = 0.2;
    double eps_e2e = 1e-8;
    uint64_t seed = 0;

    void validate() const {
        if (lr <= 0 || clip_norm <= 0 || batch_size <= 0 || e2e_lr_factor <= 0 || eps_e2e <= 0 || adam_eps <= 0)
            throw config_error("TrainConfig: rates, clip_norm, batch size and eps must be positive");
        if (ema_decay <= 0.0 || ema_decay >= 1.0) throw config_error("TrainConfig: ema_decay must be in (0,1)");
        if (epochs_pretrain < 0 || epochs_e2e < 0) throw config_error("TrainConfig: epochs must be non-negative");
    }
};

struct TrainLogRow {
    std::string stage;
    int epoch = 0;
    double train_loss = 0.0;
    double val_nrmse = 0.0;
    double lr = 0.0;
};

/// Trained cascade plus selection metadata.
struct Checkpoint {
    CascadeModel model;
    std::string stage;
    int epoch = 0;
    double val_nrmse = std::numeric_limits<double>::quiet_NaN();
};

/// One flow-matching regression item: interpolated state, time, prolonged
/// conditioning and the per-sample conditional velocity target.
struct FmItem {
    const Field* delta_t;
    double t;
    const Field* conditioning;
    const Field* target;
};

/// Eq-style squared-error regression: loss is the mean over batch and
/// coordinates; gradients are exact for the implemented forward graph.
inline double fm_loss_and_gradients(const NetParams& params, const std::vector<FmItem>& items,
                                    std::vector<double>& grad, int threads = 1) {
    if (items.empty()) throw dimension_error("fm_loss_and_gradients: empty batch");
    const size_t n_coords = items.front().target->size();
    const double inv = 1.0 / (static_cast<double>(items.size()) * n_coords);

    const int T = std::max(1, std::min<int>(threads, static_cast<int>(items.size())));
    std::vector<std::vector<double>> tgrad(T);
    std::vector<double> losses(items.size(), 0.0);

    parallel_chunks(items.size(), T, [&](int t, size_t begin, size_t end) {
        tgrad[t].assign(params.layout.total, 0.0);
        NetWorkspace ws;
        std::vector<double> dout(n_coords);
        for (size_t i = begin; i < end; ++i) {
            const FmItem& it = items[i];
            net_forward(params, it.delta_t->values.data(), it.t, it.conditioning->values.data(),
                        it.delta_t->height, it.delta_t->width, ws);
            double sq = 0.0;
            for (size_t j = 0; j < n_coords; ++j) {
                const double r = ws.output[j] - it.target->values[j];
                sq += r * r;
                dout[j] = 2.0 * r * inv;
            }
            losses[i] = sq * inv;
            net_backward(params, ws, dout.data(), tgrad[t].data());
        }
    });

    grad.assign(params.layout.total, 0.0);
    for (int t = 0; t < T; ++t)
        if (!tgrad[t].empty())
            for (size_t i = 0; i < grad.size(); ++i) grad[i] += tgrad[t][i];
    double loss = 0.0;
    for (double l : losses) loss += l;
    return loss;
}

/// One pretraining step: draw the source and interpolation time per batch
/// element, form delta_t, regress onto (delta - eps), clip the global
/// gradient norm, take an AdamW step and update the EMA weights.
/// field_target switches the regression target from the residual to the
/// field itself (FM-field ablation).
inline double fm_train_step(NetParams& params, std::vector<double>& ema, AdamWState& opt,
                            const std::vector<const Field*>& conditioning_lifted,
                            const std::vector<const Field*>& targets, const ResidualStats& stats,
                            const SourceSpec& source_spec, RngStream& t_stream, RngStream& rng,
                            const TrainConfig& cfg, double lr_now, int threads = 1,
                            bool field_target = false) {
    const size_t B = conditioning_lifted.size();
    if (B == 0 || targets.size() != B) throw dimension_error("fm_train_step: bad batch");

    std::vector<Field> delta_t_fields(B), target_fields(B);
    std::vector<FmItem> items(B);
    for (size_t i = 0; i < B; ++i) {
        const Field& lifted = *conditioning_lifted[i];
        const Field& tgt = *targets[i];
        if (!stats.matches(lifted)) throw dimension_error("fm_train_step: stats do not match the level");
        const double t = t_stream.uniform();
        Field eps = sample_source(stats, source_spec, rng);
        Field dt(tgt.channels, tgt.height, tgt.width), reg(tgt.channels, tgt.height, tgt.width);
        for (size_t j = 0; j < tgt.values.size(); ++j) {
            const double delta = field_target ? tgt.values[j] : tgt.values[j] - lifted.values[j];
            dt.values[j] = t * delta + (1.0 - t) * eps.values[j];
            reg.values[j] = delta - eps.values[j];
        }
        delta_t_fields[i] = std::move(dt);
        target_fields[i] = std::move(reg);
        items[i] = {&delta_t_fields[i], t, &lifted, &target_fields[i]};
    }

    std::vector<double> grad;
    const double loss = fm_loss_and_gradients(params, items, grad, threads);
    if (!std::isfinite(loss))
        throw solver_error("fm_train_step: non-finite loss (lr " + std::to_string(lr_now) + ")", loss);
    clip_global_norm(grad, cfg.clip_norm);
    adamw_step(params.data, grad, opt, lr_now, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    ema_update(ema, params.data, cfg.ema_decay);
    return loss;
}

/// Mean one-step NRMSE of a single level on held-out pairs.
inline double eval_level_onestep(const NetParams& params, const std::vector<Field>& lifted,
                                 const std::vector<Field>& targets, bool field_mode, int threads = 1) {
    std::vector<double> errs(lifted.size(), 0.0);
    parallel_chunks(lifted.size(), threads, [&](int, size_t begin, size_t end) {
        NetWorkspace ws;
        for (size_t i = begin; i < end; ++i) {
            const Field& lift = lifted[i];
            std::vector<double> zero(lift.size(), 0.0);
            net_forward(params, zero.data(), 0.5, lift.values.data(), lift.height, lift.width, ws);
            Field pred(lift.channels, lift.height, lift.width);
            for (size_t j = 0; j < pred.values.size(); ++j)
                pred.values[j] = field_mode ? ws.output[j] : lift.values[j] + ws.output[j];
            errs[i] = nrmse(pred, targets[i]);
        }
    });
    double s = 0.0;
    for (double e : errs) s += e;
    return s / static_cast<double>(errs.size());
}

/// Mean deterministic-cascade NRMSE over (input, truth) pairs.
inline double eval_cascade(const CascadeModel& model, const std::vector<const Field*>& inputs,
                           const std::vector<const Field*>& truths, int threads = 1) {
    std::vector<double> errs(inputs.size(), 0.0);
    parallel_chunks(inputs.size(), threads, [&](int, size_t begin, size_t end) {
        for (size_t i = begin; i < end; ++i)
            errs[i] = nrmse(predict_deterministic(model, *inputs[i]), *truths[i]);
    });
    double s = 0.0;
    for (double e : errs) s += e;
    return s / static_cast<double>(errs.size());
}

/// Stage 1: independent level-wise flow-matching pretraining. Conditioning
/// states come from ground-truth intermediate fidelities; returns the EMA
/// weights and the frozen residual statistics.
inline std::pair<NetParams, ResidualStats> pretrain_level(const Dataset& data, int level,
                                                          const NetConfig& net_cfg, const TrainConfig& cfg,
                                                          const SourceSpec& source_spec,
                                                          bool field_target = false, int threads = 1,
                                                          std::vector<TrainLogRow>* log = nullptr) {
    cfg.validate();
    const int target_res = data.hierarchy.resolutions[level + 1];
    const auto& cond_level = data.levels[level];
    const auto& tgt_level = data.levels[level + 1];

    std::vector<Field> lifted, regression_base;
    std::vector<const Field*> train_targets;
    lifted.reserve(data.split.train.size());
    for (int idx : data.split.train) {
        lifted.push_back(prolong_bilinear(cond_level[idx], target_res));
        train_targets.push_back(&tgt_level[idx]);
        Field d = tgt_level[idx];
        if (!field_target)
            for (size_t j = 0; j < d.values.size(); ++j) d.values[j] -= lifted.back().values[j];
        regression_base.push_back(std::move(d));
    }
    ResidualStats stats = compute_residual_stats(regression_base, level);

    std::vector<Field> val_lifted, val_targets;
    for (int idx : data.split.val) {
        val_lifted.push_back(prolong_bilinear(cond_level[idx], target_res));
        val_targets.push_back(tgt_level[idx]);
    }

    NetParams params = init_net_params(net_cfg, derive_seed(cfg.seed, "init", level));
    std::vector<double> ema = params.data;
    AdamWState opt(params.layout.total);

    const int n_train = static_cast<int>(data.split.train.size());
    const int n_batches = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = static_cast<long>(cfg.epochs_pretrain) * n_batches;
    long step = 0;

    std::vector<int> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= cfg.epochs_pretrain; ++epoch) {
        RngStream shuffle_rng(derive_seed(cfg.seed, "shuffle", level, epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
        RngStream t_stream(derive_seed(cfg.seed, "fm.t", level, epoch));
        RngStream eps_rng(derive_seed(cfg.seed, "fm.eps", level, epoch));

        double epoch_loss = 0.0;
        for (int b = 0; b < n_batches; ++b) {
            std::vector<const Field*> cond_batch, tgt_batch;
            for (int j = b * cfg.batch_size; j < std::min((b + 1) * cfg.batch_size, n_train); ++j) {
                cond_batch.push_back(&lifted[order[j]]);
                tgt_batch.push_back(train_targets[order[j]]);
            }
            const double lr_now = cosine_lr(step, total_steps, cfg.lr);
            epoch_loss += fm_train_step(params, ema, opt, cond_batch, tgt_batch, stats, source_spec, t_stream,
                                        eps_rng, cfg, lr_now, threads, field_target);
            ++step;
        }
        if (log) {
            NetParams ema_params = params;
            ema_params.data = ema;
            const double val = val_lifted.empty()
                                   ? 0.0
                                   : eval_level_onestep(ema_params, val_lifted, val_targets, field_target, threads);
            log->push_back({"pretrain_level" + std::to_string(level), epoch, epoch_loss / n_batches, val,
                            cosine_lr(std::min(step, total_steps), total_steps, cfg.lr)});
        }
    }
    params.data = ema;  // apply EMA weights
    return {std::move(params), std::move(stats)};
}

/// Deterministic one-step cascade with intermediate states exposed.
inline std::pair<Field, std::vector<Field>> e2e_rollout(const CascadeModel& model, const Field& u0) {
    std::vector<Field> intermediates;
    Field out = predict_deterministic(model, u0, nullptr, &intermediates);
    return {std::move(out), std::move(intermediates)};
}

namespace detail {

/// Per-sample differentiable rollout state: one cached workspace per level.
struct CascadeTape {
    std::vector<NetWorkspace> ws;
    std::vector<Field> lifted;
    std::vector<Field> delta0;  // source draw per level (zeros when deterministic)
    Field out;
};

/// Forward rollout u_{l+1} = [lifted +] delta0_l + v(delta0_l, 1/2, lifted)
/// with caches kept for the backward pass. eps == nullptr means the
/// deterministic zero initialization.
inline void rollout_cached(const CascadeModel& model, const Field& u0, CascadeTape& tape,
                           const std::vector<Field>* eps) {
    const int L = model.n_levels();
    tape.ws.resize(L);
    tape.lifted.assign(L, Field());
    tape.delta0.assign(L, Field());
    Field u = u0;
    for (int l = 0; l < L; ++l) {
        const int res = model.hierarchy.resolutions[l + 1];
        tape.lifted[l] = prolong_bilinear(u, res);
        const Field& lift = tape.lifted[l];
        tape.delta0[l] = eps ? (*eps)[l] : Field(lift.channels, lift.height, lift.width);
        net_forward(model.levels[l], tape.delta0[l].values.data(), 0.5, lift.values.data(), lift.height,
                    lift.width, tape.ws[l]);
        Field next(lift.channels, lift.height, lift.width);
        for (size_t i = 0; i < next.values.size(); ++i) {
            next.values[i] = tape.delta0[l].values[i] + tape.ws[l].output[i];
            if (!model.field_mode) next.values[i] += lift.values[i];
        }
        u = std::move(next);
    }
    tape.out = std::move(u);
}

/// Reverse pass through the rollout: gradients flow through every level
/// network and through the prolongation operators jointly.
inline void rollout_backward(const CascadeModel& model, CascadeTape& tape, const Field& d_out,
                             std::vector<std::vector<double>>& level_grads) {
    const int L = model.n_levels();
    Field g = d_out;
    for (int l = L - 1; l >= 0; --l) {
        const Field& lift = tape.lifted[l];
        Field dcond(lift.channels, lift.height, lift.width);
        net_backward(model.levels[l], tape.ws[l], g.values.data(), level_grads[l].data(), nullptr,
                     dcond.values.data());
        if (!model.field_mode)
            for (size_t i = 0; i < dcond.values.size(); ++i) dcond.values[i] += g.values[i];
        if (l > 0) g = prolong_bilinear_adjoint(dcond, model.hierarchy.resolutions[l]);
    }
}

/// d(relative L2)/d(prediction), scaled by weight; zero at the exact
/// minimum where the norm is not differentiable.
inline Field relative_l2_grad(const Field& prediction, const Field& truth, double eps, double weight) {
    Field g(prediction.channels, prediction.height, prediction.width);
    const double diff = l2_diff(prediction, truth);
    if (diff == 0.0) return g;
    const double scale = weight / (diff * (l2_norm(truth) + eps));
    for (size_t i = 0; i < g.values.size(); ++i)
        g.values[i] = scale * (prediction.values[i] - truth.values[i]);
    return g;
}

struct E2eWorkerState {
    CascadeTape tape;
    std::vector<std::vector<double>> grads;  // per level
    bool ready = false;
};

}  // namespace detail

/// Stage 2: deterministic end-to-end cascade fine-tuning. Minimizes the
/// mean relative L2 loss of the unrolled one-step rollout against the
/// finest-grid target at lr * e2e_lr_factor with a fresh cosine schedule,
/// global gradient clipping across all levels, no EMA; the checkpoint with
/// the best validation NRMSE is retained (the pre-finetune state counts as
/// a candidate). K_train > 0 switches to the stochastic variant: each
/// level starts from a source draw and the loss averages K_train rollouts.
inline Checkpoint e2e_finetune_impl(const CascadeModel& pretrained, const Dataset& data,
                                    const TrainConfig& cfg, int K_train, int K_val, int threads,
                                    std::vector<TrainLogRow>* log,
                                    const std::function<void(const Checkpoint&)>& on_select) {
    cfg.validate();
    const bool stochastic = K_train > 0;
    const int L = pretrained.n_levels();
    const int finest_level = static_cast<int>(data.levels.size()) - 1;
    const std::string stage = stochastic ? "stochastic_e2e" : "e2e";

    CascadeModel model = pretrained;
    model.validate();

    std::vector<const Field*> train_u0, train_uL, val_u0, val_uL;
    for (int idx : data.split.train) {
        train_u0.push_back(&data.levels[0][idx]);
        train_uL.push_back(&data.levels[finest_level][idx]);
    }
    for (int idx : data.split.val) {
        val_u0.push_back(&data.levels[0][idx]);
        val_uL.push_back(&data.levels[finest_level][idx]);
    }

    auto eval_val = [&](const CascadeModel& m, int epoch) {
        if (val_u0.empty()) return 0.0;
        if (!stochastic) return eval_cascade(m, val_u0, val_uL, threads);
        std::vector<double> errs(val_u0.size(), 0.0);
        parallel_chunks(val_u0.size(), threads, [&](int, size_t begin, size_t end) {
            for (size_t i = begin; i < end; ++i) {
                Field mean;
                for (int k = 0; k < K_val; ++k) {
                    RngStream rng(derive_seed(cfg.seed, "stoch.val", static_cast<uint64_t>(epoch) * 1000003 + i, k));
                    Field m_k = rollout_stochastic(m, *val_u0[i], rng, 1);
                    if (k == 0)
                        mean = std::move(m_k);
                    else
                        for (size_t j = 0; j < mean.values.size(); ++j) mean.values[j] += m_k.values[j];
                }
                for (double& v : mean.values) v /= K_val;
                errs[i] = nrmse(mean, *val_uL[i]);
            }
        });
        double s = 0.0;
        for (double e : errs) s += e;
        return s / static_cast<double>(errs.size());
    };

    Checkpoint best{model, stage, 0, eval_val(model, 0)};
    if (cfg.epochs_e2e == 0) return best;

    std::vector<AdamWState> opt;
    for (int l = 0; l < L; ++l) opt.emplace_back(model.levels[l].layout.total);
    const double base_lr = cfg.lr * cfg.e2e_lr_factor;
    const int n_train = static_cast<int>(train_u0.size());
    const int n_batches = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = static_cast<long>(cfg.epochs_e2e) * n_batches;
    long step = 0;

    const int T = std::max(1, threads);
    std::vector<detail::E2eWorkerState> workers(T);

    std::vector<int> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= cfg.epochs_e2e; ++epoch) {
        RngStream shuffle_rng(derive_seed(cfg.seed, stochastic ? "stoch.shuffle" : "e2e.shuffle", epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
        RngStream eps_rng(derive_seed(cfg.seed, "stoch.eps", epoch));

        double epoch_loss = 0.0;
        for (int b = 0; b < n_batches; ++b) {
            const int lo = b * cfg.batch_size, hi = std::min((b + 1) * cfg.batch_size, n_train);
            const int B = hi - lo;

            // Pre-draw stochastic sources sequentially so parallel workers
            // consume fixed randomness.
            std::vector<std::vector<std::vector<Field>>> eps;  // [sample][k][level]
            if (stochastic) {
                eps.resize(B);
                for (int j = 0; j < B; ++j) {
                    eps[j].resize(K_train);
                    for (int k = 0; k < K_train; ++k)
                        for (int l = 0; l < L; ++l)
                            eps[j][k].push_back(sample_source(model.stats[l], model.sources[l], eps_rng));
                }
            }

            std::vector<double> losses(B, 0.0);
            for (auto& w : workers) {
                if (!w.ready) {
                    w.grads.resize(L);
                    w.ready = true;
                }
                for (int l = 0; l < L; ++l) w.grads[l].assign(model.levels[l].layout.total, 0.0);
            }
            const int rollouts = stochastic ? K_train : 1;
            const double weight = 1.0 / (static_cast<double>(B) * rollouts);

            parallel_chunks(static_cast<size_t>(B), T, [&](int t, size_t begin, size_t end) {
                auto& w = workers[t];
                for (size_t j = begin; j < end; ++j) {
                    const Field& u0 = *train_u0[order[lo + j]];
                    const Field& uL = *train_uL[order[lo + j]];
                    for (int k = 0; k < rollouts; ++k) {
                        detail::rollout_cached(model, u0, w.tape, stochastic ? &eps[j][k] : nullptr);
                        losses[j] += weight * relative_l2_loss(w.tape.out, uL, cfg.eps_e2e) * B;
                        Field g = detail::relative_l2_grad(w.tape.out, uL, cfg.eps_e2e, weight);
                        detail::rollout_backward(model, w.tape, g, w.grads);
                    }
                }
            });

            double batch_loss = 0.0;
            for (double l : losses) batch_loss += l;
            batch_loss /= B;
            if (!std::isfinite(batch_loss)) throw solver_error("e2e_finetune: non-finite loss", batch_loss);
            epoch_loss += batch_loss;

            // reduce thread gradients in fixed order, then clip globally
            std::vector<std::vector<double>> grads(L);
            for (int l = 0; l < L; ++l) {
                grads[l].assign(model.levels[l].layout.total, 0.0);
                for (int t = 0; t < T; ++t)
                    if (workers[t].ready)
                        for (size_t i = 0; i < grads[l].size(); ++i) grads[l][i] += workers[t].grads[l][i];
            }
            double sq = 0.0;
            for (int l = 0; l < L; ++l)
                for (double g : grads[l]) sq += g * g;
            const double norm = std::sqrt(sq);
            if (norm > cfg.clip_norm && norm > 0.0) {
                const double s = cfg.clip_norm / norm;
                for (int l = 0; l < L; ++l)
                    for (double& g : grads[l]) g *= s;
            }
            const double lr_now = cosine_lr(step, total_steps, base_lr);
            for (int l = 0; l < L; ++l)
                adamw_step(model.levels[l].data, grads[l], opt[l], lr_now, cfg.beta1, cfg.beta2, cfg.adam_eps,
                           cfg.weight_decay);
            ++step;
        }

        const double val = eval_val(model, epoch);
        if (log)
            log->push_back({stage, epoch, epoch_loss / n_batches, val,
                            cosine_lr(std::min(step, total_steps), total_steps, base_lr)});
        if (val < best.val_nrmse) {
            best = Checkpoint{model, stage, epoch, val};
            if (on_select) on_select(best);
        }
    }
    return best;
}

/// Deterministic end-to-end fine-tuning (the headline training stage).
inline Checkpoint e2e_finetune(const CascadeModel& pretrained, const Dataset& data, const TrainConfig& cfg,
                               int threads = 1, std::vector<TrainLogRow>* log = nullptr,
                               const std::function<void(const Checkpoint&)>& on_select = nullptr) {
    return e2e_finetune_impl(pretrained, data, cfg, 0, 0, threads, log, on_select);
}

/// Stochastic end-to-end variant: per-level source initialization and a
/// Monte Carlo average of the relative error over K_train rollouts;
/// validation uses the ensemble mean over K_val rollouts.
inline Checkpoint stochastic_e2e_finetune(const CascadeModel& pretrained, const Dataset& data,
                                          const TrainConfig& cfg, int K_train = 4, int K_val = 8,
                                          int threads = 1, std::vector<TrainLogRow>* log = nullptr,
                                          const std::function<void(const Checkpoint&)>& on_select = nullptr) {
    if (K_train < 1 || K_val < 1) throw config_error("stochastic_e2e_finetune: K_train and K_val must be >= 1");
    return e2e_finetune_impl(pretrained, data, cfg, K_train, K_val, threads, log, on_select);
}

}  // namespace mffm
