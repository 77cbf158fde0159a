#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mffm/cascade.hpp"
#include "mffm/config.hpp"
#include "mffm/container.hpp"
#include "mffm/dataset.hpp"
#include "mffm/diagnostics.hpp"
#include "mffm/pgm.hpp"
#include "mffm/thread_pool.hpp"
#include "mffm/train.hpp"

#ifndef MFFM_BUILD_ID
#define MFFM_BUILD_ID "unversioned"
#endif

namespace mffm {

inline const char* build_id() { return MFFM_BUILD_ID; }

/// One CLI invocation owns its output directory; a second invocation on
/// the same directory fails until the lock is released.
class DirLock {
public:
    explicit DirLock(const std::string& dir) : path_(std::filesystem::path(dir) / ".mffm.lock") {
        std::filesystem::create_directories(dir);
        std::FILE* f = std::fopen(path_.string().c_str(), "wx");
        if (!f)
            throw config_error("output directory '" + dir + "' is locked by another invocation (" +
                               path_.string() + " exists)");
        std::fclose(f);
        held_ = true;
    }
    ~DirLock() {
        if (held_) {
            std::error_code ec;
            std::filesystem::remove(path_, ec);
        }
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::filesystem::path path_;
    bool held_ = false;
};

namespace paths {
inline std::string dataset(const ExperimentConfig& c) { return c.output_dir + "/dataset.mffm"; }
inline std::string stats(const ExperimentConfig& c) { return c.output_dir + "/stats.mffm"; }
inline std::string checkpoint_pretrain(const ExperimentConfig& c) { return c.output_dir + "/checkpoint_pretrain.mffm"; }
inline std::string checkpoint_e2e(const ExperimentConfig& c) { return c.output_dir + "/checkpoint_e2e.mffm"; }
inline std::string checkpoint_stochastic(const ExperimentConfig& c) { return c.output_dir + "/checkpoint_stochastic.mffm"; }
inline std::string predictions(const ExperimentConfig& c) { return c.output_dir + "/predictions.mffm"; }
inline std::string results_csv(const ExperimentConfig& c) { return c.output_dir + "/results.csv"; }
inline std::string ablation_csv(const ExperimentConfig& c) { return c.output_dir + "/ablation.csv"; }
inline std::string nfe_csv(const ExperimentConfig& c) { return c.output_dir + "/nfe_scan.csv"; }
inline std::string uq_csv(const ExperimentConfig& c) { return c.output_dir + "/uq_report.csv"; }
inline std::string train_log_csv(const ExperimentConfig& c) { return c.output_dir + "/train_log.csv"; }
inline std::string report_csv(const ExperimentConfig& c) { return c.output_dir + "/report.csv"; }
}  // namespace paths

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

/// Metadata block: provenance key = value lines, then the config echo.
inline std::string make_metadata(const ExperimentConfig& cfg, const std::string& stage,
                                 const std::string& dataset_hash,
                                 const std::vector<std::pair<std::string, std::string>>& extra = {}) {
    std::ostringstream out;
    out << "build = " << build_id() << "\n";
    out << "stage = " << stage << "\n";
    out << "benchmark = " << to_string(cfg.benchmark) << "\n";
    out << "variant = " << to_string(cfg.variant) << "\n";
    out << "seed = " << cfg.seed << "\n";
    if (!dataset_hash.empty()) out << "dataset_hash = " << dataset_hash << "\n";
    for (const auto& [k, v] : extra) out << k << " = " << v << "\n";
    out << "--- config ---\n" << cfg.raw_text;
    return out.str();
}

inline std::string metadata_value(const std::string& metadata, const std::string& key) {
    std::istringstream in(metadata);
    std::string line;
    while (std::getline(in, line)) {
        if (line == "--- config ---") break;
        const auto eq = line.find(" = ");
        if (eq != std::string::npos && line.substr(0, eq) == key) return line.substr(eq + 3);
    }
    return "";
}

// ---------------------------------------------------------------------------
// dataset persistence
// ---------------------------------------------------------------------------

inline void save_dataset(const ExperimentConfig& cfg, const Dataset& data,
                         const std::vector<std::vector<Field>>* coefficients,
                         const std::vector<std::pair<std::string, std::string>>& extra_meta) {
    ArrayContainer c;
    std::vector<double> hres(data.hierarchy.resolutions.begin(), data.hierarchy.resolutions.end());
    c.add_f64("hierarchy", {static_cast<uint32_t>(hres.size())}, hres.data());
    const double ch = data.channels;
    c.add_f64("channels", {1}, &ch);

    const int n = data.n_samples();
    for (size_t l = 0; l < data.levels.size(); ++l) {
        const Field& first = data.levels[l][0];
        std::vector<double> flat;
        flat.reserve(static_cast<size_t>(n) * first.size());
        for (const Field& f : data.levels[l]) flat.insert(flat.end(), f.values.begin(), f.values.end());
        c.add_f32("u/level_" + std::to_string(l),
                  {static_cast<uint32_t>(n), static_cast<uint32_t>(first.channels),
                   static_cast<uint32_t>(first.height), static_cast<uint32_t>(first.width)},
                  flat.data());
    }
    if (coefficients) {
        for (size_t l = 0; l < coefficients->size(); ++l) {
            const Field& first = (*coefficients)[l][0];
            std::vector<double> flat;
            for (const Field& f : (*coefficients)[l]) flat.insert(flat.end(), f.values.begin(), f.values.end());
            c.add_f32("a/level_" + std::to_string(l),
                      {static_cast<uint32_t>(n), static_cast<uint32_t>(first.channels),
                       static_cast<uint32_t>(first.height), static_cast<uint32_t>(first.width)},
                      flat.data());
        }
    }
    auto add_split = [&c](const std::string& name, const std::vector<int>& idx) {
        std::vector<double> v(idx.begin(), idx.end());
        c.add_f64(name, {static_cast<uint32_t>(v.size())}, v.data());
    };
    add_split("split/train", data.split.train);
    add_split("split/val", data.split.val);
    add_split("split/test", data.split.test);

    c.metadata = make_metadata(cfg, "gen-data", hash_hex(c.content_hash()), extra_meta);
    c.save(paths::dataset(cfg));
}

inline Dataset load_dataset(const std::string& path) {
    ArrayContainer c = ArrayContainer::load(path);
    Dataset ds;
    {
        auto h = c.get("hierarchy").as_doubles();
        std::vector<int> res(h.begin(), h.end());
        ds.hierarchy = GridHierarchy(res);
    }
    ds.channels = static_cast<int>(c.get("channels").as_doubles()[0]);
    ds.levels.resize(ds.hierarchy.resolutions.size());
    for (size_t l = 0; l < ds.levels.size(); ++l) {
        const ArrayEntry& e = c.get("u/level_" + std::to_string(l));
        if (e.dims.size() != 4) throw format_error("dataset: u/level arrays must be 4-D");
        const int n = e.dims[0], ch = e.dims[1], H = e.dims[2], W = e.dims[3];
        auto flat = e.as_doubles();
        ds.levels[l].reserve(n);
        for (int i = 0; i < n; ++i) {
            Field f(ch, H, W);
            std::copy(flat.begin() + static_cast<size_t>(i) * f.size(),
                      flat.begin() + static_cast<size_t>(i + 1) * f.size(), f.values.begin());
            ds.levels[l].push_back(std::move(f));
        }
    }
    auto get_split = [&c](const std::string& name) {
        auto v = c.get(name).as_doubles();
        return std::vector<int>(v.begin(), v.end());
    };
    ds.split.train = get_split("split/train");
    ds.split.val = get_split("split/val");
    ds.split.test = get_split("split/test");
    ds.hash_hex = hash_hex(c.content_hash());
    const std::string recorded = metadata_value(c.metadata, "dataset_hash");
    if (!recorded.empty() && recorded != ds.hash_hex)
        throw format_error("dataset: content hash mismatch (file corrupted?)");
    return ds;
}

// ---------------------------------------------------------------------------
// checkpoint persistence
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const Checkpoint& cp, const ExperimentConfig& cfg,
                            const std::string& dataset_hash) {
    ArrayContainer c;
    const CascadeModel& m = cp.model;
    std::vector<double> hres(m.hierarchy.resolutions.begin(), m.hierarchy.resolutions.end());
    c.add_f64("hierarchy", {static_cast<uint32_t>(hres.size())}, hres.data());
    const double scalars[3] = {static_cast<double>(m.field_mode), static_cast<double>(cp.epoch), cp.val_nrmse};
    c.add_f64("meta/field_mode", {1}, &scalars[0]);
    c.add_f64("meta/epoch", {1}, &scalars[1]);
    c.add_f64("meta/val_nrmse", {1}, &scalars[2]);

    for (int l = 0; l < m.n_levels(); ++l) {
        const std::string prefix = "level_" + std::to_string(l) + "/";
        const NetParams& p = m.levels[l];
        const double netc[6] = {static_cast<double>(p.cfg.channels),  static_cast<double>(p.cfg.hidden),
                                static_cast<double>(p.cfg.n_blocks),  static_cast<double>(p.cfg.n_groups),
                                static_cast<double>(p.cfg.time_embed_dim),
                                static_cast<double>(p.cfg.padding == Padding::periodic)};
        c.add_f64(prefix + "net_config", {6}, netc);
        for (const ParamInfo& info : p.layout.infos)
            c.add_f64(prefix + info.name, info.dims, p.data.data() + info.offset);

        const ResidualStats& st = m.stats[l];
        c.add_f64("sigma2_level_" + std::to_string(l),
                  {static_cast<uint32_t>(st.channels), static_cast<uint32_t>(st.height),
                   static_cast<uint32_t>(st.width)},
                  st.sigma2.data());
        const SourceSpec& ss = m.sources[l];
        const double src[3] = {static_cast<double>(static_cast<int>(ss.kind)), ss.tau, ss.eps_num};
        c.add_f64(prefix + "source", {3}, src);
    }
    c.metadata = make_metadata(cfg, cp.stage, dataset_hash,
                               {{"epoch", std::to_string(cp.epoch)}, {"val_nrmse", format_real(cp.val_nrmse)}});
    c.save(path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    ArrayContainer c = ArrayContainer::load(path);
    Checkpoint cp;
    {
        auto h = c.get("hierarchy").as_doubles();
        cp.model.hierarchy = GridHierarchy(std::vector<int>(h.begin(), h.end()));
    }
    cp.model.field_mode = c.get("meta/field_mode").as_doubles()[0] != 0.0;
    cp.epoch = static_cast<int>(c.get("meta/epoch").as_doubles()[0]);
    cp.val_nrmse = c.get("meta/val_nrmse").as_doubles()[0];
    cp.stage = metadata_value(c.metadata, "stage");

    const int L = cp.model.hierarchy.levels();
    for (int l = 0; l < L; ++l) {
        const std::string prefix = "level_" + std::to_string(l) + "/";
        auto netc = c.get(prefix + "net_config").as_doubles();
        NetConfig ncfg;
        ncfg.channels = static_cast<int>(netc[0]);
        ncfg.hidden = static_cast<int>(netc[1]);
        ncfg.n_blocks = static_cast<int>(netc[2]);
        ncfg.n_groups = static_cast<int>(netc[3]);
        ncfg.time_embed_dim = static_cast<int>(netc[4]);
        ncfg.padding = netc[5] != 0.0 ? Padding::periodic : Padding::reflect;
        NetParams p(ncfg);
        for (const ParamInfo& info : p.layout.infos) {
            const ArrayEntry& e = c.get(prefix + info.name);
            if (e.count() != info.size) throw format_error("checkpoint: size mismatch for " + info.name);
            auto v = e.as_doubles();
            std::copy(v.begin(), v.end(), p.data.begin() + info.offset);
        }
        cp.model.levels.push_back(std::move(p));

        const ArrayEntry& se = c.get("sigma2_level_" + std::to_string(l));
        ResidualStats st;
        st.level = l;
        st.channels = se.dims[0];
        st.height = se.dims[1];
        st.width = se.dims[2];
        st.sigma2 = se.as_doubles();
        cp.model.stats.push_back(std::move(st));

        auto src = c.get(prefix + "source").as_doubles();
        SourceSpec ss;
        ss.kind = static_cast<SourceKind>(static_cast<int>(src[0]));
        ss.tau = src[1];
        ss.eps_num = src[2];
        cp.model.sources.push_back(ss);
    }
    cp.model.validate();
    return cp;
}

// ---------------------------------------------------------------------------
// csv helpers
// ---------------------------------------------------------------------------

inline void append_csv(const std::string& path, const std::string& header, const std::string& row) {
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    if (!out) throw format_error("cannot open '" + path + "'");
    if (fresh) out << header << "\n";
    out << row << "\n";
}

inline void write_train_log(const std::string& path, const std::vector<TrainLogRow>& rows) {
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    if (!out) throw format_error("cannot open '" + path + "'");
    if (fresh) out << "stage,epoch,train_loss,val_nrmse,lr\n";
    for (const auto& r : rows)
        out << r.stage << "," << r.epoch << "," << format_real(r.train_loss) << ","
            << format_real(r.val_nrmse) << "," << format_real(r.lr) << "\n";
}

// ---------------------------------------------------------------------------
// command drivers
// ---------------------------------------------------------------------------

inline GrfSpec grf_spec_for(const ExperimentConfig& cfg) {
    GrfSpec g;
    g.resolution = cfg.hierarchy.finest();
    g.length_scale = cfg.grf_length_scale * cfg.hierarchy.finest();  // fraction of domain -> grid units
    g.variance = cfg.grf_variance;
    g.seed = cfg.seed;  // per-sample streams derive from (seed, index)
    return g;
}

inline std::string cmd_gen_data(const ExperimentConfig& cfg) {
    if (!cfg.hierarchy.strictly_doubling())
        throw config_error("gen-data: dataset hierarchies must double between adjacent levels");
    const int threads = thread_count();
    Dataset data;
    std::vector<std::vector<Field>> coefficients;
    const std::vector<std::vector<Field>>* coeff_ptr = nullptr;

    if (cfg.benchmark == Benchmark::darcy) {
        DarcyDataset raw = generate_darcy_dataset(cfg.n_samples, cfg.hierarchy, grf_spec_for(cfg), cfg.seed,
                                                  cfg.darcy_forcing, threads);
        coefficients.resize(cfg.hierarchy.resolutions.size());
        for (size_t l = 0; l < coefficients.size(); ++l)
            for (auto& s : raw.samples) coefficients[l].push_back(std::move(s.coefficient[l]));
        data = Dataset::from_darcy(cfg.hierarchy, std::move(raw));
        coeff_ptr = &coefficients;
    } else {
        BurgersDataset raw = generate_burgers_dataset(cfg.n_samples, cfg.hierarchy, grf_spec_for(cfg),
                                                      cfg.burgers_viscosity, cfg.burgers_horizon, cfg.seed,
                                                      threads);
        data = Dataset::from_burgers(cfg.hierarchy, std::move(raw));
    }

    // multi-fidelity premise check: finest restricted vs coarsest output
    double corr_mean = 0.0, corr_min = 1.0;
    for (int i = 0; i < data.n_samples(); ++i) {
        const double c = multi_fidelity_correlation(data.levels.back()[i], data.levels.front()[i]);
        corr_mean += c;
        corr_min = std::min(corr_min, c);
    }
    corr_mean /= data.n_samples();

    save_dataset(cfg, data, coeff_ptr,
                 {{"premise_corr_mean", format_real(corr_mean)}, {"premise_corr_min", format_real(corr_min)}});
    std::ostringstream s;
    s << "gen-data: " << to_string(cfg.benchmark) << " n=" << data.n_samples() << " hierarchy=";
    for (int r : cfg.hierarchy.resolutions) s << r << " ";
    s << "premise_corr_mean=" << format_real(corr_mean) << " -> " << paths::dataset(cfg);
    return s.str();
}

/// Maps the on-disk dataset onto the variant's training view: the single
/// variant sees only the coarsest and finest levels. (multires_single
/// trains on the full pooled view and is evaluated coarsest-to-finest via
/// its own two-level model, so it keeps the full dataset here.)
inline Dataset variant_view(const ExperimentConfig& vcfg, const Dataset& full) {
    if (vcfg.variant != Variant::single) return full;
    Dataset view;
    view.hierarchy = GridHierarchy({full.hierarchy.coarsest(), full.hierarchy.finest()});
    view.channels = full.channels;
    view.split = full.split;
    view.hash_hex = full.hash_hex;
    view.levels.push_back(full.levels.front());
    view.levels.push_back(full.levels.back());
    return view;
}

inline std::string cmd_stats(const ExperimentConfig& cfg) {
    Dataset data = load_dataset(paths::dataset(cfg));
    const bool field_stats = cfg.variant == Variant::field;
    ArrayContainer c;
    std::ostringstream s;
    s << "stats:";
    for (int l = 0; l < data.hierarchy.levels(); ++l) {
        std::vector<Field> residuals;
        for (int idx : data.split.train) {
            Field r = data.levels[l + 1][idx];
            if (!field_stats) {
                Field lifted = prolong_bilinear(data.levels[l][idx], data.hierarchy.resolutions[l + 1]);
                for (size_t j = 0; j < r.values.size(); ++j) r.values[j] -= lifted.values[j];
            }
            residuals.push_back(std::move(r));
        }
        ResidualStats st = compute_residual_stats(residuals, l);
        c.add_f64("sigma2_level_" + std::to_string(l),
                  {static_cast<uint32_t>(st.channels), static_cast<uint32_t>(st.height),
                   static_cast<uint32_t>(st.width)},
                  st.sigma2.data());
        double mean_sigma2 = 0.0;
        for (double v : st.sigma2) mean_sigma2 += v;
        mean_sigma2 /= st.sigma2.size();
        s << " level" << l << " mean_sigma2=" << format_real(mean_sigma2);
    }
    c.metadata = make_metadata(cfg, "stats", data.hash_hex,
                               {{"stats_kind", field_stats ? "field" : "residual"}});
    c.save(paths::stats(cfg));
    s << " -> " << paths::stats(cfg);
    return s.str();
}

namespace detail {

/// Pooled multi-resolution pretraining for the multires_single control:
/// one network trained on adjacent-level pairs from every cascade level.
inline std::pair<NetParams, ResidualStats> pretrain_multires_single(const Dataset& full,
                                                                    const ExperimentConfig& vcfg,
                                                                    int threads,
                                                                    std::vector<TrainLogRow>* log) {
    const TrainConfig& tc = vcfg.train;
    struct Pair {
        Field lifted;
        const Field* target;
        ResidualStats* stats;
    };
    const int L = full.hierarchy.levels();
    std::vector<ResidualStats> level_stats(L);
    std::vector<Pair> pairs;
    for (int l = 0; l < L; ++l) {
        std::vector<Field> residuals;
        for (int idx : full.split.train) {
            Field lifted = prolong_bilinear(full.levels[l][idx], full.hierarchy.resolutions[l + 1]);
            Field r = full.levels[l + 1][idx];
            for (size_t j = 0; j < r.values.size(); ++j) r.values[j] -= lifted.values[j];
            residuals.push_back(std::move(r));
            pairs.push_back({std::move(lifted), &full.levels[l + 1][idx], &level_stats[l]});
        }
        level_stats[l] = compute_residual_stats(residuals, l);
    }

    NetConfig ncfg = vcfg.net_for_level(0, full.channels);
    NetParams params = init_net_params(ncfg, derive_seed(tc.seed, "init.multires", 0));
    std::vector<double> ema = params.data;
    AdamWState opt(params.layout.total);

    const int n_train = static_cast<int>(pairs.size());
    const int n_batches = (n_train + tc.batch_size - 1) / tc.batch_size;
    const long total_steps = static_cast<long>(tc.epochs_pretrain) * n_batches;
    long step = 0;
    std::vector<int> order(n_train);
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= tc.epochs_pretrain; ++epoch) {
        RngStream shuffle_rng(derive_seed(tc.seed, "shuffle.multires", epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
        RngStream t_stream(derive_seed(tc.seed, "fm.t.multires", epoch));
        RngStream eps_rng(derive_seed(tc.seed, "fm.eps.multires", epoch));

        double epoch_loss = 0.0;
        for (int b = 0; b < n_batches; ++b) {
            std::vector<int> batch_idx(order.begin() + b * tc.batch_size,
                                       order.begin() + std::min((b + 1) * tc.batch_size, n_train));
            // draw randomness in batch order, then group same-size items
            std::vector<Field> delta_t_fields(batch_idx.size()), target_fields(batch_idx.size());
            std::vector<FmItem> items(batch_idx.size());
            for (size_t i = 0; i < batch_idx.size(); ++i) {
                const Pair& pr = pairs[batch_idx[i]];
                const double t = t_stream.uniform();
                Field eps = sample_source(*pr.stats, vcfg.source_for_level(0), eps_rng);
                Field dt(eps.channels, eps.height, eps.width), reg(eps.channels, eps.height, eps.width);
                for (size_t j = 0; j < dt.values.size(); ++j) {
                    const double delta = pr.target->values[j] - pr.lifted.values[j];
                    dt.values[j] = t * delta + (1.0 - t) * eps.values[j];
                    reg.values[j] = delta - eps.values[j];
                }
                delta_t_fields[i] = std::move(dt);
                target_fields[i] = std::move(reg);
                items[i] = {&delta_t_fields[i], t, &pr.lifted, &target_fields[i]};
            }
            std::stable_sort(items.begin(), items.end(),
                             [](const FmItem& a, const FmItem& b) { return a.delta_t->height < b.delta_t->height; });

            std::vector<double> grad;
            const double loss = fm_loss_and_gradients(params, items, grad, threads);
            if (!std::isfinite(loss)) throw solver_error("multires pretrain: non-finite loss", loss);
            clip_global_norm(grad, tc.clip_norm);
            adamw_step(params.data, grad, opt, cosine_lr(step, total_steps, tc.lr), tc.beta1, tc.beta2,
                       tc.adam_eps, tc.weight_decay);
            ema_update(ema, params.data, tc.ema_decay);
            ++step;
            epoch_loss += loss;
        }
        if (log)
            log->push_back({"pretrain_multires", epoch, epoch_loss / n_batches, 0.0,
                            cosine_lr(std::min(step, total_steps), total_steps, tc.lr)});
    }
    params.data = ema;

    // direct coarsest-to-finest residual statistics for the evaluation view
    std::vector<Field> direct_residuals;
    for (int idx : full.split.train) {
        Field lifted = prolong_bilinear(full.levels.front()[idx], full.hierarchy.finest());
        Field r = full.levels.back()[idx];
        for (size_t j = 0; j < r.values.size(); ++j) r.values[j] -= lifted.values[j];
        direct_residuals.push_back(std::move(r));
    }
    return {std::move(params), compute_residual_stats(direct_residuals, 0)};
}

}  // namespace detail

/// Per-level pretraining for all (or one) levels of the variant's cascade.
inline Checkpoint run_pretrain(const ExperimentConfig& cfg, const Dataset& full, int only_level = -1,
                               std::vector<TrainLogRow>* log = nullptr) {
    const ExperimentConfig vcfg = cfg.with_variant(cfg.variant);
    const int threads = thread_count();
    Checkpoint cp;
    cp.stage = "pretrain";
    cp.model.field_mode = (cfg.variant == Variant::field);

    if (cfg.variant == Variant::multires_single) {
        auto [params, stats] = detail::pretrain_multires_single(full, vcfg, threads, log);
        cp.model.hierarchy = GridHierarchy({full.hierarchy.coarsest(), full.hierarchy.finest()});
        cp.model.levels.push_back(std::move(params));
        cp.model.stats.push_back(std::move(stats));
        cp.model.sources.push_back(vcfg.source_for_level(0));
        cp.model.validate();
        return cp;
    }

    const Dataset view = variant_view(vcfg, full);
    cp.model.hierarchy = view.hierarchy;
    const int L = view.hierarchy.levels();
    const bool field_target = cp.model.field_mode;

    for (int l = 0; l < L; ++l) {
        const NetConfig ncfg = vcfg.net_for_level(l, view.channels);
        const SourceSpec ss = vcfg.source_for_level(l);
        if (only_level >= 0 && l != only_level) {
            // untrained placeholder keeps the checkpoint structurally complete
            NetParams p = init_net_params(ncfg, derive_seed(vcfg.train.seed, "init", l));
            std::vector<Field> residuals;
            for (int idx : view.split.train) {
                Field lifted = prolong_bilinear(view.levels[l][idx], view.hierarchy.resolutions[l + 1]);
                Field r = view.levels[l + 1][idx];
                if (!field_target)
                    for (size_t j = 0; j < r.values.size(); ++j) r.values[j] -= lifted.values[j];
                residuals.push_back(std::move(r));
            }
            cp.model.levels.push_back(std::move(p));
            cp.model.stats.push_back(compute_residual_stats(residuals, l));
            cp.model.sources.push_back(ss);
            continue;
        }
        auto [params, stats] = pretrain_level(view, l, ncfg, vcfg.train, ss, field_target, threads, log);
        cp.model.levels.push_back(std::move(params));
        cp.model.stats.push_back(std::move(stats));
        cp.model.sources.push_back(ss);
    }
    cp.model.validate();

    // validation NRMSE of the pretrained cascade (deterministic rollout)
    std::vector<const Field*> val_u0, val_uL;
    for (int idx : view.split.val) {
        val_u0.push_back(&view.levels.front()[idx]);
        val_uL.push_back(&view.levels.back()[idx]);
    }
    if (!val_u0.empty()) cp.val_nrmse = eval_cascade(cp.model, val_u0, val_uL, threads);
    return cp;
}

inline std::string cmd_train_level(const ExperimentConfig& cfg, int level) {
    Dataset data = load_dataset(paths::dataset(cfg));
    std::vector<TrainLogRow> log;
    Checkpoint existing;
    bool have_existing = std::filesystem::exists(paths::checkpoint_pretrain(cfg));
    if (have_existing) existing = load_checkpoint(paths::checkpoint_pretrain(cfg));

    Checkpoint cp = run_pretrain(cfg, data, level, &log);
    if (have_existing && existing.model.n_levels() == cp.model.n_levels()) {
        for (int l = 0; l < cp.model.n_levels(); ++l)
            if (l != level) cp.model.levels[l] = existing.model.levels[l];
    }
    write_train_log(paths::train_log_csv(cfg), log);
    save_checkpoint(paths::checkpoint_pretrain(cfg), cp, cfg, data.hash_hex);
    std::ostringstream s;
    s << "train-level " << level << ": done, val_nrmse=" << format_real(cp.val_nrmse) << " -> "
      << paths::checkpoint_pretrain(cfg);
    return s.str();
}

inline std::string cmd_train_all(const ExperimentConfig& cfg) {
    Dataset data = load_dataset(paths::dataset(cfg));
    std::vector<TrainLogRow> log;
    Checkpoint cp = run_pretrain(cfg, data, -1, &log);
    write_train_log(paths::train_log_csv(cfg), log);
    save_checkpoint(paths::checkpoint_pretrain(cfg), cp, cfg, data.hash_hex);
    std::ostringstream s;
    s << "train-all: " << cp.model.n_levels() << " level(s), val_nrmse=" << format_real(cp.val_nrmse)
      << " -> " << paths::checkpoint_pretrain(cfg);
    return s.str();
}

inline std::string cmd_finetune(const ExperimentConfig& cfg, bool stochastic) {
    Dataset full = load_dataset(paths::dataset(cfg));
    const ExperimentConfig vcfg = cfg.with_variant(cfg.variant);
    const Dataset view = variant_view(vcfg, full);
    Checkpoint pre = load_checkpoint(paths::checkpoint_pretrain(cfg));
    const int threads = thread_count();
    std::vector<TrainLogRow> log;
    const std::string out_path = stochastic ? paths::checkpoint_stochastic(cfg) : paths::checkpoint_e2e(cfg);
    auto on_select = [&](const Checkpoint& best) { save_checkpoint(out_path, best, cfg, full.hash_hex); };

    Checkpoint cp = stochastic ? stochastic_e2e_finetune(pre.model, view, vcfg.train, cfg.k_train, cfg.k_val,
                                                         threads, &log, on_select)
                               : e2e_finetune(pre.model, view, vcfg.train, threads, &log, on_select);
    write_train_log(paths::train_log_csv(cfg), log);
    save_checkpoint(out_path, cp, cfg, full.hash_hex);
    std::ostringstream s;
    s << (stochastic ? "finetune-stochastic" : "finetune-e2e") << ": best epoch " << cp.epoch
      << " val_nrmse=" << format_real(cp.val_nrmse) << " -> " << out_path;
    return s.str();
}

/// Picks the best available checkpoint (e2e preferred over pretrain).
inline Checkpoint load_best_checkpoint(const ExperimentConfig& cfg) {
    if (std::filesystem::exists(paths::checkpoint_e2e(cfg))) return load_checkpoint(paths::checkpoint_e2e(cfg));
    if (std::filesystem::exists(paths::checkpoint_pretrain(cfg)))
        return load_checkpoint(paths::checkpoint_pretrain(cfg));
    throw config_error("no checkpoint found under " + cfg.output_dir + "; run train-all first");
}

inline std::string cmd_predict(const ExperimentConfig& cfg, int n_pgm_dumps = 4) {
    Dataset full = load_dataset(paths::dataset(cfg));
    const ExperimentConfig vcfg = cfg.with_variant(cfg.variant);
    const Dataset view = variant_view(vcfg, full);
    Checkpoint cp = load_best_checkpoint(cfg);
    const int threads = thread_count();
    const int finest = view.hierarchy.finest();

    const auto& test = view.split.test;
    std::vector<Field> predictions(test.size());
    std::vector<double> model_err(test.size()), bilinear_err(test.size());
    parallel_chunks(test.size(), threads, [&](int, size_t begin, size_t end) {
        for (size_t i = begin; i < end; ++i) {
            const Field& u0 = view.levels.front()[test[i]];
            const Field& truth = view.levels.back()[test[i]];
            predictions[i] = predict_deterministic(cp.model, u0);
            model_err[i] = nrmse(predictions[i], truth);
            bilinear_err[i] = nrmse(prolong_bilinear(u0, finest), truth);
        }
    });
    double model_nrmse = 0.0, bilinear_nrmse = 0.0;
    for (size_t i = 0; i < test.size(); ++i) {
        model_nrmse += model_err[i];
        bilinear_nrmse += bilinear_err[i];
    }
    model_nrmse /= test.size();
    bilinear_nrmse /= test.size();

    // predictions container
    {
        ArrayContainer c;
        const Field& first = predictions[0];
        std::vector<double> flat;
        for (const Field& f : predictions) flat.insert(flat.end(), f.values.begin(), f.values.end());
        c.add_f32("prediction",
                  {static_cast<uint32_t>(test.size()), static_cast<uint32_t>(first.channels),
                   static_cast<uint32_t>(first.height), static_cast<uint32_t>(first.width)},
                  flat.data());
        c.add_f64("nrmse_per_sample", {static_cast<uint32_t>(test.size())}, model_err.data());
        c.metadata = make_metadata(cfg, "predict", full.hash_hex,
                                   {{"test_nrmse", format_real(model_nrmse)},
                                    {"bilinear_nrmse", format_real(bilinear_nrmse)},
                                    {"checkpoint_stage", cp.stage}});
        c.save(paths::predictions(cfg));
    }

    // qualitative PGM dumps for the first few test samples
    std::filesystem::create_directories(cfg.output_dir + "/pgm");
    for (int i = 0; i < std::min<int>(n_pgm_dumps, static_cast<int>(test.size())); ++i) {
        const Field& u0 = view.levels.front()[test[i]];
        const Field& truth = view.levels.back()[test[i]];
        write_pgm(cfg.output_dir + "/pgm/test" + std::to_string(i) + "_prediction.pgm", predictions[i]);
        write_pgm(cfg.output_dir + "/pgm/test" + std::to_string(i) + "_truth.pgm", truth);
        write_pgm(cfg.output_dir + "/pgm/test" + std::to_string(i) + "_bilinear.pgm",
                  prolong_bilinear(u0, finest));
    }

    const std::string header = "method,test_nrmse,dataset_hash,build";
    append_csv(paths::results_csv(cfg), header,
               "bilinear," + format_real(bilinear_nrmse) + "," + full.hash_hex + "," + build_id());
    append_csv(paths::results_csv(cfg), header,
               "mffm-cascade," + format_real(model_nrmse) + "," + full.hash_hex + "," + build_id());

    std::ostringstream s;
    s << "predict: test_nrmse=" << format_real(model_nrmse)
      << " bilinear=" << format_real(bilinear_nrmse) << " (" << cp.stage << " checkpoint) -> "
      << paths::predictions(cfg);
    return s.str();
}

inline std::string cmd_nfe_scan(const ExperimentConfig& cfg, const std::vector<int>& nfe_list = {1, 2, 5, 10, 50}) {
    Dataset full = load_dataset(paths::dataset(cfg));
    const ExperimentConfig vcfg = cfg.with_variant(cfg.variant);
    const Dataset view = variant_view(vcfg, full);
    Checkpoint cp = load_best_checkpoint(cfg);
    std::vector<Field> inputs, truths;
    for (int idx : view.split.test) {
        inputs.push_back(view.levels.front()[idx]);
        truths.push_back(view.levels.back()[idx]);
    }
    auto rows = nfe_scan(cp.model, inputs, truths, nfe_list, thread_count());
    for (const auto& r : rows)
        append_csv(paths::nfe_csv(cfg), "nfe_per_level,total_nfe,test_nrmse,dataset_hash",
                   std::to_string(r.nfe_per_level) + "," + std::to_string(r.total_nfe) + "," +
                       format_real(r.nrmse) + "," + full.hash_hex);
    std::ostringstream s;
    s << "nfe-scan:";
    for (const auto& r : rows) s << " nfe" << r.nfe_per_level << "=" << format_real(r.nrmse);
    s << " -> " << paths::nfe_csv(cfg);
    return s.str();
}

inline std::string cmd_uq_eval(const ExperimentConfig& cfg, int K) {
    Dataset full = load_dataset(paths::dataset(cfg));
    const ExperimentConfig vcfg = cfg.with_variant(cfg.variant);
    const Dataset view = variant_view(vcfg, full);
    Checkpoint cp = load_best_checkpoint(cfg);
    const int threads = thread_count();

    const auto& test = view.split.test;
    std::vector<EnsemblePrediction> ensembles(test.size());
    std::vector<Field> truths;
    for (size_t i = 0; i < test.size(); ++i) truths.push_back(view.levels.back()[test[i]]);
    parallel_chunks(test.size(), threads, [&](int, size_t begin, size_t end) {
        for (size_t i = begin; i < end; ++i)
            ensembles[i] = sample_stochastic_ensemble(cp.model, view.levels.front()[test[i]], K,
                                                      derive_seed(cfg.seed, "uq.sample", test[i]),
                                                      cfg.ensemble_nfe, 1);
    });
    UqReport r = uq_metrics(ensembles, truths);
    double spread = 0.0;
    for (const auto& e : ensembles) spread += e.spread;
    spread /= ensembles.size();

    append_csv(paths::uq_csv(cfg),
               "nrmse,crps,cov90,sharp90,spread_rmse,corr_sigma_abserr,cal_err,K,spread,dataset_hash",
               format_real(r.nrmse) + "," + format_real(r.crps) + "," + format_real(r.coverage90) + "," +
                   format_real(r.sharpness90) + "," + format_real(r.spread_over_rmse) + "," +
                   format_real(r.corr_sigma_abserr) + "," + format_real(r.cal_err) + "," + std::to_string(K) +
                   "," + format_real(spread) + "," + full.hash_hex);
    std::ostringstream s;
    s << "uq-eval: K=" << K << " nrmse=" << format_real(r.nrmse) << " crps=" << format_real(r.crps)
      << " cov90=" << format_real(r.coverage90) << " spread/rmse=" << format_real(r.spread_over_rmse)
      << " cal_err=" << format_real(r.cal_err) << " -> " << paths::uq_csv(cfg);
    return s.str();
}

/// Trains and evaluates one ablation variant end to end on the shared
/// dataset; returns its test NRMSE.
inline double run_variant(const ExperimentConfig& base, Variant v, std::vector<TrainLogRow>* log) {
    ExperimentConfig cfg = base.with_variant(v);
    Dataset full = load_dataset(paths::dataset(base));
    const Dataset view = variant_view(cfg, full);
    const int threads = thread_count();

    Checkpoint pre = run_pretrain(cfg, full, -1, log);
    Checkpoint best = e2e_finetune(pre.model, view, cfg.train, threads, log);

    std::vector<const Field*> test_u0, test_uL;
    for (int idx : view.split.test) {
        test_u0.push_back(&view.levels.front()[idx]);
        test_uL.push_back(&view.levels.back()[idx]);
    }
    return eval_cascade(best.model, test_u0, test_uL, threads);
}

inline std::string cmd_ablate(const ExperimentConfig& cfg, const std::string& variant_name) {
    Dataset full = load_dataset(paths::dataset(cfg));
    std::vector<Variant> variants;
    if (variant_name == "all")
        variants = {Variant::none, Variant::noblur, Variant::iid, Variant::single, Variant::field,
                    Variant::multires_single};
    else
        variants = {variant_from_string(variant_name)};

    std::ostringstream s;
    s << "ablate:";
    for (Variant v : variants) {
        std::vector<TrainLogRow> log;
        const double err = run_variant(cfg, v, &log);
        write_train_log(paths::train_log_csv(cfg), log);
        append_csv(paths::ablation_csv(cfg), "variant,test_nrmse,dataset_hash,build,seed",
                   to_string(v) + "," + format_real(err) + "," + full.hash_hex + "," + build_id() + "," +
                       std::to_string(cfg.seed));
        s << " " << to_string(v) << "=" << format_real(err);
    }
    s << " -> " << paths::ablation_csv(cfg);
    return s.str();
}

/// Merges result rows into report.csv; refuses to mix artifacts built
/// against different datasets.
inline std::string cmd_report(const ExperimentConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> rows;  // method -> nrmse
    std::string expect_hash;
    auto ingest = [&](const std::string& path, int method_col, int nrmse_col, int hash_col) {
        if (!std::filesystem::exists(path)) return;
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);  // header
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::vector<std::string> cols;
            std::istringstream ss(line);
            std::string tok;
            while (std::getline(ss, tok, ',')) cols.push_back(tok);
            if (static_cast<int>(cols.size()) <= std::max({method_col, nrmse_col, hash_col})) continue;
            const std::string& hash = cols[hash_col];
            if (expect_hash.empty())
                expect_hash = hash;
            else if (hash != expect_hash)
                throw format_error("report: dataset hash mismatch across result files (" + expect_hash +
                                   " vs " + hash + " in " + path + ")");
            rows.emplace_back(method_col < 0 ? "" : cols[method_col], cols[nrmse_col]);
        }
    };
    ingest(paths::results_csv(cfg), 0, 1, 2);
    // ablation rows get a variant prefix so they sort next to each other
    if (std::filesystem::exists(paths::ablation_csv(cfg))) {
        std::ifstream in(paths::ablation_csv(cfg));
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::vector<std::string> cols;
            std::istringstream ss(line);
            std::string tok;
            while (std::getline(ss, tok, ',')) cols.push_back(tok);
            if (cols.size() < 3) continue;
            if (expect_hash.empty())
                expect_hash = cols[2];
            else if (cols[2] != expect_hash)
                throw format_error("report: dataset hash mismatch across result files");
            rows.emplace_back("ablation-" + cols[0], cols[1]);
        }
    }
    if (rows.empty()) throw config_error("report: no result rows found under " + cfg.output_dir);

    std::ofstream out(paths::report_csv(cfg));
    out << "method,test_nrmse,dataset_hash,build\n";
    for (const auto& [m, v] : rows) out << m << "," << v << "," << expect_hash << "," << build_id() << "\n";
    std::ostringstream s;
    s << "report: " << rows.size() << " row(s), dataset " << expect_hash << " -> " << paths::report_csv(cfg);
    return s.str();
}

}  // namespace mffm
