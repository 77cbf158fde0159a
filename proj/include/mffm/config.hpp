#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mffm/core.hpp"
#include "mffm/net.hpp"
#include "mffm/residual.hpp"
#include "mffm/train.hpp"

namespace mffm {

/// Flat UTF-8 "key = value" file with [section] headers and # comments.
class KeyValueFile {
public:
    static KeyValueFile parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw config_error("config: cannot open '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return parse_text(ss.str(), path);
    }

    static KeyValueFile parse_text(const std::string& text, const std::string& origin = "<text>") {
        KeyValueFile kv;
        kv.raw_ = text;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw config_error(origin + ":" + std::to_string(lineno) + ": malformed section header");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw config_error(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty()) throw config_error(origin + ":" + std::to_string(lineno) + ": empty key");
            kv.map_[section.empty() ? key : section + "." + key] = value;
        }
        return kv;
    }

    const std::string& raw_text() const { return raw_; }

    bool has(const std::string& key) const { return map_.count(key) > 0; }

    std::string get_string(const std::string& key) const {
        auto it = map_.find(key);
        if (it == map_.end()) throw config_error("config: missing key '" + key + "'");
        return it->second;
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = map_.find(key);
        return it == map_.end() ? fallback : it->second;
    }

    double get_real(const std::string& key) const { return to_real(key, get_string(key)); }
    double get_real(const std::string& key, double fallback) const {
        return has(key) ? get_real(key) : fallback;
    }

    long get_int(const std::string& key) const { return to_int(key, get_string(key)); }
    long get_int(const std::string& key, long fallback) const { return has(key) ? get_int(key) : fallback; }

    std::vector<long> get_int_list(const std::string& key) const {
        std::istringstream ss(get_string(key));
        std::vector<long> out;
        std::string tok;
        while (ss >> tok) out.push_back(to_int(key, tok));
        if (out.empty()) throw config_error("config: empty list for '" + key + "'");
        return out;
    }

    std::vector<double> get_real_list(const std::string& key) const {
        std::istringstream ss(get_string(key));
        std::vector<double> out;
        std::string tok;
        while (ss >> tok) out.push_back(to_real(key, tok));
        if (out.empty()) throw config_error("config: empty list for '" + key + "'");
        return out;
    }

private:
    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }
    static double to_real(const std::string& key, const std::string& v) {
        try {
            size_t pos = 0;
            const double x = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return x;
        } catch (const std::exception&) {
            throw config_error("config: '" + key + "' is not a real number: '" + v + "'");
        }
    }
    static long to_int(const std::string& key, const std::string& v) {
        try {
            size_t pos = 0;
            const long x = std::stol(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return x;
        } catch (const std::exception&) {
            throw config_error("config: '" + key + "' is not an integer: '" + v + "'");
        }
    }

    std::map<std::string, std::string> map_;
    std::string raw_;
};

enum class Benchmark { darcy, burgers };
enum class Variant { none, iid, noblur, single, field, multires_single, stochastic_e2e };

inline Benchmark benchmark_from_string(const std::string& s) {
    if (s == "darcy") return Benchmark::darcy;
    if (s == "burgers") return Benchmark::burgers;
    throw config_error("unknown benchmark '" + s + "'");
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "none" || s == "cascade") return Variant::none;
    if (s == "iid") return Variant::iid;
    if (s == "noblur") return Variant::noblur;
    if (s == "single") return Variant::single;
    if (s == "field") return Variant::field;
    if (s == "multires_single") return Variant::multires_single;
    if (s == "stochastic_e2e") return Variant::stochastic_e2e;
    throw config_error("unknown variant '" + s + "'");
}

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::none: return "cascade";
        case Variant::iid: return "iid";
        case Variant::noblur: return "noblur";
        case Variant::single: return "single";
        case Variant::field: return "field";
        case Variant::multires_single: return "multires_single";
        case Variant::stochastic_e2e: return "stochastic_e2e";
    }
    return "?";
}

inline std::string to_string(Benchmark b) { return b == Benchmark::darcy ? "darcy" : "burgers"; }

/// Full experiment description as read from one config file.
struct ExperimentConfig {
    Benchmark benchmark = Benchmark::darcy;
    Variant variant = Variant::none;
    std::string output_dir = "out";
    uint64_t seed = 0;

    GridHierarchy hierarchy;
    int n_samples = 144;
    double grf_length_scale = 0.1;  // fraction of the domain
    double grf_variance = 1.0;
    double darcy_forcing = 1.0;
    double burgers_viscosity = 0.01;
    double burgers_horizon = 1.0;

    std::vector<int> hidden;  // per level
    std::vector<int> blocks;  // per level (per stack)
    int groups = 8;
    int time_embed_dim = 64;
    int single_hidden = 64;  // single / multires_single variants
    int single_blocks = 4;

    TrainConfig train;
    SourceSpec source;
    std::vector<double> tau_per_level;  // broadcast of source.tau when absent
    int k_train = 4, k_val = 8, k_test = 10;
    int ensemble_nfe = 1;

    std::string raw_text;  // config echo for provenance

    static ExperimentConfig load(const std::string& path) { return from_kv(KeyValueFile::parse_file(path)); }

    static ExperimentConfig from_kv(const KeyValueFile& kv) {
        ExperimentConfig c;
        c.benchmark = benchmark_from_string(kv.get_string("experiment.benchmark"));
        c.variant = variant_from_string(kv.get_string("experiment.variant", "none"));
        c.output_dir = kv.get_string("experiment.output_dir");
        c.seed = static_cast<uint64_t>(kv.get_int("experiment.seed", 0));

        std::vector<int> res;
        for (long r : kv.get_int_list("hierarchy.resolutions")) res.push_back(static_cast<int>(r));
        c.hierarchy = GridHierarchy(res);

        c.n_samples = static_cast<int>(kv.get_int("dataset.n_samples", 144));
        c.grf_length_scale = kv.get_real("dataset.grf_length_scale", 0.1);
        c.grf_variance = kv.get_real("dataset.grf_variance", 1.0);
        c.darcy_forcing = kv.get_real("dataset.darcy_forcing", 1.0);
        c.burgers_viscosity = kv.get_real("dataset.burgers_viscosity", 0.01);
        c.burgers_horizon = kv.get_real("dataset.burgers_horizon", 1.0);

        auto to_ints = [](const std::vector<long>& v) {
            std::vector<int> out;
            for (long x : v) out.push_back(static_cast<int>(x));
            return out;
        };
        c.hidden = to_ints(kv.get_int_list("net.hidden"));
        c.blocks = to_ints(kv.get_int_list("net.blocks"));
        c.groups = static_cast<int>(kv.get_int("net.groups", 8));
        c.time_embed_dim = static_cast<int>(kv.get_int("net.time_embed_dim", 64));
        c.single_hidden = static_cast<int>(kv.get_int("net.single_hidden", 64));
        c.single_blocks = static_cast<int>(kv.get_int("net.single_blocks", 4));
        const int L = c.hierarchy.levels();
        if (static_cast<int>(c.hidden.size()) != L || static_cast<int>(c.blocks.size()) != L)
            throw config_error("config: net.hidden and net.blocks need one entry per hierarchy level pair");

        c.train.lr = kv.get_real("train.lr", 1e-5);
        c.train.beta1 = kv.get_real("train.beta1", 0.9);
        c.train.beta2 = kv.get_real("train.beta2", 0.999);
        c.train.weight_decay = kv.get_real("train.weight_decay", 1e-6);
        c.train.clip_norm = kv.get_real("train.clip_norm", 1.0);
        c.train.ema_decay = kv.get_real("train.ema_decay", 0.999);
        c.train.batch_size = static_cast<int>(kv.get_int("train.batch_size", 32));
        c.train.epochs_pretrain = static_cast<int>(kv.get_int("train.epochs_pretrain", 200));
        c.train.epochs_e2e = static_cast<int>(kv.get_int("train.epochs_e2e", 100));
        c.train.e2e_lr_factor = kv.get_real("train.e2e_lr_factor", 0.2);
        c.train.eps_e2e = kv.get_real("train.eps_e2e", 1e-8);
        c.train.seed = c.seed;
        c.train.validate();
        c.k_train = static_cast<int>(kv.get_int("train.k_train", 4));
        c.k_val = static_cast<int>(kv.get_int("train.k_val", 8));
        c.k_test = static_cast<int>(kv.get_int("train.k_test", 10));

        c.source.kind = source_kind_from_string(kv.get_string("source.kind", "calibrated_blur"));
        c.source.tau = kv.get_real("source.tau", 1.5);
        c.source.eps_num = kv.get_real("source.eps_num", 1e-8);
        if (kv.has("source.tau_per_level"))
            c.tau_per_level = kv.get_real_list("source.tau_per_level");
        c.ensemble_nfe = static_cast<int>(kv.get_int("source.ensemble_nfe", 1));

        c.raw_text = kv.raw_text();
        c.validate();
        return c;
    }

    void validate() const {
        if (n_samples < 6) throw config_error("config: n_samples must be >= 6 for a 4/1/1 split");
        if (grf_length_scale <= 0 || grf_variance < 0) throw config_error("config: bad GRF parameters");
        if (!tau_per_level.empty() && static_cast<int>(tau_per_level.size()) != hierarchy.levels())
            throw config_error("config: tau_per_level needs one entry per level");
        if (variant == Variant::single && hierarchy.levels() != 1) {
            // the variant transform below collapses the hierarchy; a raw
            // config may carry the full one
        }
    }

    /// Source spec for one cascade level (per-level tau when configured).
    SourceSpec source_for_level(int level) const {
        SourceSpec s = source;
        if (!tau_per_level.empty()) s.tau = tau_per_level[level];
        return s;
    }

    /// Network configuration for one cascade level.
    NetConfig net_for_level(int level, int channels) const {
        NetConfig n;
        n.channels = channels;
        n.hidden = hidden[level];
        n.n_blocks = blocks[level];
        n.n_groups = groups;
        n.time_embed_dim = time_embed_dim;
        return n;
    }

    /// Applies an ablation variant's structural constraints: single-shot
    /// variants collapse the hierarchy to {n_0, n_L} and use the dedicated
    /// single-model capacity; source-kind variants swap the source.
    ExperimentConfig with_variant(Variant v) const {
        ExperimentConfig c = *this;
        c.variant = v;
        switch (v) {
            case Variant::none:
            case Variant::field:
            case Variant::stochastic_e2e:
                break;
            case Variant::iid:
                c.source.kind = SourceKind::iid_matched;
                break;
            case Variant::noblur:
                c.source.kind = SourceKind::diagonal;
                break;
            case Variant::single:
            case Variant::multires_single: {
                c.hidden = {single_hidden};
                c.blocks = {single_blocks};
                if (v == Variant::single)
                    c.hierarchy = GridHierarchy({hierarchy.coarsest(), hierarchy.finest()});
                // multires_single keeps the full hierarchy for training
                // pairs but is evaluated coarsest-to-finest directly
                break;
            }
        }
        return c;
    }
};

}  // namespace mffm
