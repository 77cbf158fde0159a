#include <CLI11.hpp>
#include <iostream>
#include <string>

#include "mffm/pipeline.hpp"

namespace {

int run(const std::function<std::string(const mffm::ExperimentConfig&)>& fn, const std::string& config_path) {
    try {
        const mffm::ExperimentConfig cfg = mffm::ExperimentConfig::load(config_path);
        mffm::DirLock lock(cfg.output_dir);
        std::cout << fn(cfg) << std::endl;
        return 0;
    } catch (const mffm::config_error& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-fidelity flow-matching cascade for PDE super-resolution"};
    app.require_subcommand(1);

    std::string config_path;
    int level = 0;
    int samples = 10;
    std::string variant = "all";
    std::vector<int> nfe_list = {1, 2, 5, 10, 50};

    auto add_config = [&config_path](CLI::App* cmd) {
        cmd->add_option("-c,--config", config_path, "experiment config file")->required();
    };

    auto* gen = app.add_subcommand("gen-data", "generate the paired multi-resolution dataset");
    add_config(gen);
    auto* stats = app.add_subcommand("stats", "compute per-level residual statistics");
    add_config(stats);
    auto* train_level = app.add_subcommand("train-level", "flow-matching pretraining for one cascade level");
    add_config(train_level);
    train_level->add_option("-l,--level", level, "cascade level index")->required();
    auto* train_all = app.add_subcommand("train-all", "flow-matching pretraining for every cascade level");
    add_config(train_all);
    auto* ft = app.add_subcommand("finetune-e2e", "deterministic end-to-end cascade fine-tuning");
    add_config(ft);
    auto* fts = app.add_subcommand("finetune-stochastic", "stochastic end-to-end fine-tuning variant");
    add_config(fts);
    auto* predict = app.add_subcommand("predict", "deterministic test-set prediction and baseline");
    add_config(predict);
    auto* scan = app.add_subcommand("nfe-scan", "NRMSE across Euler evaluation counts");
    add_config(scan);
    scan->add_option("--nfe", nfe_list, "NFE-per-level values to scan");
    auto* uq = app.add_subcommand("uq-eval", "stochastic-ensemble uncertainty metrics");
    add_config(uq);
    uq->add_option("-K,--samples", samples, "ensemble members per test input");
    auto* ablate = app.add_subcommand("ablate", "train and evaluate ablation variants");
    add_config(ablate);
    ablate->add_option("-v,--variant", variant, "variant name or 'all'");
    auto* report = app.add_subcommand("report", "merge result CSVs into the final report");
    add_config(report);

    CLI11_PARSE(app, argc, argv);

    using mffm::ExperimentConfig;
    if (gen->parsed()) return run([](const ExperimentConfig& c) { return mffm::cmd_gen_data(c); }, config_path);
    if (stats->parsed()) return run([](const ExperimentConfig& c) { return mffm::cmd_stats(c); }, config_path);
    if (train_level->parsed())
        return run([&](const ExperimentConfig& c) { return mffm::cmd_train_level(c, level); }, config_path);
    if (train_all->parsed())
        return run([](const ExperimentConfig& c) { return mffm::cmd_train_all(c); }, config_path);
    if (ft->parsed())
        return run([](const ExperimentConfig& c) { return mffm::cmd_finetune(c, false); }, config_path);
    if (fts->parsed())
        return run([](const ExperimentConfig& c) { return mffm::cmd_finetune(c, true); }, config_path);
    if (predict->parsed())
        return run([](const ExperimentConfig& c) { return mffm::cmd_predict(c); }, config_path);
    if (scan->parsed())
        return run([&](const ExperimentConfig& c) { return mffm::cmd_nfe_scan(c, nfe_list); }, config_path);
    if (uq->parsed())
        return run([&](const ExperimentConfig& c) { return mffm::cmd_uq_eval(c, samples); }, config_path);
    if (ablate->parsed())
        return run([&](const ExperimentConfig& c) { return mffm::cmd_ablate(c, variant); }, config_path);
    if (report->parsed())
        return run([](const ExperimentConfig& c) { return mffm::cmd_report(c); }, config_path);
    return 2;
}
