#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mbe/experiment.hpp"

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw mbe::ConfigError("cannot open config '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& body) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << body;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Martingale Berry-Esseen laboratory"};
    app.require_subcommand(1);
    std::string config_path, out_path;
    std::uint64_t seed = 0;
    unsigned threads = 0;

    const char* names[] = {"simulate", "distance", "ratefit", "markov", "check"};
    const char* help[] = {"sample S_n / sqrt(n) over the n grid",
                          "Kolmogorov distance to the Gaussian limit over the n grid",
                          "distance, bounds and log-log rate fits",
                          "Markov-chain pipeline: kappa, Yurinskii augmentation, bound",
                          "integral lemma sweep and Gaussian-engine cross-oracles"};
    std::vector<CLI::App*> subs;
    for (int i = 0; i < 5; ++i) {
        auto* sub = app.add_subcommand(names[i], help[i]);
        auto* cfg = sub->add_option("--config", config_path, "JSON experiment config");
        if (i != 4) cfg->required();
        sub->add_option("--out", out_path, "CSV output path; the JSON report goes next to it");
        sub->add_option("--seed", seed, "master seed (overrides the config)");
        sub->add_option("--threads", threads, "worker threads (default: MBE_THREADS or all cores)");
        subs.push_back(sub);
    }
    CLI11_PARSE(app, argc, argv);

    std::string command;
    bool seed_given = false;
    for (int i = 0; i < 5; ++i) {
        if (subs[i]->parsed()) {
            command = names[i];
            seed_given = subs[i]->count("--seed") > 0;
        }
    }

    mbe::ExperimentConfig cfg;
    try {
        if (!config_path.empty()) cfg = mbe::parse_config(read_file(config_path));
        if (seed_given) cfg.master_seed = seed;
    } catch (const mbe::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        mbe::CommandResult res;
        if (command == "simulate") res = mbe::cmd_simulate(cfg, threads);
        else if (command == "distance") res = mbe::cmd_distance(cfg, threads);
        else if (command == "ratefit") res = mbe::cmd_ratefit(cfg, threads);
        else if (command == "markov") res = mbe::cmd_markov(cfg, threads);
        else res = mbe::cmd_check(cfg, threads);

        std::filesystem::path out = out_path.empty() ? cfg.output : out_path;
        if (!out.empty()) {
            if (!res.csv.empty()) write_file(out, res.csv);
            std::filesystem::path report = out;
            report.replace_extension(".json");
            write_file(report, res.report.dump(2) + "\n");
        } else if (!res.csv.empty()) {
            std::cout << res.csv;
        }
        std::cout << res.text;
        return res.exit_code;
    } catch (const mbe::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
