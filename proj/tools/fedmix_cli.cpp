// fedmix: partition | run | sweep | verify
//
// Exit codes: 0 ok, 1 config error, 2 property failure, 3 divergence.
#include <iostream>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "fedmix/harness.hpp"

namespace {

using namespace fedmix;

enum Exit : int { ok = 0, config_error = 1, property_failure = 2, divergence = 3 };

struct Options {
    std::string config;
    std::uint64_t seed = 0;
    std::string out;
    std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
};

harness::ExperimentSpec resolve(const Options& o, const CLI::App& sub) {
    harness::ExperimentSpec s = o.config.empty() ? harness::ExperimentSpec{} : harness::load_config(o.config);
    if (sub.count("--seed")) s.seeds = {o.seed};
    if (sub.count("--out")) s.out = o.out;
    if (o.threads < 1) throw ConfigError("threads", "must be >= 1");
    return s;
}

void print_summary(const harness::SweepReport& r) {
    for (const auto& c : r.cells) {
        auto m = c.median_final();
        std::cout << (c.key.empty() ? "run" : c.key) << "  "
                  << (c.status == harness::CellStatus::ok        ? "ok"
                      : c.status == harness::CellStatus::invalid ? "invalid"
                                                                 : "diverged");
        if (m) std::cout << "  median_final_accuracy=" << harness::detail::fixed(*m, 4);
        if (!c.note.empty()) std::cout << "  (" << c.note << ")";
        std::cout << "\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated learning with mashed-data Mixup"};
    app.require_subcommand(1);
    Options o;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "JSON experiment config (defaults when omitted)")->check(CLI::ExistingFile);
        sub->add_option("--seed", o.seed, "Run a single seed instead of the config's list");
        sub->add_option("--out", o.out, "Output directory (overrides the config)");
        sub->add_option("--threads", o.threads, "Worker threads")->capture_default_str();
    };
    CLI::App* partition = app.add_subcommand("partition", "Write the datasets, client manifest and label histograms");
    CLI::App* run = app.add_subcommand("run", "Train one configuration for every seed");
    CLI::App* sweep = app.add_subcommand("sweep", "Train the full factorial of the config's sweep axes");
    CLI::App* verify = app.add_subcommand("verify", "Run the numerical property checks");
    for (auto* sub : {partition, run, sweep, verify}) add_common(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? Exit::ok : Exit::config_error;
    }

    try {
        if (*partition) {
            auto spec = resolve(o, *partition);
            auto shards = harness::cmd_partition(spec);
            std::cout << "wrote " << shards.size() << " client shards to " << spec.out << "\n";
            return Exit::ok;
        }
        if (*run || *sweep) {
            CLI::App& sub = *run ? *run : *sweep;
            auto spec = resolve(o, sub);
            auto report = *run ? harness::cmd_run(spec, o.threads) : harness::cmd_sweep(spec, o.threads);
            print_summary(report);
            std::cout << "summary: " << (std::filesystem::path(spec.out) / "summary.csv").string() << "\n";
            if (report.any_diverged()) return Exit::divergence;
            for (const auto& c : report.cells)
                if (*run && c.status == harness::CellStatus::invalid) {
                    std::cerr << "config error: " << c.note << "\n";
                    return Exit::config_error;
                }
            return Exit::ok;
        }
        auto spec = resolve(o, *verify);
        auto results = harness::cmd_verify(spec, o.threads);
        harness::print_report(std::cout, results);
        for (const auto& r : results)
            if (!r.passed) return Exit::property_failure;
        return Exit::ok;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return Exit::config_error;
    } catch (const PartitionError& e) {
        std::cerr << "partition error: " << e.what() << "\n";
        return Exit::config_error;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return Exit::config_error;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return Exit::divergence;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return Exit::config_error;
    }
}
