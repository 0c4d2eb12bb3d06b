#include "mergeforge/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace mergeforge;
using namespace mergeforge::cli;

namespace {

struct Common {
    std::string                config_path;
    std::optional<uint64_t>    seed;
    std::string                out;
    std::optional<int64_t>     stats_samples;
    CommandOptions             opts;
    std::string                theta0, theta1;
};

void add_common(CLI::App * sub, Common & c) {
    sub->add_option("--config", c.config_path, "Run config (JSON)");
    sub->add_option("--seed", c.seed, "Override the config seed");
    sub->add_option("--out", c.out, "Override the output directory");
    sub->add_flag("--json", c.opts.json, "Print a machine-readable summary");
    sub->add_option("--stats-samples", c.stats_samples, "Training samples per task for statistics (0 = all)");
}

RunConfig resolve(const Common & c) {
    RunConfig cfg = c.config_path.empty() ? RunConfig::from_json(nlohmann::json::object()) : RunConfig::load(c.config_path);
    if (c.seed) {
        cfg.seed      = *c.seed;
        cfg.suite.seed = *c.seed;
    }
    if (!c.out.empty()) {
        cfg.out_dir = c.out;
    }
    if (c.stats_samples) {
        cfg.repair.stats_samples = *c.stats_samples;
    }
    cfg.validate();
    return cfg;
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"Model merging toolkit: foundations, experts, alignment, merging and activation correction"};
    app.require_subcommand(1);

    using Cmd = nlohmann::ordered_json (*)(const RunConfig &, const CommandOptions &);
    const std::vector<std::tuple<std::string, std::string, Cmd>> commands = {
        {"pretrain", "Train the two foundation models", cmd_pretrain},
        {"finetune", "Fine-tune one expert per task", cmd_finetune},
        {"align", "Weight-match foundation 1 to foundation 0", cmd_align},
        {"search", "Grid-search merge hyperparameters on the validation split", cmd_search},
        {"merge", "Merge the experts", cmd_merge},
        {"tact", "Compute per-task activation corrections", cmd_tact},
        {"eval", "Report normalized accuracy of the merged model", cmd_eval},
    };

    Common common;
    for (const auto & [name, help, fn] : commands) {
        CLI::App * sub = app.add_subcommand(name, help);
        add_common(sub, common);
        if (name == "finetune") {
            sub->add_option("--foundation", common.opts.foundation, "alternate, 0 or 1");
        }
        if (name == "align") {
            sub->add_option("--theta0", common.theta0, "Reference model file");
            sub->add_option("--theta1", common.theta1, "Model file to permute");
        }
        if (name == "eval") {
            sub->add_flag("--landscape", common.opts.landscape, "Also write a task-vector landscape CSV");
            sub->add_option("--grid", common.opts.grid, "Landscape grid A0:A1:NA,B0:B1:NB");
        }
    }

    CLI11_PARSE(app, argc, argv);

    try {
        for (const auto & [name, help, fn] : commands) {
            if (!app.got_subcommand(name)) {
                continue;
            }
            if (!common.theta0.empty()) {
                common.opts.theta0 = common.theta0;
            }
            if (!common.theta1.empty()) {
                common.opts.theta1 = common.theta1;
            }
            const RunConfig cfg     = resolve(common);
            const auto      summary = fn(cfg, common.opts);
            if (common.opts.json) {
                std::cout << summary.dump(2) << "\n";
            } else {
                std::cout << describe(name, summary);
            }
        }
    } catch (const Error & e) {
        std::cerr << "mergeforge: " << e.what() << "\n";
        return e.code() == Errc::config ? 2 : 1;
    } catch (const std::exception & e) {
        std::cerr << "mergeforge: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
