#include "mergeforge/cli.hpp"

#include <fstream>
#include <set>

namespace mergeforge::cli {

namespace {

// Reads known keys from one JSON object and rejects everything else.
class Section {
public:
    Section(const nlohmann::json & j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) {
            throw Error(Errc::config, where_ + " must be a JSON object");
        }
    }

    template <class T>
    void get(const std::string & key, T & out) {
        known_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception & e) {
            throw Error(Errc::config, where_ + "." + key + ": " + e.what());
        }
    }

    const nlohmann::json * sub(const std::string & key) {
        known_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto & [k, v] : j_.items()) {
            if (!known_.count(k)) {
                throw Error(Errc::config, "unknown key '" + where_ + "." + k + "'");
            }
        }
    }

private:
    const nlohmann::json & j_;
    std::string            where_;
    std::set<std::string>  known_;
};

void read_train(const nlohmann::json & j, const std::string & where, TrainConfig & t,
                std::optional<int64_t> * head_steps = nullptr, std::string * assignment = nullptr) {
    Section s(j, where);
    s.get("steps", t.steps);
    s.get("warmup_steps", t.warmup_steps);
    s.get("peak_lr", t.peak_lr);
    s.get("momentum", t.momentum);
    s.get("weight_decay", t.weight_decay);
    s.get("batch_size", t.batch_size);
    if (head_steps) {
        if (const auto * h = s.sub("head_steps"); h && !h->is_null()) {
            try {
                *head_steps = h->get<int64_t>();
            } catch (const nlohmann::json::exception & e) {
                throw Error(Errc::config, where + ".head_steps: " + e.what());
            }
        }
    }
    if (assignment) {
        s.get("assignment", *assignment);
    }
    s.finish();
}

nlohmann::ordered_json train_json(const TrainConfig & t) {
    return {{"steps", t.steps},
            {"warmup_steps", t.warmup_steps},
            {"peak_lr", t.peak_lr},
            {"momentum", t.momentum},
            {"weight_decay", t.weight_decay},
            {"batch_size", t.batch_size}};
}

} // namespace

RunConfig::RunConfig() {
    pretrain.steps        = 3000;
    pretrain.warmup_steps = 200;
    pretrain.peak_lr      = 0.1;

    finetune.train.steps        = 1000;
    finetune.train.warmup_steps = 100;
    finetune.train.peak_lr      = 0.01;
}

RunConfig RunConfig::from_json(const nlohmann::json & j) {
    RunConfig c;
    Section   top(j, "config");
    top.get("seed", c.seed);
    std::string out = c.out_dir.string();
    top.get("out_dir", out);
    c.out_dir = out;

    if (const auto * s = top.sub("suite")) {
        Section sec(*s, "suite");
        sec.get("n_tasks", c.suite.n_tasks);
        sec.get("in_dim", c.suite.in_dim);
        sec.get("classes_per_task", c.suite.classes_per_task);
        sec.get("train_n", c.suite.train_n);
        sec.get("test_n", c.suite.test_n);
        sec.get("pretrain_classes", c.suite.pretrain_classes);
        sec.get("pretrain_train_n", c.suite.pretrain_train_n);
        sec.get("pretrain_test_n", c.suite.pretrain_test_n);
        sec.finish();
    }
    if (const auto * s = top.sub("arch")) {
        Section sec(*s, "arch");
        sec.get("hidden", c.arch.hidden);
        sec.get("layer_norm", c.arch.layer_norm);
        sec.finish();
    }
    if (const auto * s = top.sub("pretrain")) {
        read_train(*s, "pretrain", c.pretrain);
    }
    if (const auto * s = top.sub("finetune")) {
        read_train(*s, "finetune", c.finetune.train, &c.finetune.head_steps, &c.finetune.assignment);
    }
    if (const auto * s = top.sub("align")) {
        Section sec(*s, "align");
        sec.get("max_sweeps", c.align.max_sweeps);
        sec.finish();
    }
    if (const auto * s = top.sub("merge")) {
        if (!s->is_object()) {
            throw Error(Errc::config, "merge must be a JSON object");
        }
        nlohmann::json rest = *s;
        try {
            if (rest.contains("setting")) {
                c.merge.setting = rest["setting"].get<std::string>();
                rest.erase("setting");
            }
            if (rest.contains("use_search")) {
                c.merge.use_search = rest["use_search"].get<bool>();
                rest.erase("use_search");
            }
        } catch (const nlohmann::json::exception & e) {
            throw Error(Errc::config, std::string("merge: ") + e.what());
        }
        c.merge.config = MergeConfig::from_json(rest);
    }
    if (const auto * s = top.sub("repair")) {
        Section sec(*s, "repair");
        sec.get("epsilon", c.repair.epsilon);
        sec.get("stats_samples", c.repair.stats_samples);
        sec.finish();
    }
    if (const auto * s = top.sub("eval")) {
        Section sec(*s, "eval");
        sec.get("barrier_grid", c.eval.barrier_grid);
        sec.get("validation_fraction", c.eval.validation_fraction);
        sec.get("landscape_grid", c.eval.landscape_grid);
        sec.get("landscape_metric", c.eval.landscape_metric);
        sec.get("landscape_tact", c.eval.landscape_tact);
        sec.finish();
    }
    top.finish();
    c.suite.seed = c.seed;
    c.validate();
    return c;
}

RunConfig RunConfig::load(const fs::path & path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(Errc::io, "cannot open config " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception & e) {
        throw Error(Errc::config, path.string() + ": " + e.what());
    }
    return from_json(j);
}

nlohmann::ordered_json RunConfig::to_json() const {
    nlohmann::ordered_json j;
    j["seed"]    = seed;
    j["out_dir"] = out_dir.string();
    j["suite"]   = {{"n_tasks", suite.n_tasks},
                    {"in_dim", suite.in_dim},
                    {"classes_per_task", suite.classes_per_task},
                    {"train_n", suite.train_n},
                    {"test_n", suite.test_n},
                    {"pretrain_classes", suite.pretrain_classes},
                    {"pretrain_train_n", suite.pretrain_train_n},
                    {"pretrain_test_n", suite.pretrain_test_n}};
    j["arch"]     = {{"hidden", arch.hidden}, {"layer_norm", arch.layer_norm}};
    j["pretrain"] = train_json(pretrain);
    auto ft       = train_json(finetune.train);
    ft["head_steps"] = finetune.head_steps ? nlohmann::ordered_json(*finetune.head_steps) : nlohmann::ordered_json(nullptr);
    ft["assignment"] = finetune.assignment;
    j["finetune"]    = ft;
    j["align"]       = {{"max_sweeps", align.max_sweeps}};
    auto mj          = merge.config.to_json();
    mj["setting"]    = merge.setting;
    mj["use_search"] = merge.use_search;
    j["merge"]       = mj;
    j["repair"]      = {{"epsilon", repair.epsilon}, {"stats_samples", repair.stats_samples}};
    j["eval"]        = {{"barrier_grid", eval.barrier_grid},
                        {"validation_fraction", eval.validation_fraction},
                        {"landscape_grid", eval.landscape_grid},
                        {"landscape_metric", eval.landscape_metric},
                        {"landscape_tact", eval.landscape_tact}};
    return j;
}

void RunConfig::validate() const {
    suite.validate();
    if (arch.hidden.empty()) {
        throw Error(Errc::config, "arch.hidden needs at least one layer");
    }
    for (int64_t w : arch.hidden) {
        if (w <= 0) {
            throw Error(Errc::config, "arch.hidden widths must be positive");
        }
    }
    pretrain.validate();
    finetune.train.validate();
    if (finetune.head_steps && *finetune.head_steps < 0) {
        throw Error(Errc::config, "finetune.head_steps must be >= 0");
    }
    if (finetune.assignment != "alternate" && finetune.assignment != "foundation0" &&
        finetune.assignment != "foundation1") {
        throw Error(Errc::config, "finetune.assignment must be alternate, foundation0 or foundation1");
    }
    if (align.max_sweeps < 1) {
        throw Error(Errc::config, "align.max_sweeps must be >= 1");
    }
    merge.config.validate();
    if (merge.setting != "local" && merge.setting != "nonlocal") {
        throw Error(Errc::config, "merge.setting must be local or nonlocal");
    }
    if (!(repair.epsilon > 0.0) || repair.stats_samples < 0) {
        throw Error(Errc::config, "repair.epsilon must be > 0 and stats_samples >= 0");
    }
    if (eval.barrier_grid < 3) {
        throw Error(Errc::config, "eval.barrier_grid must be >= 3");
    }
    if (!(eval.validation_fraction > 0.0 && eval.validation_fraction < 1.0)) {
        throw Error(Errc::config, "eval.validation_fraction must lie in (0, 1)");
    }
    try {
        GridSpec::parse(eval.landscape_grid);
        parse_grid_metric(eval.landscape_metric);
    } catch (const Error & e) {
        throw Error(Errc::config, std::string("eval: ") + e.what());
    }
}

Architecture RunConfig::architecture() const {
    return make_mlp(suite.in_dim, arch.hidden, suite.classes_per_task, arch.layer_norm);
}

} // namespace mergeforge::cli
