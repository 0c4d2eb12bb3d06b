#pragma once

#include "mergeforge/datasets.hpp"
#include "mergeforge/eval.hpp"

#include <filesystem>
#include <optional>

namespace mergeforge::cli {

namespace fs = std::filesystem;

struct ArchSection {
    std::vector<int64_t> hidden     = {512, 512, 512};
    bool                 layer_norm = true;
};

struct FinetuneSection {
    TrainConfig            train;
    std::optional<int64_t> head_steps;
    // "alternate" (task t from foundation t % 2), "foundation0" or "foundation1"
    std::string assignment = "alternate";
};

struct AlignSection {
    int max_sweeps = 100;
};

struct MergeSection {
    MergeConfig config;
    std::string setting    = "nonlocal";  // or "local"
    bool        use_search = false;       // take the config found by `search`
};

struct RepairSection {
    double  epsilon       = kDefaultEpsilon;
    int64_t stats_samples = 0;  // 0 = full training split
};

struct EvalSection {
    int         barrier_grid        = kDefaultBarrierGrid;
    double      validation_fraction = kDefaultValidationFraction;
    std::string landscape_grid      = "-0.25:1.25:13,-0.25:1.25:13";
    std::string landscape_metric    = "avg_normalized";
    bool        landscape_tact      = false;
};

struct RunConfig {
    uint64_t        seed    = 0;
    fs::path        out_dir = "run";
    SuiteSpec       suite;  // suite.seed mirrors seed
    ArchSection     arch;
    TrainConfig     pretrain;
    FinetuneSection finetune;
    AlignSection    align;
    MergeSection    merge;
    RepairSection   repair;
    EvalSection     eval;

    RunConfig();

    // Strict: unknown keys and wrong types are errors. Missing keys keep defaults.
    static RunConfig       from_json(const nlohmann::json & j);
    static RunConfig       load(const fs::path & path);
    nlohmann::ordered_json to_json() const;
    void                   validate() const;

    Architecture architecture() const;
};

struct CommandOptions {
    bool                       json      = false;
    bool                       landscape = false;
    std::optional<std::string> grid;
    std::optional<std::string> foundation;  // finetune assignment override
    std::optional<fs::path>    theta0;      // align inputs
    std::optional<fs::path>    theta1;
};

// Each command writes its artifacts under cfg.out_dir and returns a summary.
nlohmann::ordered_json cmd_pretrain(const RunConfig & cfg, const CommandOptions & opts = {});
nlohmann::ordered_json cmd_finetune(const RunConfig & cfg, const CommandOptions & opts = {});
nlohmann::ordered_json cmd_align(const RunConfig & cfg, const CommandOptions & opts = {});
nlohmann::ordered_json cmd_search(const RunConfig & cfg, const CommandOptions & opts = {});
nlohmann::ordered_json cmd_merge(const RunConfig & cfg, const CommandOptions & opts = {});
nlohmann::ordered_json cmd_tact(const RunConfig & cfg, const CommandOptions & opts = {});
nlohmann::ordered_json cmd_eval(const RunConfig & cfg, const CommandOptions & opts = {});

// Human-readable rendering of a command summary.
std::string describe(const std::string & command, const nlohmann::ordered_json & summary);

// --- artifacts ----------------------------------------------------------------

std::string sha256_hex(const std::vector<uint8_t> & bytes);
std::string sha256_file(const fs::path & path);

// Files written through a Staging are deleted again unless commit() is called.
class Staging {
public:
    explicit Staging(fs::path root) : root_(std::move(root)) {}
    Staging(const Staging &)             = delete;
    Staging & operator=(const Staging &) = delete;
    ~Staging();

    // Writes root/rel and records {path, sha256}.
    void write(const fs::path & rel, const std::vector<uint8_t> & bytes);
    void write_text(const fs::path & rel, const std::string & text);
    void write_json(const fs::path & rel, const nlohmann::ordered_json & j);
    void commit() { committed_ = true; }

    const nlohmann::ordered_json & records() const { return records_; }

private:
    fs::path               root_;
    std::vector<fs::path>  written_;
    nlohmann::ordered_json records_ = nlohmann::ordered_json::array();
    bool                   committed_ = false;
};

std::string json_text(const nlohmann::ordered_json & j);

// Model files hold encoder tensors followed by the head tensors.
WeightSet join_model(const Model & m);
Model     split_model(const Architecture & arch, const WeightSet & ws);

// Input record {path (relative to out_dir when inside it), sha256}.
nlohmann::ordered_json input_record(const fs::path & out_dir, const fs::path & file);

} // namespace mergeforge::cli
