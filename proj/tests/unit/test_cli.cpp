#include "helpers.hpp"

#include "mergeforge/cli.hpp"

#include <map>

using namespace mergeforge;
using namespace mergeforge::cli;
using namespace testutil;

namespace {

RunConfig tiny_config(const std::filesystem::path & out, int64_t n_tasks = 2) {
    const nlohmann::json j = {
        {"seed", 4},
        {"out_dir", out.string()},
        {"suite",
         {{"n_tasks", n_tasks},
          {"in_dim", 6},
          {"classes_per_task", 3},
          {"train_n", 240},
          {"test_n", 120},
          {"pretrain_classes", 6},
          {"pretrain_train_n", 600},
          {"pretrain_test_n", 120}}},
        {"arch", {{"hidden", {12, 12}}}},
        {"pretrain", {{"steps", 120}, {"warmup_steps", 10}}},
        {"finetune", {{"steps", 60}, {"warmup_steps", 6}}},
        {"merge", {{"method", "tall_ta"}, {"use_search", true}}},
        {"eval", {{"landscape_grid", "0:1:2,0:1:2"}}},
    };
    return RunConfig::from_json(j);
}

std::map<std::string, std::vector<uint8_t>> snapshot(const std::filesystem::path & root) {
    std::map<std::string, std::vector<uint8_t>> files;
    for (const auto & e : std::filesystem::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) {
            files[std::filesystem::relative(e.path(), root).generic_string()] = read_file(e.path());
        }
    }
    return files;
}

void run_all(const RunConfig & cfg) {
    CommandOptions eval_opts;
    eval_opts.landscape = true;
    cmd_pretrain(cfg);
    cmd_finetune(cfg);
    cmd_align(cfg);
    cmd_search(cfg);
    cmd_merge(cfg);
    cmd_tact(cfg);
    cmd_eval(cfg, eval_opts);
}

} // namespace

TEST_CASE("run configs are strict") {
    const RunConfig d = RunConfig::from_json(nlohmann::json::object());
    CHECK(d.arch.hidden == std::vector<int64_t>{512, 512, 512});
    CHECK(d.merge.setting == "nonlocal");
    CHECK(RunConfig::from_json(d.to_json()).to_json() == d.to_json());

    for (const char * text : {R"({"sede": 1})", R"({"suite": {"n_task": 2}})", R"({"arch": {"hidden": "wide"}})",
                              R"({"merge": {"method": "sum"}})", R"({"merge": {"lambda": -1}})",
                              R"({"eval": {"landscape_grid": "0:1"}})", R"({"finetune": {"assignment": "both"}})",
                              R"({"pretrain": {"steps": 10, "warmup_steps": 20}})", R"({"repair": {"epsilon": 0}})",
                              R"({"align": {"max_sweeps": 0}})", R"([1, 2])"}) {
        INFO(text);
        CHECK(error_code_of([&] { RunConfig::from_json(nlohmann::json::parse(text)); }) == Errc::config);
    }
    const auto dir = temp_dir("cfg");
    write_file(dir / "bad.json", {'{', 'x'});
    CHECK(error_code_of([&] { RunConfig::load(dir / "bad.json"); }) == Errc::config);
    CHECK(error_code_of([&] { RunConfig::load(dir / "missing.json"); }) == Errc::io);
}

TEST_CASE("pretrain writes two distinct foundations") {
    const auto dir = temp_dir("cli_pretrain");
    const auto cfg = tiny_config(dir);
    const auto s   = cmd_pretrain(cfg);
    CHECK(std::filesystem::exists(dir / "foundation0.mfwt"));
    CHECK(std::filesystem::exists(dir / "foundation1.mfwt"));
    CHECK(std::filesystem::exists(dir / "manifest.json"));
    CHECK(std::filesystem::exists(dir / "config.resolved.json"));
    CHECK(s["distance"].get<double>() > 0.0);
    CHECK(s["foundations"][1]["seed"] == 5);

    // aligning a foundation to itself gives the identity at distance 0
    CommandOptions same;
    same.theta0  = dir / "foundation0.mfwt";
    same.theta1  = dir / "foundation0.mfwt";
    const auto a = cmd_align(cfg, same);
    CHECK(a["identity"] == true);
    CHECK(a["final_distance"] == 0.0);
    CHECK(a["barrier_raw"] == 0.0);
    const auto bytes = read_file(dir / "align/perm.json");
    const auto pm    = PermutationMap::from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
    CHECK(is_identity(pm));

    CHECK(error_code_of([&] { cmd_finetune(tiny_config(temp_dir("cli_empty"))); }) == Errc::io);
}

TEST_CASE("full pipeline is byte-reproducible") {
    const auto dir = temp_dir("cli_pipeline");
    const auto cfg = tiny_config(dir);
    run_all(cfg);
    const auto first = snapshot(dir);
    for (const char * f : {"experts/task0.mfwt", "align/perm.json", "search/best.json", "merged/shared.mfwt",
                           "merged/masks/task1.mfmk", "tact/task0.mfwt", "eval/report.json", "eval/landscape.csv",
                           "eval/manifest.json"}) {
        INFO(f);
        CHECK(first.count(f) == 1);
    }
    const auto rep = nlohmann::json::parse(std::string(first.at("eval/report.json").begin(), first.at("eval/report.json").end()));
    CHECK(rep["vanilla"]["n_tasks"] == 2);
    CHECK(rep["tact"]["n_tasks"] == 2);

    // manifests record the hashes of what they read and wrote
    const auto man = nlohmann::json::parse(std::string(first.at("merged/manifest.json").begin(), first.at("merged/manifest.json").end()));
    for (const auto & o : man["outputs"]) {
        CHECK(o["sha256"] == sha256_hex(first.at(o["path"].get<std::string>())));
    }
    CHECK(!man["inputs"].empty());

    run_all(cfg);
    CHECK(snapshot(dir) == first);
}

TEST_CASE("a single expert evaluated on its own task scores 1") {
    const auto dir = temp_dir("cli_single");
    auto       cfg = tiny_config(dir, 1);
    cfg.merge.setting       = "local";
    cfg.merge.use_search    = false;
    cfg.merge.config.method = MergeMethod::task_arithmetic;
    cfg.merge.config.lambda = 1.0;
    cmd_pretrain(cfg);
    cmd_finetune(cfg);
    cmd_merge(cfg);
    const auto s = cmd_eval(cfg);
    CHECK(std::abs(s["vanilla"]["avg_normalized"].get<double>() - 1.0) <= 0.005);
    CHECK(!describe("eval", s).empty());
}

TEST_CASE("artifact helpers") {
    CHECK(sha256_hex({}) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex({'a', 'b', 'c'}) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");

    const auto dir = temp_dir("staging");
    {
        Staging st(dir);
        st.write_text("a/b.txt", "hi");
        CHECK(std::filesystem::exists(dir / "a/b.txt"));
    }
    CHECK_FALSE(std::filesystem::exists(dir / "a/b.txt"));
    {
        Staging st(dir);
        st.write_text("kept.txt", "x");
        st.commit();
        CHECK(st.records()[0]["path"] == "kept.txt");
    }
    CHECK(std::filesystem::exists(dir / "kept.txt"));
}
