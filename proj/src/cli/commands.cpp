#include "mergeforge/cli.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace mergeforge::cli {

namespace {

using json = nlohmann::ordered_json;

constexpr uint64_t kExpertTrainStream = 1000;
constexpr uint64_t kExpertHeadStream  = 2000;
constexpr uint64_t kAlignStream       = 3000;
constexpr uint64_t kSplitStream       = 4000;

std::string foundation_id(int k) {
    return "foundation" + std::to_string(k);
}

fs::path foundation_file(int k) {
    return foundation_id(k) + ".mfwt";
}

json read_json(const fs::path & path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(Errc::io, "cannot open " + path.string() + " (run the producing command first)");
    }
    try {
        return json::parse(in);
    } catch (const nlohmann::json::exception & e) {
        throw Error(Errc::malformed_header, path.string() + ": " + e.what());
    }
}

std::string config_hash(const RunConfig & cfg) {
    const std::string text = json_text(cfg.to_json());
    return sha256_hex(std::vector<uint8_t>(text.begin(), text.end()));
}

// Writes the resolved config and, last, the command manifest.
void finish(Staging & st, const RunConfig & cfg, const std::string & command, const fs::path & manifest,
            json inputs, json extra = json::object()) {
    st.write_json("config.resolved.json", cfg.to_json());
    json m;
    m["command"]       = command;
    m["config_sha256"] = config_hash(cfg);
    m["inputs"]        = std::move(inputs);
    m["outputs"]       = st.records();
    for (auto & [k, v] : extra.items()) {
        m[k] = v;
    }
    st.write_json(manifest, m);
    st.commit();
}

struct Loaded {
    Model    model;
    fs::path path;
};

Loaded load_model(const Architecture & arch, const fs::path & path) {
    return {split_model(arch, load_weights(path)), path};
}

struct ExpertEntry {
    ExpertRecord record;
    fs::path     path;
};

std::vector<ExpertEntry> load_experts(const RunConfig & cfg, const Architecture & arch) {
    const json               m = read_json(cfg.out_dir / "experts" / "manifest.json");
    std::vector<ExpertEntry> out;
    for (const auto & e : m.at("experts")) {
        const fs::path path  = cfg.out_dir / e.at("path").get<std::string>();
        const Model    model = split_model(arch, load_weights(path));
        out.push_back({{model.encoder, model.head, e.at("task_id").get<std::string>(),
                        e.at("foundation_id").get<std::string>()},
                       path});
    }
    return out;
}

struct Splits {
    std::map<std::string, LabeledBatch> validation;
    std::map<std::string, LabeledBatch> heldout;
};

Splits make_eval_splits(const RunConfig & cfg, const TaskSuite & suite) {
    Splits s;
    for (size_t t = 0; t < suite.tasks.size(); ++t) {
        const auto & task = suite.tasks[t];
        auto [val, held]  = validation_split(task.test, cfg.eval.validation_fraction,
                                             mix_seed(cfg.seed, kSplitStream + t));
        s.validation[task.task_id] = std::move(val);
        s.heldout[task.task_id]    = std::move(held);
    }
    return s;
}

std::map<std::string, const LabeledBatch *> pointers(const std::map<std::string, LabeledBatch> & m) {
    std::map<std::string, const LabeledBatch *> out;
    for (const auto & [k, v] : m) {
        out[k] = &v;
    }
    return out;
}

struct MergeInputs {
    WeightSet                 init;
    std::vector<ExpertRecord> experts;  // localized
    json                      inputs = json::array();
    json                      alignment;
};

MergeInputs prepare_merge(const RunConfig & cfg, const Architecture & arch) {
    MergeInputs mi;
    const auto  entries = load_experts(cfg, arch);
    if (entries.empty()) {
        throw Error(Errc::empty_input, "no experts found");
    }
    mi.inputs.push_back(input_record(cfg.out_dir, cfg.out_dir / "experts" / "manifest.json"));
    std::vector<ExpertRecord> experts;
    for (const auto & e : entries) {
        mi.inputs.push_back(input_record(cfg.out_dir, e.path));
        experts.push_back(e.record);
    }
    if (cfg.merge.setting == "local") {
        const std::string & fid = experts.front().foundation_id;
        for (const auto & e : experts) {
            if (e.foundation_id != fid) {
                throw Error(Errc::config, "local merging needs experts from one foundation; '" + e.task_id +
                                              "' comes from " + e.foundation_id + ", '" + experts.front().task_id +
                                              "' from " + fid);
            }
        }
        const int      k    = fid == foundation_id(1) ? 1 : 0;
        const fs::path path = cfg.out_dir / foundation_file(k);
        if (fid != foundation_id(k)) {
            throw Error(Errc::unknown_foundation, "unknown foundation '" + fid + "'");
        }
        mi.inputs.push_back(input_record(cfg.out_dir, path));
        mi.init    = load_model(arch, path).model.encoder;
        mi.experts = std::move(experts);
        return mi;
    }
    Foundation f[2];
    for (int k = 0; k < 2; ++k) {
        const fs::path path = cfg.out_dir / foundation_file(k);
        mi.inputs.push_back(input_record(cfg.out_dir, path));
        f[k] = {foundation_id(k), load_model(arch, path).model.encoder};
    }
    MergeConfig avg;
    avg.method = MergeMethod::average;
    auto res   = nonlocal_merge(f[0], f[1], experts, arch, avg, mix_seed(cfg.seed, kAlignStream), cfg.align.max_sweeps);
    mi.init    = std::move(res.bundle.init);
    mi.experts = std::move(res.localized);
    mi.alignment = {{"initial_distance", res.alignment.initial_distance},
                    {"final_distance", res.alignment.final_distance},
                    {"sweeps", res.alignment.sweeps}};
    return mi;
}

struct LoadedBundle {
    MergedBundle              bundle;
    std::vector<ExpertRecord> experts;  // localized, bundle task order
    json                      inputs = json::array();
};

LoadedBundle load_bundle(const RunConfig & cfg, const Architecture & arch) {
    const fs::path dir = cfg.out_dir / "merged";
    const json     m   = read_json(dir / "manifest.json");
    LoadedBundle   lb;
    lb.inputs.push_back(input_record(cfg.out_dir, dir / "manifest.json"));
    lb.bundle.method = m.at("method").get<std::string>();
    lb.bundle.shared = load_weights(dir / "shared.mfwt");
    lb.bundle.init   = load_weights(dir / "init.mfwt");
    for (const auto & id : m.at("task_ids")) {
        const auto task = id.get<std::string>();
        lb.bundle.task_ids.push_back(task);
        const fs::path ep    = dir / "experts" / (task + ".mfwt");
        const Model    model = split_model(arch, load_weights(ep));
        lb.bundle.heads[task] = model.head;
        lb.experts.push_back({model.encoder, model.head, task, "merged"});
        if (m.at("has_masks").get<bool>()) {
            lb.bundle.masks[task] = load_mask(dir / "masks" / (task + ".mfmk"));
        }
    }
    return lb;
}

LabeledBatch stats_batch(const RunConfig & cfg, const TaskDataset & task) {
    return head_rows(task.train, static_cast<size_t>(cfg.repair.stats_samples));
}

json report_summary(const MetricReport & r) {
    return r.to_json();
}

} // namespace

// --- pretrain -----------------------------------------------------------------

json cmd_pretrain(const RunConfig & cfg, const CommandOptions &) {
    const Architecture arch  = cfg.architecture();
    const TaskSuite    suite = synth_suite(cfg.suite);
    Model              f[2];
    parallel_for(2, [&](size_t k) {
        const uint64_t s = cfg.seed + k;
        TrainConfig    tc = cfg.pretrain;
        tc.seed           = mix_seed(s, 3);
        Model init{arch.init_encoder(mix_seed(s, 1)), arch.init_head(cfg.suite.pretrain_classes, mix_seed(s, 2))};
        f[k] = train(arch, init, suite.pretrain.train, tc);
    });

    Staging st(cfg.out_dir);
    st.write_json("arch.json", arch.to_json());
    json foundations = json::array();
    for (int k = 0; k < 2; ++k) {
        const auto bytes = encode_weights(join_model(f[k]));
        st.write(foundation_file(k), bytes);
        foundations.push_back({{"id", foundation_id(k)},
                               {"path", foundation_file(k).string()},
                               {"sha256", sha256_hex(bytes)},
                               {"seed", cfg.seed + static_cast<uint64_t>(k)},
                               {"pretrain_test_acc", evaluate(arch, f[k].encoder, f[k].head, suite.pretrain.test).accuracy}});
    }
    finish(st, cfg, "pretrain", "manifest.json", json::array(), {{"foundations", foundations}});
    return {{"command", "pretrain"},
            {"out_dir", cfg.out_dir.string()},
            {"foundations", foundations},
            {"distance", weight_distance(f[0].encoder, f[1].encoder)}};
}

// --- finetune -----------------------------------------------------------------

json cmd_finetune(const RunConfig & cfg, const CommandOptions & opts) {
    const Architecture arch  = cfg.architecture();
    const TaskSuite    suite = synth_suite(cfg.suite);
    std::string        assignment = opts.foundation.value_or(cfg.finetune.assignment);
    if (assignment == "0") assignment = "foundation0";
    if (assignment == "1") assignment = "foundation1";
    if (assignment != "alternate" && assignment != "foundation0" && assignment != "foundation1") {
        throw Error(Errc::config, "unknown foundation selector '" + assignment + "'");
    }

    json   inputs = json::array();
    Loaded f[2];
    for (int k = 0; k < 2; ++k) {
        const fs::path path = cfg.out_dir / foundation_file(k);
        const bool     used = assignment == "alternate" || assignment == foundation_id(k);
        if (!used) {
            continue;
        }
        if (!fs::exists(path)) {
            throw Error(Errc::io, "missing foundation " + path.string() + " (run pretrain first)");
        }
        inputs.push_back(input_record(cfg.out_dir, path));
        f[k] = load_model(arch, path);
    }

    const size_t              n = suite.tasks.size();
    std::vector<ExpertRecord> experts(n);
    std::vector<int>          which(n);
    for (size_t t = 0; t < n; ++t) {
        which[t] = assignment == "alternate" ? static_cast<int>(t % 2) : (assignment == "foundation1" ? 1 : 0);
    }
    parallel_for(n, [&](size_t t) {
        TrainConfig tc = cfg.finetune.train;
        tc.seed        = mix_seed(cfg.seed, kExpertTrainStream + t);
        experts[t]     = make_expert(arch, f[which[t]].model.encoder, foundation_id(which[t]), suite.tasks[t], tc,
                                     mix_seed(cfg.seed, kExpertHeadStream + t), cfg.finetune.head_steps);
    });

    Staging st(cfg.out_dir);
    json    list = json::array();
    for (size_t t = 0; t < n; ++t) {
        const auto     bytes = encode_weights(join_model({experts[t].encoder, experts[t].head}));
        const fs::path rel   = fs::path("experts") / (experts[t].task_id + ".mfwt");
        st.write(rel, bytes);
        list.push_back({{"task_id", experts[t].task_id},
                        {"foundation_id", experts[t].foundation_id},
                        {"path", rel.generic_string()},
                        {"sha256", sha256_hex(bytes)},
                        {"test_acc", evaluate(arch, experts[t].encoder, experts[t].head, suite.tasks[t].test).accuracy}});
    }
    finish(st, cfg, "finetune", "experts/manifest.json", inputs, {{"experts", list}});
    return {{"command", "finetune"}, {"assignment", assignment}, {"experts", list}};
}

// --- align --------------------------------------------------------------------

json cmd_align(const RunConfig & cfg, const CommandOptions & opts) {
    const Architecture arch = cfg.architecture();
    const fs::path     p0   = opts.theta0.value_or(cfg.out_dir / foundation_file(0));
    const fs::path     p1   = opts.theta1.value_or(cfg.out_dir / foundation_file(1));
    const Loaded       a    = load_model(arch, p0);
    const Loaded       b    = load_model(arch, p1);
    json               inputs = json::array({input_record(cfg.out_dir, p0), input_record(cfg.out_dir, p1)});

    const auto wm = weight_matching(a.model.encoder, b.model.encoder, arch, mix_seed(cfg.seed, kAlignStream),
                                    cfg.align.max_sweeps);
    json report;
    report["initial_distance"] = wm.initial_distance;
    report["final_distance"]   = wm.final_distance;
    report["sweeps"]           = wm.sweeps;
    report["objective_trace"]  = wm.objective_trace;
    report["identity"]         = is_identity(wm.perm);
    const bool heads = !a.model.head.empty() && !b.model.head.empty() && compatible(a.model.head, b.model.head);
    if (heads) {
        const TaskSuite suite = synth_suite(cfg.suite);
        const Model     b_aligned{apply_permutation(b.model.encoder, arch, wm.perm),
                                  apply_permutation(b.model.head, arch, wm.perm)};
        report["barrier_raw"]     = barrier(arch, a.model, b.model, suite.pretrain.test, cfg.eval.barrier_grid);
        report["barrier_aligned"] = barrier(arch, a.model, b_aligned, suite.pretrain.test, cfg.eval.barrier_grid);
    }

    Staging st(cfg.out_dir);
    st.write_json("align/perm.json", wm.perm.to_json());
    st.write_json("align/report.json", report);
    finish(st, cfg, "align", "align/manifest.json", inputs);
    json out = {{"command", "align"}};
    for (auto & [k, v] : report.items()) {
        if (k != "objective_trace") {
            out[k] = v;
        }
    }
    return out;
}

// --- search -------------------------------------------------------------------

json cmd_search(const RunConfig & cfg, const CommandOptions &) {
    const Architecture arch   = cfg.architecture();
    const TaskSuite    suite  = synth_suite(cfg.suite);
    MergeInputs        mi     = prepare_merge(cfg, arch);
    const Splits       splits = make_eval_splits(cfg, suite);
    const auto         tasks  = make_splits(arch, mi.experts, pointers(splits.validation));

    SearchGrid grid         = default_search_grid(cfg.merge.config.method, mi.experts.size());
    grid.ties_keep_fraction = cfg.merge.config.ties_keep_fraction;
    const SearchResult res  = hyperparam_search(arch, mi.init, mi.experts, grid, tasks);

    json points = json::array();
    for (const auto & p : res.evaluated) {
        points.push_back({{"config", p.config.to_json()}, {"objective", p.objective}});
    }
    json results = {{"method", merge_method_name(grid.method)},
                    {"lambdas", grid.lambdas},
                    {"tall_lambdas", grid.tall_lambdas},
                    {"points", points},
                    {"best_index", res.best_index},
                    {"report", report_summary(res.report)}};

    Staging st(cfg.out_dir);
    st.write_json("search/best.json", res.best.to_json());
    st.write_json("search/results.json", results);
    finish(st, cfg, "search", "search/manifest.json", mi.inputs);
    return {{"command", "search"},
            {"best", res.best.to_json()},
            {"best_index", res.best_index},
            {"objective", res.evaluated[res.best_index].objective}};
}

// --- merge --------------------------------------------------------------------

json cmd_merge(const RunConfig & cfg, const CommandOptions &) {
    const Architecture arch = cfg.architecture();
    MergeInputs        mi   = prepare_merge(cfg, arch);
    MergeConfig        mc   = cfg.merge.config;
    if (cfg.merge.use_search) {
        const fs::path best = cfg.out_dir / "search" / "best.json";
        mc                  = MergeConfig::from_json(read_json(best));
        mi.inputs.push_back(input_record(cfg.out_dir, best));
    }
    const MergedBundle b = local_merge(mi.init, mi.experts, mc);

    Staging st(cfg.out_dir);
    st.write("merged/shared.mfwt", encode_weights(b.shared));
    st.write("merged/init.mfwt", encode_weights(b.init));
    json masks = json::object();
    for (const auto & e : mi.experts) {
        st.write(fs::path("merged/experts") / (e.task_id + ".mfwt"), encode_weights(join_model({e.encoder, e.head})));
        if (!b.masks.empty()) {
            const BinaryMask & m = b.masks.at(e.task_id);
            st.write(fs::path("merged/masks") / (e.task_id + ".mfmk"), encode_mask(m));
            masks[e.task_id] = m.density();
        }
    }
    json extra = {{"method", b.method},
                  {"setting", cfg.merge.setting},
                  {"merge_config", mc.to_json()},
                  {"task_ids", b.task_ids},
                  {"has_masks", !b.masks.empty()},
                  {"alignment", mi.alignment}};
    finish(st, cfg, "merge", "merged/manifest.json", mi.inputs, extra);
    json out = {{"command", "merge"},
                {"method", b.method},
                {"setting", cfg.merge.setting},
                {"config", mc.to_json()},
                {"task_ids", b.task_ids}};
    if (!b.masks.empty()) {
        out["mask_density"] = masks;
    }
    if (!mi.alignment.is_null()) {
        out["alignment"] = mi.alignment;
    }
    return out;
}

// --- tact ---------------------------------------------------------------------

json cmd_tact(const RunConfig & cfg, const CommandOptions &) {
    const Architecture arch  = cfg.architecture();
    const TaskSuite    suite = synth_suite(cfg.suite);
    LoadedBundle       lb    = load_bundle(cfg, arch);

    std::map<std::string, LabeledBatch> stats;
    for (const auto & id : lb.bundle.task_ids) {
        stats[id] = stats_batch(cfg, suite.task(id));
    }
    PassCounter counter;
    const auto  bundles = tact_all(arch, lb.bundle, lb.experts, pointers(stats), cfg.repair.epsilon, &counter);

    Staging st(cfg.out_dir);
    json    tasks   = json::array();
    json    modules = json::array();
    for (const auto & m : arch.modules()) {
        modules.push_back(m.name);
    }
    for (const auto & id : lb.bundle.task_ids) {
        const fs::path rel = fs::path("tact") / (id + ".mfwt");
        st.write(rel, encode_tact(bundles.at(id), arch.id()));
        tasks.push_back({{"task_id", id}, {"path", rel.generic_string()}, {"stats_samples", stats.at(id).size()}});
    }
    const int64_t passes = counter.passes.load();
    json          extra  = {{"epsilon", cfg.repair.epsilon}, {"modules", modules}, {"tasks", tasks}, {"passes", passes}};
    finish(st, cfg, "tact", "tact/manifest.json", lb.inputs, extra);
    return {{"command", "tact"}, {"tasks", tasks}, {"passes", passes}, {"epsilon", cfg.repair.epsilon}};
}

// --- eval ---------------------------------------------------------------------

json cmd_eval(const RunConfig & cfg, const CommandOptions & opts) {
    const Architecture arch   = cfg.architecture();
    const TaskSuite    suite  = synth_suite(cfg.suite);
    LoadedBundle       lb     = load_bundle(cfg, arch);
    const Splits       splits = make_eval_splits(cfg, suite);
    const auto         tasks  = make_splits(arch, lb.experts, pointers(splits.heldout));
    json               inputs = lb.inputs;

    const MetricReport vanilla = report(arch, lb.bundle, tasks);
    json               result  = {{"vanilla", vanilla.to_json()}, {"tact", nullptr}};

    const fs::path tact_manifest = cfg.out_dir / "tact" / "manifest.json";
    if (fs::exists(tact_manifest)) {
        inputs.push_back(input_record(cfg.out_dir, tact_manifest));
        std::map<std::string, TactBundle> tb;
        for (const auto & id : lb.bundle.task_ids) {
            const fs::path p = cfg.out_dir / "tact" / (id + ".mfwt");
            inputs.push_back(input_record(cfg.out_dir, p));
            tb[id] = load_tact(p);
        }
        result["tact"] = report(arch, lb.bundle, tasks, &tb).to_json();
    }

    Staging st(cfg.out_dir);
    st.write_json("eval/report.json", result);
    json out = {{"command", "eval"}, {"vanilla", result["vanilla"]}, {"tact", result["tact"]}};
    if (opts.landscape) {
        const GridSpec spec   = GridSpec::parse(opts.grid.value_or(cfg.eval.landscape_grid));
        const auto     metric = parse_grid_metric(cfg.eval.landscape_metric);
        std::vector<LandscapeTask> lt;
        std::vector<WeightSet>     taus;
        for (size_t i = 0; i < std::min<size_t>(2, lb.experts.size()); ++i) {
            const ExpertRecord & e = lb.experts[i];
            taus.push_back(axpy(e.encoder, lb.bundle.init, -1.0));
            LandscapeTask t;
            t.task_id    = e.task_id;
            t.head       = e.head;
            t.data       = splits.heldout.at(e.task_id);
            t.expert_acc = tasks[i].expert_acc;
            if (cfg.eval.landscape_tact) {
                t.stats_data  = stats_batch(cfg, suite.task(e.task_id));
                t.tact_target = compute_stats(arch, e.encoder, t.stats_data);
            }
            lt.push_back(std::move(t));
        }
        if (taus.size() < 2) {
            taus.push_back(zeros_like(lb.bundle.init));
        }
        const GridResult g = landscape_grid(arch, lb.bundle.init, taus[0], taus[1], lt, spec, metric, cfg.repair.epsilon);
        st.write_text("eval/landscape.csv", g.to_csv());
        out["landscape"] = {{"path", "eval/landscape.csv"},
                            {"metric", grid_metric_name(metric)},
                            {"tasks", json::array({lt.front().task_id, lt.back().task_id})},
                            {"cells", g.cells.size()}};
    }
    finish(st, cfg, "eval", "eval/manifest.json", inputs);
    return out;
}

// --- human summaries ----------------------------------------------------------

namespace {

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f%%", 100.0 * v);
    return buf;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

void describe_report(std::ostringstream & os, const char * label, const json & r) {
    os << label << " (" << r.at("method").get<std::string>() << "): avg " << pct(r.at("avg_normalized").get<double>())
       << ", min " << pct(r.at("min_normalized").get<double>()) << "\n";
    for (const auto & [task, m] : r.at("per_task").items()) {
        os << "  " << task << ": acc " << pct(m.at("raw_acc").get<double>()) << " / expert "
           << pct(m.at("expert_acc").get<double>()) << " = " << pct(m.at("normalized_acc").get<double>()) << "\n";
    }
}

} // namespace

std::string describe(const std::string & command, const json & s) {
    std::ostringstream os;
    if (command == "pretrain") {
        for (const auto & f : s.at("foundations")) {
            os << f.at("id").get<std::string>() << ": " << f.at("path").get<std::string>() << "  pretrain acc "
               << pct(f.at("pretrain_test_acc").get<double>()) << "\n";
        }
        os << "distance between foundations " << num(s.at("distance").get<double>()) << "\n";
    } else if (command == "finetune") {
        for (const auto & e : s.at("experts")) {
            os << e.at("task_id").get<std::string>() << " <- " << e.at("foundation_id").get<std::string>()
               << "  test acc " << pct(e.at("test_acc").get<double>()) << "\n";
        }
    } else if (command == "align") {
        os << "distance " << num(s.at("initial_distance").get<double>()) << " -> "
           << num(s.at("final_distance").get<double>()) << " in " << s.at("sweeps").get<int>() << " sweeps\n";
        if (s.contains("barrier_raw")) {
            os << "barrier " << num(s.at("barrier_raw").get<double>()) << " -> "
               << num(s.at("barrier_aligned").get<double>()) << "\n";
        }
    } else if (command == "search") {
        os << "best " << s.at("best").dump() << "\nvalidation avg normalized "
           << pct(s.at("objective").get<double>()) << "\n";
    } else if (command == "merge") {
        os << "merged " << s.at("task_ids").size() << " experts with " << s.at("method").get<std::string>() << " ("
           << s.at("setting").get<std::string>() << ")\n";
        if (s.contains("mask_density")) {
            for (const auto & [task, d] : s.at("mask_density").items()) {
                os << "  mask " << task << ": density " << pct(d.get<double>()) << "\n";
            }
        }
    } else if (command == "tact") {
        os << "corrections for " << s.at("tasks").size() << " tasks, " << s.at("passes").get<int64_t>()
           << " dataset passes\n";
    } else if (command == "eval") {
        describe_report(os, "merged", s.at("vanilla"));
        if (!s.at("tact").is_null()) {
            describe_report(os, "merged + TACT", s.at("tact"));
        }
        if (s.contains("landscape")) {
            os << "landscape written to " << s.at("landscape").at("path").get<std::string>() << "\n";
        }
    } else {
        os << s.dump(2) << "\n";
    }
    return os.str();
}

} // namespace mergeforge::cli
