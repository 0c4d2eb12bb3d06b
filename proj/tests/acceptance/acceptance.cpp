// One line per acceptance criterion; exit status 1 if any criterion fails.

#include "mergeforge/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>

using namespace mergeforge;
namespace fs = std::filesystem;

namespace {

constexpr int     kSeeds      = 5;
constexpr int64_t kWidth      = 128;  // desk width for the trained-model criteria
constexpr int     kMinSeeds   = 4;    // "on >= 4/5 seeds"
const fs::path    kScratch    = MERGEFORGE_TEST_TMP "/acceptance";

struct Outcome {
    bool        pass = false;
    std::string detail;
};

std::string fmt(const char * f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, a);
    return buf;
}

// Random weights with nonzero biases and layer-norm parameters.
WeightSet random_weights(const WeightSet & like, uint64_t seed) {
    WeightSet out = like;
    Rng       rng(seed);
    for (auto & t : out) {
        const bool   matrix = t.shape.size() == 2;
        const double scale  = matrix ? 1.0 / std::sqrt(static_cast<double>(t.shape[0])) : 0.5;
        const double base   = t.name.find(".scale") != std::string::npos ? 1.0 : 0.0;
        for (float & v : t.data) {
            v = static_cast<float>(base + scale * rng.normal());
        }
    }
    return out;
}

Matrix random_inputs(int64_t n, int64_t d, uint64_t seed) {
    Matrix m(n, d);
    Rng    rng(seed);
    for (int64_t i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<float>(rng.normal());
    }
    return m;
}

// --- trained desk setting, shared by criteria 5-10 --------------------------

TrainConfig pretrain_cfg(uint64_t seed) {
    TrainConfig c;
    c.steps        = 3000;
    c.warmup_steps = 200;
    c.peak_lr      = 0.1;
    c.seed         = seed;
    return c;
}

TrainConfig finetune_cfg(uint64_t seed) {
    TrainConfig c;
    c.steps        = 1000;
    c.warmup_steps = 100;
    c.peak_lr      = 0.01;
    c.seed         = seed;
    return c;
}

struct SeedRun {
    uint64_t     seed;
    Architecture arch;
    TaskSuite    suite;
    Model        f[2];
    // experts[k][t]: task t fine-tuned from foundation k (filled on demand)
    std::map<std::pair<int, size_t>, ExpertRecord> experts;
    std::map<std::string, LabeledBatch>            validation, heldout;

    explicit SeedRun(uint64_t s) : seed(s) {
        SuiteSpec spec;
        spec.seed = s;
        suite     = synth_suite(spec);
        arch      = make_mlp(spec.in_dim, {kWidth, kWidth, kWidth}, spec.classes_per_task);
        parallel_for(2, [&](size_t k) {
            const uint64_t fs_ = s + k;
            f[k] = train(arch,
                         {arch.init_encoder(mix_seed(fs_, 1)), arch.init_head(spec.pretrain_classes, mix_seed(fs_, 2))},
                         suite.pretrain.train, pretrain_cfg(mix_seed(fs_, 3)));
        });
        for (size_t t = 0; t < suite.tasks.size(); ++t) {
            auto [v, h] = validation_split(suite.tasks[t].test, kDefaultValidationFraction, mix_seed(s, 4000 + t));
            validation[suite.tasks[t].task_id] = std::move(v);
            heldout[suite.tasks[t].task_id]    = std::move(h);
        }
    }

    const ExpertRecord & expert(int k, size_t t) {
        auto key = std::make_pair(k, t);
        auto it  = experts.find(key);
        if (it == experts.end()) {
            it = experts
                     .emplace(key, make_expert(arch, f[k].encoder, "foundation" + std::to_string(k), suite.tasks[t],
                                               finetune_cfg(mix_seed(seed, 1000 + t)), mix_seed(seed, 2000 + t)))
                     .first;
        }
        return it->second;
    }

    void train_experts(const std::vector<std::pair<int, size_t>> & keys) {
        std::vector<std::pair<int, size_t>> todo;
        for (const auto & k : keys) {
            if (!experts.count(k)) {
                todo.push_back(k);
            }
        }
        std::vector<ExpertRecord> out(todo.size());
        parallel_for(todo.size(), [&](size_t i) {
            const auto [k, t] = todo[i];
            out[i] = make_expert(arch, f[k].encoder, "foundation" + std::to_string(k), suite.tasks[t],
                                 finetune_cfg(mix_seed(seed, 1000 + t)), mix_seed(seed, 2000 + t));
        });
        for (size_t i = 0; i < todo.size(); ++i) {
            experts.emplace(todo[i], std::move(out[i]));
        }
    }

    std::vector<ExpertRecord> local_experts() {
        std::vector<std::pair<int, size_t>> keys;
        for (size_t t = 0; t < suite.tasks.size(); ++t) {
            keys.push_back({0, t});
        }
        train_experts(keys);
        std::vector<ExpertRecord> out;
        for (const auto & k : keys) {
            out.push_back(experts.at(k));
        }
        return out;
    }

    // task t from foundation t % 2
    std::vector<ExpertRecord> split_experts() {
        std::vector<std::pair<int, size_t>> keys;
        for (size_t t = 0; t < suite.tasks.size(); ++t) {
            keys.push_back({static_cast<int>(t % 2), t});
        }
        train_experts(keys);
        std::vector<ExpertRecord> out;
        for (const auto & k : keys) {
            out.push_back(experts.at(k));
        }
        return out;
    }

    std::map<std::string, const LabeledBatch *> train_data() const {
        std::map<std::string, const LabeledBatch *> m;
        for (const auto & t : suite.tasks) {
            m[t.task_id] = &t.train;
        }
        return m;
    }

    static std::map<std::string, const LabeledBatch *> ptrs(const std::map<std::string, LabeledBatch> & m) {
        std::map<std::string, const LabeledBatch *> out;
        for (const auto & [k, v] : m) {
            out[k] = &v;
        }
        return out;
    }
};

std::vector<std::unique_ptr<SeedRun>> g_runs(kSeeds);

SeedRun & run(int s) {
    if (!g_runs[static_cast<size_t>(s)]) {
        g_runs[static_cast<size_t>(s)] = std::make_unique<SeedRun>(static_cast<uint64_t>(s));
    }
    return *g_runs[static_cast<size_t>(s)];
}

struct MergedEval {
    MergeConfig  config;
    MetricReport vanilla;
    MetricReport tact;
};

// Search on the validation split (uncorrected), report on the held-out split.
MergedEval search_and_report(SeedRun & r, const WeightSet & init, const std::vector<ExpertRecord> & experts,
                             MergeMethod method) {
    const auto val  = make_splits(r.arch, experts, SeedRun::ptrs(r.validation));
    const auto held = make_splits(r.arch, experts, SeedRun::ptrs(r.heldout));
    const auto sr   = hyperparam_search(r.arch, init, experts, default_search_grid(method, experts.size()), val);
    const auto b    = local_merge(init, experts, sr.best);
    const auto tb   = tact_all(r.arch, b, experts, r.train_data());
    return {sr.best, report(r.arch, b, held), report(r.arch, b, held, &tb)};
}

// --- criteria -----------------------------------------------------------------

Outcome c1_permutation_equivalence() {
    const Architecture arch = make_mlp(16, {64, 64, 64, 64}, 10);
    const Matrix       x    = random_inputs(256, 16, 77);
    double             worst = 0.0;
    for (uint64_t i = 0; i < 50; ++i) {
        const WeightSet enc  = random_weights(arch.init_encoder(i), mix_seed(i, 1));
        const WeightSet head = random_weights(arch.init_head(10, i), mix_seed(i, 2));
        const auto      pm   = random_permutation_map(arch, mix_seed(i, 3));
        const Matrix    y0   = forward(arch, enc, head, x);
        const Matrix    y1 = forward(arch, apply_permutation(enc, arch, pm), apply_permutation(head, arch, pm), x);
        worst              = std::max(worst, static_cast<double>((y0 - y1).cwiseAbs().maxCoeff()));
    }
    return {worst <= 1e-5, "max logit deviation " + fmt("%.3g", worst) + " (<= 1e-5)"};
}

Outcome c2_lsa_exactness() {
    int mismatches = 0, total = 0;
    for (int n = 1; n <= 6; ++n) {
        for (uint64_t i = 0; i < 200; ++i) {
            Eigen::MatrixXd G(n, n);
            Rng             rng(mix_seed(static_cast<uint64_t>(n), i));
            for (int k = 0; k < G.size(); ++k) {
                G.data()[k] = rng.normal();
            }
            Permutation p(static_cast<size_t>(n));
            std::iota(p.begin(), p.end(), 0);
            double best = -1e300;
            do {
                double v = 0.0;
                for (int r = 0; r < n; ++r) {
                    v += G(r, p[static_cast<size_t>(r)]);
                }
                best = std::max(best, v);
            } while (std::next_permutation(p.begin(), p.end()));
            mismatches += assignment_objective(G, linear_sum_assignment(G)) != best;
            ++total;
        }
    }
    return {mismatches == 0, std::to_string(total - mismatches) + "/" + std::to_string(total) +
                                 " matrices (n = 1..6) match brute force exactly"};
}

Outcome c3_planted_recovery() {
    const Architecture arch = make_mlp(16, {32, 32, 32}, 10);
    int                ok   = 0;
    double             worst = 0.0;
    for (uint64_t s = 0; s < 20; ++s) {
        Rng       rng(mix_seed(s, 9));
        WeightSet a = arch.init_encoder(s);
        for (auto & t : a) {
            for (float & v : t.data) {
                v = static_cast<float>(rng.normal());
            }
        }
        const auto planted = random_permutation_map(arch, mix_seed(s, 10));
        const auto b       = apply_permutation(a, arch, planted);
        const auto r       = weight_matching(a, b, arch, mix_seed(s, 11));
        const double d     = weight_distance(a, apply_permutation(b, arch, r.perm));
        worst              = std::max(worst, d);
        ok += d < 1e-6 && r.perm == inverse(planted);
    }
    return {ok == 20, std::to_string(ok) + "/20 seeds recovered exactly at width 32; worst distance " + fmt("%.3g", worst)};
}

Outcome c4_ties_tall_oracles() {
    Rng    rng(2024);
    double worst_ties = 0.0;
    int    mask_errors = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const size_t n    = 1 + rng.below(8);
        const size_t T    = 1 + rng.below(4);
        const size_t keep = 1 + rng.below(n);
        const double lam  = rng.uniform(0.1, 1.5);
        std::vector<TaskVector>          tvs;
        std::vector<std::vector<double>> raw;
        WeightSet                        init("oracle");
        std::vector<float>               iv(n);
        for (auto & v : iv) {
            v = static_cast<float>(rng.normal());
        }
        init.add(Tensor("w", {static_cast<int64_t>(n)}, iv));
        for (size_t t = 0; t < T; ++t) {
            std::vector<float>  v(n);
            std::vector<double> d(n);
            for (size_t i = 0; i < n; ++i) {
                v[i] = static_cast<float>(rng.normal());
                d[i] = v[i];
            }
            TaskVector tv;
            tv.delta = WeightSet("oracle");
            tv.delta.add(Tensor("w", {static_cast<int64_t>(n)}, v));
            tvs.push_back(std::move(tv));
            raw.push_back(std::move(d));
        }

        // trim: keep the `keep` largest magnitudes, lower index first among equals
        std::vector<std::vector<double>> trimmed;
        for (const auto & v : raw) {
            std::vector<double> out(n, 0.0);
            for (size_t i = 0; i < n; ++i) {
                size_t rank = 0;
                for (size_t j = 0; j < n; ++j) {
                    rank += std::abs(v[j]) > std::abs(v[i]) || (std::abs(v[j]) == std::abs(v[i]) && j < i);
                }
                if (rank < keep) {
                    out[i] = v[i];
                }
            }
            trimmed.push_back(out);
        }
        // elect, then disjoint mean
        std::vector<double> merged(n, 0.0);
        for (size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (const auto & t : trimmed) {
                s += t[i];
            }
            double sum = 0.0;
            int    cnt = 0;
            for (const auto & t : trimmed) {
                if ((s > 0 && t[i] > 0) || (s < 0 && t[i] < 0)) {
                    sum += t[i];
                    ++cnt;
                }
            }
            merged[i] = cnt ? sum / cnt : 0.0;
        }
        const double keep_fraction = static_cast<double>(keep) / static_cast<double>(n);
        const auto   got = ties_merge(init, tvs, keep_fraction, lam);
        const auto   vec = ties_vector(tvs, keep_fraction);
        for (size_t i = 0; i < n; ++i) {
            const auto expect_merge = static_cast<float>(static_cast<double>(iv[i]) + lam * merged[i]);
            const auto expect_vec   = static_cast<float>(merged[i]);
            worst_ties = std::max({worst_ties, static_cast<double>(std::abs(got[0].data[i] - expect_merge)),
                                   static_cast<double>(std::abs(vec[0].data[i] - expect_vec))});
        }

        // TALL: m = 1{|tau_t| >= |tau_MTL - tau_t| * lambda_t}
        const WeightSet mtl = sum_task_vectors(tvs);
        const double    lt  = rng.uniform(0.0, 2.0);
        for (size_t t = 0; t < T; ++t) {
            const auto mask = tall_mask(tvs[t], mtl, lt);
            for (size_t i = 0; i < n; ++i) {
                const bool on = std::abs(raw[t][i]) >= std::abs(static_cast<double>(mtl[0].data[i]) - raw[t][i]) * lt;
                mask_errors += mask.entries[0].bits[i] != (on ? 1 : 0);
            }
        }
    }
    return {worst_ties <= 1e-7 && mask_errors == 0,
            "1000 trials: max TIES deviation " + fmt("%.3g", worst_ties) + " (<= 1e-7), TALL mask mismatches " +
                std::to_string(mask_errors)};
}

Outcome c5_tact_moments() {
    SeedRun &  r       = run(0);
    const auto experts = r.local_experts();
    MergeConfig cfg;
    cfg.method = MergeMethod::task_arithmetic;
    cfg.lambda = default_search_grid(MergeMethod::task_arithmetic, experts.size()).lambdas.front();
    const auto b = local_merge(r.f[0].encoder, experts, cfg);

    double worst_mean = 0.0, worst_std = 0.0, lo_ratio = 1e9, hi_ratio = 0.0;
    for (size_t t = 0; t < experts.size(); ++t) {
        const auto & data   = r.suite.tasks[t].train;
        const auto   bundle = tact_correct(r.arch, b.shared, experts[t], data);
        const auto   target = compute_stats(r.arch, experts[t].encoder, data);
        const auto   acts   = corrected_capture(r.arch, b.shared, bundle, data.inputs);
        for (size_t k = 0; k < acts.size(); ++k) {
            const Eigen::MatrixXd a    = acts[k].cast<double>();
            const Eigen::VectorXd mean = a.colwise().mean();
            const Eigen::VectorXd sd =
                (a.rowwise() - mean.transpose()).array().square().colwise().mean().sqrt().matrix();
            worst_mean = std::max(worst_mean, (mean - target.modules[k].mean.cast<double>()).cwiseAbs().maxCoeff());
            worst_std  = std::max(worst_std, (sd - target.modules[k].std.cast<double>()).cwiseAbs().maxCoeff());
        }
        for (const auto & d : stats_diagnostics(r.arch, b.shared, experts[t].encoder, &bundle, data)) {
            lo_ratio = std::min(lo_ratio, d.variance_ratio);
            hi_ratio = std::max(hi_ratio, d.variance_ratio);
        }
    }
    const bool pass = worst_mean <= 1e-3 && worst_std <= 1e-3 && lo_ratio >= 0.9 && hi_ratio <= 1.1;
    return {pass, "max |mean diff| " + fmt("%.2g", worst_mean) + ", max |std diff| " + fmt("%.2g", worst_std) +
                      " (<= 1e-3); variance ratio in [" + fmt("%.4f", lo_ratio) + ", " + fmt("%.4f", hi_ratio) +
                      "] (within [0.9, 1.1])"};
}

Outcome c6_reconstruction() {
    SeedRun &  r       = run(0);
    const auto experts = r.local_experts();
    bool       bitwise = true;
    for (const auto & e : experts) {
        bitwise = bitwise && task_arithmetic(r.f[0].encoder, {task_vector(e, r.f[0].encoder)}, 1.0).identical(e.encoder);
    }
    const auto held = make_splits(r.arch, experts, SeedRun::ptrs(r.heldout));
    bool       same = true;
    for (double lambda : {0.4, 0.6, 0.9}) {
        MergeConfig ta;
        ta.method = MergeMethod::task_arithmetic;
        ta.lambda = lambda;
        MergeConfig tall         = ta;
        tall.method              = MergeMethod::tall_ta;
        tall.tall_lambda_default = 0.0;
        const auto a = report(r.arch, local_merge(r.f[0].encoder, experts, ta), held);
        const auto b = report(r.arch, local_merge(r.f[0].encoder, experts, tall), held);
        same         = same && a.per_task == b.per_task && a.avg_normalized == b.avg_normalized &&
               a.min_normalized == b.min_normalized;
    }
    return {bitwise && same, std::string("single-task arithmetic reproduces every expert ") +
                                 (bitwise ? "bitwise" : "NOT bitwise") + "; TALL(lambda_t = 0) report " +
                                 (same ? "identical" : "differs")};
}

Outcome c7_barrier() {
    int         wins = 0;
    bool        zero = true;
    std::string per;
    for (int s = 0; s < kSeeds; ++s) {
        SeedRun &   r  = run(s);
        const auto  wm = weight_matching(r.f[0].encoder, r.f[1].encoder, r.arch, mix_seed(r.seed, 3000));
        const Model aligned{apply_permutation(r.f[1].encoder, r.arch, wm.perm),
                            apply_permutation(r.f[1].head, r.arch, wm.perm)};
        const auto & data = r.suite.pretrain.test;
        const double raw  = barrier(r.arch, r.f[0], r.f[1], data);
        const double al   = barrier(r.arch, r.f[0], aligned, data);
        zero              = zero && barrier(r.arch, r.f[0], r.f[0], data) == 0.0;
        wins += raw > al;
        per += (s ? ", " : "") + fmt("%.3f", raw) + "->" + fmt("%.3f", al);
    }
    return {wins >= kMinSeeds && zero, std::to_string(wins) + "/5 seeds lower after matching [" + per +
                                           "]; barrier(theta, theta) " + (zero ? "= 0 exactly" : "!= 0")};
}

Outcome c8_local_tact() {
    const std::vector<MergeMethod> methods = {MergeMethod::average, MergeMethod::task_arithmetic, MergeMethod::ties,
                                              MergeMethod::tall_ta};
    std::map<MergeMethod, int>         wins;
    std::map<MergeMethod, std::string> per;
    for (int s = 0; s < kSeeds; ++s) {
        SeedRun &  r       = run(s);
        const auto experts = r.local_experts();
        for (auto m : methods) {
            const auto e = search_and_report(r, r.f[0].encoder, experts, m);
            wins[m] += e.tact.avg_normalized >= e.vanilla.avg_normalized;
            per[m] += (s ? " " : "") + fmt("%.3f", e.vanilla.avg_normalized) + "/" + fmt("%.3f", e.tact.avg_normalized);
        }
    }
    bool        pass = true;
    std::string detail;
    for (auto m : methods) {
        pass = pass && wins[m] >= kMinSeeds;
        detail += std::string(detail.empty() ? "" : "; ") + merge_method_name(m) + " " + std::to_string(wins[m]) +
                  "/5 [" + per[m] + "]";
    }
    return {pass, detail + " (vanilla/tact)"};
}

Outcome c9_nonlocal() {
    int         wins = 0;
    std::string per;
    std::string landscape;
    for (int s = 0; s < kSeeds; ++s) {
        SeedRun &   r       = run(s);
        const auto  experts = r.split_experts();
        MergeConfig avg;
        avg.method   = MergeMethod::average;
        const auto nl = nonlocal_merge({"foundation0", r.f[0].encoder}, {"foundation1", r.f[1].encoder}, experts,
                                       r.arch, avg, mix_seed(r.seed, 3000));
        const auto e = search_and_report(r, nl.bundle.init, nl.localized, MergeMethod::task_arithmetic);
        wins += e.tact.avg_normalized > e.vanilla.avg_normalized;
        per += (s ? " " : "") + fmt("%.3f", e.vanilla.avg_normalized) + "/" + fmt("%.3f", e.tact.avg_normalized);

        if (s == 0) {
            std::vector<LandscapeTask> tasks;
            std::vector<WeightSet>     taus;
            for (size_t t = 0; t < 2; ++t) {
                const auto & ex = nl.localized[t];
                taus.push_back(task_vector(ex, nl.bundle.init).delta);
                const auto & held = r.heldout.at(ex.task_id);
                tasks.push_back({ex.task_id, ex.head, held, expert_accuracy(r.arch, ex, held), std::nullopt, {}});
            }
            const auto g = landscape_grid(r.arch, nl.bundle.init, taus[0], taus[1], tasks, GridSpec{},
                                          GridMetric::avg_normalized);
            fs::create_directories(kScratch);
            const std::string csv = g.to_csv();
            write_file(kScratch / "landscape.csv", std::vector<uint8_t>(csv.begin(), csv.end()));
            const auto back  = read_file(kScratch / "landscape.csv");
            const auto lines = std::count(back.begin(), back.end(), '\n');
            landscape = lines == 1 + 13 * 13 ? "landscape.csv written (169 cells)" : "landscape.csv malformed";
        }
    }
    return {wins >= kMinSeeds && landscape == "landscape.csv written (169 cells)",
            std::to_string(wins) + "/5 seeds modulo-P + TACT > modulo-P [" + per + "]; " + landscape};
}

Outcome c10_cost() {
    SeedRun &   r       = run(0);
    const auto  experts = r.local_experts();
    MergeConfig cfg;
    cfg.lambda = 0.4;
    const auto  b = local_merge(r.f[0].encoder, experts, cfg);
    PassCounter counter;
    for (size_t t = 0; t < experts.size(); ++t) {
        tact_correct(r.arch, b.shared, experts[t], r.suite.tasks[t].train, kDefaultEpsilon, &counter);
    }
    const int64_t expect = 2 * static_cast<int64_t>(experts.size());

    // size ratio on the default architecture
    const cli::RunConfig defaults;
    const Architecture   arch = defaults.architecture();
    const WeightSet      enc  = arch.init_encoder(1);
    const ExpertRecord   ex{random_weights(enc, 2), {}, "task0", "foundation0"};
    const LabeledBatch   data = head_rows(r.suite.tasks[0].train, 512);
    const auto           tb   = tact_correct(arch, enc, ex, data);
    const double tact_bytes   = static_cast<double>(encode_tact(tb, arch.id()).size());
    const double enc_bytes    = static_cast<double>(encode_weights(enc).size());
    const double ratio        = tact_bytes / enc_bytes;

    return {counter.passes == expect && ratio < 0.01,
            std::to_string(counter.passes.load()) + " passes for " + std::to_string(experts.size()) +
                " tasks (expect " + std::to_string(expect) + "); bundle " + fmt("%.0f", tact_bytes) + " B vs encoder " +
                fmt("%.0f", enc_bytes) + " B on " + arch.id() + " = " + fmt("%.3f", 100.0 * ratio) + "% (< 1%)"};
}

cli::RunConfig small_run_config(const fs::path & out, const std::string & method) {
    nlohmann::json j = {
        {"seed", 11},
        {"out_dir", out.string()},
        {"suite", {{"train_n", 600}, {"test_n", 300}, {"pretrain_train_n", 2000}, {"pretrain_test_n", 400}}},
        {"arch", {{"hidden", {32, 32}}}},
        {"pretrain", {{"steps", 400}, {"warmup_steps", 40}}},
        {"finetune", {{"steps", 200}, {"warmup_steps", 20}, {"assignment", "foundation0"}}},
        {"merge", {{"method", method}, {"setting", "local"}, {"use_search", true}}},
        {"eval", {{"landscape_grid", "0:1:3,0:1:3"}}},
    };
    return cli::RunConfig::from_json(j);
}

Outcome c11_search() {
    const fs::path dir = kScratch / "search";
    fs::remove_all(dir);
    auto cfg = small_run_config(dir, "task_arithmetic");
    cli::cmd_pretrain(cfg);
    cli::cmd_finetune(cfg);

    const Architecture arch = cfg.architecture();
    const TaskSuite    suite = synth_suite(cfg.suite);
    const WeightSet    init  = cli::split_model(arch, load_weights(dir / "foundation0.mfwt")).encoder;
    std::vector<ExpertRecord>                   experts;
    std::map<std::string, LabeledBatch>         val;
    std::map<std::string, const LabeledBatch *> val_ptr;
    for (size_t t = 0; t < suite.tasks.size(); ++t) {
        const auto & task = suite.tasks[t];
        const Model  m    = cli::split_model(arch, load_weights(dir / "experts" / (task.task_id + ".mfwt")));
        experts.push_back({m.encoder, m.head, task.task_id, "foundation0"});
        val[task.task_id] = validation_split(task.test, cfg.eval.validation_fraction, mix_seed(cfg.seed, 4000 + t)).first;
    }
    for (const auto & [k, v] : val) {
        val_ptr[k] = &v;
    }
    const auto tasks = make_splits(arch, experts, val_ptr);

    std::string detail;
    bool        pass = true;
    for (const std::string method : {"task_arithmetic", "ties", "tall_ta"}) {
        cfg.merge.config.method = parse_merge_method(method);
        const auto s1   = cli::cmd_search(cfg);
        const auto b1   = read_file(dir / "search" / "results.json");
        const auto s2   = cli::cmd_search(cfg);
        const bool det  = b1 == read_file(dir / "search" / "results.json") && s1 == s2;
        const auto best = MergeConfig::from_json(s1["best"]);

        // exhaustive re-evaluation over the full grid, in grid order
        const SearchGrid grid = default_search_grid(best.method, experts.size());
        double           best_obj = -1.0;
        size_t           best_i   = 0;
        int              points   = 0;
        for (size_t i = 0; i < grid.lambdas.size(); ++i) {
            MergeConfig c;
            c.method = best.method;
            c.lambda = grid.lambdas[i];
            double obj;
            if (is_tall(c.method)) {
                // each task's model depends only on (lambda, lambda_t): enumerate rates per task
                std::vector<double> per(tasks.size(), -1.0);
                for (double rate : grid.tall_lambdas) {
                    c.tall_lambda_default = rate;
                    const auto rep        = evaluate_config(arch, init, experts, c, tasks);
                    ++points;
                    for (size_t t = 0; t < tasks.size(); ++t) {
                        per[t] = std::max(per[t], rep.per_task[t].normalized_acc);
                    }
                }
                obj = std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
            } else {
                obj = evaluate_config(arch, init, experts, c, tasks).avg_normalized;
                ++points;
            }
            if (obj > best_obj) {
                best_obj = obj;
                best_i   = i;
            }
        }
        const double got     = evaluate_config(arch, init, experts, best, tasks).avg_normalized;
        const bool   argmax  = std::abs(got - best_obj) <= 1e-12 && s1["best_index"].get<size_t>() == best_i;
        pass                 = pass && det && argmax;
        detail += (detail.empty() ? "" : "; ") + method + " lambda " + fmt("%.2f", best.lambda) + " obj " +
                  fmt("%.4f", got) + (argmax ? " = " : " != ") + "exhaustive " + fmt("%.4f", best_obj) + " over " +
                  std::to_string(points) + " evals" + (det ? ", deterministic" : ", NOT deterministic");
    }
    return {pass, detail};
}

std::map<std::string, std::vector<uint8_t>> snapshot(const fs::path & root) {
    std::map<std::string, std::vector<uint8_t>> files;
    for (const auto & e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) {
            files[fs::relative(e.path(), root).generic_string()] = read_file(e.path());
        }
    }
    return files;
}

Outcome c12_roundtrip_determinism() {
    SeedRun &      r   = run(0);
    const fs::path dir = kScratch / "roundtrip";
    fs::remove_all(dir);
    fs::create_directories(dir);
    bool ckpt = true;
    for (const WeightSet * ws : std::vector<const WeightSet *>{&r.f[0].encoder, &r.f[1].head, &r.expert(0, 0).encoder}) {
        save_weights(*ws, dir / "a.mfwt");
        const WeightSet back = load_weights(dir / "a.mfwt");
        save_weights(back, dir / "b.mfwt");
        ckpt = ckpt && back.identical(*ws) && read_file(dir / "a.mfwt") == read_file(dir / "b.mfwt");
    }

    const fs::path out = kScratch / "pipeline";
    const cli::RunConfig cfg = small_run_config(out, "tall_ta");
    cli::RunConfig cfg_nl = cfg;
    cfg_nl.finetune.assignment = "alternate";
    cfg_nl.merge.setting       = "nonlocal";
    cli::CommandOptions eval_opts;
    eval_opts.landscape = true;

    const std::vector<std::pair<std::string, std::function<void(const cli::RunConfig &)>>> commands = {
        {"pretrain", [](const cli::RunConfig & c) { cli::cmd_pretrain(c); }},
        {"finetune", [](const cli::RunConfig & c) { cli::cmd_finetune(c); }},
        {"align", [](const cli::RunConfig & c) { cli::cmd_align(c); }},
        {"search", [](const cli::RunConfig & c) { cli::cmd_search(c); }},
        {"merge", [](const cli::RunConfig & c) { cli::cmd_merge(c); }},
        {"tact", [](const cli::RunConfig & c) { cli::cmd_tact(c); }},
        {"eval", [&](const cli::RunConfig & c) { cli::cmd_eval(c, eval_opts); }},
    };
    std::vector<std::string> differing;
    size_t                   files = 0;
    for (const cli::RunConfig * c : std::vector<const cli::RunConfig *>{&cfg, &cfg_nl}) {
        fs::remove_all(out);
        for (const auto & [name, fn] : commands) {
            fn(*c);
        }
        const auto first = snapshot(out);
        fs::remove_all(out);
        // second run: every command re-run after the directory is rebuilt from scratch
        for (const auto & [name, fn] : commands) {
            fn(*c);
        }
        const auto second = snapshot(out);
        files += first.size();
        for (const auto & [path, bytes] : first) {
            auto it = second.find(path);
            if (it == second.end() || it->second != bytes) {
                differing.push_back(path);
            }
        }
        if (second.size() != first.size()) {
            differing.push_back("<file set>");
        }
    }
    std::string detail = std::string("checkpoint save/load ") + (ckpt ? "byte-identical" : "NOT byte-identical") +
                         "; 7 commands x {local, nonlocal}: " + std::to_string(files) + " artifacts, " +
                         std::to_string(differing.size()) + " differ";
    for (const auto & d : differing) {
        detail += " " + d;
    }
    return {ckpt && differing.empty(), detail};
}

} // namespace

int main() {
    struct Criterion {
        int                      id;
        std::string              name;
        std::function<Outcome()> fn;
        std::optional<double>    limit_s;  // runtime bound, when stated
    };
    const std::vector<Criterion> criteria = {
        {1, "permutation functional equivalence", c1_permutation_equivalence, 10.0},
        {2, "LSA exactness", c2_lsa_exactness, 5.0},
        {3, "planted-permutation recovery", c3_planted_recovery, 30.0},
        {4, "TIES / TALL oracle equivalence", c4_ties_tall_oracles, 5.0},
        {5, "TACT moment matching", c5_tact_moments, 60.0},
        {6, "reconstruction identities", c6_reconstruction, std::nullopt},
        {7, "barrier phenomenology", c7_barrier, 300.0},
        {8, "directional TACT claim (local)", c8_local_tact, 900.0},
        {9, "non-local pipeline", c9_nonlocal, std::nullopt},
        {10, "cost accounting", c10_cost, std::nullopt},
        {11, "hyperparameter search", c11_search, std::nullopt},
        {12, "round-trip and determinism", c12_roundtrip_determinism, std::nullopt},
    };
    int failed = 0;
    for (const auto & c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome    o;
        try {
            o = c.fn();
        } catch (const std::exception & e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::string  timing = fmt("%.1fs", secs);
        if (c.limit_s) {
            timing += fmt(" (limit %.0fs)", *c.limit_s);
            if (secs >= *c.limit_s) {
                o.pass = false;
                o.detail += "; over the runtime limit";
            }
        }
        failed += !o.pass;
        std::printf("[%s] %2d %s: %s [%s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), o.detail.c_str(),
                    timing.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
