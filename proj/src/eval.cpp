#include "mergeforge/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

namespace mergeforge {

// --- error barrier ------------------------------------------------------------

BarrierCurve barrier_curve(const std::function<double(double)> & loss_at, int n_grid) {
    if (n_grid < 3) {
        throw Error(Errc::invalid_argument, "barrier grid needs n_grid >= 3, got " + std::to_string(n_grid));
    }
    const double l1 = loss_at(1.0);
    const double l2 = loss_at(0.0);
    BarrierCurve c;
    c.barrier = -std::numeric_limits<double>::infinity();
    for (int i = 1; i < n_grid; ++i) {
        const double alpha = static_cast<double>(i) / n_grid;
        // written so that equal endpoint losses interpolate to exactly that loss
        const double chord = l2 + alpha * (l1 - l2);
        const double ex    = loss_at(alpha) - chord;
        c.alphas.push_back(alpha);
        c.excess.push_back(ex);
        c.barrier = std::max(c.barrier, ex);
    }
    return c;
}

BarrierCurve barrier_curve(const Architecture & arch, const Model & m1, const Model & m2, const LabeledBatch & data,
                           int n_grid) {
    check_compatible(m1.encoder, m2.encoder);
    check_compatible(m1.head, m2.head);
    if (data.size() == 0) {
        throw Error(Errc::empty_input, "barrier needs data");
    }
    auto loss_at = [&](double alpha) {
        const WeightSet enc  = lerp(m1.encoder, m2.encoder, alpha);
        const WeightSet head = lerp(m1.head, m2.head, alpha);
        return evaluate(arch, enc, head, data).mean_loss;
    };
    return barrier_curve(loss_at, n_grid);
}

double barrier(const Architecture & arch, const Model & m1, const Model & m2, const LabeledBatch & data, int n_grid) {
    return barrier_curve(arch, m1, m2, data, n_grid).barrier;
}

// --- reports ------------------------------------------------------------------

MetricReport MetricReport::aggregate(std::string method, std::vector<TaskMetric> per_task) {
    if (per_task.empty()) {
        throw Error(Errc::empty_input, "report needs at least one task");
    }
    MetricReport r;
    r.method         = std::move(method);
    r.per_task       = std::move(per_task);
    r.n_tasks        = static_cast<int64_t>(r.per_task.size());
    double sum       = 0.0;
    r.min_normalized = std::numeric_limits<double>::infinity();
    for (const auto & t : r.per_task) {
        sum += t.normalized_acc;
        r.min_normalized = std::min(r.min_normalized, t.normalized_acc);
    }
    r.avg_normalized = sum / static_cast<double>(r.n_tasks);
    return r;
}

nlohmann::ordered_json MetricReport::to_json() const {
    nlohmann::ordered_json tasks = nlohmann::ordered_json::object();
    for (const auto & t : per_task) {
        tasks[t.task_id] = {{"raw_acc", t.raw_acc}, {"expert_acc", t.expert_acc}, {"normalized_acc", t.normalized_acc}};
    }
    return {{"method", method},
            {"n_tasks", n_tasks},
            {"avg_normalized", avg_normalized},
            {"min_normalized", min_normalized},
            {"per_task", tasks}};
}

MetricReport MetricReport::from_json(const nlohmann::json & j) {
    try {
        std::vector<TaskMetric> tasks;
        const auto &            order = j.at("per_task");
        for (auto it = order.begin(); it != order.end(); ++it) {
            tasks.push_back({it.key(), it->at("raw_acc").get<double>(), it->at("expert_acc").get<double>(),
                             it->at("normalized_acc").get<double>()});
        }
        return aggregate(j.at("method").get<std::string>(), std::move(tasks));
    } catch (const nlohmann::json::exception & e) {
        throw Error(Errc::config, std::string("bad report JSON: ") + e.what());
    }
}

double expert_accuracy(const Architecture & arch, const ExpertRecord & expert, const LabeledBatch & data) {
    return evaluate(arch, expert.encoder, expert.head, data).accuracy;
}

std::vector<TaskSplit> make_splits(const Architecture & arch, const std::vector<ExpertRecord> & experts,
                                   const std::map<std::string, const LabeledBatch *> & data) {
    std::vector<TaskSplit> out(experts.size());
    for (size_t i = 0; i < experts.size(); ++i) {
        auto it = data.find(experts[i].task_id);
        if (it == data.end() || !it->second) {
            throw Error(Errc::invalid_argument, "no evaluation data for task '" + experts[i].task_id + "'");
        }
        out[i].task_id = experts[i].task_id;
        out[i].data    = *it->second;
    }
    parallel_for(experts.size(), [&](size_t i) { out[i].expert_acc = expert_accuracy(arch, experts[i], out[i].data); });
    return out;
}

namespace {

TaskMetric task_metric(const std::string & task_id, double raw, double expert_acc) {
    if (!(expert_acc > 0.0)) {
        throw Error(Errc::invalid_argument, "expert accuracy for task '" + task_id + "' is zero; cannot normalize");
    }
    return {task_id, raw, expert_acc, raw / expert_acc};
}

const WeightSet & head_for(const MergedBundle & bundle, const std::string & task_id) {
    auto it = bundle.heads.find(task_id);
    if (it == bundle.heads.end()) {
        throw Error(Errc::invalid_argument, "bundle has no head for task '" + task_id + "'");
    }
    return it->second;
}

} // namespace

MetricReport report(const Architecture & arch, const MergedBundle & bundle, const std::vector<TaskSplit> & tasks,
                    const std::map<std::string, TactBundle> * tact) {
    std::vector<TaskMetric> metrics(tasks.size());
    parallel_for(tasks.size(), [&](size_t i) {
        const TaskSplit & t    = tasks[i];
        const WeightSet & head = head_for(bundle, t.task_id);
        const WeightSet   enc  = bundle.encoder_for(t.task_id);
        double            raw  = 0.0;
        if (tact) {
            auto it = tact->find(t.task_id);
            if (it == tact->end()) {
                throw Error(Errc::invalid_argument, "no TACT correction for task '" + t.task_id + "'");
            }
            raw = evaluate_corrected(arch, enc, head, it->second, t.data).accuracy;
        } else {
            raw = evaluate(arch, enc, head, t.data).accuracy;
        }
        metrics[i] = task_metric(t.task_id, raw, t.expert_acc);
    });
    return MetricReport::aggregate(bundle.method + (tact ? "+tact" : ""), std::move(metrics));
}

std::map<std::string, TactBundle> tact_all(const Architecture & arch, const MergedBundle & bundle,
                                           const std::vector<ExpertRecord> & experts,
                                           const std::map<std::string, const LabeledBatch *> & stats_data,
                                           double epsilon, PassCounter * counter) {
    std::vector<TactBundle> out(experts.size());
    parallel_for(experts.size(), [&](size_t i) {
        const auto & e  = experts[i];
        auto         it = stats_data.find(e.task_id);
        if (it == stats_data.end() || !it->second) {
            throw Error(Errc::invalid_argument, "no statistics data for task '" + e.task_id + "'");
        }
        out[i] = tact_correct(arch, bundle.encoder_for(e.task_id), e, *it->second, epsilon, counter);
    });
    std::map<std::string, TactBundle> m;
    for (auto & b : out) {
        m.emplace(b.task_id, std::move(b));
    }
    return m;
}

// --- landscape ----------------------------------------------------------------

std::vector<double> GridAxis::values() const {
    if (n < 1) {
        throw Error(Errc::invalid_argument, "grid axis needs at least one point");
    }
    if (n == 1) {
        return {lo};
    }
    std::vector<double> v(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        v[static_cast<size_t>(i)] = lo + (hi - lo) * static_cast<double>(i) / (n - 1);
    }
    v.back() = hi;
    return v;
}

namespace {

// Whole-string numeric parse; trailing characters are an error.
template <class T>
bool parse_full(const std::string & s, T & out) {
    const char * end = s.data() + s.size();
    auto [ptr, ec]   = std::from_chars(s.data(), end, out);
    return ec == std::errc() && ptr == end && !s.empty();
}

GridAxis parse_axis(const std::string & text) {
    const auto c1 = text.find(':');
    const auto c2 = c1 == std::string::npos ? c1 : text.find(':', c1 + 1);
    GridAxis   ax;
    if (c2 == std::string::npos || !parse_full(text.substr(0, c1), ax.lo) ||
        !parse_full(text.substr(c1 + 1, c2 - c1 - 1), ax.hi) || !parse_full(text.substr(c2 + 1), ax.n)) {
        throw Error(Errc::invalid_argument, "grid axis '" + text + "' is not LO:HI:N");
    }
    if (ax.n < 1 || !std::isfinite(ax.lo) || !std::isfinite(ax.hi)) {
        throw Error(Errc::invalid_argument, "grid axis '" + text + "' is out of range");
    }
    return ax;
}

std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

} // namespace

GridSpec GridSpec::parse(const std::string & text) {
    const auto comma = text.find(',');
    if (comma == std::string::npos) {
        throw Error(Errc::invalid_argument, "grid '" + text + "' is not A0:A1:NA,B0:B1:NB");
    }
    return {parse_axis(text.substr(0, comma)), parse_axis(text.substr(comma + 1))};
}

const char * grid_metric_name(GridMetric m) {
    switch (m) {
        case GridMetric::avg_normalized: return "avg_normalized";
        case GridMetric::min_normalized: return "min_normalized";
        case GridMetric::loss: return "loss";
    }
    return "?";
}

GridMetric parse_grid_metric(const std::string & s) {
    for (auto m : {GridMetric::avg_normalized, GridMetric::min_normalized, GridMetric::loss}) {
        if (s == grid_metric_name(m)) {
            return m;
        }
    }
    throw Error(Errc::invalid_argument, "unknown grid metric '" + s + "'");
}

std::string GridResult::to_csv() const {
    std::string out = "a,b,metric\n";
    for (size_t i = 0; i < a_values.size(); ++i) {
        for (size_t j = 0; j < b_values.size(); ++j) {
            out += fmt_double(a_values[i]) + "," + fmt_double(b_values[j]) + "," +
                   fmt_double(cells(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) + "\n";
        }
    }
    return out;
}

GridResult landscape_grid(const Architecture & arch, const WeightSet & origin, const WeightSet & tau1,
                          const WeightSet & tau2, const std::vector<LandscapeTask> & tasks, const GridSpec & spec,
                          GridMetric metric, double epsilon) {
    check_compatible(origin, tau1);
    check_compatible(origin, tau2);
    if (tasks.empty()) {
        throw Error(Errc::empty_input, "landscape needs at least one task");
    }
    GridResult g;
    g.metric   = metric;
    g.a_values = spec.a.values();
    g.b_values = spec.b.values();
    g.cells.resize(static_cast<Eigen::Index>(g.a_values.size()), static_cast<Eigen::Index>(g.b_values.size()));

    const size_t nb = g.b_values.size();
    parallel_for(g.a_values.size() * nb, [&](size_t cell) {
        const double a = g.a_values[cell / nb];
        const double b = g.b_values[cell % nb];
        WeightSet    w = origin;
        for (size_t i = 0; i < w.size(); ++i) {
            auto &       d  = w[i].data;
            const auto & t1 = tau1[i].data;
            const auto & t2 = tau2[i].data;
            for (size_t k = 0; k < d.size(); ++k) {
                d[k] = static_cast<float>(static_cast<double>(d[k]) + a * t1[k] + b * t2[k]);
            }
        }
        std::vector<TaskMetric> per_task;
        double                  loss = 0.0;
        for (const auto & t : tasks) {
            EvalResult r;
            if (t.tact_target) {
                const LabeledBatch & sd = t.stats_data.size() ? t.stats_data : t.data;
                const TactBundle     tb = tact_correct_with_target(arch, w, t.task_id, *t.tact_target, sd, epsilon);
                r = evaluate_corrected(arch, w, t.head, tb, t.data);
            } else {
                r = evaluate(arch, w, t.head, t.data);
            }
            loss += r.mean_loss;
            per_task.push_back(task_metric(t.task_id, r.accuracy, t.expert_acc));
        }
        const MetricReport rep = MetricReport::aggregate("landscape", std::move(per_task));
        double             v   = 0.0;
        switch (metric) {
            case GridMetric::avg_normalized: v = rep.avg_normalized; break;
            case GridMetric::min_normalized: v = rep.min_normalized; break;
            case GridMetric::loss: v = loss / static_cast<double>(tasks.size()); break;
        }
        g.cells(static_cast<Eigen::Index>(cell / nb), static_cast<Eigen::Index>(cell % nb)) = v;
    });
    return g;
}

// --- hyperparameter search ----------------------------------------------------

SearchGrid default_search_grid(MergeMethod method, size_t n_tasks) {
    static const std::vector<std::pair<size_t, std::vector<double>>> kTaskArithmetic = {
        {2, {0.5, 0.7, 1.0}},  {4, {0.4, 0.6, 0.9}},  {6, {0.3, 0.5, 0.8}},
        {8, {0.2, 0.5, 0.7}},  {10, {0.2, 0.4, 0.6}}, {12, {0.1, 0.3, 0.5}},
    };
    static const std::vector<double> kTies     = {0.3, 0.5, 0.7, 1.0};
    static const std::vector<double> kTallRate = {0.2, 0.3, 0.4, 0.5, 0.6};
    if (n_tasks == 0) {
        throw Error(Errc::invalid_argument, "search grid needs at least one task");
    }
    SearchGrid g;
    g.method = method;
    switch (method) {
        case MergeMethod::average: break;
        case MergeMethod::task_arithmetic:
        case MergeMethod::tall_ta: {
            // largest tabulated task count not above n_tasks (smallest row below 2)
            g.lambdas = kTaskArithmetic.front().second;
            for (const auto & [n, grid] : kTaskArithmetic) {
                if (n <= n_tasks) {
                    g.lambdas = grid;
                }
            }
            break;
        }
        case MergeMethod::ties:
        case MergeMethod::tall_ties: g.lambdas = kTies; break;
    }
    if (is_tall(method)) {
        g.tall_lambdas = kTallRate;
    }
    return g;
}

MetricReport evaluate_config(const Architecture & arch, const WeightSet & init, const std::vector<ExpertRecord> & experts,
                             const MergeConfig & cfg, const std::vector<TaskSplit> & tasks) {
    return report(arch, local_merge(init, experts, cfg), tasks);
}

SearchResult hyperparam_search(const Architecture & arch, const WeightSet & init,
                               const std::vector<ExpertRecord> & experts, const SearchGrid & grid,
                               const std::vector<TaskSplit> & tasks) {
    if (grid.method != MergeMethod::average && grid.lambdas.empty()) {
        throw Error(Errc::invalid_argument, "search grid has no lambda values");
    }
    if (is_tall(grid.method) && grid.tall_lambdas.empty()) {
        throw Error(Errc::invalid_argument, "search grid has no TALL lambda values");
    }
    MergeConfig base;
    base.method             = grid.method;
    base.ties_keep_fraction = grid.ties_keep_fraction;

    SearchResult res;
    const std::vector<double> lambdas = grid.method == MergeMethod::average ? std::vector<double>{1.0} : grid.lambdas;
    std::vector<MetricReport> reports;
    for (double lambda : lambdas) {
        MergeConfig cfg = base;
        cfg.lambda      = lambda;
        if (!is_tall(grid.method)) {
            reports.push_back(evaluate_config(arch, init, experts, cfg, tasks));
        } else {
            // per-task choice of lambda_t, lowest index among equals
            std::vector<MetricReport> per_rate;
            for (double rate : grid.tall_lambdas) {
                MergeConfig c        = cfg;
                c.tall_lambda_default = rate;
                per_rate.push_back(evaluate_config(arch, init, experts, c, tasks));
            }
            std::vector<TaskMetric> best(tasks.size());
            for (size_t t = 0; t < tasks.size(); ++t) {
                size_t pick = 0;
                for (size_t r = 1; r < per_rate.size(); ++r) {
                    if (per_rate[r].per_task[t].normalized_acc > per_rate[pick].per_task[t].normalized_acc) {
                        pick = r;
                    }
                }
                best[t]                        = per_rate[pick].per_task[t];
                cfg.tall_lambda[tasks[t].task_id] = grid.tall_lambdas[pick];
            }
            cfg.tall_lambda_default = grid.tall_lambdas.front();
            reports.push_back(MetricReport::aggregate(merge_method_name(grid.method), std::move(best)));
        }
        res.evaluated.push_back({cfg, reports.back().avg_normalized});
    }
    for (size_t i = 1; i < res.evaluated.size(); ++i) {
        if (res.evaluated[i].objective > res.evaluated[res.best_index].objective) {
            res.best_index = i;
        }
    }
    res.best   = res.evaluated[res.best_index].config;
    res.report = reports[res.best_index];
    return res;
}

std::pair<LabeledBatch, LabeledBatch> validation_split(const LabeledBatch & data, double fraction, uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw Error(Errc::invalid_argument, "validation fraction must lie in (0, 1)");
    }
    const size_t n     = data.size();
    const auto   n_val = static_cast<size_t>(std::llround(fraction * static_cast<double>(n)));
    if (n_val == 0 || n_val >= n) {
        throw Error(Errc::empty_input, "validation split of " + std::to_string(n) + " samples at fraction " +
                                           std::to_string(fraction) + " leaves one side empty");
    }
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) {
        idx[i] = i;
    }
    Rng rng(seed);
    rng.shuffle(idx);
    std::vector<size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<size_t> rest(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    std::sort(val.begin(), val.end());
    std::sort(rest.begin(), rest.end());
    return {data.select(val), data.select(rest)};
}

} // namespace mergeforge
