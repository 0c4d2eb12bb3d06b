#pragma once

#include "mergeforge/merge.hpp"
#include "mergeforge/repair.hpp"

#include <functional>
#include <map>
#include <optional>

namespace mergeforge {

// --- error barrier ------------------------------------------------------------

struct BarrierCurve {
    std::vector<double> alphas;  // weight on the first endpoint
    std::vector<double> excess;  // loss(alpha) minus the linear interpolation of endpoint losses
    double              barrier = 0.0;
};

inline constexpr int kDefaultBarrierGrid = 25;

// loss_at(alpha) is the loss of alpha * theta1 + (1 - alpha) * theta2.
BarrierCurve barrier_curve(const std::function<double(double)> & loss_at, int n_grid = kDefaultBarrierGrid);

// Interpolates encoders and heads jointly; loss is the mean cross-entropy on data.
BarrierCurve barrier_curve(const Architecture & arch, const Model & m1, const Model & m2, const LabeledBatch & data,
                           int n_grid = kDefaultBarrierGrid);
double       barrier(const Architecture & arch, const Model & m1, const Model & m2, const LabeledBatch & data,
                     int n_grid = kDefaultBarrierGrid);

// --- reports ------------------------------------------------------------------

struct TaskMetric {
    std::string task_id;
    double      raw_acc        = 0.0;
    double      expert_acc     = 0.0;
    double      normalized_acc = 0.0;

    bool operator==(const TaskMetric &) const = default;
};

struct MetricReport {
    std::string             method;
    std::vector<TaskMetric> per_task;
    double                  avg_normalized = 0.0;
    double                  min_normalized = 0.0;
    int64_t                 n_tasks        = 0;

    static MetricReport    aggregate(std::string method, std::vector<TaskMetric> per_task);
    nlohmann::ordered_json to_json() const;
    static MetricReport    from_json(const nlohmann::json & j);
    bool                   operator==(const MetricReport &) const = default;
};

struct TaskSplit {
    std::string  task_id;
    LabeledBatch data;
    double       expert_acc = 1.0;
};

double expert_accuracy(const Architecture & arch, const ExpertRecord & expert, const LabeledBatch & data);

// One split per expert (in expert order) with expert accuracy measured on it.
std::vector<TaskSplit> make_splits(const Architecture & arch, const std::vector<ExpertRecord> & experts,
                                   const std::map<std::string, const LabeledBatch *> & data);

// Task t is evaluated with bundle.encoder_for(t), head t and, when supplied,
// the TACT correction for t.
MetricReport report(const Architecture & arch, const MergedBundle & bundle, const std::vector<TaskSplit> & tasks,
                    const std::map<std::string, TactBundle> * tact = nullptr);

// TACT bundles for every task of a merged bundle. stats_data maps task_id to
// the data used for both expert and running statistics.
std::map<std::string, TactBundle> tact_all(const Architecture & arch, const MergedBundle & bundle,
                                           const std::vector<ExpertRecord> & experts,
                                           const std::map<std::string, const LabeledBatch *> & stats_data,
                                           double epsilon = kDefaultEpsilon, PassCounter * counter = nullptr);

// --- landscape ----------------------------------------------------------------

struct GridAxis {
    double lo = -0.25;
    double hi = 1.25;
    int    n  = 13;

    std::vector<double> values() const;
};

struct GridSpec {
    GridAxis a;
    GridAxis b;

    // "A0:A1:NA,B0:B1:NB"
    static GridSpec parse(const std::string & text);
};

enum class GridMetric { avg_normalized, min_normalized, loss };

const char * grid_metric_name(GridMetric m);
GridMetric   parse_grid_metric(const std::string & s);

struct GridResult {
    std::vector<double> a_values;
    std::vector<double> b_values;
    Eigen::MatrixXd     cells;  // [a, b]
    GridMetric          metric = GridMetric::avg_normalized;

    std::string to_csv() const;  // header "a,b,metric", a-major rows
};

struct LandscapeTask {
    std::string  task_id;
    WeightSet    head;
    LabeledBatch data;
    double       expert_acc = 1.0;
    // When set, each cell is evaluated with a TACT correction toward these
    // statistics, running statistics estimated on stats_data.
    std::optional<ActivationStats> tact_target;
    LabeledBatch                   stats_data;
};

// Cell (a, b) evaluates origin + a * tau1 + b * tau2 on every task.
GridResult landscape_grid(const Architecture & arch, const WeightSet & origin, const WeightSet & tau1,
                          const WeightSet & tau2, const std::vector<LandscapeTask> & tasks, const GridSpec & spec,
                          GridMetric metric, double epsilon = kDefaultEpsilon);

// --- hyperparameter search ----------------------------------------------------

struct SearchGrid {
    MergeMethod         method = MergeMethod::task_arithmetic;
    std::vector<double> lambdas;       // inner merge scale (unused by average)
    std::vector<double> tall_lambdas;  // TALL methods only
    double              ties_keep_fraction = 0.2;
};

// Grid shapes per method and task count (task arithmetic grids shift down as
// the number of tasks grows; TIES grid is fixed).
SearchGrid default_search_grid(MergeMethod method, size_t n_tasks);

struct SearchPoint {
    MergeConfig config;
    double      objective = 0.0;
};

struct SearchResult {
    MergeConfig              best;
    MetricReport             report;     // best config on the search split
    std::vector<SearchPoint> evaluated;  // one per lambda, in grid order
    size_t                   best_index = 0;
};

MetricReport evaluate_config(const Architecture & arch, const WeightSet & init, const std::vector<ExpertRecord> & experts,
                             const MergeConfig & cfg, const std::vector<TaskSplit> & tasks);

// Exhaustive search maximizing avg_normalized on `tasks`; ties go to the
// lowest grid index. For TALL methods each task's lambda_t is chosen per
// lambda; since task t's model depends only on (lambda, lambda_t) this equals
// a search over the full product grid.
SearchResult hyperparam_search(const Architecture & arch, const WeightSet & init,
                               const std::vector<ExpertRecord> & experts, const SearchGrid & grid,
                               const std::vector<TaskSplit> & tasks);

inline constexpr double kDefaultValidationFraction = 0.2;

// Deterministic disjoint split; validation gets llround(fraction * n) rows.
std::pair<LabeledBatch, LabeledBatch> validation_split(const LabeledBatch & data, double fraction, uint64_t seed);

} // namespace mergeforge
