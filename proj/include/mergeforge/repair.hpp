#pragma once

#include "mergeforge/train.hpp"

#include <atomic>
#include <filesystem>
#include <limits>

namespace mergeforge {

// Per-channel mean and population std of one module's captured activations.
struct ChannelStats {
    std::string     module;
    Eigen::VectorXf mean;
    Eigen::VectorXf std;
};

struct ActivationStats {
    std::vector<ChannelStats> modules;  // architecture module order

    const ChannelStats & at(const std::string & module) const;
};

// Affine renormalization per module for one task:
//   y = target.std * (a - running.mean) / sqrt(running.std^2 + eps) + target.mean
struct TactBundle {
    std::string     task_id;
    ActivationStats target;
    ActivationStats running;
    double          epsilon = 1e-5;
};

inline constexpr double kDefaultEpsilon = 1e-5;

// Counts full traversals of a dataset's inputs.
struct PassCounter {
    std::atomic<int64_t> passes{0};
};

ActivationStats compute_stats(const Architecture & arch, const WeightSet & encoder,
                              const std::vector<const LabeledBatch *> & batches, PassCounter * counter = nullptr);
ActivationStats compute_stats(const Architecture & arch, const WeightSet & encoder, const LabeledBatch & data,
                              PassCounter * counter = nullptr);

// Captured activations with the correction applied after each module
// (post-correction, pre-nonlinearity).
std::vector<Matrix> corrected_capture(const Architecture & arch, const WeightSet & encoder, const TactBundle & bundle,
                                      const Matrix & x);
Matrix corrected_forward(const Architecture & arch, const WeightSet & encoder, const WeightSet & head,
                         const TactBundle & bundle, const Matrix & x);
EvalResult evaluate_corrected(const Architecture & arch, const WeightSet & encoder, const WeightSet & head,
                              const TactBundle & bundle, const LabeledBatch & data);

// Running statistics of the corrected graph, estimated module by module so
// module k sees corrections 1..k-1 already applied. One pass over `data`.
ActivationStats sequential_running_stats(const Architecture & arch, const WeightSet & encoder,
                                         const ActivationStats & target, const LabeledBatch & data, double epsilon,
                                         PassCounter * counter = nullptr);

// Task-specific correction: target = expert statistics on the task data,
// running = merged-model statistics of the corrected graph on the same data.
// Exactly two passes over the data.
TactBundle tact_correct(const Architecture & arch, const WeightSet & merged, const ExpertRecord & expert,
                        const LabeledBatch & data, double epsilon = kDefaultEpsilon, PassCounter * counter = nullptr);

// Same correction with targets supplied (e.g. cached expert statistics).
TactBundle tact_correct_with_target(const Architecture & arch, const WeightSet & merged, std::string task_id,
                                    ActivationStats target, const LabeledBatch & data, double epsilon = kDefaultEpsilon,
                                    PassCounter * counter = nullptr);

// Interpolated-endpoint repair: target moments are the (1 - alpha, alpha)
// combinations of the endpoints' moments on the mixture data.
TactBundle repair_global(const Architecture & arch, const WeightSet & interpolated, const WeightSet & endpoint1,
                         const WeightSet & endpoint2, double alpha, const LabeledBatch & mixture,
                         double epsilon = kDefaultEpsilon, PassCounter * counter = nullptr);

struct LayerDiagnostics {
    std::string module;
    double      l2_distance    = 0.0;  // mean over samples of ||merged - expert||
    double      variance_ratio = 0.0;  // mean channel variance, merged / expert
};

inline constexpr double kInfiniteRatio = std::numeric_limits<double>::infinity();

std::vector<LayerDiagnostics> stats_diagnostics(const Architecture & arch, const WeightSet & merged,
                                                const WeightSet & expert, const TactBundle * bundle,
                                                const LabeledBatch & batch);

// Container file (tensors "<module>.target_mean", ".target_std",
// ".running_mean", ".running_std"; task_id/epsilon/modules in the header meta).
std::vector<uint8_t> encode_tact(const TactBundle & bundle, const std::string & arch_id);
TactBundle           decode_tact(const std::vector<uint8_t> & bytes, const std::string & origin = "<memory>");
void                 save_tact(const TactBundle & bundle, const std::string & arch_id, const std::filesystem::path & path);
TactBundle           load_tact(const std::filesystem::path & path);

} // namespace mergeforge
