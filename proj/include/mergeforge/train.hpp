#pragma once

#include "mergeforge/network.hpp"

#include <optional>

namespace mergeforge {

struct TaskDataset;

// SGD with momentum, linear warmup then cosine decay. Defaults are the
// fine-tuning schedule: warmup 500, peak lr 0.01, weight decay 1e-3.
struct TrainConfig {
    int64_t  steps         = 8000;
    int64_t  warmup_steps  = 500;
    double   peak_lr       = 0.01;
    double   momentum      = 0.9;
    double   weight_decay  = 1e-3;
    int64_t  batch_size    = 128;
    uint64_t seed          = 0;

    void validate() const;
};

// lr used at a 0-based step. Equals peak_lr at step == warmup_steps and decays
// to 0 at step == steps - 1.
double learning_rate(const TrainConfig & cfg, int64_t step);

struct TrainOptions {
    bool freeze_encoder = false;
    // Optional per-step loss callback (step, loss).
    std::function<void(int64_t, double)> on_step;
};

// Minibatch SGD on softmax cross-entropy. Deterministic for a fixed cfg.seed.
// Throws TrainingDiverged if the loss becomes non-finite.
Model train(const Architecture & arch, const Model & init, const LabeledBatch & data, const TrainConfig & cfg,
            const TrainOptions & opts = {});

struct ExpertRecord {
    WeightSet   encoder;
    WeightSet   head;
    std::string task_id;
    std::string foundation_id;
};

// Two-stage fine-tuning: the head alone (encoder frozen) for head_steps
// (default cfg.steps / 4), then encoder and head jointly for cfg.steps.
ExpertRecord make_expert(const Architecture & arch, const WeightSet & foundation, const std::string & foundation_id,
                         const TaskDataset & task, const TrainConfig & cfg, uint64_t head_init_seed,
                         std::optional<int64_t> head_steps = std::nullopt);

// Fresh linear head trained on frozen-encoder features.
WeightSet linear_probe(const Architecture & arch, const WeightSet & encoder, const TaskDataset & task,
                       const TrainConfig & cfg, uint64_t head_init_seed);

} // namespace mergeforge
