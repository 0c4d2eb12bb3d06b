#pragma once

#include "mergeforge/network.hpp"

#include <filesystem>

namespace mergeforge {

struct TaskDataset {
    std::string  task_id;
    int64_t      n_classes = 0;
    LabeledBatch train;
    LabeledBatch test;
};

struct TaskSuite {
    std::vector<TaskDataset> tasks;
    TaskDataset              pretrain;

    const TaskDataset & task(const std::string & id) const;
};

struct SuiteSpec {
    int64_t  n_tasks           = 4;
    int64_t  in_dim            = 16;
    int64_t  classes_per_task  = 4;
    int64_t  train_n           = 2000;  // per task
    int64_t  test_n            = 1000;  // per task
    int64_t  pretrain_classes  = 32;
    int64_t  pretrain_train_n  = 8000;
    int64_t  pretrain_test_n   = 2000;
    uint64_t seed              = 0;

    void validate() const;
};

// Each task: two Gaussian clusters per class in a latent space, pushed through
// a task-specific random smooth map. The pretrain task has many classes whose
// clusters are spread over the region every task maps into.
TaskSuite synth_suite(const SuiteSpec & spec);
TaskSuite synth_suite(int64_t n_tasks, int64_t in_dim, int64_t classes_per_task, int64_t train_n, int64_t test_n,
                      uint64_t seed);

// Rows are feature floats followed by an integer label. The last fifth of rows
// ordered by content hash (ties by row index) becomes the test split.
TaskDataset load_csv_task(const std::filesystem::path & path, int64_t n_classes);

// Equal number of training samples from every task, in task order.
LabeledBatch mixture_batch(const std::vector<const TaskDataset *> & tasks, size_t per_task);

// First n rows (or all when n == 0 or n >= size).
LabeledBatch head_rows(const LabeledBatch & b, size_t n);

} // namespace mergeforge
