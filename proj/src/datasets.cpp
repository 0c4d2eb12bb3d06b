#include "mergeforge/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mergeforge {

const TaskDataset & TaskSuite::task(const std::string & id) const {
    for (const auto & t : tasks) {
        if (t.task_id == id) {
            return t;
        }
    }
    if (pretrain.task_id == id) {
        return pretrain;
    }
    throw Error(Errc::invalid_argument, "no task '" + id + "' in suite");
}

void SuiteSpec::validate() const {
    if (in_dim < 2) {
        throw Error(Errc::invalid_argument, "synthetic suites need in_dim >= 2");
    }
    if (n_tasks <= 0 || classes_per_task <= 0 || train_n <= 0 || test_n <= 0 || pretrain_classes <= 0 ||
        pretrain_train_n <= 0 || pretrain_test_n <= 0) {
        throw Error(Errc::invalid_argument, "suite counts must be positive");
    }
    if (train_n < classes_per_task || test_n < classes_per_task || pretrain_train_n < pretrain_classes ||
        pretrain_test_n < pretrain_classes) {
        throw Error(Errc::invalid_argument, "every class needs at least one sample in each split");
    }
}

namespace {

// Latent cluster geometry.
constexpr double kClusterSpread   = 1.0;   // std of cluster centers
constexpr double kClusterNoise    = 0.45;  // within-cluster std
constexpr int    kClustersPerClass = 2;
constexpr double kDomainOffset    = 1.5;   // std of each task's translation
constexpr double kWarpStrength    = 1.0;
constexpr double kPretrainNoise   = 0.6;

// x = Q z + offset + warp * tanh(M z + c)
struct TaskWarp {
    Matrix          rotation;  // [d, d] orthogonal
    Matrix          mix;       // [d, d]
    Eigen::VectorXf bias, offset;

    Eigen::VectorXf apply(const Eigen::VectorXf & z) const {
        Eigen::VectorXf lin = mix * z + bias;
        return rotation * z + offset + static_cast<float>(kWarpStrength) * lin.array().tanh().matrix();
    }
};

Matrix gaussian_matrix(Rng & rng, int64_t rows, int64_t cols, double stddev) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<float>(rng.normal() * stddev);
    }
    return m;
}

Eigen::VectorXf gaussian_vector(Rng & rng, int64_t n, double stddev) {
    Eigen::VectorXf v(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        v(i) = static_cast<float>(rng.normal() * stddev);
    }
    return v;
}

Matrix random_rotation(Rng & rng, int64_t d) {
    // modified Gram-Schmidt on a Gaussian matrix
    Matrix q = gaussian_matrix(rng, d, d, 1.0);
    for (Eigen::Index j = 0; j < d; ++j) {
        for (Eigen::Index i = 0; i < j; ++i) {
            q.col(j) -= q.col(i).dot(q.col(j)) * q.col(i);
        }
        q.col(j).normalize();
    }
    return q;
}

TaskWarp make_warp(Rng & rng, int64_t d) {
    TaskWarp w;
    w.rotation = random_rotation(rng, d);
    w.mix      = gaussian_matrix(rng, d, d, 1.5 / std::sqrt(static_cast<double>(d)));
    w.bias     = gaussian_vector(rng, d, 0.5);
    w.offset   = gaussian_vector(rng, d, kDomainOffset);
    return w;
}

// Balanced labels (i mod C), emitted in a shuffled order.
std::vector<size_t> shuffled_indices(Rng & rng, size_t n) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    return idx;
}

LabeledBatch sample_task_split(Rng & rng, const TaskWarp & warp, const std::vector<Eigen::VectorXf> & centers,
                               int64_t n_classes, int64_t n) {
    const int64_t d = warp.rotation.rows();
    LabeledBatch  b;
    b.inputs.resize(n, d);
    b.labels.resize(static_cast<size_t>(n));
    const auto order = shuffled_indices(rng, static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const int64_t   label   = i % n_classes;
        const int64_t   cluster = (i / n_classes) % kClustersPerClass;
        Eigen::VectorXf z       = centers[static_cast<size_t>(label * kClustersPerClass + cluster)] +
                            gaussian_vector(rng, d, kClusterNoise);
        const auto row = static_cast<Eigen::Index>(order[static_cast<size_t>(i)]);
        b.inputs.row(row) = warp.apply(z).transpose();
        b.labels[static_cast<size_t>(row)] = static_cast<int32_t>(label);
    }
    return b;
}

LabeledBatch sample_pretrain_split(Rng & rng, const std::vector<Eigen::VectorXf> & centers, int64_t n) {
    const int64_t n_classes = static_cast<int64_t>(centers.size());
    const int64_t d         = centers.front().size();
    LabeledBatch  b;
    b.inputs.resize(n, d);
    b.labels.resize(static_cast<size_t>(n));
    const auto order = shuffled_indices(rng, static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const int64_t label = i % n_classes;
        const auto    row   = static_cast<Eigen::Index>(order[static_cast<size_t>(i)]);
        b.inputs.row(row) = (centers[static_cast<size_t>(label)] + gaussian_vector(rng, d, kPretrainNoise)).transpose();
        b.labels[static_cast<size_t>(row)] = static_cast<int32_t>(label);
    }
    return b;
}

} // namespace

TaskSuite synth_suite(const SuiteSpec & spec) {
    spec.validate();
    const int64_t d = spec.in_dim;
    TaskSuite     suite;
    std::vector<TaskWarp> warps;
    for (int64_t t = 0; t < spec.n_tasks; ++t) {
        Rng      rng(mix_seed(spec.seed, 1000 + static_cast<uint64_t>(t)));
        TaskWarp warp = make_warp(rng, d);
        std::vector<Eigen::VectorXf> centers;
        for (int64_t c = 0; c < spec.classes_per_task * kClustersPerClass; ++c) {
            centers.push_back(gaussian_vector(rng, d, kClusterSpread));
        }
        TaskDataset task;
        task.task_id   = "task" + std::to_string(t);
        task.n_classes = spec.classes_per_task;
        task.train     = sample_task_split(rng, warp, centers, spec.classes_per_task, spec.train_n);
        task.test      = sample_task_split(rng, warp, centers, spec.classes_per_task, spec.test_n);
        suite.tasks.push_back(std::move(task));
        warps.push_back(std::move(warp));
    }

    // Pretrain classes: one cluster each, centered on images of latent points
    // under a randomly chosen task map, so together they tile every task domain.
    Rng rng(mix_seed(spec.seed, 999));
    std::vector<Eigen::VectorXf> centers;
    for (int64_t c = 0; c < spec.pretrain_classes; ++c) {
        const auto & warp = warps[static_cast<size_t>(rng.below(static_cast<uint64_t>(spec.n_tasks)))];
        centers.push_back(warp.apply(gaussian_vector(rng, d, kClusterSpread * 1.2)));
    }
    suite.pretrain.task_id   = "pretrain";
    suite.pretrain.n_classes = spec.pretrain_classes;
    suite.pretrain.train     = sample_pretrain_split(rng, centers, spec.pretrain_train_n);
    suite.pretrain.test      = sample_pretrain_split(rng, centers, spec.pretrain_test_n);
    return suite;
}

TaskSuite synth_suite(int64_t n_tasks, int64_t in_dim, int64_t classes_per_task, int64_t train_n, int64_t test_n,
                      uint64_t seed) {
    SuiteSpec spec;
    spec.n_tasks          = n_tasks;
    spec.in_dim           = in_dim;
    spec.classes_per_task = classes_per_task;
    spec.train_n          = train_n;
    spec.test_n           = test_n;
    spec.seed             = seed;
    return synth_suite(spec);
}

namespace {

uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string trim(const std::string & s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

TaskDataset load_csv_task(const std::filesystem::path & path, int64_t n_classes) {
    if (n_classes <= 0) {
        throw Error(Errc::invalid_argument, "n_classes must be positive");
    }
    std::ifstream in(path);
    if (!in) {
        throw Error(Errc::io, "cannot open '" + path.string() + "'");
    }
    std::vector<std::vector<float>> rows;
    std::vector<int32_t>            labels;
    std::vector<uint64_t>           hashes;
    std::string                     line;
    int64_t                         lineno = 0;
    size_t                          width  = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        auto where = [&] { return path.string() + ":" + std::to_string(lineno) + ": "; };
        std::vector<std::string> cells;
        std::stringstream        ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) {
            cells.push_back(trim(cell));
        }
        if (cells.size() < 2) {
            throw Error(Errc::invalid_argument, where() + "row needs at least one feature and a label");
        }
        if (width == 0) {
            width = cells.size();
        } else if (cells.size() != width) {
            throw Error(Errc::invalid_argument, where() + "ragged row: " + std::to_string(cells.size()) +
                                                    " fields, expected " + std::to_string(width));
        }
        std::vector<float> feats;
        try {
            for (size_t i = 0; i + 1 < cells.size(); ++i) {
                size_t used = 0;
                feats.push_back(std::stof(cells[i], &used));
                if (used != cells[i].size()) {
                    throw std::invalid_argument(cells[i]);
                }
            }
            size_t     used  = 0;
            const long label = std::stol(cells.back(), &used);
            if (used != cells.back().size()) {
                throw std::invalid_argument(cells.back());
            }
            if (label < 0 || label >= n_classes) {
                throw Error(Errc::invalid_argument, where() + "label " + std::to_string(label) + " outside [0, " +
                                                        std::to_string(n_classes) + ")");
            }
            labels.push_back(static_cast<int32_t>(label));
        } catch (const std::logic_error & e) {
            throw Error(Errc::invalid_argument, where() + "cannot parse number '" + std::string(e.what()) + "'");
        }
        rows.push_back(std::move(feats));
        hashes.push_back(fnv1a(line));
    }
    if (rows.empty()) {
        throw Error(Errc::empty_input, path.string() + ": no rows");
    }

    std::vector<size_t> order(rows.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return hashes[a] < hashes[b]; });
    const size_t n_test = rows.size() / 5;
    std::vector<size_t> test_rows(order.begin(), order.begin() + static_cast<long>(n_test));
    std::vector<size_t> train_rows(order.begin() + static_cast<long>(n_test), order.end());
    std::sort(test_rows.begin(), test_rows.end());
    std::sort(train_rows.begin(), train_rows.end());

    auto build = [&](const std::vector<size_t> & sel) {
        LabeledBatch b;
        b.inputs.resize(static_cast<Eigen::Index>(sel.size()), static_cast<Eigen::Index>(width - 1));
        for (size_t i = 0; i < sel.size(); ++i) {
            for (size_t j = 0; j + 1 < width; ++j) {
                b.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[sel[i]][j];
            }
            b.labels.push_back(labels[sel[i]]);
        }
        return b;
    };
    TaskDataset task;
    task.task_id   = path.stem().string();
    task.n_classes = n_classes;
    task.train     = build(train_rows);
    task.test      = build(test_rows);
    return task;
}

LabeledBatch mixture_batch(const std::vector<const TaskDataset *> & tasks, size_t per_task) {
    std::vector<LabeledBatch> parts;
    parts.reserve(tasks.size());
    for (const auto * t : tasks) {
        if (t->train.size() < per_task) {
            throw Error(Errc::invalid_argument, "task '" + t->task_id + "' has fewer than " + std::to_string(per_task) +
                                                    " training samples");
        }
        parts.push_back(t->train.slice(0, per_task));
    }
    std::vector<const LabeledBatch *> ptrs;
    for (const auto & p : parts) {
        ptrs.push_back(&p);
    }
    return concat(ptrs);
}

LabeledBatch head_rows(const LabeledBatch & b, size_t n) {
    if (n == 0 || n >= b.size()) {
        return b;
    }
    return b.slice(0, n);
}

} // namespace mergeforge
