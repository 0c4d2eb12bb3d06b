#include "mergeforge/train.hpp"

#include "mergeforge/datasets.hpp"

#include <cmath>
#include <numbers>

namespace mergeforge {

void TrainConfig::validate() const {
    if (steps < 0 || warmup_steps < 0 || (steps > 0 && warmup_steps >= steps)) {
        throw Error(Errc::config, "train config needs steps > warmup_steps >= 0 (got steps=" + std::to_string(steps) +
                                      ", warmup=" + std::to_string(warmup_steps) + ")");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw Error(Errc::config, "momentum must lie in [0, 1)");
    }
    if (!(peak_lr >= 0.0) || !(weight_decay >= 0.0) || batch_size <= 0) {
        throw Error(Errc::config, "peak_lr, weight_decay must be >= 0 and batch_size > 0");
    }
}

double learning_rate(const TrainConfig & cfg, int64_t step) {
    if (step < cfg.warmup_steps) {
        return cfg.peak_lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps + 1);
    }
    const int64_t span = cfg.steps - 1 - cfg.warmup_steps;
    if (span <= 0) {
        return cfg.peak_lr;
    }
    const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span));
    return 0.5 * cfg.peak_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

struct ModuleCache {
    Matrix input;
    Matrix xhat;               // normalized pre-affine values (norm modules only)
    Eigen::VectorXf inv_std;   // per row
    Matrix capture;
};

class BatchSampler {
public:
    BatchSampler(size_t n, size_t batch, uint64_t seed) : n_(n), batch_(std::min(batch, n)), rng_(seed), order_(n) {
        reshuffle();
    }

    std::vector<size_t> next() {
        std::vector<size_t> idx;
        idx.reserve(batch_);
        while (idx.size() < batch_) {
            if (pos_ == n_) {
                reshuffle();
            }
            idx.push_back(order_[pos_++]);
        }
        return idx;
    }

private:
    void reshuffle() {
        for (size_t i = 0; i < n_; ++i) {
            order_[i] = i;
        }
        rng_.shuffle(order_);
        pos_ = 0;
    }

    size_t              n_, batch_;
    Rng                 rng_;
    std::vector<size_t> order_;
    size_t              pos_ = 0;
};

Matrix gather_rows(const Matrix & m, const std::vector<size_t> & idx) {
    Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
    }
    return out;
}

// Softmax cross-entropy: returns mean loss and writes dL/dlogits.
double softmax_xent(const Matrix & logits, const std::vector<int32_t> & labels, const std::vector<size_t> & idx,
                    Matrix & grad) {
    const auto   n    = logits.rows();
    const double invn = 1.0 / static_cast<double>(n);
    grad.resize(n, logits.cols());
    double loss = 0.0;
    for (Eigen::Index r = 0; r < n; ++r) {
        const int32_t y  = labels[idx[static_cast<size_t>(r)]];
        if (y < 0 || y >= logits.cols()) {
            throw Error(Errc::invalid_argument, "label " + std::to_string(y) + " out of range for head with " +
                                                    std::to_string(logits.cols()) + " classes");
        }
        const float mx = logits.row(r).maxCoeff();
        double      z  = 0.0;
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
            z += std::exp(static_cast<double>(logits(r, c) - mx));
        }
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
            const double p = std::exp(static_cast<double>(logits(r, c) - mx)) / z;
            grad(r, c)     = static_cast<float>((p - (c == y ? 1.0 : 0.0)) * invn);
        }
        loss += std::log(z) - static_cast<double>(logits(r, y) - mx);
    }
    return loss * invn;
}

class Trainer {
public:
    Trainer(const Architecture & arch, Model model, const TrainConfig & cfg, bool freeze)
        : arch_(arch), model_(std::move(model)), cfg_(cfg), freeze_(freeze) {
        grad_enc_ = zeros_like(model_.encoder);
        grad_head_ = zeros_like(model_.head);
        vel_enc_ = zeros_like(model_.encoder);
        vel_head_ = zeros_like(model_.head);
    }

    // One SGD step on a batch; returns its loss.
    double step(const Matrix & x, const std::vector<int32_t> & labels, const std::vector<size_t> & idx, double lr,
                bool x_is_features) {
        Matrix features = x_is_features ? x : forward_cached(x);
        const Matrix logits = head_logits(model_.head, features);
        Matrix d;
        const double loss = softmax_xent(logits, labels, idx, d);
        if (!std::isfinite(loss)) {
            return loss;
        }
        grad_head_[0].mat().noalias() = features.transpose() * d;
        grad_head_[1].vec() = d.colwise().sum().transpose();
        if (!freeze_) {
            Matrix dh = d * model_.head[0].mat().transpose();
            backward_encoder(dh);
            update(model_.encoder, grad_enc_, vel_enc_, lr);
        }
        update(model_.head, grad_head_, vel_head_, lr);
        return loss;
    }

    Model take() { return std::move(model_); }

private:
    Matrix forward_cached(const Matrix & x) {
        const auto & mods = arch_.modules();
        cache_.resize(mods.size());
        Matrix h = x;
        for (size_t k = 0; k < mods.size(); ++k) {
            const Module &    m  = mods[k];
            const LayerSpec & dl = arch_.layers()[m.dense];
            ModuleCache &     c  = cache_[k];
            c.input = std::move(h);
            Matrix z = c.input * model_.encoder.at(dl.name + ".weight").mat();
            z.rowwise() += model_.encoder.at(dl.name + ".bias").vec().transpose();
            if (m.norm) {
                const LayerSpec & nl = arch_.layers()[*m.norm];
                const float inv_d = 1.0f / static_cast<float>(z.cols());
                c.inv_std.resize(z.rows());
                for (Eigen::Index r = 0; r < z.rows(); ++r) {
                    auto row = z.row(r);
                    row.array() -= row.sum() * inv_d;
                    const float is = 1.0f / std::sqrt(row.squaredNorm() * inv_d + kLayerNormEps);
                    row *= is;
                    c.inv_std(r) = is;
                }
                c.xhat = z;
                const auto & scale = model_.encoder.at(nl.name + ".scale");
                const auto & shift = model_.encoder.at(nl.name + ".shift");
                z.array().rowwise() *= scale.vec().transpose().array();
                z.rowwise() += shift.vec().transpose();
            }
            c.capture = z;
            if (m.relu) {
                z = z.cwiseMax(0.0f);
            }
            h = std::move(z);
        }
        return h;
    }

    void backward_encoder(Matrix & dh) {
        const auto & mods = arch_.modules();
        for (size_t kk = mods.size(); kk-- > 0;) {
            const Module &    m  = mods[kk];
            const LayerSpec & dl = arch_.layers()[m.dense];
            ModuleCache &     c  = cache_[kk];
            if (m.relu) {
                dh.array() *= (c.capture.array() > 0.0f).cast<float>();
            }
            if (m.norm) {
                const LayerSpec & nl = arch_.layers()[*m.norm];
                const auto & scale = model_.encoder.at(nl.name + ".scale");
                grad_enc_.at(nl.name + ".scale").vec() = (dh.array() * c.xhat.array()).colwise().sum().transpose();
                grad_enc_.at(nl.name + ".shift").vec() = dh.colwise().sum().transpose();
                Matrix dxhat = dh.array().rowwise() * scale.vec().transpose().array();
                const float inv_d = 1.0f / static_cast<float>(dxhat.cols());
                for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                    const float mean_d  = dxhat.row(r).sum() * inv_d;
                    const float mean_dx = dxhat.row(r).dot(c.xhat.row(r)) * inv_d;
                    dh.row(r) = c.inv_std(r) *
                                (dxhat.row(r).array() - mean_d - c.xhat.row(r).array() * mean_dx).matrix();
                }
            }
            const auto & w = model_.encoder.at(dl.name + ".weight");
            grad_enc_.at(dl.name + ".weight").mat().noalias() = c.input.transpose() * dh;
            grad_enc_.at(dl.name + ".bias").vec() = dh.colwise().sum().transpose();
            if (kk > 0) {
                Matrix dx = dh * w.mat().transpose();
                dh = std::move(dx);
            }
        }
    }

    void update(WeightSet & params, const WeightSet & grads, WeightSet & vel, double lr) {
        const float mu = static_cast<float>(cfg_.momentum);
        const float wd = static_cast<float>(cfg_.weight_decay);
        const float lf = static_cast<float>(lr);
        for (size_t i = 0; i < params.size(); ++i) {
            const bool decay = params[i].name.ends_with(".weight");
            auto       p     = params[i].vec();
            auto       v     = vel[i].vec();
            if (decay) {
                v = mu * v + grads[i].vec() + wd * p;
            } else {
                v = mu * v + grads[i].vec();
            }
            p -= lf * v;
        }
    }

    const Architecture &     arch_;
    Model                    model_;
    TrainConfig              cfg_;
    bool                     freeze_;
    WeightSet                grad_enc_, grad_head_, vel_enc_, vel_head_;
    std::vector<ModuleCache> cache_;
};

} // namespace

Model train(const Architecture & arch, const Model & init, const LabeledBatch & data, const TrainConfig & cfg,
            const TrainOptions & opts) {
    cfg.validate();
    arch.check_encoder(init.encoder);
    arch.check_head(init.head);
    if (cfg.steps == 0) {
        return init;
    }
    if (data.size() == 0) {
        throw Error(Errc::empty_input, "cannot train on an empty dataset");
    }
    Trainer      trainer(arch, init, cfg, opts.freeze_encoder);
    BatchSampler sampler(data.size(), static_cast<size_t>(cfg.batch_size), cfg.seed);

    // With a frozen encoder the features never change; compute them once.
    Matrix features;
    if (opts.freeze_encoder) {
        features = encode(arch, init.encoder, data.inputs);
    }
    for (int64_t s = 0; s < cfg.steps; ++s) {
        const auto   idx  = sampler.next();
        const double lr   = learning_rate(cfg, s);
        const double loss = opts.freeze_encoder ? trainer.step(gather_rows(features, idx), data.labels, idx, lr, true)
                                                : trainer.step(gather_rows(data.inputs, idx), data.labels, idx, lr, false);
        if (!std::isfinite(loss)) {
            throw TrainingDiverged(s, "training loss became non-finite");
        }
        if (opts.on_step) {
            opts.on_step(s, loss);
        }
    }
    return trainer.take();
}

ExpertRecord make_expert(const Architecture & arch, const WeightSet & foundation, const std::string & foundation_id,
                         const TaskDataset & task, const TrainConfig & cfg, uint64_t head_init_seed,
                         std::optional<int64_t> head_steps) {
    arch.check_encoder(foundation);
    Model model{foundation, arch.init_head(task.n_classes, head_init_seed)};

    TrainConfig stage1 = cfg;
    stage1.steps       = head_steps.value_or(cfg.steps / 4);
    stage1.warmup_steps = cfg.steps > 0 ? cfg.warmup_steps * stage1.steps / cfg.steps : 0;
    if (stage1.steps > 0 && stage1.warmup_steps >= stage1.steps) {
        stage1.warmup_steps = 0;
    }
    stage1.seed = mix_seed(cfg.seed, 1);
    model = train(arch, model, task.train, stage1, {.freeze_encoder = true, .on_step = {}});

    TrainConfig stage2 = cfg;
    stage2.seed        = mix_seed(cfg.seed, 2);
    model = train(arch, model, task.train, stage2);

    return {std::move(model.encoder), std::move(model.head), task.task_id, foundation_id};
}

WeightSet linear_probe(const Architecture & arch, const WeightSet & encoder, const TaskDataset & task,
                       const TrainConfig & cfg, uint64_t head_init_seed) {
    Model model{encoder, arch.init_head(task.n_classes, head_init_seed)};
    return train(arch, model, task.train, cfg, {.freeze_encoder = true, .on_step = {}}).head;
}

} // namespace mergeforge
