#include "mergeforge/repair.hpp"

#include <cmath>
#include <cstring>

namespace mergeforge {

const ChannelStats & ActivationStats::at(const std::string & module) const {
    for (const auto & m : modules) {
        if (m.module == module) {
            return m;
        }
    }
    throw Error(Errc::invalid_argument, "no statistics for module '" + module + "'");
}

namespace {

// Chan et al. parallel combination of (count, mean, M2) per channel.
struct MomentAcc {
    int64_t         n = 0;
    Eigen::VectorXd mean, m2;

    void add(const Matrix & a) {
        if (a.rows() == 0) {
            return;
        }
        const Eigen::MatrixXd ad = a.cast<double>();
        const auto            nb = static_cast<double>(a.rows());
        Eigen::VectorXd       bm = ad.colwise().mean().transpose();
        Eigen::VectorXd       bm2 = (ad.rowwise() - bm.transpose()).colwise().squaredNorm().transpose();
        if (n == 0) {
            mean = bm;
            m2   = bm2;
            n    = a.rows();
            return;
        }
        const auto            na    = static_cast<double>(n);
        const double          total = na + nb;
        const Eigen::VectorXd delta = bm - mean;
        mean += delta * (nb / total);
        m2 += bm2 + delta.cwiseProduct(delta) * (na * nb / total);
        n += a.rows();
    }

    ChannelStats finish(const std::string & module) const {
        ChannelStats s;
        s.module = module;
        s.mean   = mean.cast<float>();
        s.std    = (m2 / static_cast<double>(n)).cwiseSqrt().cast<float>();
        return s;
    }
};

void count_pass(PassCounter * counter) {
    if (counter) {
        ++counter->passes;
    }
}

void check_bundle(const Architecture & arch, const TactBundle & bundle) {
    const auto & mods = arch.modules();
    if (bundle.target.modules.size() != mods.size() || bundle.running.modules.size() != mods.size()) {
        throw Error(Errc::shape_mismatch, "correction covers " + std::to_string(bundle.target.modules.size()) +
                                              " modules, architecture has " + std::to_string(mods.size()));
    }
    for (size_t k = 0; k < mods.size(); ++k) {
        for (const ChannelStats * s : {&bundle.target.modules[k], &bundle.running.modules[k]}) {
            if (s->module != mods[k].name || s->mean.size() != mods[k].width || s->std.size() != mods[k].width) {
                throw Error(Errc::shape_mismatch, "correction for '" + s->module + "' does not fit module '" +
                                                      mods[k].name + "' of width " + std::to_string(mods[k].width));
            }
        }
    }
}

// In-place y = s * a + c with s, c derived from target/running moments.
void apply_correction(Matrix & a, const ChannelStats & target, const ChannelStats & running, double eps) {
    const Eigen::Index w = a.cols();
    Eigen::VectorXf    scale(w), shift(w);
    for (Eigen::Index c = 0; c < w; ++c) {
        const double rs = running.std(c);
        const double s  = static_cast<double>(target.std(c)) / std::sqrt(rs * rs + eps);
        scale(c)        = static_cast<float>(s);
        shift(c)        = static_cast<float>(static_cast<double>(target.mean(c)) - s * running.mean(c));
    }
    a.array().rowwise() *= scale.transpose().array();
    a.rowwise() += shift.transpose();
}

} // namespace

ActivationStats compute_stats(const Architecture & arch, const WeightSet & encoder,
                              const std::vector<const LabeledBatch *> & batches, PassCounter * counter) {
    size_t total = 0;
    for (const auto * b : batches) {
        total += b->size();
    }
    if (total == 0) {
        throw Error(Errc::empty_input, "activation statistics need at least one sample");
    }
    arch.check_encoder(encoder);
    const auto &           mods = arch.modules();
    std::vector<MomentAcc> acc(mods.size());
    for (const auto * b : batches) {
        if (b->size() == 0) {
            continue;
        }
        Matrix h = b->inputs;
        for (size_t k = 0; k < mods.size(); ++k) {
            h = module_capture(arch, k, encoder, h);
            acc[k].add(h);
            apply_nonlinearity(arch, k, h);
        }
    }
    count_pass(counter);
    ActivationStats out;
    for (size_t k = 0; k < mods.size(); ++k) {
        out.modules.push_back(acc[k].finish(mods[k].name));
    }
    return out;
}

ActivationStats compute_stats(const Architecture & arch, const WeightSet & encoder, const LabeledBatch & data,
                              PassCounter * counter) {
    return compute_stats(arch, encoder, std::vector<const LabeledBatch *>{&data}, counter);
}

std::vector<Matrix> corrected_capture(const Architecture & arch, const WeightSet & encoder, const TactBundle & bundle,
                                      const Matrix & x) {
    check_bundle(arch, bundle);
    std::vector<Matrix> out;
    Matrix              h = x;
    for (size_t k = 0; k < arch.modules().size(); ++k) {
        Matrix a = module_capture(arch, k, encoder, h);
        apply_correction(a, bundle.target.modules[k], bundle.running.modules[k], bundle.epsilon);
        out.push_back(a);
        apply_nonlinearity(arch, k, a);
        h = std::move(a);
    }
    return out;
}

Matrix corrected_forward(const Architecture & arch, const WeightSet & encoder, const WeightSet & head,
                         const TactBundle & bundle, const Matrix & x) {
    arch.check_head(head);
    check_bundle(arch, bundle);
    Matrix h = x;
    for (size_t k = 0; k < arch.modules().size(); ++k) {
        h = module_capture(arch, k, encoder, h);
        apply_correction(h, bundle.target.modules[k], bundle.running.modules[k], bundle.epsilon);
        apply_nonlinearity(arch, k, h);
    }
    return head_logits(head, h);
}

EvalResult evaluate_corrected(const Architecture & arch, const WeightSet & encoder, const WeightSet & head,
                              const TactBundle & bundle, const LabeledBatch & data) {
    if (data.size() == 0) {
        throw Error(Errc::empty_input, "cannot evaluate on an empty dataset");
    }
    return score_logits(corrected_forward(arch, encoder, head, bundle, data.inputs), data.labels);
}

ActivationStats sequential_running_stats(const Architecture & arch, const WeightSet & encoder,
                                         const ActivationStats & target, const LabeledBatch & data, double epsilon,
                                         PassCounter * counter) {
    if (data.size() == 0) {
        throw Error(Errc::empty_input, "running statistics need at least one sample");
    }
    arch.check_encoder(encoder);
    const auto & mods = arch.modules();
    if (target.modules.size() != mods.size()) {
        throw Error(Errc::shape_mismatch, "target statistics do not cover every module");
    }
    ActivationStats running;
    Matrix          h = data.inputs;
    for (size_t k = 0; k < mods.size(); ++k) {
        Matrix    a = module_capture(arch, k, encoder, h);
        MomentAcc acc;
        acc.add(a);
        running.modules.push_back(acc.finish(mods[k].name));
        if (target.modules[k].mean.size() != a.cols()) {
            throw Error(Errc::shape_mismatch, "target statistics for '" + mods[k].name + "' have the wrong width");
        }
        apply_correction(a, target.modules[k], running.modules[k], epsilon);
        apply_nonlinearity(arch, k, a);
        h = std::move(a);
    }
    count_pass(counter);
    return running;
}

TactBundle tact_correct_with_target(const Architecture & arch, const WeightSet & merged, std::string task_id,
                                    ActivationStats target, const LabeledBatch & data, double epsilon,
                                    PassCounter * counter) {
    TactBundle b;
    b.task_id = std::move(task_id);
    b.epsilon = epsilon;
    b.running = sequential_running_stats(arch, merged, target, data, epsilon, counter);
    b.target  = std::move(target);
    return b;
}

TactBundle tact_correct(const Architecture & arch, const WeightSet & merged, const ExpertRecord & expert,
                        const LabeledBatch & data, double epsilon, PassCounter * counter) {
    if (data.size() == 0) {
        throw Error(Errc::empty_input, "TACT needs task data");
    }
    check_compatible(merged, expert.encoder);
    ActivationStats target = compute_stats(arch, expert.encoder, data, counter);
    return tact_correct_with_target(arch, merged, expert.task_id, std::move(target), data, epsilon, counter);
}

TactBundle repair_global(const Architecture & arch, const WeightSet & interpolated, const WeightSet & endpoint1,
                         const WeightSet & endpoint2, double alpha, const LabeledBatch & mixture, double epsilon,
                         PassCounter * counter) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw Error(Errc::invalid_argument, "alpha must lie in [0, 1]");
    }
    const ActivationStats s1 = compute_stats(arch, endpoint1, mixture, counter);
    const ActivationStats s2 = compute_stats(arch, endpoint2, mixture, counter);
    ActivationStats       target;
    const auto            w1 = static_cast<float>(1.0 - alpha);
    const auto            w2 = static_cast<float>(alpha);
    for (size_t k = 0; k < s1.modules.size(); ++k) {
        ChannelStats c;
        c.module = s1.modules[k].module;
        c.mean   = w1 * s1.modules[k].mean + w2 * s2.modules[k].mean;
        c.std    = w1 * s1.modules[k].std + w2 * s2.modules[k].std;
        target.modules.push_back(std::move(c));
    }
    return tact_correct_with_target(arch, interpolated, "repair", std::move(target), mixture, epsilon, counter);
}

std::vector<LayerDiagnostics> stats_diagnostics(const Architecture & arch, const WeightSet & merged,
                                                const WeightSet & expert, const TactBundle * bundle,
                                                const LabeledBatch & batch) {
    if (batch.size() == 0) {
        throw Error(Errc::empty_input, "diagnostics need a non-empty batch");
    }
    check_compatible(merged, expert);
    std::vector<Matrix> m_acts;
    if (bundle) {
        m_acts = corrected_capture(arch, merged, *bundle, batch.inputs);
    } else {
        Matrix h = batch.inputs;
        for (size_t k = 0; k < arch.modules().size(); ++k) {
            m_acts.push_back(module_capture(arch, k, merged, h));
            h = m_acts.back();
            apply_nonlinearity(arch, k, h);
        }
    }
    std::vector<Matrix> e_acts;
    {
        Matrix h = batch.inputs;
        for (size_t k = 0; k < arch.modules().size(); ++k) {
            e_acts.push_back(module_capture(arch, k, expert, h));
            h = e_acts.back();
            apply_nonlinearity(arch, k, h);
        }
    }
    auto mean_variance = [](const Matrix & a) {
        MomentAcc acc;
        acc.add(a);
        return (acc.m2 / static_cast<double>(acc.n)).mean();
    };
    std::vector<LayerDiagnostics> out;
    for (size_t k = 0; k < m_acts.size(); ++k) {
        LayerDiagnostics d;
        d.module = arch.modules()[k].name;
        const Eigen::MatrixXd diff = (m_acts[k] - e_acts[k]).cast<double>();
        d.l2_distance = diff.rowwise().norm().mean();
        const double ev = mean_variance(e_acts[k]);
        d.variance_ratio = ev == 0.0 ? kInfiniteRatio : mean_variance(m_acts[k]) / ev;
        out.push_back(d);
    }
    return out;
}

// --- serialization ------------------------------------------------------------

namespace {

ContainerEntry vec_entry(const std::string & name, const Eigen::VectorXf & v) {
    ContainerEntry e;
    e.name  = name;
    e.dtype = "f32";
    e.shape = {v.size()};
    e.bytes.resize(static_cast<size_t>(v.size()) * sizeof(float));
    std::memcpy(e.bytes.data(), v.data(), e.bytes.size());
    return e;
}

} // namespace

std::vector<uint8_t> encode_tact(const TactBundle & bundle, const std::string & arch_id) {
    Container c;
    c.arch_id = arch_id;
    nlohmann::ordered_json modules = nlohmann::ordered_json::array();
    for (size_t k = 0; k < bundle.target.modules.size(); ++k) {
        const auto & t = bundle.target.modules[k];
        const auto & r = bundle.running.modules[k];
        modules.push_back(t.module);
        c.entries.push_back(vec_entry(t.module + ".target_mean", t.mean));
        c.entries.push_back(vec_entry(t.module + ".target_std", t.std));
        c.entries.push_back(vec_entry(t.module + ".running_mean", r.mean));
        c.entries.push_back(vec_entry(t.module + ".running_std", r.std));
    }
    c.meta = {{"task_id", bundle.task_id}, {"epsilon", bundle.epsilon}, {"modules", modules}};
    return encode_container(kWeightsMagic, c);
}

TactBundle decode_tact(const std::vector<uint8_t> & bytes, const std::string & origin) {
    const Container c = decode_container(kWeightsMagic, bytes, origin, [&](const ContainerEntry & e) -> int64_t {
        if (e.dtype != "f32") {
            throw Error(Errc::unsupported_dtype, origin + ": tensor '" + e.name + "' has dtype " + e.dtype);
        }
        return shape_numel(e.shape) * 4;
    });
    auto get = [&](const std::string & name) {
        for (const auto & e : c.entries) {
            if (e.name == name) {
                Eigen::VectorXf v(static_cast<Eigen::Index>(e.bytes.size() / sizeof(float)));
                std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
                return v;
            }
        }
        throw Error(Errc::malformed_header, origin + ": missing tensor '" + name + "'");
    };
    TactBundle b;
    try {
        b.task_id = c.meta.at("task_id").get<std::string>();
        b.epsilon = c.meta.at("epsilon").get<double>();
        for (const auto & m : c.meta.at("modules")) {
            const auto name = m.get<std::string>();
            b.target.modules.push_back({name, get(name + ".target_mean"), get(name + ".target_std")});
            b.running.modules.push_back({name, get(name + ".running_mean"), get(name + ".running_std")});
        }
    } catch (const nlohmann::json::exception & e) {
        throw Error(Errc::malformed_header, origin + ": bad correction metadata: " + e.what());
    }
    return b;
}

void save_tact(const TactBundle & bundle, const std::string & arch_id, const std::filesystem::path & path) {
    write_file(path, encode_tact(bundle, arch_id));
}

TactBundle load_tact(const std::filesystem::path & path) {
    return decode_tact(read_file(path), path.string());
}

} // namespace mergeforge
