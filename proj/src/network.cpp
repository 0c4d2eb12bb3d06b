#include "mergeforge/network.hpp"

#include <cmath>
#include <map>
#include <set>

namespace mergeforge {

const char * layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::dense:           return "dense";
        case LayerKind::layer_norm:      return "layer_norm";
        case LayerKind::relu:            return "relu";
        case LayerKind::classifier_head: return "classifier_head";
    }
    return "?";
}

LayerKind parse_layer_kind(const std::string & s) {
    if (s == "dense") return LayerKind::dense;
    if (s == "layer_norm") return LayerKind::layer_norm;
    if (s == "relu") return LayerKind::relu;
    if (s == "classifier_head") return LayerKind::classifier_head;
    throw Error(Errc::config, "unknown layer kind '" + s + "'");
}

Architecture::Architecture(std::string id, std::vector<LayerSpec> layers, std::vector<PermGroup> groups)
    : id_(std::move(id)), layers_(std::move(layers)), groups_(std::move(groups)) {
    validate();
}

void Architecture::validate() {
    auto fail = [&](const std::string & msg) { return Error(Errc::invalid_argument, "architecture '" + id_ + "': " + msg); };
    if (layers_.size() < 2) {
        throw fail("needs at least one dense layer and a classifier head");
    }
    if (layers_.back().kind != LayerKind::classifier_head) {
        throw fail("last layer must be the classifier head");
    }
    std::set<std::string> names;
    modules_.clear();
    for (size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec & l = layers_[i];
        if (l.in_dim <= 0 || l.out_dim <= 0) {
            throw fail("layer " + std::to_string(i) + " has non-positive dims");
        }
        if (i > 0 && layers_[i - 1].out_dim != l.in_dim) {
            throw fail("dims do not chain at layer " + std::to_string(i));
        }
        if ((l.kind == LayerKind::layer_norm || l.kind == LayerKind::relu) && l.in_dim != l.out_dim) {
            throw fail(std::string(layer_kind_name(l.kind)) + " layer must preserve width");
        }
        if (l.kind != LayerKind::relu && !names.insert(l.name).second) {
            throw fail("duplicate layer name '" + l.name + "'");
        }
        switch (l.kind) {
            case LayerKind::dense: {
                Module m;
                m.name  = l.name;
                m.dense = i;
                m.width = l.out_dim;
                modules_.push_back(m);
                break;
            }
            case LayerKind::layer_norm:
                if (modules_.empty() || modules_.back().norm || modules_.back().relu) {
                    throw fail("layer_norm must directly follow a dense layer");
                }
                modules_.back().norm = i;
                break;
            case LayerKind::relu:
                if (modules_.empty() || modules_.back().relu) {
                    throw fail("relu must follow a dense block");
                }
                modules_.back().relu = true;
                break;
            case LayerKind::classifier_head:
                if (i + 1 != layers_.size()) {
                    throw fail("classifier head must be last");
                }
                break;
        }
    }
    if (modules_.empty()) {
        throw fail("no dense layers");
    }

    // Every hidden dense output axis belongs to exactly one group; input and
    // output axes belong to none.
    std::map<std::pair<std::string, int>, std::string> owner;
    for (const auto & g : groups_) {
        if (g.size <= 0) {
            throw fail("group '" + g.name + "' has non-positive size");
        }
        for (const auto & m : g.members) {
            if (!owner.emplace(std::make_pair(m.tensor, m.axis), g.name).second) {
                throw fail("axis " + std::to_string(m.axis) + " of '" + m.tensor + "' belongs to two groups");
            }
        }
    }
    for (const auto & m : modules_) {
        const auto key = std::make_pair(layers_[m.dense].name + ".weight", 1);
        auto it = owner.find(key);
        if (it == owner.end()) {
            throw fail("hidden axis of '" + key.first + "' is in no permutation group");
        }
        auto g = std::find_if(groups_.begin(), groups_.end(), [&](const PermGroup & pg) { return pg.name == it->second; });
        if (g->size != m.width) {
            throw fail("group '" + g->name + "' size does not match width of '" + m.name + "'");
        }
    }
    const std::string first_w = layers_[modules_.front().dense].name + ".weight";
    const std::string head_w  = head().name + ".weight";
    if (owner.count({first_w, 0}) || owner.count({head_w, 1}) || owner.count({head().name + ".bias", 0})) {
        throw fail("input and output axes must not be permuted");
    }
}

std::vector<std::pair<std::string, Shape>> Architecture::encoder_layout() const {
    std::vector<std::pair<std::string, Shape>> out;
    for (const auto & l : layers_) {
        switch (l.kind) {
            case LayerKind::dense:
                out.emplace_back(l.name + ".weight", Shape{l.in_dim, l.out_dim});
                out.emplace_back(l.name + ".bias", Shape{l.out_dim});
                break;
            case LayerKind::layer_norm:
                out.emplace_back(l.name + ".scale", Shape{l.out_dim});
                out.emplace_back(l.name + ".shift", Shape{l.out_dim});
                break;
            default:
                break;
        }
    }
    return out;
}

std::vector<std::pair<std::string, Shape>> Architecture::head_layout(int64_t n_classes) const {
    return {{head().name + ".weight", Shape{feature_dim(), n_classes}}, {head().name + ".bias", Shape{n_classes}}};
}

namespace {

Tensor glorot(const std::string & name, int64_t in, int64_t out, uint64_t seed) {
    Tensor t(name, Shape{in, out});
    Rng rng(seed);
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (float & v : t.data) {
        v = static_cast<float>(rng.uniform(-bound, bound));
    }
    return t;
}

} // namespace

WeightSet Architecture::init_encoder(uint64_t seed) const {
    WeightSet ws(id_);
    for (size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec & l = layers_[i];
        if (l.kind == LayerKind::dense) {
            ws.add(glorot(l.name + ".weight", l.in_dim, l.out_dim, mix_seed(seed, i)));
            ws.add(Tensor(l.name + ".bias", Shape{l.out_dim}));
        } else if (l.kind == LayerKind::layer_norm) {
            ws.add(Tensor(l.name + ".scale", Shape{l.out_dim}, std::vector<float>(static_cast<size_t>(l.out_dim), 1.0f)));
            ws.add(Tensor(l.name + ".shift", Shape{l.out_dim}));
        }
    }
    return ws;
}

WeightSet Architecture::init_head(int64_t n_classes, uint64_t seed) const {
    if (n_classes <= 0) {
        throw Error(Errc::invalid_argument, "head needs a positive class count");
    }
    WeightSet ws(id_);
    ws.add(glorot(head().name + ".weight", feature_dim(), n_classes, mix_seed(seed, layers_.size())));
    ws.add(Tensor(head().name + ".bias", Shape{n_classes}));
    return ws;
}

void Architecture::check_encoder(const WeightSet & encoder) const {
    const auto layout = encoder_layout();
    if (encoder.size() != layout.size()) {
        throw Error(Errc::shape_mismatch, "encoder has " + std::to_string(encoder.size()) + " tensors, architecture '" +
                                              id_ + "' expects " + std::to_string(layout.size()));
    }
    for (size_t i = 0; i < layout.size(); ++i) {
        if (encoder[i].name != layout[i].first || encoder[i].shape != layout[i].second) {
            throw Error(Errc::shape_mismatch, "encoder tensor " + std::to_string(i) + " is '" + encoder[i].name + "' " +
                                                  shape_str(encoder[i].shape) + ", expected '" + layout[i].first + "' " +
                                                  shape_str(layout[i].second));
        }
    }
}

int64_t Architecture::check_head(const WeightSet & head_ws) const {
    const Tensor * w = head_ws.find(head().name + ".weight");
    const Tensor * b = head_ws.find(head().name + ".bias");
    if (!w || !b || head_ws.size() != 2 || w->shape.size() != 2 || b->shape.size() != 1) {
        throw Error(Errc::shape_mismatch, "head must hold '" + head().name + ".weight' [d,C] and '" + head().name +
                                              ".bias' [C]");
    }
    if (w->shape[0] != feature_dim() || w->shape[1] != b->shape[0]) {
        throw Error(Errc::shape_mismatch, "head weight " + shape_str(w->shape) + " / bias " + shape_str(b->shape) +
                                              " do not fit feature width " + std::to_string(feature_dim()));
    }
    return w->shape[1];
}

nlohmann::ordered_json Architecture::to_json() const {
    nlohmann::ordered_json j;
    j["id"] = id_;
    auto & layers = j["layers"] = nlohmann::ordered_json::array();
    for (const auto & l : layers_) {
        layers.push_back({{"kind", layer_kind_name(l.kind)}, {"name", l.name}, {"in_dim", l.in_dim}, {"out_dim", l.out_dim}});
    }
    auto & groups = j["perm_groups"] = nlohmann::ordered_json::array();
    for (const auto & g : groups_) {
        nlohmann::ordered_json members = nlohmann::ordered_json::array();
        for (const auto & m : g.members) {
            members.push_back({{"tensor", m.tensor}, {"axis", m.axis}});
        }
        groups.push_back({{"name", g.name}, {"size", g.size}, {"members", members}});
    }
    return j;
}

Architecture Architecture::from_json(const nlohmann::json & j) {
    try {
        std::vector<LayerSpec> layers;
        for (const auto & l : j.at("layers")) {
            layers.push_back({parse_layer_kind(l.at("kind").get<std::string>()), l.at("name").get<std::string>(),
                              l.at("in_dim").get<int64_t>(), l.at("out_dim").get<int64_t>()});
        }
        std::vector<PermGroup> groups;
        for (const auto & g : j.at("perm_groups")) {
            PermGroup pg;
            pg.name = g.at("name").get<std::string>();
            pg.size = g.at("size").get<int64_t>();
            for (const auto & m : g.at("members")) {
                pg.members.push_back({m.at("tensor").get<std::string>(), m.at("axis").get<int>()});
            }
            groups.push_back(std::move(pg));
        }
        return Architecture(j.at("id").get<std::string>(), std::move(layers), std::move(groups));
    } catch (const nlohmann::json::exception & e) {
        throw Error(Errc::config, std::string("bad architecture JSON: ") + e.what());
    }
}

Architecture make_mlp(int64_t in_dim, const std::vector<int64_t> & hidden, int64_t n_classes, bool layer_norm) {
    if (hidden.empty()) {
        throw Error(Errc::invalid_argument, "make_mlp needs at least one hidden layer");
    }
    std::vector<LayerSpec> layers;
    std::vector<PermGroup> groups;
    std::string            id = "mlp-" + std::to_string(in_dim) + "-";
    int64_t                prev = in_dim;
    for (size_t i = 0; i < hidden.size(); ++i) {
        const std::string fc = "fc" + std::to_string(i);
        const std::string ln = "ln" + std::to_string(i);
        layers.push_back({LayerKind::dense, fc, prev, hidden[i]});
        if (layer_norm) {
            layers.push_back({LayerKind::layer_norm, ln, hidden[i], hidden[i]});
        }
        if (i + 1 < hidden.size()) {
            layers.push_back({LayerKind::relu, "relu" + std::to_string(i), hidden[i], hidden[i]});
        }
        PermGroup g;
        g.name = "h" + std::to_string(i);
        g.size = hidden[i];
        g.members.push_back({fc + ".weight", 1});
        g.members.push_back({fc + ".bias", 0});
        if (layer_norm) {
            g.members.push_back({ln + ".scale", 0});
            g.members.push_back({ln + ".shift", 0});
        }
        const std::string next = i + 1 < hidden.size() ? "fc" + std::to_string(i + 1) : std::string("head");
        g.members.push_back({next + ".weight", 0});
        groups.push_back(std::move(g));
        id += (i ? "x" : "") + std::to_string(hidden[i]);
        prev = hidden[i];
    }
    layers.push_back({LayerKind::classifier_head, "head", prev, n_classes});
    id += layer_norm ? "-ln" : "";
    return Architecture(id, std::move(layers), std::move(groups));
}

// --- forward ------------------------------------------------------------------

Matrix module_capture(const Architecture & arch, size_t k, const WeightSet & encoder, const Matrix & x) {
    const Module &    m  = arch.modules().at(k);
    const LayerSpec & dl = arch.layers()[m.dense];
    const Tensor &    w  = encoder.at(dl.name + ".weight");
    const Tensor &    b  = encoder.at(dl.name + ".bias");
    if (x.cols() != dl.in_dim || w.shape != Shape{dl.in_dim, dl.out_dim} || b.shape != Shape{dl.out_dim}) {
        throw Error(Errc::shape_mismatch, "module '" + m.name + "' expects input width " + std::to_string(dl.in_dim) +
                                              ", got " + std::to_string(x.cols()));
    }
    Matrix a = x * w.mat();
    a.rowwise() += b.vec().transpose();
    if (m.norm) {
        const LayerSpec & nl    = arch.layers()[*m.norm];
        const Tensor &    scale = encoder.at(nl.name + ".scale");
        const Tensor &    shift = encoder.at(nl.name + ".shift");
        const float       inv_d = 1.0f / static_cast<float>(a.cols());
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
            auto        row  = a.row(r);
            const float mean = row.sum() * inv_d;
            row.array() -= mean;
            const float var = row.squaredNorm() * inv_d;
            row *= 1.0f / std::sqrt(var + kLayerNormEps);
            row.array() = row.array() * scale.vec().transpose().array() + shift.vec().transpose().array();
        }
    }
    return a;
}

void apply_nonlinearity(const Architecture & arch, size_t k, Matrix & a) {
    if (arch.modules().at(k).relu) {
        a = a.cwiseMax(0.0f);
    }
}

Matrix head_logits(const WeightSet & head, const Matrix & features) {
    const Tensor & w = head[0];
    const Tensor & b = head[1];
    if (features.cols() != w.rows()) {
        throw Error(Errc::shape_mismatch, "head expects width " + std::to_string(w.rows()) + ", got " +
                                              std::to_string(features.cols()));
    }
    Matrix logits = features * w.mat();
    logits.rowwise() += b.vec().transpose();
    return logits;
}

Matrix encode(const Architecture & arch, const WeightSet & encoder, const Matrix & x) {
    Matrix h = x;
    for (size_t k = 0; k < arch.modules().size(); ++k) {
        h = module_capture(arch, k, encoder, h);
        apply_nonlinearity(arch, k, h);
    }
    return h;
}

Matrix forward(const Architecture & arch, const WeightSet & encoder, const WeightSet & head, const Matrix & x) {
    arch.check_head(head);
    return head_logits(head, encode(arch, encoder, x));
}

std::vector<Matrix> capture_activations(const Architecture & arch, const WeightSet & encoder, const WeightSet & head,
                                        const Matrix & x) {
    arch.check_head(head);
    std::vector<Matrix> out;
    out.reserve(arch.modules().size());
    Matrix h = x;
    for (size_t k = 0; k < arch.modules().size(); ++k) {
        out.push_back(module_capture(arch, k, encoder, h));
        h = out.back();
        apply_nonlinearity(arch, k, h);
    }
    return out;
}

// --- data ---------------------------------------------------------------------

LabeledBatch LabeledBatch::slice(size_t begin, size_t end) const {
    LabeledBatch b;
    b.inputs = inputs.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin));
    b.labels.assign(labels.begin() + static_cast<long>(begin), labels.begin() + static_cast<long>(end));
    return b;
}

LabeledBatch LabeledBatch::select(const std::vector<size_t> & rows) const {
    LabeledBatch b;
    b.inputs.resize(static_cast<Eigen::Index>(rows.size()), inputs.cols());
    b.labels.reserve(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        b.inputs.row(static_cast<Eigen::Index>(i)) = inputs.row(static_cast<Eigen::Index>(rows[i]));
        b.labels.push_back(labels[rows[i]]);
    }
    return b;
}

LabeledBatch concat(const std::vector<const LabeledBatch *> & parts) {
    LabeledBatch out;
    Eigen::Index n = 0, d = -1;
    for (const auto * p : parts) {
        if (d >= 0 && p->inputs.cols() != d && p->size() > 0) {
            throw Error(Errc::shape_mismatch, "cannot concatenate batches of different widths");
        }
        if (p->size() > 0) {
            d = p->inputs.cols();
        }
        n += static_cast<Eigen::Index>(p->size());
    }
    out.inputs.resize(n, std::max<Eigen::Index>(d, 0));
    Eigen::Index r = 0;
    for (const auto * p : parts) {
        if (p->size() == 0) {
            continue;
        }
        out.inputs.middleRows(r, static_cast<Eigen::Index>(p->size())) = p->inputs;
        out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
        r += static_cast<Eigen::Index>(p->size());
    }
    return out;
}

namespace {

struct ScoreAcc {
    double  loss    = 0.0;
    int64_t correct = 0;
    int64_t n       = 0;

    void add(const Matrix & logits, const std::vector<int32_t> & labels, size_t offset) {
        for (Eigen::Index r = 0; r < logits.rows(); ++r) {
            const int32_t y = labels[offset + static_cast<size_t>(r)];
            if (y < 0 || y >= logits.cols()) {
                throw Error(Errc::invalid_argument, "label " + std::to_string(y) + " out of range for " +
                                                        std::to_string(logits.cols()) + " classes");
            }
            Eigen::Index best = 0;
            double       mx   = logits(r, 0);
            for (Eigen::Index c = 1; c < logits.cols(); ++c) {
                if (logits(r, c) > mx) {
                    mx   = logits(r, c);
                    best = c;
                }
            }
            double z = 0.0;
            for (Eigen::Index c = 0; c < logits.cols(); ++c) {
                z += std::exp(static_cast<double>(logits(r, c)) - mx);
            }
            loss += std::log(z) + mx - static_cast<double>(logits(r, y));
            correct += best == y;
            ++n;
        }
    }

    EvalResult result() const {
        return {static_cast<double>(correct) / static_cast<double>(n), loss / static_cast<double>(n)};
    }
};

} // namespace

EvalResult score_logits(const Matrix & logits, const std::vector<int32_t> & labels) {
    if (labels.empty()) {
        throw Error(Errc::empty_input, "cannot score an empty dataset");
    }
    if (static_cast<size_t>(logits.rows()) != labels.size()) {
        throw Error(Errc::shape_mismatch, "logit rows do not match label count");
    }
    ScoreAcc acc;
    acc.add(logits, labels, 0);
    return acc.result();
}

EvalResult evaluate(const Architecture & arch, const WeightSet & encoder, const WeightSet & head,
                    const LabeledBatch & data, size_t chunk) {
    if (data.size() == 0) {
        throw Error(Errc::empty_input, "cannot evaluate on an empty dataset");
    }
    chunk = std::max<size_t>(chunk, 1);
    ScoreAcc acc;
    for (size_t begin = 0; begin < data.size(); begin += chunk) {
        const size_t end = std::min(data.size(), begin + chunk);
        const Matrix logits =
            forward(arch, encoder, head, data.inputs.middleRows(static_cast<Eigen::Index>(begin),
                                                                static_cast<Eigen::Index>(end - begin)));
        acc.add(logits, data.labels, begin);
    }
    return acc.result();
}

} // namespace mergeforge
