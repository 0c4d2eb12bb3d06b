#pragma once

#include "mergeforge/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace mergeforge {

enum class LayerKind { dense, layer_norm, relu, classifier_head };

const char * layer_kind_name(LayerKind kind);
LayerKind    parse_layer_kind(const std::string & s);

struct LayerSpec {
    LayerKind   kind;
    std::string name;  // tensor prefix: "<name>.weight", "<name>.scale", ...
    int64_t     in_dim  = 0;
    int64_t     out_dim = 0;
};

struct CoupledAxis {
    std::string tensor;
    int         axis = 0;
};

// A set of (tensor, axis) pairs that must be permuted together to preserve
// network function.
struct PermGroup {
    std::string              name;
    int64_t                  size = 0;
    std::vector<CoupledAxis> members;
};

// A parameterized block: dense layer, optional layer_norm, optional relu.
// Activations are captured after the norm and before the relu.
struct Module {
    std::string            name;
    size_t                 dense = 0;
    std::optional<size_t>  norm;
    bool                   relu  = false;
    int64_t                width = 0;
};

class Architecture {
public:
    Architecture() = default;
    Architecture(std::string id, std::vector<LayerSpec> layers, std::vector<PermGroup> groups);

    const std::string &            id() const { return id_; }
    const std::vector<LayerSpec> & layers() const { return layers_; }
    const std::vector<PermGroup> & perm_groups() const { return groups_; }
    const std::vector<Module> &    modules() const { return modules_; }
    const LayerSpec &              head() const { return layers_.back(); }

    int64_t in_dim() const { return layers_.front().in_dim; }
    // width of the representation fed to the classifier head
    int64_t feature_dim() const { return head().in_dim; }

    // Canonical encoder tensor layout (names and shapes), head excluded.
    std::vector<std::pair<std::string, Shape>> encoder_layout() const;
    std::vector<std::pair<std::string, Shape>> head_layout(int64_t n_classes) const;

    WeightSet init_encoder(uint64_t seed) const;
    WeightSet init_head(int64_t n_classes, uint64_t seed) const;

    // Throws unless ws has exactly the encoder layout.
    void check_encoder(const WeightSet & encoder) const;
    // Returns the class count of a head WeightSet, validating its shapes.
    int64_t check_head(const WeightSet & head) const;

    nlohmann::ordered_json to_json() const;
    static Architecture    from_json(const nlohmann::json & j);

private:
    void validate();

    std::string            id_;
    std::vector<LayerSpec> layers_;
    std::vector<PermGroup> groups_;
    std::vector<Module>    modules_;
};

// MLP encoder: hidden blocks dense -> layer_norm -> relu, except the last block
// which has no relu so its captured activation is the pre-head representation.
Architecture make_mlp(int64_t in_dim, const std::vector<int64_t> & hidden, int64_t n_classes, bool layer_norm = true);

struct Model {
    WeightSet encoder;
    WeightSet head;
};

// Pre-nonlinearity output of module k given its input.
Matrix module_capture(const Architecture & arch, size_t k, const WeightSet & encoder, const Matrix & x);
void   apply_nonlinearity(const Architecture & arch, size_t k, Matrix & a);
Matrix head_logits(const WeightSet & head, const Matrix & features);

Matrix              forward(const Architecture & arch, const WeightSet & encoder, const WeightSet & head, const Matrix & x);
Matrix              encode(const Architecture & arch, const WeightSet & encoder, const Matrix & x);
std::vector<Matrix> capture_activations(const Architecture & arch, const WeightSet & encoder, const WeightSet & head,
                                        const Matrix & x);

inline constexpr float kLayerNormEps = 1e-5f;

struct LabeledBatch {
    Matrix               inputs;  // [n, in_dim]
    std::vector<int32_t> labels;  // [n]

    size_t size() const { return labels.size(); }
    LabeledBatch slice(size_t begin, size_t end) const;
    LabeledBatch select(const std::vector<size_t> & rows) const;
};

LabeledBatch concat(const std::vector<const LabeledBatch *> & parts);

struct EvalResult {
    double accuracy  = 0.0;
    double mean_loss = 0.0;
};

// Accuracy (argmax, lowest index wins ties) and mean softmax cross-entropy.
EvalResult evaluate(const Architecture & arch, const WeightSet & encoder, const WeightSet & head,
                    const LabeledBatch & data, size_t chunk = 1024);
// Same metrics from precomputed logits.
EvalResult score_logits(const Matrix & logits, const std::vector<int32_t> & labels);

} // namespace mergeforge
