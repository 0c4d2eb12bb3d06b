#pragma once

#include "mergeforge/align.hpp"
#include "mergeforge/train.hpp"

#include <filesystem>
#include <map>
#include <optional>

namespace mergeforge {

// delta holds the rounded difference; residual (empty = zero) holds the
// rounding error, so init + delta + residual equals the expert exactly.
struct TaskVector {
    WeightSet   delta;
    WeightSet   residual;
    std::string task_id;
};

enum class MergeMethod { average, task_arithmetic, ties, tall_ta, tall_ties };

const char * merge_method_name(MergeMethod m);
MergeMethod  parse_merge_method(const std::string & s);
bool         is_tall(MergeMethod m);

struct MergeConfig {
    MergeMethod                   method             = MergeMethod::task_arithmetic;
    double                        lambda             = 1.0;
    double                        ties_keep_fraction = 0.2;
    std::map<std::string, double> tall_lambda;  // task_id -> lambda_t
    double                        tall_lambda_default = 0.4;

    double tall_lambda_for(const std::string & task_id) const;
    void   validate() const;

    nlohmann::ordered_json to_json() const;
    static MergeConfig     from_json(const nlohmann::json & j);
};

// Per-tensor {0,1} indicator stored one byte per element.
struct BinaryMask {
    struct Entry {
        std::string          name;
        Shape                shape;
        std::vector<uint8_t> bits;

        bool operator==(const Entry &) const = default;
    };
    std::vector<Entry> entries;

    double density() const;
    bool   operator==(const BinaryMask &) const = default;
};

struct MergedBundle {
    std::string                       method;
    WeightSet                         shared;  // init + merged task vector (or plain average)
    WeightSet                         init;
    std::vector<std::string>          task_ids;
    std::map<std::string, BinaryMask> masks;   // TALL methods only
    std::map<std::string, WeightSet>  heads;   // task_id -> classifier head (never merged)

    // Encoder evaluated for task_id: the TALL reconstruction when masks exist,
    // otherwise the shared weights.
    WeightSet encoder_for(const std::string & task_id) const;
};

TaskVector task_vector(const ExpertRecord & expert, const WeightSet & init);
WeightSet  weight_average(const std::vector<const WeightSet *> & encoders);
WeightSet  sum_task_vectors(const std::vector<TaskVector> & tvs);
WeightSet  task_arithmetic(const WeightSet & init, const std::vector<TaskVector> & tvs, double lambda);
// Trimmed, sign-elected, disjoint mean of task vectors (no lambda, no init).
WeightSet  ties_vector(const std::vector<TaskVector> & tvs, double keep_fraction);
WeightSet  ties_merge(const WeightSet & init, const std::vector<TaskVector> & tvs, double keep_fraction, double lambda);
BinaryMask tall_mask(const TaskVector & tv, const WeightSet & merged_tv, double lambda_t);
WeightSet  tall_reconstruct(const WeightSet & init, const WeightSet & merged_tv, const BinaryMask & mask);

// Standard merging around one initialization.
MergedBundle local_merge(const WeightSet & init, const std::vector<ExpertRecord> & experts, const MergeConfig & cfg);

struct Foundation {
    std::string id;
    WeightSet   encoder;
};

struct NonlocalMergeResult {
    MergedBundle              bundle;
    PermutationMap            perm;       // aligns foundations[1] to foundations[0]
    std::vector<ExpertRecord> localized;  // experts after permutation, heads included
    WeightMatchingResult      alignment;
};

// Align foundation 1 to foundation 0, average them as the merge
// initialization, permute experts (and their heads) fine-tuned from
// foundation 1, then merge locally.
NonlocalMergeResult nonlocal_merge(const Foundation & f0, const Foundation & f1, const std::vector<ExpertRecord> & experts,
                                   const Architecture & arch, const MergeConfig & cfg, uint64_t seed,
                                   int max_sweeps = 100);

// Mask files: same container layout as weight files with magic "MFMK0001"
// and dtype "b1" (bit-packed, LSB first, 1 bit per weight).
inline constexpr std::string_view kMaskMagic = "MFMK0001";

std::vector<uint8_t> encode_mask(const BinaryMask & mask);
BinaryMask           decode_mask(const std::vector<uint8_t> & bytes, const std::string & origin = "<memory>");
void                 save_mask(const BinaryMask & mask, const std::filesystem::path & path);
BinaryMask           load_mask(const std::filesystem::path & path);

} // namespace mergeforge
