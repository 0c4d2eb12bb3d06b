#include "mergeforge/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace mergeforge {

const char * merge_method_name(MergeMethod m) {
    switch (m) {
        case MergeMethod::average:         return "average";
        case MergeMethod::task_arithmetic: return "task_arithmetic";
        case MergeMethod::ties:            return "ties";
        case MergeMethod::tall_ta:         return "tall_ta";
        case MergeMethod::tall_ties:       return "tall_ties";
    }
    return "?";
}

MergeMethod parse_merge_method(const std::string & s) {
    for (auto m : {MergeMethod::average, MergeMethod::task_arithmetic, MergeMethod::ties, MergeMethod::tall_ta,
                   MergeMethod::tall_ties}) {
        if (s == merge_method_name(m)) {
            return m;
        }
    }
    throw Error(Errc::config, "unknown merge method '" + s + "'");
}

bool is_tall(MergeMethod m) {
    return m == MergeMethod::tall_ta || m == MergeMethod::tall_ties;
}

double MergeConfig::tall_lambda_for(const std::string & task_id) const {
    auto it = tall_lambda.find(task_id);
    return it == tall_lambda.end() ? tall_lambda_default : it->second;
}

void MergeConfig::validate() const {
    if (method != MergeMethod::average && !(lambda > 0.0)) {
        throw Error(Errc::config, "lambda must be > 0 for arithmetic merge methods");
    }
    if (!(ties_keep_fraction > 0.0 && ties_keep_fraction <= 1.0)) {
        throw Error(Errc::config, "ties_keep_fraction must lie in (0, 1]");
    }
    for (const auto & [id, l] : tall_lambda) {
        if (!(l >= 0.0)) {
            throw Error(Errc::config, "tall lambda for '" + id + "' must be >= 0");
        }
    }
    if (!(tall_lambda_default >= 0.0)) {
        throw Error(Errc::config, "tall lambda must be >= 0");
    }
}

nlohmann::ordered_json MergeConfig::to_json() const {
    nlohmann::ordered_json j;
    j["method"]             = merge_method_name(method);
    j["lambda"]             = lambda;
    j["ties_keep_fraction"] = ties_keep_fraction;
    j["tall_lambda"]        = nlohmann::ordered_json::object();
    for (const auto & [id, l] : tall_lambda) {
        j["tall_lambda"][id] = l;
    }
    j["tall_lambda_default"] = tall_lambda_default;
    return j;
}

MergeConfig MergeConfig::from_json(const nlohmann::json & j) {
    static const std::set<std::string> known = {"method", "lambda", "ties_keep_fraction", "tall_lambda",
                                                 "tall_lambda_default"};
    MergeConfig c;
    try {
        for (const auto & [k, v] : j.items()) {
            if (!known.count(k)) {
                throw Error(Errc::config, "unknown merge key '" + k + "'");
            }
        }
        if (j.contains("method")) c.method = parse_merge_method(j["method"].get<std::string>());
        if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
        if (j.contains("ties_keep_fraction")) c.ties_keep_fraction = j["ties_keep_fraction"].get<double>();
        if (j.contains("tall_lambda")) c.tall_lambda = j["tall_lambda"].get<std::map<std::string, double>>();
        if (j.contains("tall_lambda_default")) c.tall_lambda_default = j["tall_lambda_default"].get<double>();
    } catch (const nlohmann::json::exception & e) {
        throw Error(Errc::config, std::string("bad merge config: ") + e.what());
    }
    c.validate();
    return c;
}

double BinaryMask::density() const {
    size_t on = 0, n = 0;
    for (const auto & e : entries) {
        n += e.bits.size();
        on += static_cast<size_t>(std::count(e.bits.begin(), e.bits.end(), uint8_t{1}));
    }
    return n == 0 ? 0.0 : static_cast<double>(on) / static_cast<double>(n);
}

namespace {

// Encoder-shaped values flattened in tensor order, kept in double.
using Flat = std::vector<double>;

Flat flatten(const WeightSet & ws) {
    Flat out;
    out.reserve(static_cast<size_t>(ws.numel()));
    for (const auto & t : ws) {
        out.insert(out.end(), t.data.begin(), t.data.end());
    }
    return out;
}

// Exact value of a task vector: delta + residual.
Flat flatten(const TaskVector & tv) {
    Flat out = flatten(tv.delta);
    if (!tv.residual.empty()) {
        check_compatible(tv.delta, tv.residual);
        size_t k = 0;
        for (const auto & t : tv.residual) {
            for (float r : t.data) {
                out[k++] += r;
            }
        }
    }
    return out;
}

WeightSet unflatten(const WeightSet & like, const Flat & v) {
    WeightSet out = zeros_like(like);
    size_t    k   = 0;
    for (auto & t : out) {
        for (float & x : t.data) {
            x = static_cast<float>(v[k++]);
        }
    }
    return out;
}

// init + scale * v, rounded once.
WeightSet add_scaled(const WeightSet & init, const Flat & v, double scale) {
    WeightSet out = init;
    size_t    k   = 0;
    for (auto & t : out) {
        for (float & x : t.data) {
            x = static_cast<float>(static_cast<double>(x) + scale * v[k++]);
        }
    }
    return out;
}

void check_all(const WeightSet & like, const std::vector<TaskVector> & tvs) {
    if (tvs.empty()) {
        throw Error(Errc::empty_input, "no task vectors to merge");
    }
    for (const auto & tv : tvs) {
        check_compatible(like, tv.delta);
    }
}

Flat sum_flat(const std::vector<TaskVector> & tvs) {
    Flat sum = flatten(tvs.front());
    for (size_t t = 1; t < tvs.size(); ++t) {
        const Flat v = flatten(tvs[t]);
        for (size_t i = 0; i < sum.size(); ++i) {
            sum[i] += v[i];
        }
    }
    return sum;
}

Flat ties_flat(const std::vector<TaskVector> & tvs, double keep_fraction) {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
        throw Error(Errc::invalid_argument, "keep_fraction must lie in (0, 1]");
    }
    std::vector<Flat> trimmed;
    trimmed.reserve(tvs.size());
    for (const auto & tv : tvs) {
        Flat         v = flatten(tv);
        const size_t n = v.size();
        const size_t k = std::clamp<size_t>(static_cast<size_t>(std::llround(keep_fraction * static_cast<double>(n))),
                                            1, n);
        if (k < n) {
            // top-k by magnitude; equal magnitudes keep the lower index
            std::vector<size_t> idx(n);
            std::iota(idx.begin(), idx.end(), 0);
            auto before = [&](size_t a, size_t b) {
                const double ma = std::abs(v[a]), mb = std::abs(v[b]);
                return ma != mb ? ma > mb : a < b;
            };
            std::nth_element(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(), before);
            for (size_t j = k; j < n; ++j) {
                v[idx[j]] = 0.0;
            }
        }
        trimmed.push_back(std::move(v));
    }
    const size_t n = trimmed.front().size();
    Flat         merged(n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (const auto & v : trimmed) {
            total += v[i];
        }
        const int sign = (total > 0.0) - (total < 0.0);
        if (sign == 0) {
            continue;
        }
        double  acc   = 0.0;
        int64_t count = 0;
        for (const auto & v : trimmed) {
            if ((v[i] > 0.0 && sign > 0) || (v[i] < 0.0 && sign < 0)) {
                acc += v[i];
                ++count;
            }
        }
        merged[i] = acc / static_cast<double>(count);
    }
    return merged;
}

BinaryMask mask_from(const WeightSet & like, const Flat & tv, const Flat & merged, double lambda_t) {
    BinaryMask m;
    size_t     k = 0;
    for (const auto & t : like) {
        BinaryMask::Entry e{t.name, t.shape, std::vector<uint8_t>(t.data.size())};
        for (auto & bit : e.bits) {
            bit = std::abs(tv[k]) >= std::abs(merged[k] - tv[k]) * lambda_t ? 1 : 0;
            ++k;
        }
        m.entries.push_back(std::move(e));
    }
    return m;
}

void check_mask(const WeightSet & like, const BinaryMask & mask) {
    if (mask.entries.size() != like.size()) {
        throw Error(Errc::shape_mismatch, "mask has " + std::to_string(mask.entries.size()) + " tensors, weights have " +
                                              std::to_string(like.size()));
    }
    for (size_t i = 0; i < like.size(); ++i) {
        if (mask.entries[i].name != like[i].name || mask.entries[i].shape != like[i].shape) {
            throw Error(Errc::shape_mismatch, "mask tensor '" + mask.entries[i].name + "' does not match '" +
                                                  like[i].name + "'");
        }
    }
}

// Per element: the shared value where the mask is on, init elsewhere.
WeightSet select_masked(const WeightSet & init, const WeightSet & shared, const BinaryMask & mask) {
    check_mask(init, mask);
    WeightSet out = init;
    for (size_t i = 0; i < out.size(); ++i) {
        const auto & bits = mask.entries[i].bits;
        for (size_t j = 0; j < bits.size(); ++j) {
            if (bits[j]) {
                out[i].data[j] = shared[i].data[j];
            }
        }
    }
    return out;
}

} // namespace

WeightSet MergedBundle::encoder_for(const std::string & task_id) const {
    if (masks.empty()) {
        return shared;
    }
    auto it = masks.find(task_id);
    if (it == masks.end()) {
        throw Error(Errc::invalid_argument, "bundle has no mask for task '" + task_id + "'");
    }
    return select_masked(init, shared, it->second);
}

TaskVector task_vector(const ExpertRecord & expert, const WeightSet & init) {
    check_compatible(expert.encoder, init);
    TaskVector tv;
    tv.task_id = expert.task_id;
    tv.delta    = zeros_like(init);
    tv.residual = zeros_like(init);
    for (size_t i = 0; i < init.size(); ++i) {
        const auto & e = expert.encoder[i].data;
        const auto & b = init[i].data;
        auto &       d = tv.delta[i].data;
        auto &       r = tv.residual[i].data;
        for (size_t j = 0; j < d.size(); ++j) {
            // TwoSum(e, -b): d + r == e - b exactly
            const float nb = -b[j];
            const float s  = e[j] + nb;
            const float bb = s - e[j];
            d[j] = s;
            r[j] = (e[j] - (s - bb)) + (nb - bb);
        }
    }
    return tv;
}

WeightSet weight_average(const std::vector<const WeightSet *> & encoders) {
    if (encoders.empty()) {
        throw Error(Errc::empty_input, "weight_average needs at least one model");
    }
    for (size_t i = 1; i < encoders.size(); ++i) {
        check_compatible(*encoders[0], *encoders[i]);
    }
    Flat sum = flatten(*encoders[0]);
    for (size_t i = 1; i < encoders.size(); ++i) {
        const Flat v = flatten(*encoders[i]);
        for (size_t k = 0; k < sum.size(); ++k) {
            sum[k] += v[k];
        }
    }
    const double inv = 1.0 / static_cast<double>(encoders.size());
    for (double & x : sum) {
        x *= inv;
    }
    return unflatten(*encoders[0], sum);
}

WeightSet sum_task_vectors(const std::vector<TaskVector> & tvs) {
    check_all(tvs.front().delta, tvs);
    return unflatten(tvs.front().delta, sum_flat(tvs));
}

WeightSet task_arithmetic(const WeightSet & init, const std::vector<TaskVector> & tvs, double lambda) {
    check_all(init, tvs);
    return add_scaled(init, sum_flat(tvs), lambda);
}

WeightSet ties_vector(const std::vector<TaskVector> & tvs, double keep_fraction) {
    if (tvs.empty()) {
        throw Error(Errc::empty_input, "no task vectors to merge");
    }
    check_all(tvs.front().delta, tvs);
    return unflatten(tvs.front().delta, ties_flat(tvs, keep_fraction));
}

WeightSet ties_merge(const WeightSet & init, const std::vector<TaskVector> & tvs, double keep_fraction, double lambda) {
    check_all(init, tvs);
    return add_scaled(init, ties_flat(tvs, keep_fraction), lambda);
}

BinaryMask tall_mask(const TaskVector & tv, const WeightSet & merged_tv, double lambda_t) {
    check_compatible(tv.delta, merged_tv);
    return mask_from(tv.delta, flatten(tv), flatten(merged_tv), lambda_t);
}

WeightSet tall_reconstruct(const WeightSet & init, const WeightSet & merged_tv, const BinaryMask & mask) {
    check_compatible(init, merged_tv);
    check_mask(init, mask);
    WeightSet out = init;
    for (size_t i = 0; i < out.size(); ++i) {
        const auto & bits = mask.entries[i].bits;
        for (size_t j = 0; j < bits.size(); ++j) {
            if (bits[j]) {
                out[i].data[j] = static_cast<float>(static_cast<double>(init[i].data[j]) + merged_tv[i].data[j]);
            }
        }
    }
    return out;
}

MergedBundle local_merge(const WeightSet & init, const std::vector<ExpertRecord> & experts, const MergeConfig & cfg) {
    cfg.validate();
    if (experts.empty()) {
        throw Error(Errc::empty_input, "nothing to merge");
    }
    MergedBundle b;
    b.method = merge_method_name(cfg.method);
    b.init   = init;
    std::vector<TaskVector> tvs;
    for (const auto & e : experts) {
        if (b.heads.count(e.task_id)) {
            throw Error(Errc::invalid_argument, "duplicate expert for task '" + e.task_id + "'");
        }
        b.task_ids.push_back(e.task_id);
        b.heads[e.task_id] = e.head;
        tvs.push_back(task_vector(e, init));
    }

    Flat merged;  // tau'_MTL, before adding init
    switch (cfg.method) {
        case MergeMethod::average: {
            std::vector<const WeightSet *> encs;
            for (const auto & e : experts) {
                encs.push_back(&e.encoder);
            }
            b.shared = weight_average(encs);
            return b;
        }
        case MergeMethod::task_arithmetic:
        case MergeMethod::tall_ta:
            merged = sum_flat(tvs);
            for (double & x : merged) {
                x *= cfg.lambda;
            }
            break;
        case MergeMethod::ties:
        case MergeMethod::tall_ties:
            merged = ties_flat(tvs, cfg.ties_keep_fraction);
            for (double & x : merged) {
                x *= cfg.lambda;
            }
            break;
    }
    b.shared = add_scaled(init, merged, 1.0);
    if (is_tall(cfg.method)) {
        for (const auto & tv : tvs) {
            b.masks[tv.task_id] = mask_from(init, flatten(tv), merged, cfg.tall_lambda_for(tv.task_id));
        }
    }
    return b;
}

NonlocalMergeResult nonlocal_merge(const Foundation & f0, const Foundation & f1, const std::vector<ExpertRecord> & experts,
                                   const Architecture & arch, const MergeConfig & cfg, uint64_t seed, int max_sweeps) {
    if (f0.id == f1.id) {
        throw Error(Errc::invalid_argument, "the two foundations need distinct ids");
    }
    size_t from0 = 0, from1 = 0;
    for (const auto & e : experts) {
        if (e.foundation_id == f0.id) {
            ++from0;
        } else if (e.foundation_id == f1.id) {
            ++from1;
        } else {
            throw Error(Errc::unknown_foundation, "expert '" + e.task_id + "' comes from unknown foundation '" +
                                                      e.foundation_id + "'");
        }
    }
    if (from0 != from1) {
        warn("uneven expert split across foundations (" + std::to_string(from0) + " vs " + std::to_string(from1) + ")");
    }

    NonlocalMergeResult res;
    res.alignment = weight_matching(f0.encoder, f1.encoder, arch, seed, max_sweeps);
    res.perm      = res.alignment.perm;
    const WeightSet f1_aligned = apply_permutation(f1.encoder, arch, res.perm);
    const WeightSet init       = weight_average({&f0.encoder, &f1_aligned});

    for (const auto & e : experts) {
        if (e.foundation_id == f1.id) {
            res.localized.push_back({apply_permutation(e.encoder, arch, res.perm), apply_permutation(e.head, arch, res.perm),
                                     e.task_id, e.foundation_id});
        } else {
            res.localized.push_back(e);
        }
    }
    res.bundle = local_merge(init, res.localized, cfg);
    return res;
}

// --- mask files ---------------------------------------------------------------

std::vector<uint8_t> encode_mask(const BinaryMask & mask) {
    Container c;
    for (const auto & e : mask.entries) {
        ContainerEntry ce;
        ce.name  = e.name;
        ce.dtype = "b1";
        ce.shape = e.shape;
        ce.bytes.assign((e.bits.size() + 7) / 8, 0);
        for (size_t i = 0; i < e.bits.size(); ++i) {
            if (e.bits[i]) {
                ce.bytes[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
            }
        }
        c.entries.push_back(std::move(ce));
    }
    return encode_container(kMaskMagic, c);
}

BinaryMask decode_mask(const std::vector<uint8_t> & bytes, const std::string & origin) {
    Container c = decode_container(kMaskMagic, bytes, origin, [&](const ContainerEntry & e) -> int64_t {
        if (e.dtype != "b1") {
            throw Error(Errc::unsupported_dtype, origin + ": mask tensor '" + e.name + "' has dtype '" + e.dtype + "'");
        }
        return (shape_numel(e.shape) + 7) / 8;
    });
    BinaryMask m;
    for (const auto & ce : c.entries) {
        BinaryMask::Entry e{ce.name, ce.shape, std::vector<uint8_t>(static_cast<size_t>(shape_numel(ce.shape)))};
        for (size_t i = 0; i < e.bits.size(); ++i) {
            e.bits[i] = (ce.bytes[i / 8] >> (i % 8)) & 1u;
        }
        m.entries.push_back(std::move(e));
    }
    return m;
}

void save_mask(const BinaryMask & mask, const std::filesystem::path & path) {
    write_file(path, encode_mask(mask));
}

BinaryMask load_mask(const std::filesystem::path & path) {
    return decode_mask(read_file(path), path.string());
}

} // namespace mergeforge
