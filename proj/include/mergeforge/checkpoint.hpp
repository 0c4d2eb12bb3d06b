#pragma once

#include "mergeforge/common.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mergeforge {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape & shape);
std::string shape_str(const Shape & shape);

// Dense row-major f32 tensor.
struct Tensor {
    std::string        name;
    Shape              shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::string name, Shape shape);
    Tensor(std::string name, Shape shape, std::vector<float> data);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : numel() / shape[0]; }

    // Row-major 2-D view (vectors view as [n, 1]).
    Eigen::Map<Matrix>       mat() { return {data.data(), rows(), cols()}; }
    Eigen::Map<const Matrix> mat() const { return {data.data(), rows(), cols()}; }
    Eigen::Map<Vector>       vec() { return {data.data(), numel()}; }
    Eigen::Map<const Vector> vec() const { return {data.data(), numel()}; }
};

// Ordered, named collection of tensors making up (part of) one model.
class WeightSet {
public:
    WeightSet() = default;
    explicit WeightSet(std::string arch_id) : arch_id_(std::move(arch_id)) {}

    const std::string & arch_id() const { return arch_id_; }
    void set_arch_id(std::string id) { arch_id_ = std::move(id); }

    void add(Tensor t);
    bool contains(std::string_view name) const;
    const Tensor * find(std::string_view name) const;
    Tensor *       find(std::string_view name);
    const Tensor & at(std::string_view name) const;
    Tensor &       at(std::string_view name);

    size_t size() const { return tensors_.size(); }
    bool   empty() const { return tensors_.empty(); }
    int64_t numel() const;

    auto begin() { return tensors_.begin(); }
    auto end() { return tensors_.end(); }
    auto begin() const { return tensors_.begin(); }
    auto end() const { return tensors_.end(); }
    const Tensor & operator[](size_t i) const { return tensors_[i]; }
    Tensor &       operator[](size_t i) { return tensors_[i]; }

    // Exact equality of names, shapes, values (bitwise) and arch_id.
    bool identical(const WeightSet & other) const;

private:
    std::string                             arch_id_;
    std::vector<Tensor>                     tensors_;
    std::unordered_map<std::string, size_t> index_;
};

// Same tensor names (in order) and shapes. Throws Errc::incompatible naming the
// first mismatched tensor; an arch_id mismatch only warns.
void check_compatible(const WeightSet & a, const WeightSet & b);
bool compatible(const WeightSet & a, const WeightSet & b);

WeightSet zeros_like(const WeightSet & ws);
WeightSet axpy(const WeightSet & ws, const WeightSet & other, double a);
WeightSet lerp(const WeightSet & a, const WeightSet & b, double alpha);
WeightSet scaled(const WeightSet & ws, double s);
double    weight_norm(const WeightSet & ws);
double    weight_distance(const WeightSet & a, const WeightSet & b);

// --- container format -------------------------------------------------------
//
//   magic[8] | u64 header_len | header JSON (UTF-8) | payload
//
// Header: {"arch_id": ..., "tensors": [{name, dtype, shape, offset, nbytes}]}
// plus any caller-supplied "meta". Offsets are relative to the payload start,
// 8-byte aligned, zero-padded in between. Everything little-endian.

inline constexpr std::string_view kWeightsMagic = "MFWT0001";

struct ContainerEntry {
    std::string          name;
    std::string          dtype;
    Shape                shape;
    std::vector<uint8_t> bytes;
};

struct Container {
    std::string                 arch_id;
    nlohmann::ordered_json      meta;  // null when absent
    std::vector<ContainerEntry> entries;
};

std::vector<uint8_t> encode_container(std::string_view magic, const Container & c);
Container decode_container(std::string_view magic, const std::vector<uint8_t> & bytes,
                           const std::string & origin,
                           const std::function<int64_t(const ContainerEntry &)> & expected_nbytes);

std::vector<uint8_t> read_file(const std::filesystem::path & path);
void write_file(const std::filesystem::path & path, const std::vector<uint8_t> & bytes);

std::vector<uint8_t> encode_weights(const WeightSet & ws);
WeightSet decode_weights(const std::vector<uint8_t> & bytes, const std::string & origin = "<memory>");

void      save_weights(const WeightSet & ws, const std::filesystem::path & path);
WeightSet load_weights(const std::filesystem::path & path);

} // namespace mergeforge
