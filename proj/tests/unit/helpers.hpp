#pragma once

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/network.hpp"

#include <doctest.h>

#include <bit>
#include <filesystem>
#include <string>

namespace testutil {

using namespace mergeforge;

inline WeightSet ws_of(std::initializer_list<std::pair<std::string, std::vector<float>>> tensors,
                       const std::string & arch = "test") {
    WeightSet ws(arch);
    for (const auto & [name, v] : tensors) {
        ws.add(Tensor(name, {static_cast<int64_t>(v.size())}, v));
    }
    return ws;
}

inline WeightSet random_like(const WeightSet & like, uint64_t seed, double scale = 1.0) {
    WeightSet out = like;
    Rng       rng(seed);
    for (auto & t : out) {
        for (float & v : t.data) {
            v = static_cast<float>(scale * rng.normal());
        }
    }
    return out;
}

inline Matrix random_matrix(int64_t rows, int64_t cols, uint64_t seed, double scale = 1.0) {
    Matrix m(rows, cols);
    Rng    rng(seed);
    for (int64_t i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<float>(scale * rng.normal());
    }
    return m;
}

inline bool bit_equal(float a, float b) {
    return std::bit_cast<uint32_t>(a) == std::bit_cast<uint32_t>(b);
}

inline std::filesystem::path temp_dir(const std::string & name) {
    const std::filesystem::path p = std::filesystem::path(MERGEFORGE_TEST_TMP) / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

template <class F>
Errc error_code_of(F && f) {
    try {
        f();
    } catch (const Error & e) {
        return e.code();
    }
    FAIL("expected a mergeforge::Error");
    return Errc::io;
}

} // namespace testutil
