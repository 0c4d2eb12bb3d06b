#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mergeforge {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXf;

enum class Errc {
    io,
    malformed_header,
    payload_length,
    unsupported_dtype,
    incompatible,
    shape_mismatch,
    invalid_argument,
    empty_input,
    diverged,
    unknown_foundation,
    config,
};

const char * errc_name(Errc code);

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string & what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

class TrainingDiverged : public Error {
public:
    TrainingDiverged(int64_t step, const std::string & what)
        : Error(Errc::diverged, what + " (step " + std::to_string(step) + ")"), step_(step) {}

    int64_t step() const noexcept { return step_; }

private:
    int64_t step_;
};

// Non-fatal diagnostics go through a replaceable sink (stderr by default).
using WarningHandler = std::function<void(const std::string &)>;
void set_warning_handler(WarningHandler handler);
void warn(const std::string & message);

// Deterministic randomness. std::shuffle and std::*_distribution are
// implementation-defined, so everything seed-driven goes through these.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next() { return engine_(); }
    // uniform in [0, n)
    uint64_t below(uint64_t n);
    // uniform in [0, 1)
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();

    template <class T>
    void shuffle(std::vector<T> & v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

uint64_t mix_seed(uint64_t seed, uint64_t stream);

// Number of worker threads, capped by MERGEFORGE_THREADS when set.
unsigned worker_threads();

// Runs fn(i) for i in [0, n). Each index is handled exactly once; callers
// write results by index so output order never depends on scheduling.
void parallel_for(size_t n, const std::function<void(size_t)> & fn);

} // namespace mergeforge
