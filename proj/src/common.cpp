#include "mergeforge/common.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <mutex>
#include <thread>

namespace mergeforge {

const char * errc_name(Errc code) {
    switch (code) {
        case Errc::io:                 return "io";
        case Errc::malformed_header:   return "malformed_header";
        case Errc::payload_length:     return "payload_length";
        case Errc::unsupported_dtype:  return "unsupported_dtype";
        case Errc::incompatible:       return "incompatible";
        case Errc::shape_mismatch:     return "shape_mismatch";
        case Errc::invalid_argument:   return "invalid_argument";
        case Errc::empty_input:        return "empty_input";
        case Errc::diverged:           return "diverged";
        case Errc::unknown_foundation: return "unknown_foundation";
        case Errc::config:             return "config";
    }
    return "unknown";
}

namespace {

std::mutex g_warn_mu;
WarningHandler g_warn_handler;

} // namespace

void set_warning_handler(WarningHandler handler) {
    std::lock_guard<std::mutex> lock(g_warn_mu);
    g_warn_handler = std::move(handler);
}

void warn(const std::string & message) {
    std::lock_guard<std::mutex> lock(g_warn_mu);
    if (g_warn_handler) {
        g_warn_handler(message);
    } else {
        std::cerr << "mergeforge: warning: " << message << "\n";
    }
}

uint64_t Rng::below(uint64_t n) {
    if (n == 0) {
        throw Error(Errc::invalid_argument, "Rng::below(0)");
    }
    // rejection sampling keeps the draw unbiased
    const uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
    uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u, v, s;
    do {
        u = 2.0 * uniform() - 1.0;
        v = 2.0 * uniform() - 1.0;
        s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
}

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    // splitmix64 finalizer over the pair
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

unsigned worker_threads() {
    unsigned n = std::max(1u, std::thread::hardware_concurrency());
    if (const char * env = std::getenv("MERGEFORGE_THREADS")) {
        char * end = nullptr;
        const long cap = std::strtol(env, &end, 10);
        if (end != env && cap >= 1) {
            n = std::min<unsigned>(n, static_cast<unsigned>(cap));
        }
    }
    return n;
}

namespace {
thread_local bool t_in_worker = false;
}

void parallel_for(size_t n, const std::function<void(size_t)> & fn) {
    // nested calls run inline on the calling worker
    const size_t n_threads = t_in_worker ? 1 : std::min<size_t>(worker_threads(), n);
    if (n_threads <= 1) {
        for (size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (size_t t = 0; t < n_threads; ++t) {
        pool.emplace_back([&] {
            t_in_worker = true;
            for (size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!first_error) {
                        first_error = std::current_exception();
                    }
                }
            }
        });
    }
    for (auto & th : pool) {
        th.join();
    }
    if (first_error) {
        std::rethrow_exception(first_error);
    }
}

} // namespace mergeforge
