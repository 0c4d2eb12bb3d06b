#pragma once

#include "mergeforge/network.hpp"

#include <map>

namespace mergeforge {

using Permutation = std::vector<int64_t>;

// One permutation per permutation group. perms[g][i] is the source index that
// lands at position i along every axis coupled to group g.
struct PermutationMap {
    std::map<std::string, Permutation> perms;

    bool operator==(const PermutationMap &) const = default;

    nlohmann::ordered_json to_json() const;
    static PermutationMap  from_json(const nlohmann::json & j);
};

bool        is_permutation(const Permutation & p);
Permutation inverse(const Permutation & p);
Permutation identity_permutation(int64_t n);

PermutationMap identity_map(const Architecture & arch);
PermutationMap inverse(const PermutationMap & pm);
bool           is_identity(const PermutationMap & pm);
// Throws unless pm has one valid bijection of the right size per group.
void           check_map(const PermutationMap & pm, const Architecture & arch);

// Uniform random bijection per group, seed-deterministic.
PermutationMap random_permutation_map(const Architecture & arch, uint64_t seed);

// Reorders every coupled (tensor, axis) present in ws. Tensors of ws that are
// not coupled to any group, and coupled tensors absent from ws, are untouched,
// so the same call permutes an encoder or a classifier head.
WeightSet apply_permutation(const WeightSet & ws, const Architecture & arch, const PermutationMap & pm);

// Exact maximum-weight perfect matching on a square matrix: returns p
// maximizing sum_i G(i, p[i]) (= Trace(G P^T)). When the identity attains the
// optimum it is returned.
Permutation linear_sum_assignment(const Eigen::MatrixXd & G);
double      assignment_objective(const Eigen::MatrixXd & G, const Permutation & p);

struct WeightMatchingResult {
    PermutationMap      perm;
    // Global l2 distance between a and the permuted b: initial value, then
    // the value after every group update.
    std::vector<double> objective_trace;
    int                 sweeps = 0;
    double              initial_distance = 0.0;
    double              final_distance   = 0.0;
};

// Coordinate descent over groups (seed-shuffled order each sweep), solving an
// exact assignment per group. Returns the map that aligns b to a, i.e.
// apply_permutation(b, arch, result.perm) is close to a. Stops after a sweep
// whose relative improvement is below 1e-9, or after max_sweeps.
WeightMatchingResult weight_matching(const WeightSet & a, const WeightSet & b, const Architecture & arch, uint64_t seed,
                                     int max_sweeps = 100);

} // namespace mergeforge
