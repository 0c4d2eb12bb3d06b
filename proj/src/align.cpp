#include "mergeforge/align.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace mergeforge {

nlohmann::ordered_json PermutationMap::to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto & [name, p] : perms) {
        j[name] = p;
    }
    return j;
}

PermutationMap PermutationMap::from_json(const nlohmann::json & j) {
    if (!j.is_object()) {
        throw Error(Errc::config, "permutation map JSON must be an object");
    }
    PermutationMap pm;
    try {
        for (const auto & [name, p] : j.items()) {
            pm.perms[name] = p.get<Permutation>();
            if (!is_permutation(pm.perms[name])) {
                throw Error(Errc::invalid_argument, "group '" + name + "' is not a bijection");
            }
        }
    } catch (const nlohmann::json::exception & e) {
        throw Error(Errc::config, std::string("bad permutation map JSON: ") + e.what());
    }
    return pm;
}

bool is_permutation(const Permutation & p) {
    std::vector<bool> seen(p.size(), false);
    for (int64_t v : p) {
        if (v < 0 || v >= static_cast<int64_t>(p.size()) || seen[static_cast<size_t>(v)]) {
            return false;
        }
        seen[static_cast<size_t>(v)] = true;
    }
    return true;
}

Permutation inverse(const Permutation & p) {
    Permutation inv(p.size());
    for (size_t i = 0; i < p.size(); ++i) {
        inv[static_cast<size_t>(p[i])] = static_cast<int64_t>(i);
    }
    return inv;
}

Permutation identity_permutation(int64_t n) {
    Permutation p(static_cast<size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    return p;
}

PermutationMap identity_map(const Architecture & arch) {
    PermutationMap pm;
    for (const auto & g : arch.perm_groups()) {
        pm.perms[g.name] = identity_permutation(g.size);
    }
    return pm;
}

PermutationMap inverse(const PermutationMap & pm) {
    PermutationMap out;
    for (const auto & [name, p] : pm.perms) {
        out.perms[name] = inverse(p);
    }
    return out;
}

bool is_identity(const PermutationMap & pm) {
    for (const auto & [name, p] : pm.perms) {
        for (size_t i = 0; i < p.size(); ++i) {
            if (p[i] != static_cast<int64_t>(i)) {
                return false;
            }
        }
    }
    return true;
}

void check_map(const PermutationMap & pm, const Architecture & arch) {
    for (const auto & g : arch.perm_groups()) {
        auto it = pm.perms.find(g.name);
        if (it == pm.perms.end()) {
            throw Error(Errc::invalid_argument, "permutation map lacks group '" + g.name + "'");
        }
        if (static_cast<int64_t>(it->second.size()) != g.size) {
            throw Error(Errc::shape_mismatch, "group '" + g.name + "' has size " + std::to_string(g.size) +
                                                  " but permutation has " + std::to_string(it->second.size()));
        }
        if (!is_permutation(it->second)) {
            throw Error(Errc::invalid_argument, "group '" + g.name + "' permutation is not a bijection");
        }
    }
    if (pm.perms.size() != arch.perm_groups().size()) {
        throw Error(Errc::invalid_argument, "permutation map names groups the architecture does not have");
    }
}

PermutationMap random_permutation_map(const Architecture & arch, uint64_t seed) {
    PermutationMap pm;
    Rng            rng(seed);
    for (const auto & g : arch.perm_groups()) {
        Permutation p = identity_permutation(g.size);
        rng.shuffle(p);
        pm.perms[g.name] = std::move(p);
    }
    return pm;
}

namespace {

void permute_axis(Tensor & t, int axis, const Permutation & p, const std::string & group) {
    if (axis < 0 || axis >= static_cast<int>(t.shape.size()) || t.shape.size() > 2) {
        throw Error(Errc::invalid_argument, "cannot permute axis " + std::to_string(axis) + " of '" + t.name + "' " +
                                                shape_str(t.shape));
    }
    if (t.shape[static_cast<size_t>(axis)] != static_cast<int64_t>(p.size())) {
        throw Error(Errc::shape_mismatch, "group '" + group + "' has size " + std::to_string(p.size()) + " but axis " +
                                              std::to_string(axis) + " of '" + t.name + "' has " +
                                              std::to_string(t.shape[static_cast<size_t>(axis)]));
    }
    const Matrix src = t.mat();
    auto         dst = t.mat();
    if (axis == 0) {
        for (size_t i = 0; i < p.size(); ++i) {
            dst.row(static_cast<Eigen::Index>(i)) = src.row(p[i]);
        }
    } else {
        for (size_t i = 0; i < p.size(); ++i) {
            dst.col(static_cast<Eigen::Index>(i)) = src.col(p[i]);
        }
    }
}

// tensor name -> [(axis, group index)]
using AxisIndex = std::map<std::string, std::vector<std::pair<int, size_t>>>;

AxisIndex index_axes(const Architecture & arch) {
    AxisIndex idx;
    const auto & groups = arch.perm_groups();
    for (size_t g = 0; g < groups.size(); ++g) {
        for (const auto & m : groups[g].members) {
            idx[m.tensor].emplace_back(m.axis, g);
        }
    }
    return idx;
}

const Permutation & perm_for(const PermutationMap & pm, const std::string & group) {
    auto it = pm.perms.find(group);
    if (it == pm.perms.end()) {
        throw Error(Errc::invalid_argument, "permutation map lacks group '" + group + "'");
    }
    return it->second;
}

// Rows indexed by `axis`, columns by the remaining axis (if any).
Eigen::MatrixXd matricize(const Tensor & t, int axis) {
    Eigen::MatrixXd m = t.mat().cast<double>();
    if (axis == 1) {
        m.transposeInPlace();
    }
    return m;
}

} // namespace

WeightSet apply_permutation(const WeightSet & ws, const Architecture & arch, const PermutationMap & pm) {
    const AxisIndex idx = index_axes(arch);
    WeightSet       out = ws;
    for (auto & t : out) {
        auto it = idx.find(t.name);
        if (it == idx.end()) {
            continue;
        }
        for (const auto & [axis, g] : it->second) {
            const auto & name = arch.perm_groups()[g].name;
            permute_axis(t, axis, perm_for(pm, name), name);
        }
    }
    return out;
}

double assignment_objective(const Eigen::MatrixXd & G, const Permutation & p) {
    double s = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        s += G(static_cast<Eigen::Index>(i), p[i]);
    }
    return s;
}

Permutation linear_sum_assignment(const Eigen::MatrixXd & G) {
    if (G.rows() != G.cols()) {
        throw Error(Errc::invalid_argument, "assignment needs a square matrix, got " + std::to_string(G.rows()) + "x" +
                                                std::to_string(G.cols()));
    }
    if (!G.allFinite()) {
        throw Error(Errc::invalid_argument, "assignment matrix has non-finite entries");
    }
    const int n = static_cast<int>(G.rows());
    if (n == 0) {
        return {};
    }
    // Shortest augmenting path Hungarian method on cost = -G (1-based).
    constexpr double    inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<int>    match(n + 1, 0), way(n + 1, 0);
    std::vector<char>   used(n + 1);
    for (int i = 1; i <= n; ++i) {
        match[0] = i;
        int j0   = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0]     = 1;
            const int i0 = match[j0];
            double    delta = inf;
            int       j1    = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) {
                    continue;
                }
                const double cur = -G(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j]  = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1    = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const int j1 = way[j0];
            match[j0]    = match[j1];
            j0           = j1;
        } while (j0 != 0);
    }
    Permutation p(static_cast<size_t>(n));
    for (int j = 1; j <= n; ++j) {
        p[static_cast<size_t>(match[j] - 1)] = j - 1;
    }
    const Permutation id = identity_permutation(n);
    if (assignment_objective(G, id) >= assignment_objective(G, p)) {
        return id;
    }
    return p;
}

WeightMatchingResult weight_matching(const WeightSet & a, const WeightSet & b, const Architecture & arch, uint64_t seed,
                                     int max_sweeps) {
    check_compatible(a, b);
    if (max_sweeps < 1) {
        throw Error(Errc::invalid_argument, "max_sweeps must be >= 1");
    }
    const auto &    groups = arch.perm_groups();
    const AxisIndex idx    = index_axes(arch);

    WeightMatchingResult res;
    res.perm             = identity_map(arch);
    res.initial_distance = weight_distance(a, b);
    res.objective_trace.push_back(res.initial_distance);

    // Precompute A's matricized views per group member.
    struct Member {
        const Tensor *  a_tensor;
        const Tensor *  b_tensor;
        int             axis;
        Eigen::MatrixXd a_mat;
    };
    std::vector<std::vector<Member>> members(groups.size());
    for (size_t g = 0; g < groups.size(); ++g) {
        for (const auto & m : groups[g].members) {
            const Tensor * ta = a.find(m.tensor);
            if (!ta) {
                continue;
            }
            members[g].push_back({ta, &b.at(m.tensor), m.axis, matricize(*ta, m.axis)});
        }
    }

    Rng    rng(seed);
    double current = res.initial_distance;
    std::vector<size_t> order(groups.size());
    std::iota(order.begin(), order.end(), 0);
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        res.sweeps = sweep + 1;
        const double before = current;
        rng.shuffle(order);
        bool changed = false;
        for (size_t g : order) {
            const int64_t   n = groups[g].size;
            Eigen::MatrixXd G = Eigen::MatrixXd::Zero(n, n);
            for (const auto & m : members[g]) {
                // b's tensor with every other group's current permutation applied
                Tensor bt = *m.b_tensor;
                for (const auto & [axis, other] : idx.at(bt.name)) {
                    if (other != g) {
                        permute_axis(bt, axis, res.perm.perms.at(groups[other].name), groups[other].name);
                    }
                }
                G.noalias() += m.a_mat * matricize(bt, m.axis).transpose();
            }
            Permutation & cur  = res.perm.perms.at(groups[g].name);
            Permutation   next = linear_sum_assignment(G);
            if (assignment_objective(G, next) > assignment_objective(G, cur)) {
                cur     = std::move(next);
                changed = true;
                current = weight_distance(a, apply_permutation(b, arch, res.perm));
            }
            res.objective_trace.push_back(current);
        }
        if (!changed || before - current <= 1e-9 * before) {
            break;
        }
    }
    res.final_distance = current;
    return res;
}

} // namespace mergeforge
