#pragma once

// Linearized swing dynamics of generators and loads on an admittance network,
// the broadcast AGC gain, fault domains, and seeded synthetic networks.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <queue>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "retrofit/lti.hpp"

namespace retrofit::grid {

enum class Kind { generator, load };

/// m w' + d w + b u + shunt theta + sum_j Y_ij (theta_i - theta_j) = 0.
/// Loads carry no input channel; `b` is ignored for them.
struct Appliance {
    std::string id;
    Kind kind = Kind::generator;
    double m = 1.0;
    double d = 1.0;
    double b = 1.0;
    double shunt = 0.0;  ///< admittance to the infinite bus, 0 for a floating node
};

/// Admittance edge between internal labels i and j.
struct Edge {
    Index i = 0;
    Index j = 0;
    double Y = 0.0;
};

/// Appliances are stored generators first; internal label = position.
/// `partition[l]` is the generator owning load N + l. Empty means the default
/// nearest-generator assignment.
struct Network {
    std::vector<Appliance> appliances;
    std::vector<Edge> edges;
    std::vector<Index> partition;

    Index size() const { return static_cast<Index>(appliances.size()); }

    Index generators() const {
        return static_cast<Index>(std::count_if(appliances.begin(), appliances.end(),
                                                [](const Appliance& a) { return a.kind == Kind::generator; }));
    }

    Index loads() const { return size() - generators(); }

    void validate() const {
        const Index N = generators();
        if (N < 1) throw InvalidArgument("Network: at least one generator is required");
        for (Index a = 0; a < size(); ++a) {
            const auto& app = appliances[a];
            if ((a < N) != (app.kind == Kind::generator)) {
                throw InvalidArgument("Network: generators must precede loads");
            }
            if (!(app.m > 0.0) || !std::isfinite(app.m)) {
                throw InvalidArgument("Network: appliance '" + app.id + "' needs positive inertia m");
            }
            if (!(app.d > 0.0) || !std::isfinite(app.d)) {
                throw InvalidArgument("Network: appliance '" + app.id + "' needs positive damping d");
            }
            if (!std::isfinite(app.b)) throw InvalidArgument("Network: appliance '" + app.id + "' has non-finite b");
            if (!(app.shunt >= 0.0) || !std::isfinite(app.shunt)) {
                throw InvalidArgument("Network: appliance '" + app.id + "' needs nonnegative shunt");
            }
        }
        std::set<std::pair<Index, Index>> seen;
        for (const auto& e : edges) {
            if (e.i < 0 || e.j < 0 || e.i >= size() || e.j >= size()) throw InvalidArgument("Network: edge endpoint out of range");
            if (e.i == e.j) throw InvalidArgument("Network: self-loop on '" + appliances[e.i].id + "'");
            if (!(e.Y > 0.0) || !std::isfinite(e.Y)) throw InvalidArgument("Network: admittances must be positive");
            if (!seen.insert(std::minmax(e.i, e.j)).second) {
                throw InvalidArgument("Network: duplicate edge '" + appliances[e.i].id + "'-'" + appliances[e.j].id + "'");
            }
        }
        if (!partition.empty()) {
            if (static_cast<Index>(partition.size()) != loads()) {
                throw InvalidArgument("Network: partition must assign every load");
            }
            for (Index g : partition) {
                if (g < 0 || g >= N) throw InvalidArgument("Network: partition names a non-generator");
            }
        }
    }

    std::vector<std::vector<Index>> adjacency() const {
        std::vector<std::vector<Index>> adj(appliances.size());
        for (const auto& e : edges) {
            adj[e.i].push_back(e.j);
            adj[e.j].push_back(e.i);
        }
        return adj;
    }

    bool connected() const {
        if (appliances.empty()) return true;
        const auto adj = adjacency();
        std::vector<bool> seen(appliances.size(), false);
        std::queue<Index> q;
        q.push(0);
        seen[0] = true;
        std::size_t count = 1;
        while (!q.empty()) {
            const Index a = q.front();
            q.pop();
            for (Index b : adj[a]) {
                if (!seen[b]) {
                    seen[b] = true;
                    ++count;
                    q.push(b);
                }
            }
        }
        return count == appliances.size();
    }
};

/// Nearest generator by hop distance, ties to the lower label. Loads that no
/// generator reaches go to generator 0.
inline std::vector<Index> default_partition(const Network& net) {
    const Index N = net.generators();
    const Index total = net.size();
    const auto adj = net.adjacency();
    constexpr Index unreachable = std::numeric_limits<Index>::max();
    std::vector<Index> best_dist(total - N, unreachable);
    std::vector<Index> owner(total - N, 0);
    for (Index g = 0; g < N; ++g) {
        std::vector<Index> dist(total, unreachable);
        std::queue<Index> q;
        dist[g] = 0;
        q.push(g);
        while (!q.empty()) {
            const Index a = q.front();
            q.pop();
            for (Index b : adj[a]) {
                if (dist[b] == unreachable) {
                    dist[b] = dist[a] + 1;
                    q.push(b);
                }
            }
        }
        for (Index l = 0; l < total - N; ++l) {
            if (dist[N + l] < best_dist[l]) {
                best_dist[l] = dist[N + l];
                owner[l] = g;
            }
        }
    }
    return owner;
}

/// The `count` generators closest to `alpha` by hop distance (alpha first,
/// ties to the lower label).
inline std::vector<Index> nearest_generators(const Network& net, Index alpha, Index count) {
    const Index N = net.generators();
    if (alpha < 0 || alpha >= N) throw InvalidArgument("nearest_generators: alpha is not a generator");
    if (count < 1 || count > N) throw InvalidArgument("nearest_generators: count out of range");
    const auto adj = net.adjacency();
    constexpr Index unreachable = std::numeric_limits<Index>::max();
    std::vector<Index> dist(net.size(), unreachable);
    std::queue<Index> q;
    dist[alpha] = 0;
    q.push(alpha);
    while (!q.empty()) {
        const Index a = q.front();
        q.pop();
        for (Index b : adj[a]) {
            if (dist[b] == unreachable) {
                dist[b] = dist[a] + 1;
                q.push(b);
            }
        }
    }
    std::vector<Index> gens(N);
    for (Index g = 0; g < N; ++g) gens[g] = g;
    std::stable_sort(gens.begin(), gens.end(), [&](Index a, Index b) { return dist[a] < dist[b]; });
    gens.resize(count);
    return gens;
}

/// Where each appliance's (theta, omega) lives in the assembled state.
/// Subsystem i is generator i followed by its loads in label order.
struct IndexMap {
    std::vector<Index> theta;
    std::vector<Index> omega;
    std::vector<std::vector<Index>> members;  ///< appliance labels per subsystem
    std::vector<Index> partition;             ///< owner generator per load
};

struct GridModel {
    ContinuousLTI plant;
    IndexMap index;
    bool connected = true;

    Index states() const { return plant.states(); }
    Index generators() const { return plant.inputs(); }
};

/// theta' = omega, m omega' = -d omega - b u - shunt theta - sum_j Y (theta_i - theta_j);
/// u and y = omega range over generators.
inline GridModel assemble(const Network& net) {
    net.validate();
    const Index N = net.generators();
    const Index total = net.size();
    const Index n = 2 * total;

    GridModel model;
    model.connected = net.connected();
    auto& idx = model.index;
    idx.partition = net.partition.empty() ? default_partition(net) : net.partition;
    idx.members.assign(N, {});
    for (Index g = 0; g < N; ++g) idx.members[g].push_back(g);
    for (Index l = 0; l < total - N; ++l) idx.members[idx.partition[l]].push_back(N + l);
    idx.theta.assign(total, 0);
    idx.omega.assign(total, 0);
    Index next = 0;
    for (const auto& group : idx.members) {
        for (Index a : group) {
            idx.theta[a] = next++;
            idx.omega[a] = next++;
        }
    }

    Matrix A = Matrix::Zero(n, n);
    Matrix B = Matrix::Zero(n, N);
    Matrix C = Matrix::Zero(N, n);
    for (Index a = 0; a < total; ++a) {
        const auto& app = net.appliances[a];
        const Index th = idx.theta[a];
        const Index om = idx.omega[a];
        A(th, om) = 1.0;
        A(om, om) = -app.d / app.m;
        A(om, th) = -app.shunt / app.m;
        if (a < N) {
            B(om, a) = -app.b / app.m;
            C(a, om) = 1.0;
        }
    }
    for (const auto& e : net.edges) {
        for (auto [p, q] : {std::pair{e.i, e.j}, std::pair{e.j, e.i}}) {
            const double m = net.appliances[p].m;
            A(idx.omega[p], idx.theta[p]) -= e.Y / m;
            A(idx.omega[p], idx.theta[q]) += e.Y / m;
        }
    }
    model.plant = {std::move(A), std::move(B), std::move(C)};
    return model;
}

/// kappa diag(a) 1 1^T: every generator receives the weighted sum of all
/// measured generator frequencies.
inline Matrix broadcast_agc(Index generators, double kappa, const Vector& participation) {
    if (participation.size() != generators) {
        throw InvalidArgument("broadcast_agc: participation must have one entry per generator");
    }
    const Vector ones = Vector::Ones(generators);
    return kappa * participation.asDiagonal() * ones * ones.transpose();
}

/// Basis of the local deflection domain: unit vectors on (theta_alpha, omega_alpha).
inline Matrix fault_domain(const GridModel& model, Index alpha) {
    if (alpha < 0 || alpha >= model.generators()) throw InvalidArgument("fault_domain: alpha is not a generator");
    Matrix X = Matrix::Zero(model.states(), 2);
    X(model.index.theta[alpha], 0) = 1.0;
    X(model.index.omega[alpha], 1) = 1.0;
    return X;
}

/// Initial-guess operator that keeps measured frequencies and zeroes phase angles.
inline Matrix frequency_guess_operator(const GridModel& model) {
    Matrix G = Matrix::Zero(model.states(), model.states());
    for (Index om : model.index.omega) G(om, om) = 1.0;
    return G;
}

struct RandomNetworkOptions {
    double m_min = 0.01, m_max = 1.0;
    double d_min = 0.007, d_max = 0.01;
    double b = 1.0;
    double Y_min = 0.5, Y_max = 2.0;
    double shunt_min = 0.01, shunt_max = 0.1;
    Index extra_edges = -1;  ///< beyond the spanning tree; negative means (N + M) / 4
};

/// Seeded random network: parameters uniform in the given ranges, topology a
/// random spanning tree plus extra random edges.
inline Network random_network(std::uint64_t seed, Index N, Index M, const RandomNetworkOptions& opts = {}) {
    if (N < 1 || M < 0) throw InvalidArgument("random_network: need N >= 1 and M >= 0");
    std::mt19937_64 rng(seed);
    auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    const Index total = N + M;

    Network net;
    for (Index a = 0; a < total; ++a) {
        Appliance app;
        app.kind = a < N ? Kind::generator : Kind::load;
        app.id = (a < N ? "g" + std::to_string(a + 1) : "l" + std::to_string(a - N + 1));
        app.m = uniform(opts.m_min, opts.m_max);
        app.d = uniform(opts.d_min, opts.d_max);
        app.b = app.kind == Kind::generator ? opts.b : 0.0;
        app.shunt = uniform(opts.shunt_min, opts.shunt_max);
        net.appliances.push_back(std::move(app));
    }

    std::vector<Index> order(total);
    for (Index a = 0; a < total; ++a) order[a] = a;
    std::shuffle(order.begin(), order.end(), rng);
    std::set<std::pair<Index, Index>> present;
    auto add_edge = [&](Index i, Index j) {
        if (i == j || !present.insert(std::minmax(i, j)).second) return false;
        net.edges.push_back({std::min(i, j), std::max(i, j), uniform(opts.Y_min, opts.Y_max)});
        return true;
    };
    for (Index k = 1; k < total; ++k) {
        const Index parent = std::uniform_int_distribution<Index>(0, k - 1)(rng);
        add_edge(order[k], order[parent]);
    }
    const Index max_edges = total * (total - 1) / 2;
    Index extra = opts.extra_edges < 0 ? total / 4 : opts.extra_edges;
    extra = std::min(extra, max_edges - static_cast<Index>(net.edges.size()));
    std::uniform_int_distribution<Index> pick(0, total - 1);
    while (extra > 0) {
        if (add_edge(pick(rng), pick(rng))) --extra;
    }
    return net;
}

/// Sub-network on the given generators and loads with boundary edges dropped.
/// Loads keep their owner when it is inside the area and are otherwise
/// reassigned by the default rule within the area.
struct AreaModel {
    GridModel model;
    std::vector<Index> generators;  ///< global labels of the area's generators, in area order
    std::vector<Index> loads;       ///< global labels of the area's loads, in area order
    Matrix embedding;               ///< n x n_area: area coordinates into the global state
};

inline AreaModel isolated_area_model(const Network& net, const GridModel& full, std::vector<Index> gen_subset,
                                     std::vector<Index> load_subset) {
    const Index N = net.generators();
    if (gen_subset.empty()) throw InvalidArgument("isolated_area_model: the area needs a generator");
    std::sort(gen_subset.begin(), gen_subset.end());
    std::sort(load_subset.begin(), load_subset.end());
    if (std::adjacent_find(gen_subset.begin(), gen_subset.end()) != gen_subset.end() ||
        std::adjacent_find(load_subset.begin(), load_subset.end()) != load_subset.end()) {
        throw InvalidArgument("isolated_area_model: duplicate labels");
    }
    for (Index g : gen_subset) {
        if (g < 0 || g >= N) throw InvalidArgument("isolated_area_model: generator label out of range");
    }
    for (Index l : load_subset) {
        if (l < N || l >= net.size()) throw InvalidArgument("isolated_area_model: load label out of range");
    }

    std::vector<Index> local(net.size(), -1);
    Network sub;
    for (Index g : gen_subset) {
        local[g] = static_cast<Index>(sub.appliances.size());
        sub.appliances.push_back(net.appliances[g]);
    }
    for (Index l : load_subset) {
        local[l] = static_cast<Index>(sub.appliances.size());
        sub.appliances.push_back(net.appliances[l]);
    }
    for (const auto& e : net.edges) {
        if (local[e.i] >= 0 && local[e.j] >= 0) sub.edges.push_back({local[e.i], local[e.j], e.Y});
    }
    const auto fallback = default_partition(sub);
    for (std::size_t k = 0; k < load_subset.size(); ++k) {
        const Index owner = full.index.partition[load_subset[k] - N];
        sub.partition.push_back(local[owner] >= 0 ? local[owner] : fallback[k]);
    }

    AreaModel area;
    area.model = assemble(sub);
    area.generators = gen_subset;
    area.loads = load_subset;
    area.embedding = Matrix::Zero(full.states(), area.model.states());
    for (Index a = 0; a < net.size(); ++a) {
        if (local[a] < 0) continue;
        area.embedding(full.index.theta[a], area.model.index.theta[local[a]]) = 1.0;
        area.embedding(full.index.omega[a], area.model.index.omega[local[a]]) = 1.0;
    }
    return area;
}

/// Area made of the given generators and every load they own.
inline AreaModel isolated_area_model(const Network& net, const GridModel& full, const std::vector<Index>& gen_subset) {
    std::vector<Index> loads;
    const Index N = net.generators();
    for (Index l = 0; l < net.loads(); ++l) {
        if (std::find(gen_subset.begin(), gen_subset.end(), full.index.partition[l]) != gen_subset.end()) {
            loads.push_back(N + l);
        }
    }
    return isolated_area_model(net, full, gen_subset, loads);
}

}  // namespace retrofit::grid
