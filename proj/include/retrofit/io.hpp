#pragma once

// File formats: YAML network descriptions and experiment configs, JSON design
// bundles, certificate text, and CSV tables.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "retrofit/controller.hpp"
#include "retrofit/powergrid.hpp"

namespace retrofit::io {

/// Schema or syntax problem in an input file, with file and line when known.
class ConfigError : public InvalidArgument {
public:
    using InvalidArgument::InvalidArgument;
};

namespace detail {

inline std::string where(const std::string& file, const YAML::Node& node) {
    const auto mark = node.Mark();
    if (mark.is_null()) return file;
    return file + ":" + std::to_string(mark.line + 1);
}

[[noreturn]] inline void fail(const std::string& file, const YAML::Node& node, const std::string& msg) {
    throw ConfigError(where(file, node) + ": " + msg);
}

inline void require_map(const std::string& file, const YAML::Node& node, const std::string& what) {
    if (!node.IsMap()) fail(file, node, what + " must be a mapping");
}

inline void allowed_keys(const std::string& file, const YAML::Node& node, const std::set<std::string>& keys) {
    for (const auto& kv : node) {
        const auto key = kv.first.as<std::string>();
        if (!keys.count(key)) fail(file, kv.first, "unknown key '" + key + "'");
    }
}

template <class T>
T scalar(const std::string& file, const YAML::Node& node, const std::string& what) {
    if (!node.IsScalar()) fail(file, node, what + " must be a scalar");
    try {
        return node.as<T>();
    } catch (const YAML::Exception&) {
        fail(file, node, what + " has an invalid value '" + node.Scalar() + "'");
    }
}

template <class T>
T scalar_or(const std::string& file, const YAML::Node& parent, const std::string& key, T fallback) {
    const auto node = parent[key];
    if (!node) return fallback;
    return scalar<T>(file, node, key);
}

inline std::pair<double, double> range_or(const std::string& file, const YAML::Node& parent, const std::string& key,
                                          std::pair<double, double> fallback) {
    const auto node = parent[key];
    if (!node) return fallback;
    if (!node.IsSequence() || node.size() != 2) fail(file, node, key + " must be a [min, max] pair");
    const double lo = scalar<double>(file, node[0], key);
    const double hi = scalar<double>(file, node[1], key);
    if (!(lo <= hi)) fail(file, node, key + " must satisfy min <= max");
    return {lo, hi};
}

inline YAML::Node load_yaml(const std::string& path) {
    if (!std::filesystem::exists(path)) throw ConfigError(path + ": file not found");
    try {
        return YAML::LoadFile(path);
    } catch (const YAML::ParserException& e) {
        throw ConfigError(path + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
    } catch (const YAML::Exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Network files
// ---------------------------------------------------------------------------

/// appliances: [{id, kind, m, d, b, shunt}], edges: [{i, j, Y}], partition: {load: generator}.
/// Generators are relabeled first in file order, then loads in file order.
inline grid::Network parse_network(const YAML::Node& root, const std::string& file = "<network>") {
    using namespace detail;
    require_map(file, root, "network document");
    allowed_keys(file, root, {"appliances", "edges", "partition"});
    const auto apps = root["appliances"];
    if (!apps || !apps.IsSequence() || apps.size() == 0) fail(file, root, "'appliances' must be a nonempty list");

    std::vector<std::pair<grid::Appliance, YAML::Node>> gens, loads;
    std::set<std::string> ids;
    for (const auto& node : apps) {
        require_map(file, node, "appliance");
        allowed_keys(file, node, {"id", "kind", "m", "d", "b", "shunt"});
        grid::Appliance a;
        if (!node["id"]) fail(file, node, "appliance needs an 'id'");
        a.id = scalar<std::string>(file, node["id"], "id");
        if (!ids.insert(a.id).second) fail(file, node["id"], "duplicate appliance id '" + a.id + "'");
        if (!node["kind"]) fail(file, node, "appliance '" + a.id + "' needs a 'kind'");
        const auto kind = scalar<std::string>(file, node["kind"], "kind");
        if (kind == "generator") a.kind = grid::Kind::generator;
        else if (kind == "load") a.kind = grid::Kind::load;
        else fail(file, node["kind"], "kind must be 'generator' or 'load'");
        for (const char* key : {"m", "d"}) {
            if (!node[key]) fail(file, node, "appliance '" + a.id + "' needs '" + key + "'");
        }
        a.m = scalar<double>(file, node["m"], "m");
        a.d = scalar<double>(file, node["d"], "d");
        if (!(a.m > 0.0)) fail(file, node["m"], "m must be positive");
        if (!(a.d > 0.0)) fail(file, node["d"], "d must be positive");
        a.b = scalar_or<double>(file, node, "b", a.kind == grid::Kind::generator ? 1.0 : 0.0);
        if (a.kind == grid::Kind::load && node["b"]) fail(file, node["b"], "loads have no input gain");
        a.shunt = scalar_or<double>(file, node, "shunt", 0.0);
        if (!(a.shunt >= 0.0)) fail(file, node["shunt"], "shunt must be nonnegative");
        (a.kind == grid::Kind::generator ? gens : loads).emplace_back(std::move(a), node);
    }
    if (gens.empty()) fail(file, apps, "at least one generator is required");

    grid::Network net;
    std::map<std::string, Index> label;
    for (auto* group : {&gens, &loads}) {
        for (auto& [a, node] : *group) {
            label[a.id] = net.size();
            net.appliances.push_back(a);
        }
    }
    auto lookup = [&](const YAML::Node& node, const std::string& what) {
        const auto id = scalar<std::string>(file, node, what);
        const auto it = label.find(id);
        if (it == label.end()) fail(file, node, "unknown appliance id '" + id + "'");
        return it->second;
    };

    if (const auto edges = root["edges"]) {
        if (!edges.IsSequence()) fail(file, edges, "'edges' must be a list");
        std::set<std::pair<Index, Index>> seen;
        for (const auto& node : edges) {
            require_map(file, node, "edge");
            allowed_keys(file, node, {"i", "j", "Y"});
            for (const char* key : {"i", "j", "Y"}) {
                if (!node[key]) fail(file, node, std::string("edge needs '") + key + "'");
            }
            grid::Edge e{lookup(node["i"], "i"), lookup(node["j"], "j"), scalar<double>(file, node["Y"], "Y")};
            if (e.i == e.j) fail(file, node, "self-loop edge");
            if (!(e.Y > 0.0)) fail(file, node["Y"], "Y must be positive");
            if (!seen.insert(std::minmax(e.i, e.j)).second) fail(file, node, "duplicate edge");
            net.edges.push_back(e);
        }
    }

    if (const auto part = root["partition"]) {
        if (!part.IsMap()) fail(file, part, "'partition' must map load ids to generator ids");
        const Index N = net.generators();
        net.partition.assign(net.loads(), -1);
        for (const auto& kv : part) {
            const Index l = lookup(kv.first, "partition key");
            const Index g = lookup(kv.second, "partition value");
            if (l < N) fail(file, kv.first, "partition keys must be loads");
            if (g >= N) fail(file, kv.second, "partition values must be generators");
            net.partition[l - N] = g;
        }
        const auto fallback = grid::default_partition(net);
        for (Index l = 0; l < net.loads(); ++l) {
            if (net.partition[l] < 0) net.partition[l] = fallback[l];
        }
    }
    net.validate();
    return net;
}

inline grid::Network load_network(const std::string& path) {
    return parse_network(detail::load_yaml(path), path);
}

inline std::string emit_network(const grid::Network& net) {
    YAML::Emitter out;
    out.SetDoublePrecision(17);
    out << YAML::BeginMap << YAML::Key << "appliances" << YAML::Value << YAML::BeginSeq;
    for (const auto& a : net.appliances) {
        out << YAML::Flow << YAML::BeginMap;
        out << YAML::Key << "id" << YAML::Value << a.id;
        out << YAML::Key << "kind" << YAML::Value << (a.kind == grid::Kind::generator ? "generator" : "load");
        out << YAML::Key << "m" << YAML::Value << a.m;
        out << YAML::Key << "d" << YAML::Value << a.d;
        if (a.kind == grid::Kind::generator) out << YAML::Key << "b" << YAML::Value << a.b;
        out << YAML::Key << "shunt" << YAML::Value << a.shunt;
        out << YAML::EndMap;
    }
    out << YAML::EndSeq << YAML::Key << "edges" << YAML::Value << YAML::BeginSeq;
    for (const auto& e : net.edges) {
        out << YAML::Flow << YAML::BeginMap << YAML::Key << "i" << YAML::Value << net.appliances[e.i].id << YAML::Key
            << "j" << YAML::Value << net.appliances[e.j].id << YAML::Key << "Y" << YAML::Value << e.Y << YAML::EndMap;
    }
    out << YAML::EndSeq;
    if (!net.partition.empty()) {
        out << YAML::Key << "partition" << YAML::Value << YAML::BeginMap;
        const Index N = net.generators();
        for (Index l = 0; l < net.loads(); ++l) {
            out << YAML::Key << net.appliances[N + l].id << YAML::Value << net.appliances[net.partition[l]].id;
        }
        out << YAML::EndMap;
    }
    out << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

// ---------------------------------------------------------------------------
// Experiment configs
// ---------------------------------------------------------------------------

enum class GuessRule { zero, frequency, exact };

struct RandomSpec {
    std::uint64_t seed = 1;
    Index generators = 10;
    Index loads = 12;
    grid::RandomNetworkOptions options;
};

struct ExperimentConfig {
    std::string source;  ///< path of the config file
    std::optional<std::string> network_file;
    std::optional<RandomSpec> random;
    double dt = 1.0;
    double kappa = 0.01;
    std::vector<double> participation;  ///< empty means uniform
    std::string fault_generator;        ///< appliance id; empty means the first generator
    double delta_theta = 1.0;
    double delta_omega = 1.0;
    GuessRule guess = GuessRule::frequency;
    std::vector<std::string> ports;  ///< generator ids; empty means the fault generator
    int nu = 1;
    int tau = 1;
    std::optional<Index> rank;      ///< fixed projection rank; otherwise escalate from (nu, tau)
    std::optional<Index> max_rank;  ///< escalation budget; default the state dimension
    int max_tau = 0;                ///< 0 means the state dimension
    double state_weight = 1.0;
    double input_weight = 1.0;
    std::size_t steps = 0;
    std::size_t max_steps = 100000;
    std::vector<Index> rank_grid;
    std::uint64_t seed = 1;  ///< seeds verification sampling
    std::string output = "out";
};

inline ExperimentConfig parse_config(const YAML::Node& root, const std::string& file = "<config>") {
    using namespace detail;
    require_map(file, root, "config document");
    allowed_keys(file, root,
                 {"network", "dt", "kappa", "participation", "scenario", "ports", "design", "simulation", "sweep",
                  "seed", "output"});
    ExperimentConfig c;
    c.source = file;

    const auto net = root["network"];
    if (!net) fail(file, root, "'network' is required");
    require_map(file, net, "'network'");
    allowed_keys(file, net, {"file", "random"});
    if (net["file"] && net["random"]) fail(file, net, "'network' takes either 'file' or 'random', not both");
    if (net["file"]) {
        auto path = scalar<std::string>(file, net["file"], "file");
        std::filesystem::path p(path);
        if (p.is_relative()) p = std::filesystem::path(file).parent_path() / p;
        c.network_file = p.lexically_normal().string();
    } else if (const auto r = net["random"]) {
        require_map(file, r, "'random'");
        allowed_keys(file, r, {"seed", "generators", "loads", "extra_edges", "m", "d", "b", "Y", "shunt"});
        RandomSpec s;
        s.seed = scalar_or<std::uint64_t>(file, r, "seed", s.seed);
        s.generators = scalar_or<Index>(file, r, "generators", s.generators);
        s.loads = scalar_or<Index>(file, r, "loads", s.loads);
        if (s.generators < 1) fail(file, r["generators"], "generators must be at least 1");
        if (s.loads < 0) fail(file, r["loads"], "loads must be nonnegative");
        auto& o = s.options;
        o.extra_edges = scalar_or<Index>(file, r, "extra_edges", o.extra_edges);
        std::tie(o.m_min, o.m_max) = range_or(file, r, "m", {o.m_min, o.m_max});
        std::tie(o.d_min, o.d_max) = range_or(file, r, "d", {o.d_min, o.d_max});
        std::tie(o.Y_min, o.Y_max) = range_or(file, r, "Y", {o.Y_min, o.Y_max});
        std::tie(o.shunt_min, o.shunt_max) = range_or(file, r, "shunt", {o.shunt_min, o.shunt_max});
        o.b = scalar_or<double>(file, r, "b", o.b);
        if (!(o.m_min > 0.0)) fail(file, r["m"], "m range must be positive");
        if (!(o.d_min > 0.0)) fail(file, r["d"], "d range must be positive");
        if (!(o.Y_min > 0.0)) fail(file, r["Y"], "Y range must be positive");
        if (!(o.shunt_min >= 0.0)) fail(file, r["shunt"], "shunt range must be nonnegative");
        c.random = s;
    } else {
        fail(file, net, "'network' needs 'file' or 'random'");
    }

    c.dt = scalar_or<double>(file, root, "dt", c.dt);
    if (!(c.dt > 0.0)) fail(file, root["dt"], "dt must be positive");
    c.kappa = scalar_or<double>(file, root, "kappa", c.kappa);
    if (const auto p = root["participation"]) {
        if (!p.IsSequence()) fail(file, p, "'participation' must be a list");
        for (const auto& v : p) c.participation.push_back(scalar<double>(file, v, "participation"));
    }

    if (const auto s = root["scenario"]) {
        require_map(file, s, "'scenario'");
        allowed_keys(file, s, {"fault_generator", "delta0", "guess"});
        c.fault_generator = scalar_or<std::string>(file, s, "fault_generator", "");
        if (const auto d = s["delta0"]) {
            if (!d.IsSequence() || d.size() != 2) fail(file, d, "delta0 must be [theta, omega]");
            c.delta_theta = scalar<double>(file, d[0], "delta0");
            c.delta_omega = scalar<double>(file, d[1], "delta0");
        }
        if (s["guess"]) {
            const auto g = scalar<std::string>(file, s["guess"], "guess");
            if (g == "zero") c.guess = GuessRule::zero;
            else if (g == "frequency") c.guess = GuessRule::frequency;
            else if (g == "exact") c.guess = GuessRule::exact;
            else fail(file, s["guess"], "guess must be 'zero', 'frequency' or 'exact'");
        }
    }

    if (const auto p = root["ports"]) {
        if (!p.IsSequence()) fail(file, p, "'ports' must be a list of generator ids");
        for (const auto& v : p) c.ports.push_back(scalar<std::string>(file, v, "port"));
    }

    if (const auto d = root["design"]) {
        require_map(file, d, "'design'");
        allowed_keys(file, d, {"nu", "tau", "rank", "max_rank", "max_tau", "state_weight", "input_weight"});
        c.nu = scalar_or<int>(file, d, "nu", c.nu);
        c.tau = scalar_or<int>(file, d, "tau", c.tau);
        if (c.nu < 1) fail(file, d["nu"], "nu must be at least 1");
        if (c.tau < 1) fail(file, d["tau"], "tau must be at least 1");
        if (d["rank"]) {
            c.rank = scalar<Index>(file, d["rank"], "rank");
            if (*c.rank < 1) fail(file, d["rank"], "rank must be positive");
        }
        if (d["max_rank"]) {
            c.max_rank = scalar<Index>(file, d["max_rank"], "max_rank");
            if (*c.max_rank < 1) fail(file, d["max_rank"], "max_rank must be positive");
        }
        c.max_tau = scalar_or<int>(file, d, "max_tau", c.max_tau);
        if (c.max_tau < 0) fail(file, d["max_tau"], "max_tau must be nonnegative");
        c.state_weight = scalar_or<double>(file, d, "state_weight", c.state_weight);
        c.input_weight = scalar_or<double>(file, d, "input_weight", c.input_weight);
        if (!(c.state_weight >= 0.0)) fail(file, d["state_weight"], "state_weight must be nonnegative");
        if (!(c.input_weight > 0.0)) fail(file, d["input_weight"], "input_weight must be positive");
    }

    if (const auto s = root["simulation"]) {
        require_map(file, s, "'simulation'");
        allowed_keys(file, s, {"steps", "max_steps"});
        c.steps = scalar_or<std::size_t>(file, s, "steps", c.steps);
        c.max_steps = scalar_or<std::size_t>(file, s, "max_steps", c.max_steps);
        if (c.max_steps < 1) fail(file, s["max_steps"], "max_steps must be positive");
    }

    if (const auto s = root["sweep"]) {
        require_map(file, s, "'sweep'");
        allowed_keys(file, s, {"ranks"});
        if (const auto r = s["ranks"]) {
            if (!r.IsSequence()) fail(file, r, "'ranks' must be a list");
            for (const auto& v : r) c.rank_grid.push_back(scalar<Index>(file, v, "rank"));
        }
    }

    c.seed = scalar_or<std::uint64_t>(file, root, "seed", c.seed);
    if (root["output"]) {
        std::filesystem::path p(scalar<std::string>(file, root["output"], "output"));
        if (p.is_relative()) p = std::filesystem::path(file).parent_path() / p;
        c.output = p.lexically_normal().string();
    }
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    return parse_config(detail::load_yaml(path), path);
}

/// The network named by a config: loaded from file or drawn from the seed.
inline grid::Network resolve_network(const ExperimentConfig& c) {
    if (c.network_file) return load_network(*c.network_file);
    const auto& r = *c.random;
    return grid::random_network(r.seed, r.generators, r.loads, r.options);
}

// ---------------------------------------------------------------------------
// Bundles
// ---------------------------------------------------------------------------

using nlohmann::json;

inline json to_json(const Matrix& M) {
    json rows = json::array();
    for (Index i = 0; i < M.rows(); ++i) {
        json row = json::array();
        for (Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
        rows.push_back(std::move(row));
    }
    return json{{"rows", M.rows()}, {"cols", M.cols()}, {"data", std::move(rows)}};
}

inline Matrix matrix_from_json(const json& j, const std::string& what) {
    try {
        const Index r = j.at("rows").get<Index>();
        const Index c = j.at("cols").get<Index>();
        const auto& data = j.at("data");
        if (r < 0 || c < 0 || static_cast<Index>(data.size()) != r) throw ConfigError(what + ": row count mismatch");
        Matrix M(r, c);
        for (Index i = 0; i < r; ++i) {
            const auto& row = data.at(i);
            if (static_cast<Index>(row.size()) != c) throw ConfigError(what + ": column count mismatch");
            for (Index k = 0; k < c; ++k) M(i, k) = row.at(k).get<double>();
        }
        return M;
    } catch (const json::exception& e) {
        throw ConfigError(what + ": " + e.what());
    }
}

inline json certificate_json(const CertifiedBound& b) {
    return json{{"epsilon", b.epsilon}, {"gamma_K", b.gammaK}, {"gamma1", b.gamma1}, {"gamma2", b.gamma2},
                {"gamma3", b.gamma3},   {"delta1", b.delta1},  {"delta2", b.delta2}, {"q0", b.q0}};
}

/// A design together with the plant and preexisting gain it was certified
/// against, so that verification needs nothing else.
struct Bundle {
    DiscreteLTI plant;
    Matrix K;
    RetrofitDesign design;
    std::vector<std::string> port_ids;
    std::string fault_generator;
    Vector x0;  ///< deflection used by simulate
};

inline json bundle_to_json(const Bundle& b) {
    const auto& d = b.design;
    json F = json::array(), H = json::array();
    for (const auto& f : d.gains.F) F.push_back(to_json(f));
    for (const auto& h : d.gains.H) H.push_back(to_json(h));
    json ports = json::array();
    for (std::size_t i = 0; i < d.ports.indices.size(); ++i) {
        ports.push_back({{"id", i < b.port_ids.size() ? b.port_ids[i] : ""}, {"index", d.ports.indices[i]}});
    }
    return json{
        {"format", "retrofit-bundle"},
        {"version", 1},
        {"plant", {{"A", to_json(b.plant.A)}, {"B", to_json(b.plant.B)}, {"C", to_json(b.plant.C)}, {"dt", b.plant.dt}}},
        {"K", to_json(b.K)},
        {"fault_generator", b.fault_generator},
        {"x0", to_json(b.x0)},
        {"ports", ports},
        {"nu", d.nu},
        {"tau", d.gains.tau},
        {"rank", d.rank()},
        {"projection",
         {{"P", to_json(d.projection.P)},
          {"Pdag", to_json(d.projection.Pdag)},
          {"D", to_json(d.projection.D)},
          {"Pbar", to_json(d.projection.Pbar)},
          {"Pbar_dag", to_json(d.projection.Pbar_dag)}}},
        {"reduced", {{"A", to_json(d.reduced.A)}, {"B", to_json(d.reduced.B)}, {"C", to_json(d.reduced.C)}}},
        {"PdagB", to_json(d.PdagB)},
        {"Gamma", to_json(d.Gamma)},
        {"gains", {{"F", F}, {"H", H}, {"G", to_json(d.gains.G)}}},
        {"fault_basis", to_json(d.fault_basis)},
        {"guess_operator", to_json(d.guess_operator)},
        {"reduced_spectral_radius", d.reduced_spectral_radius},
        {"certificate", certificate_json(d.bound)},
    };
}

inline Bundle bundle_from_json(const json& j) {
    try {
        if (j.at("format") != "retrofit-bundle") throw ConfigError("bundle: unrecognized format");
        if (j.at("version") != 1) throw ConfigError("bundle: unsupported version");
        Bundle b;
        const auto& pl = j.at("plant");
        b.plant = DiscreteLTI(matrix_from_json(pl.at("A"), "plant.A"), matrix_from_json(pl.at("B"), "plant.B"),
                              matrix_from_json(pl.at("C"), "plant.C"), pl.at("dt").get<double>());
        b.plant.validate();
        b.K = matrix_from_json(j.at("K"), "K");
        b.fault_generator = j.at("fault_generator").get<std::string>();
        b.x0 = matrix_from_json(j.at("x0"), "x0");
        auto& d = b.design;
        for (const auto& p : j.at("ports")) {
            b.port_ids.push_back(p.at("id").get<std::string>());
            d.ports.indices.push_back(p.at("index").get<Index>());
        }
        d.nu = j.at("nu").get<int>();
        d.gains.tau = j.at("tau").get<int>();
        const auto& pr = j.at("projection");
        d.projection.P = matrix_from_json(pr.at("P"), "projection.P");
        d.projection.Pdag = matrix_from_json(pr.at("Pdag"), "projection.Pdag");
        d.projection.D = matrix_from_json(pr.at("D"), "projection.D");
        d.projection.Pbar = matrix_from_json(pr.at("Pbar"), "projection.Pbar");
        d.projection.Pbar_dag = matrix_from_json(pr.at("Pbar_dag"), "projection.Pbar_dag");
        const auto& rd = j.at("reduced");
        d.reduced = {matrix_from_json(rd.at("A"), "reduced.A"), matrix_from_json(rd.at("B"), "reduced.B"),
                     matrix_from_json(rd.at("C"), "reduced.C")};
        d.PdagB = matrix_from_json(j.at("PdagB"), "PdagB");
        d.Gamma = matrix_from_json(j.at("Gamma"), "Gamma");
        const auto& g = j.at("gains");
        for (const auto& f : g.at("F")) d.gains.F.push_back(matrix_from_json(f, "gains.F"));
        for (const auto& h : g.at("H")) d.gains.H.push_back(matrix_from_json(h, "gains.H"));
        d.gains.G = matrix_from_json(g.at("G"), "gains.G");
        d.fault_basis = matrix_from_json(j.at("fault_basis"), "fault_basis");
        d.guess_operator = matrix_from_json(j.at("guess_operator"), "guess_operator");
        d.reduced_spectral_radius = j.at("reduced_spectral_radius").get<double>();
        const auto& c = j.at("certificate");
        d.bound.epsilon = c.at("epsilon").get<double>();
        d.bound.gammaK = c.at("gamma_K").get<double>();
        d.bound.gamma1 = c.at("gamma1").get<double>();
        d.bound.gamma2 = c.at("gamma2").get<double>();
        d.bound.gamma3 = c.at("gamma3").get<double>();
        d.bound.delta1 = c.at("delta1").get<double>();
        d.bound.delta2 = c.at("delta2").get<double>();
        d.bound.q0 = c.at("q0").get<double>();

        const Index n = b.plant.states();
        const Index k = d.projection.P.cols();
        if (d.projection.P.rows() != n || d.projection.Pdag.rows() != k || d.projection.Pdag.cols() != n ||
            d.reduced.A.rows() != k || b.K.rows() != b.plant.inputs() || b.K.cols() != b.plant.outputs() ||
            b.x0.size() != n || d.fault_basis.rows() != n || d.guess_operator.rows() != n ||
            d.guess_operator.cols() != n || d.PdagB.rows() != k || d.PdagB.cols() != b.plant.inputs()) {
            throw ConfigError("bundle: inconsistent dimensions");
        }
        d.ports.validate(std::min(b.plant.inputs(), b.plant.outputs()));
        d.gains.validate(d.reduced);
        return b;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bundle: ") + e.what());
    } catch (const ConfigError&) {
        throw;
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("bundle: ") + e.what());
    }
}

inline void write_text(const std::string& path, const std::string& text) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << text;
    if (!out) throw Error("failed writing " + path);
}

inline void save_bundle(const std::string& path, const Bundle& b) { write_text(path, bundle_to_json(b).dump(1) + "\n"); }

inline Bundle load_bundle(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path + ": file not found");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    try {
        return bundle_from_json(j);
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Text outputs
// ---------------------------------------------------------------------------

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::string certificate_text(const CertifiedBound& b) {
    std::ostringstream out;
    out << "epsilon = " << format_double(b.epsilon) << "\n";
    out << "gamma_K = " << format_double(b.gammaK) << "\n";
    out << "gamma1 = " << format_double(b.gamma1) << "\n";
    out << "gamma2 = " << format_double(b.gamma2) << "\n";
    out << "gamma3 = " << format_double(b.gamma3) << "\n";
    out << "delta1 = " << format_double(b.delta1) << "\n";
    out << "delta2 = " << format_double(b.delta2) << "\n";
    out << "q0 = " << format_double(b.q0) << "\n";
    return out.str();
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

/// RFC 4180 table writer with CRLF-free line endings.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) : width_(header.size()) { row(header); }

    void row(const std::vector<std::string>& fields) {
        if (fields.size() != width_) throw InvalidArgument("CsvWriter: row width does not match the header");
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) text_ += ',';
            text_ += csv_field(fields[i]);
        }
        text_ += '\n';
    }

    const std::string& str() const { return text_; }

private:
    std::size_t width_;
    std::string text_;
};

}  // namespace retrofit::io
