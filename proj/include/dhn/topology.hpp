#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dhn/common.hpp"

namespace dhn {

/// Network component classes. PlantIn is the plant discharge edge v0- (root of
/// the component graph), PlantOut the plant suction edge v0+ (terminal node).
enum class ElementKind { Feeding, Return, Bypass, User, PlantIn, PlantOut };

inline std::string to_string(ElementKind k) {
    switch (k) {
        case ElementKind::Feeding: return "feeding";
        case ElementKind::Return: return "return";
        case ElementKind::Bypass: return "bypass";
        case ElementKind::User: return "user";
        case ElementKind::PlantIn: return "plant_in";
        case ElementKind::PlantOut: return "plant_out";
    }
    return "?";
}

inline ElementKind kind_from_string(const std::string& s) {
    if (s == "feeding") return ElementKind::Feeding;
    if (s == "return") return ElementKind::Return;
    if (s == "bypass") return ElementKind::Bypass;
    if (s == "user") return ElementKind::User;
    if (s == "plant_in") return ElementKind::PlantIn;
    if (s == "plant_out") return ElementKind::PlantOut;
    throw ParseError("unknown element kind: " + s);
}

inline bool is_pipe(ElementKind k) {
    return k == ElementKind::Feeding || k == ElementKind::Return ||
           k == ElementKind::Bypass;
}
inline bool is_plant(ElementKind k) {
    return k == ElementKind::PlantIn || k == ElementKind::PlantOut;
}

struct Element {
    int id = -1;
    ElementKind kind = ElementKind::Feeding;
    int tail = -1;  // split the element leaves
    int head = -1;  // split the element enters
    double length_m = 0.0;
    double diameter_m = 0.0;
    std::string name;
};

/// Directed flow graph: nodes are splits, edges are network components.
struct FlowGraph {
    int n_splits = 0;
    std::vector<Element> elements;

    int plant_in() const { return find_kind(ElementKind::PlantIn); }
    int plant_out() const { return find_kind(ElementKind::PlantOut); }

    /// Split upstream of the plant discharge edge (outside the network).
    int plant_source_node() const { return elements[plant_in()].tail; }
    /// Split downstream of the plant suction edge (outside the network).
    int plant_sink_node() const { return elements[plant_out()].head; }
    /// First network split, fed by v0-.
    int supply_split() const { return elements[plant_in()].head; }
    /// Last network split, drained by v0+.
    int return_split() const { return elements[plant_out()].tail; }

    Eigen::MatrixXd incidence() const {
        Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n_splits, elements.size());
        for (const auto& e : elements) {
            L(e.tail, e.id) += 1.0;
            L(e.head, e.id) -= 1.0;
        }
        return L;
    }

    void validate() const {
        int n_in = 0, n_out = 0;
        std::vector<char> seen(elements.size(), 0);
        for (const auto& e : elements) {
            if (e.id < 0 || e.id >= static_cast<int>(elements.size()) || seen[e.id])
                throw TopologyError("element ids must be dense and unique");
            seen[e.id] = 1;
            if (e.tail == e.head)
                throw TopologyError("element " + std::to_string(e.id) +
                                    " has identical tail and head");
            if (e.tail < 0 || e.tail >= n_splits || e.head < 0 || e.head >= n_splits)
                throw TopologyError("element " + std::to_string(e.id) +
                                    " references unknown split");
            if (e.kind == ElementKind::PlantIn) ++n_in;
            if (e.kind == ElementKind::PlantOut) ++n_out;
        }
        if (n_in != 1 || n_out != 1)
            throw TopologyError("network must have exactly one plant_in and one plant_out");
        // Connectivity over the undirected split graph.
        std::vector<char> vis(n_splits, 0);
        std::vector<int> stack{elements[0].tail};
        vis[elements[0].tail] = 1;
        while (!stack.empty()) {
            int s = stack.back();
            stack.pop_back();
            for (const auto& e : elements) {
                for (int t : {e.tail == s ? e.head : -1, e.head == s ? e.tail : -1}) {
                    if (t >= 0 && !vis[t]) {
                        vis[t] = 1;
                        stack.push_back(t);
                    }
                }
            }
        }
        if (std::count(vis.begin(), vis.end(), 1) != n_splits)
            throw TopologyError("flow graph is disconnected");
    }

  private:
    int find_kind(ElementKind k) const {
        for (const auto& e : elements)
            if (e.kind == k) return e.id;
        throw TopologyError("missing plant element");
    }
};

/// Line graph of the flow graph: nodes are components, edges downstream adjacency.
struct ComponentGraph {
    int n = 0;
    std::vector<ElementKind> kinds;
    std::vector<std::vector<int>> out;  // downstream neighbors
    std::vector<std::vector<int>> in;   // upstream neighbors

    Eigen::MatrixXd adjacency() const {
        Eigen::MatrixXd G = Eigen::MatrixXd::Zero(n, n);
        for (int a = 0; a < n; ++a)
            for (int b : out[a]) G(a, b) = 1.0;
        return G;
    }

    int plant_in() const { return find_kind(ElementKind::PlantIn); }
    int plant_out() const { return find_kind(ElementKind::PlantOut); }

    std::vector<int> non_plant_nodes() const {
        std::vector<int> v;
        for (int i = 0; i < n; ++i)
            if (!is_plant(kinds[i])) v.push_back(i);
        return v;
    }

  private:
    int find_kind(ElementKind k) const {
        for (int i = 0; i < n; ++i)
            if (kinds[i] == k) return i;
        throw TopologyError("missing plant node");
    }
};

inline ComponentGraph build_component_graph(const FlowGraph& flow) {
    flow.validate();
    ComponentGraph g;
    g.n = static_cast<int>(flow.elements.size());
    g.kinds.resize(g.n);
    g.out.resize(g.n);
    g.in.resize(g.n);
    for (const auto& e : flow.elements) g.kinds[e.id] = e.kind;
    for (const auto& a : flow.elements)
        for (const auto& b : flow.elements)
            if (a.id != b.id && a.head == b.tail) {
                g.out[a.id].push_back(b.id);
                g.in[b.id].push_back(a.id);
            }
    for (int b : g.out[g.plant_out()])
        throw TopologyError("plant_out must be terminal, has edge to " + std::to_string(b));
    if (!g.in[g.plant_in()].empty())
        throw TopologyError("plant_in must be the root");
    return g;
}

/// Directed communication edge sets over component nodes.
struct CommEdges {
    std::vector<std::pair<int, int>> e_T;  // temperature: along flow
    std::vector<std::pair<int, int>> e_m;  // mass flow
    std::vector<std::pair<int, int>> e_P;  // pressure: reverse of e_m
};

/// Builds the three communication edge sets from the flow-direction case split:
/// feeding-side adjacencies send flow upstream and pressure downstream, return-side
/// adjacencies the opposite.
inline CommEdges comm_edges(const ComponentGraph& g) {
    auto in_F0 = [&](int v) {
        return g.kinds[v] == ElementKind::Feeding || g.kinds[v] == ElementKind::PlantIn;
    };
    auto in_Fstar = [&](int v) {
        auto k = g.kinds[v];
        return k == ElementKind::Feeding || k == ElementKind::User || k == ElementKind::Bypass;
    };
    auto in_Rstar = [&](int v) {
        auto k = g.kinds[v];
        return k == ElementKind::Return || k == ElementKind::User || k == ElementKind::Bypass;
    };
    auto in_R0 = [&](int v) {
        return g.kinds[v] == ElementKind::Return || g.kinds[v] == ElementKind::PlantOut;
    };
    CommEdges ce;
    for (int a = 0; a < g.n; ++a) {
        for (int b : g.out[a]) {
            ce.e_T.emplace_back(a, b);
            if (in_F0(a) && in_Fstar(b)) {
                ce.e_m.emplace_back(b, a);
                ce.e_P.emplace_back(a, b);
            } else if (in_Rstar(a) && in_R0(b)) {
                ce.e_m.emplace_back(a, b);
                ce.e_P.emplace_back(b, a);
            } else {
                throw TopologyError("adjacency (" + std::to_string(a) + "," +
                                    std::to_string(b) + ") matches no communication case");
            }
        }
    }
    return ce;
}

/// Ordered disjoint cover of the non-plant component nodes plus v0-.
/// v0+ is held by an implicit separate agent and never appears in a block.
struct Partition {
    std::vector<std::vector<int>> blocks;

    Partition() = default;
    explicit Partition(std::vector<std::vector<int>> b) : blocks(std::move(b)) {
        for (auto& blk : blocks) std::sort(blk.begin(), blk.end());
    }

    int n_agents() const { return static_cast<int>(blocks.size()); }

    int block_of(int node) const {
        for (int i = 0; i < n_agents(); ++i)
            if (std::binary_search(blocks[i].begin(), blocks[i].end(), node)) return i;
        return -1;
    }

    /// Blocks sorted by least member: equality independent of block order.
    Partition canonical() const {
        Partition p = *this;
        std::sort(p.blocks.begin(), p.blocks.end(),
                  [](const auto& a, const auto& b) { return a.front() < b.front(); });
        return p;
    }

    std::string key() const {
        Partition c = canonical();
        std::ostringstream os;
        for (const auto& b : c.blocks) {
            os << '|';
            for (size_t i = 0; i < b.size(); ++i) os << (i ? "," : "") << b[i];
        }
        return os.str();
    }

    bool operator==(const Partition& o) const {
        return canonical().blocks == o.canonical().blocks;
    }
};

inline Partition single_block_partition(const ComponentGraph& g) {
    std::vector<int> blk = g.non_plant_nodes();
    blk.push_back(g.plant_in());
    std::sort(blk.begin(), blk.end());
    return Partition({blk});
}

inline std::vector<std::string> validate_partition(const Partition& p,
                                                   const ComponentGraph& g) {
    std::vector<std::string> viol;
    const int v0m = g.plant_in();
    const int v0p = g.plant_out();
    std::vector<int> count(g.n, 0);
    for (int i = 0; i < p.n_agents(); ++i) {
        if (p.blocks[i].empty()) viol.push_back("block " + std::to_string(i) + " is empty");
        for (int v : p.blocks[i]) {
            if (v < 0 || v >= g.n) {
                viol.push_back("unknown node " + std::to_string(v));
                continue;
            }
            ++count[v];
            if (v == v0p) viol.push_back("v0+ must not be in any block");
        }
    }
    for (int v = 0; v < g.n; ++v) {
        if (v == v0p) continue;
        if (count[v] == 0) viol.push_back("node " + std::to_string(v) + " is uncovered");
        if (count[v] > 1) viol.push_back("node " + std::to_string(v) + " appears in multiple blocks");
    }
    // The plant must share a block with at least one directly connected element.
    int pb = p.block_of(v0m);
    if (pb < 0) {
        viol.push_back("v0- is not assigned to any block");
    } else {
        bool adj = false;
        for (int w : p.blocks[pb]) {
            if (w == v0m) continue;
            if (std::find(g.out[v0m].begin(), g.out[v0m].end(), w) != g.out[v0m].end() ||
                std::find(g.in[v0m].begin(), g.in[v0m].end(), w) != g.in[v0m].end())
                adj = true;
        }
        if (!adj)
            viol.push_back("v0- must share a block with a directly connected element");
    }
    return viol;
}

/// Per-agent external nodes whose temperature / flow / pressure values must be
/// communicated into the agent.
struct NeighborSets {
    std::vector<std::set<int>> n_T, n_m, n_P;
};

inline NeighborSets neighbor_sets(const Partition& p, const CommEdges& ce,
                                  const ComponentGraph& g) {
    if (auto v = validate_partition(p, g); !v.empty())
        throw TopologyError("invalid partition: " + v.front());
    NeighborSets ns;
    const int na = p.n_agents();
    ns.n_T.resize(na);
    ns.n_m.resize(na);
    ns.n_P.resize(na);
    auto fill = [&](const std::vector<std::pair<int, int>>& edges,
                    std::vector<std::set<int>>& sets) {
        for (auto [from, to] : edges) {
            int bi = p.block_of(to);
            if (bi < 0) continue;  // edges into v0+ have no receiving agent
            if (p.block_of(from) != bi) sets[bi].insert(from);
        }
    };
    fill(ce.e_T, ns.n_T);
    fill(ce.e_m, ns.n_m);
    fill(ce.e_P, ns.n_P);
    return ns;
}

/// Bundle used by the physics and control modules.
struct NetworkTopology {
    FlowGraph flow;
    ComponentGraph comp;
    CommEdges comm;

    std::vector<int> users() const {
        std::vector<int> u;
        for (int i = 0; i < comp.n; ++i)
            if (comp.kinds[i] == ElementKind::User) u.push_back(i);
        return u;
    }
    std::vector<int> pipes() const {
        std::vector<int> v;
        for (int i = 0; i < comp.n; ++i)
            if (is_pipe(comp.kinds[i])) v.push_back(i);
        return v;
    }
};

inline NetworkTopology make_topology(FlowGraph flow) {
    NetworkTopology t;
    t.flow = std::move(flow);
    t.comp = build_component_graph(t.flow);
    t.comm = comm_edges(t.comp);
    return t;
}

inline NetworkTopology load_network(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open network file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ParseError(std::string("network file parse failure: ") + e.what());
    }
    FlowGraph fg;
    fg.n_splits = j.at("splits").get<int>();
    for (const auto& je : j.at("elements")) {
        Element e;
        e.id = je.at("id").get<int>();
        e.kind = kind_from_string(je.at("kind").get<std::string>());
        e.tail = je.at("tail").get<int>();
        e.head = je.at("head").get<int>();
        e.length_m = je.value("length_m", 0.0);
        e.diameter_m = je.value("diameter_m", 0.0);
        e.name = je.value("name", std::string{});
        fg.elements.push_back(e);
    }
    std::sort(fg.elements.begin(), fg.elements.end(),
              [](const Element& a, const Element& b) { return a.id < b.id; });
    return make_topology(std::move(fg));
}

}  // namespace dhn
