#pragma once

#include <algorithm>
#include <chrono>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dhn/cel.hpp"
#include "dhn/olm.hpp"

namespace dhn {

/// All 2-way splits of p's last (still-divisible) block: the finalized part
/// keeps the block's least member, the remainder stays divisible, so every
/// descendant partition is generated exactly once. 2^(m-1)-1 candidates before
/// validity filtering.
inline std::vector<Partition> branch(const Partition& p, const ComponentGraph& g) {
    std::vector<Partition> out;
    if (p.blocks.empty()) return out;
    const auto& last = p.blocks.back();
    const int m = static_cast<int>(last.size());
    if (m < 2) return out;
    const std::uint64_t n_masks = (1ULL << (m - 1)) - 1;
    for (std::uint64_t mask = 1; mask <= n_masks; ++mask) {
        std::vector<int> fin{last.front()}, rem;
        for (int i = 1; i < m; ++i)
            ((mask >> (i - 1)) & 1 ? rem : fin).push_back(last[i]);
        std::vector<std::vector<int>> blocks(p.blocks.begin(), p.blocks.end() - 1);
        blocks.push_back(std::move(fin));
        blocks.push_back(std::move(rem));
        Partition child(std::move(blocks));
        if (validate_partition(child, g).empty()) out.push_back(std::move(child));
    }
    return out;
}

/// Count of pre-filter candidates for a divisible block of size m.
inline std::uint64_t branch_count(int m) { return m < 2 ? 0 : (1ULL << (m - 1)) - 1; }

/// Optimistic bound: the size term uses only the finalized blocks (all but the
/// last), which further subdivision cannot grow; mPoA and iteration terms are
/// inherited from the evaluated parent.
inline double optimistic_olm(const OlmScore& s, const Partition& p, const OlmWeights& w) {
    if (!s.converged) return std::numeric_limits<double>::infinity();
    double sz = 0.0;
    for (size_t b = 0; b + 1 < p.blocks.size(); ++b)
        sz = std::max(sz, static_cast<double>(p.blocks[b].size()));
    return olm_total(s.c_mPoA, sz, s.c_iter, w);
}

struct SearchParams {
    int n_train = 1000;
    int n_rt = 1000;
    int n_rt_min = 100;
    std::uint64_t seed = 0;
    CelConfig cel;
    int max_level = -1;                 // default: number of decomposable nodes
    std::string log_path;               // evaluation log CSV, empty = no file
    std::string resume_path;            // JSON score cache, read+rewritten
};

enum class SearchMode { Learned, Exact };

struct EvalRecord {
    std::string key;
    OlmScore score;
    double wall_ms = 0.0;
};

struct SearchResult {
    Partition best;
    OlmScore best_score;
    bool found_converging = false;
    long long evaluations = 0;  // logical OLM requests (deduplicated per run)
    std::vector<EvalRecord> log;
    CelModel model;
    std::string warning;
};

namespace detail {

inline void write_search_log(const std::string& path, const std::vector<EvalRecord>& log) {
    if (path.empty()) return;
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write evaluation log: " + path);
    os << "partition,c_mPoA,c_sz,c_iter,c_olm,converged,wall_ms\n";
    for (const auto& r : log) {
        os << '"' << r.key << "\"," << r.score.c_mPoA << ',' << r.score.c_sz << ','
           << r.score.c_iter << ',';
        if (r.score.converged) os << r.score.c_olm;
        else os << "inf";
        os << ',' << (r.score.converged ? 1 : 0) << ',' << r.wall_ms << '\n';
    }
}

inline void save_resume(const std::string& path, const std::map<std::string, OlmScore>& m) {
    if (path.empty()) return;
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, s] : m)
        j[k] = {{"c_mPoA", s.c_mPoA},
                {"c_sz", s.c_sz},
                {"c_iter", s.c_iter},
                {"converged", s.converged}};
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write resume file: " + path);
    os << j.dump(1) << '\n';
}

inline std::map<std::string, OlmScore> load_resume(const std::string& path,
                                                   const OlmWeights& w) {
    std::map<std::string, OlmScore> m;
    if (path.empty()) return m;
    std::ifstream is(path);
    if (!is) return m;  // nothing to resume yet
    nlohmann::json j;
    is >> j;
    for (auto it = j.begin(); it != j.end(); ++it) {
        OlmScore s;
        s.c_mPoA = it.value().at("c_mPoA").get<double>();
        s.c_sz = it.value().at("c_sz").get<double>();
        s.c_iter = it.value().at("c_iter").get<double>();
        s.converged = it.value().at("converged").get<bool>();
        if (s.converged) s.c_olm = olm_total(s.c_mPoA, s.c_sz, s.c_iter, w);
        m[it.key()] = s;
    }
    return m;
}

}  // namespace detail

/// Unsolved frontier members predicted converging, in frontier order,
/// truncated to n_rt.
inline std::vector<int> find_candidates(const std::vector<Partition>& frontier,
                                        const std::set<std::string>& solved,
                                        const CelModel& model, const NetworkTopology& topo,
                                        int n_rt) {
    std::vector<int> out;
    for (size_t i = 0; i < frontier.size() && static_cast<int>(out.size()) < n_rt; ++i) {
        if (solved.count(frontier[i].key())) continue;
        if (model.predict(extract_features(frontier[i], topo)).first)
            out.push_back(static_cast<int>(i));
    }
    return out;
}

/// Learning-enhanced branch and bound over iterative bi-partitions; Exact mode
/// evaluates every frontier member instead of prescreening and serves as the
/// ground-truth control.
inline SearchResult run_lebnb(const NetworkTopology& topo, const Scenario& sc,
                              const SearchParams& params, SearchMode mode,
                              OlmEvaluator& ev) {
    using Clock = std::chrono::steady_clock;
    SearchResult res;
    std::map<std::string, OlmScore> scored =
        detail::load_resume(params.resume_path, ev.weights());
    for (const auto& [k, s] : scored) ev.preload(k, s);

    std::set<std::string> solved;
    std::vector<std::vector<std::uint8_t>> X;
    std::vector<std::uint8_t> y;
    double best_c = std::numeric_limits<double>::infinity();

    int since_checkpoint = 0;
    auto evaluate = [&](const Partition& p) {
        const std::string key = p.key();
        auto t0 = Clock::now();
        OlmScore s = ev.evaluate(p);
        auto t1 = Clock::now();
        ++res.evaluations;
        // Long levels checkpoint periodically so interrupted runs can resume.
        if (++since_checkpoint >= 200) {
            since_checkpoint = 0;
            detail::write_search_log(params.log_path, res.log);
            detail::save_resume(params.resume_path, scored);
        }
        solved.insert(key);
        scored[key] = s;
        res.log.push_back(
            {key, s, std::chrono::duration<double, std::milli>(t1 - t0).count()});
        X.push_back(extract_features(p, topo));
        y.push_back(s.converged ? 1 : 0);
        if (s.converged && s.c_olm < best_c) {
            best_c = s.c_olm;
            res.best = p;
            res.best_score = s;
            res.found_converging = true;
        }
        return s;
    };
    auto checkpoint = [&]() {
        detail::write_search_log(params.log_path, res.log);
        detail::save_resume(params.resume_path, scored);
    };

    Partition root = single_block_partition(topo.comp);
    evaluate(root);
    if (!res.found_converging) {
        res.best = root;
        res.best_score = scored.at(root.key());
    }

    const int n_nodes = static_cast<int>(decomposable_nodes(topo).size());
    const int max_level = params.max_level > 0 ? params.max_level : n_nodes;
    std::mt19937_64 rng(params.seed);

    std::vector<Partition> frontier = branch(root, topo.comp);
    for (int level = 1; level <= max_level && !frontier.empty(); ++level) {
        if (mode == SearchMode::Exact) {
            for (const auto& p : frontier)
                if (!solved.count(p.key())) evaluate(p);
            checkpoint();
        } else {
            std::vector<int> cand;
            if (level == 1 || !res.model.trained()) {
                // Level-1 bootstrap: a random n_train sample seeds the learner.
                std::vector<int> idx(frontier.size());
                for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
                std::shuffle(idx.begin(), idx.end(), rng);
                idx.resize(std::min<size_t>(idx.size(), params.n_train));
                std::sort(idx.begin(), idx.end());
                cand = std::move(idx);
            } else {
                cand = find_candidates(frontier, solved, res.model, topo, params.n_rt);
            }
            while (!cand.empty()) {
                for (int i : cand)
                    if (!solved.count(frontier[i].key())) evaluate(frontier[i]);
                res.model = train_cel(X, y, params.cel);
                checkpoint();
                cand = find_candidates(frontier, solved, res.model, topo, params.n_rt);
                if (static_cast<int>(cand.size()) <= params.n_rt_min) {
                    for (int i : cand)
                        if (!solved.count(frontier[i].key())) evaluate(frontier[i]);
                    if (!cand.empty()) {
                        res.model = train_cel(X, y, params.cel);
                        checkpoint();
                    }
                    break;
                }
            }
        }

        // Level advance: only evaluated, converging parents whose optimistic
        // bound can still beat the incumbent spawn children.
        std::vector<Partition> next;
        for (const auto& p : frontier) {
            auto it = scored.find(p.key());
            if (it == scored.end() || !it->second.converged) continue;
            if (optimistic_olm(it->second, p, ev.weights()) > best_c) continue;
            for (auto& c : branch(p, topo.comp)) next.push_back(std::move(c));
        }
        frontier = std::move(next);
    }
    checkpoint();
    if (!res.found_converging)
        res.warning = "no converging partition found; returning the single block";
    return res;
}

/// Greedy agglomerative modularity maximization on the undirected, unweighted
/// component graph (v0+ excluded); deterministic smallest-id tie-breaking. The
/// canonical ordering places v0-'s block first.
inline Partition baseline_modularity(const ComponentGraph& g) {
    std::vector<int> nodes = g.non_plant_nodes();
    nodes.push_back(g.plant_in());
    std::sort(nodes.begin(), nodes.end());
    const int n = static_cast<int>(nodes.size());
    std::map<int, int> pos;
    for (int i = 0; i < n; ++i) pos[nodes[i]] = i;

    // Undirected simple adjacency among the partitionable nodes.
    std::vector<std::set<int>> adj(n);
    for (int u = 0; u < g.n; ++u) {
        if (!pos.count(u)) continue;
        for (int v : g.out[u]) {
            if (!pos.count(v)) continue;
            adj[pos[u]].insert(pos[v]);
            adj[pos[v]].insert(pos[u]);
        }
    }
    double m2 = 0.0;  // 2m
    std::vector<double> deg(n, 0.0);
    for (int i = 0; i < n; ++i) {
        deg[i] = static_cast<double>(adj[i].size());
        m2 += deg[i];
    }
    if (m2 <= 0.0) return Partition({nodes});

    std::vector<int> comm(n);
    for (int i = 0; i < n; ++i) comm[i] = i;
    auto members = [&](int c) {
        std::vector<int> out;
        for (int i = 0; i < n; ++i)
            if (comm[i] == c) out.push_back(i);
        return out;
    };
    while (true) {
        std::set<int> comms(comm.begin(), comm.end());
        double best_dq = 1e-12;
        int ba = -1, bb = -1;
        for (int a : comms) {
            for (int b : comms) {
                if (b <= a) continue;
                double e_ab = 0.0, da = 0.0, db = 0.0;
                for (int i = 0; i < n; ++i) {
                    if (comm[i] == a) da += deg[i];
                    if (comm[i] == b) db += deg[i];
                    if (comm[i] != a) continue;
                    for (int j : adj[i])
                        if (comm[j] == b) e_ab += 1.0;
                }
                double dq = e_ab / m2 * 2.0 - 2.0 * (da / m2) * (db / m2);
                if (dq > best_dq) {
                    best_dq = dq;
                    ba = a;
                    bb = b;
                }
            }
        }
        if (ba < 0) break;
        for (int i = 0; i < n; ++i)
            if (comm[i] == bb) comm[i] = ba;
    }
    std::map<int, std::vector<int>> blocks;
    for (int i = 0; i < n; ++i) blocks[comm[i]].push_back(nodes[i]);
    std::vector<std::vector<int>> bl;
    for (auto& [c, b] : blocks) bl.push_back(std::move(b));
    return Partition(std::move(bl)).canonical();
}

/// Flat enumeration of all valid partitions via restricted growth strings over
/// the partitionable nodes; intended for small instances only.
inline std::vector<Partition> enumerate_valid_partitions(const NetworkTopology& topo,
                                                         int max_nodes = 12) {
    std::vector<int> nodes = decomposable_nodes(topo);
    nodes.push_back(topo.comp.plant_in());
    std::sort(nodes.begin(), nodes.end());
    const int n = static_cast<int>(nodes.size());
    if (n > max_nodes)
        throw ConfigError("flat enumeration limited to " + std::to_string(max_nodes) +
                          " nodes, network has " + std::to_string(n));
    std::vector<Partition> out;
    std::vector<int> a(n, 0);
    while (true) {
        int k = *std::max_element(a.begin(), a.end()) + 1;
        std::vector<std::vector<int>> blocks(k);
        for (int i = 0; i < n; ++i) blocks[a[i]].push_back(nodes[i]);
        Partition p(std::move(blocks));
        if (validate_partition(p, topo.comp).empty()) out.push_back(std::move(p));
        // Next restricted growth string.
        int i = n - 1;
        for (; i > 0; --i) {
            int cap = *std::max_element(a.begin(), a.begin() + i) + 1;
            if (a[i] < cap) {
                ++a[i];
                std::fill(a.begin() + i + 1, a.end(), 0);
                break;
            }
            a[i] = 0;
        }
        if (i == 0) break;
    }
    return out;
}

}  // namespace dhn
