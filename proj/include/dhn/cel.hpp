#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "dhn/common.hpp"
#include "dhn/topology.hpp"

namespace dhn {

/// Decomposable elements: every non-plant component node, sorted by id.
inline std::vector<int> decomposable_nodes(const NetworkTopology& topo) {
    std::vector<int> out;
    for (int e = 0; e < topo.comp.n; ++e)
        if (!is_plant(topo.comp.kinds[e])) out.push_back(e);
    return out;
}

/// Awareness features: one binary entry per unordered pair of decomposable
/// elements (lexicographic by ids), 1 iff the pair shares a block. The
/// single-block partition maps to all ones, all-singletons to all zeros.
inline std::vector<std::uint8_t> extract_features(const Partition& part,
                                                  const NetworkTopology& topo) {
    std::vector<int> nodes = decomposable_nodes(topo);
    std::vector<int> block_of(topo.comp.n, -1);
    for (size_t b = 0; b < part.blocks.size(); ++b)
        for (int e : part.blocks[b]) block_of[e] = static_cast<int>(b);
    std::vector<std::uint8_t> f;
    f.reserve(nodes.size() * (nodes.size() - 1) / 2);
    for (size_t i = 0; i < nodes.size(); ++i)
        for (size_t j = i + 1; j < nodes.size(); ++j)
            f.push_back(block_of[nodes[i]] >= 0 && block_of[nodes[i]] == block_of[nodes[j]]
                            ? 1
                            : 0);
    return f;
}

struct CelConfig {
    int n_trees = 60;
    double fn_cost = 4.0;  // misclassifying a converging partition
    double fp_cost = 1.0;
    // Screening threshold on the cost-weighted ensemble score; biased low
    // because missing a converging partition is the expensive mistake.
    double threshold = 0.4;
    int max_depth = -1;  // unlimited
    // Leaves keep at least a handful of samples so they stay impure; the
    // cost weighting acts through the weighted leaf scores, and pure leaves
    // would make fn_cost/fp_cost irrelevant.
    int min_leaf = 8;
    std::uint64_t seed = 0;
};

namespace detail {

struct CelNode {
    int feature = -1;  // -1 => leaf
    int left = -1, right = -1;
    double score = 0.0;  // leaf: cost-weighted positive fraction
};

struct CelTree {
    std::vector<CelNode> nodes;

    double predict(const std::vector<std::uint8_t>& x) const {
        int i = 0;
        while (nodes[i].feature >= 0)
            i = x[nodes[i].feature] ? nodes[i].right : nodes[i].left;
        return nodes[i].score;
    }
};

/// Grows one tree on the given sample indices: binary features, weighted Gini,
/// deterministic first-best splits.
class TreeBuilder {
  public:
    TreeBuilder(const std::vector<std::vector<std::uint8_t>>& X,
                const std::vector<std::uint8_t>& y, const CelConfig& cfg)
        : X_(X), y_(y), cfg_(cfg) {}

    CelTree build(std::vector<int> idx) {
        CelTree t;
        grow(t, std::move(idx), 0);
        return t;
    }

  private:
    double weight(int i) const { return y_[i] ? cfg_.fn_cost : cfg_.fp_cost; }

    static double gini(double wp, double wn) {
        double w = wp + wn;
        if (w <= 0.0) return 0.0;
        return 1.0 - (wp * wp + wn * wn) / (w * w);
    }

    int grow(CelTree& t, std::vector<int> idx, int depth) {
        double wp = 0.0, wn = 0.0;
        for (int i : idx) (y_[i] ? wp : wn) += weight(i);
        const int self = static_cast<int>(t.nodes.size());
        t.nodes.push_back({});
        t.nodes[self].score = (wp + wn) > 0.0 ? wp / (wp + wn) : 0.0;
        if (wp == 0.0 || wn == 0.0) return self;
        if (cfg_.max_depth >= 0 && depth >= cfg_.max_depth) return self;
        if (static_cast<int>(idx.size()) < 2 * cfg_.min_leaf) return self;

        const double parent = gini(wp, wn) * (wp + wn);
        int best_f = -1;
        double best_impurity = parent - 1e-12;
        const size_t nf = X_[idx.front()].size();
        for (size_t f = 0; f < nf; ++f) {
            double wp1 = 0.0, wn1 = 0.0;
            int n1 = 0;
            for (int i : idx)
                if (X_[i][f]) {
                    (y_[i] ? wp1 : wn1) += weight(i);
                    ++n1;
                }
            int n0 = static_cast<int>(idx.size()) - n1;
            if (n0 < cfg_.min_leaf || n1 < cfg_.min_leaf) continue;
            double wp0 = wp - wp1, wn0 = wn - wn1;
            double imp = gini(wp0, wn0) * (wp0 + wn0) + gini(wp1, wn1) * (wp1 + wn1);
            if (imp < best_impurity) {
                best_impurity = imp;
                best_f = static_cast<int>(f);
            }
        }
        if (best_f < 0) return self;

        std::vector<int> li, ri;
        for (int i : idx) (X_[i][best_f] ? ri : li).push_back(i);
        idx.clear();
        t.nodes[self].feature = best_f;
        int l = grow(t, std::move(li), depth + 1);
        t.nodes[self].left = l;
        int r = grow(t, std::move(ri), depth + 1);
        t.nodes[self].right = r;
        return self;
    }

    const std::vector<std::vector<std::uint8_t>>& X_;
    const std::vector<std::uint8_t>& y_;
    const CelConfig& cfg_;
};

}  // namespace detail

/// Bagged-tree convergence classifier. Immutable once trained.
class CelModel {
  public:
    CelModel() = default;

    /// score = mean of per-tree cost-weighted leaf scores; bool = score >= threshold.
    std::pair<bool, double> predict(const std::vector<std::uint8_t>& x) const {
        if (n_features_ >= 0 && static_cast<int>(x.size()) != n_features_)
            throw ConfigError("feature length mismatch: got " + std::to_string(x.size()) +
                              ", expected " + std::to_string(n_features_));
        double s;
        if (trees_.empty()) {
            s = const_score_;
        } else {
            s = 0.0;
            for (const auto& t : trees_) s += t.predict(x);
            s /= static_cast<double>(trees_.size());
        }
        return {s >= cfg_.threshold, s};
    }

    bool constant() const { return trees_.empty(); }
    bool trained() const { return trained_; }
    const CelConfig& config() const { return cfg_; }
    int num_trees() const { return static_cast<int>(trees_.size()); }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["n_features"] = n_features_;
        j["const_score"] = const_score_;
        j["config"] = {{"n_trees", cfg_.n_trees},     {"fn_cost", cfg_.fn_cost},
                       {"fp_cost", cfg_.fp_cost},     {"threshold", cfg_.threshold},
                       {"max_depth", cfg_.max_depth}, {"min_leaf", cfg_.min_leaf},
                       {"seed", cfg_.seed}};
        j["trees"] = nlohmann::json::array();
        for (const auto& t : trees_) {
            nlohmann::json jt = nlohmann::json::array();
            for (const auto& n : t.nodes)
                jt.push_back({n.feature, n.left, n.right, n.score});
            j["trees"].push_back(std::move(jt));
        }
        return j;
    }

    static CelModel from_json(const nlohmann::json& j) {
        CelModel m;
        m.n_features_ = j.at("n_features").get<int>();
        m.const_score_ = j.at("const_score").get<double>();
        const auto& c = j.at("config");
        m.cfg_.n_trees = c.at("n_trees").get<int>();
        m.cfg_.fn_cost = c.at("fn_cost").get<double>();
        m.cfg_.fp_cost = c.at("fp_cost").get<double>();
        m.cfg_.threshold = c.at("threshold").get<double>();
        m.cfg_.max_depth = c.at("max_depth").get<int>();
        m.cfg_.min_leaf = c.at("min_leaf").get<int>();
        m.cfg_.seed = c.at("seed").get<std::uint64_t>();
        for (const auto& jt : j.at("trees")) {
            detail::CelTree t;
            for (const auto& jn : jt) {
                detail::CelNode n;
                n.feature = jn.at(0).get<int>();
                n.left = jn.at(1).get<int>();
                n.right = jn.at(2).get<int>();
                n.score = jn.at(3).get<double>();
                t.nodes.push_back(n);
            }
            m.trees_.push_back(std::move(t));
        }
        m.trained_ = true;
        return m;
    }

  private:
    friend CelModel train_cel(const std::vector<std::vector<std::uint8_t>>&,
                              const std::vector<std::uint8_t>&, const CelConfig&);
    std::vector<detail::CelTree> trees_;
    CelConfig cfg_;
    int n_features_ = -1;
    double const_score_ = 0.0;
    bool trained_ = false;
};

/// Fits the ensemble: each tree on a bootstrap resample of the same size,
/// deterministic given config.seed. A single-class training set yields a
/// constant classifier.
inline CelModel train_cel(const std::vector<std::vector<std::uint8_t>>& X,
                          const std::vector<std::uint8_t>& y, const CelConfig& cfg = {}) {
    if (X.empty() || X.size() != y.size())
        throw ConfigError("training set empty or feature/label size mismatch");
    CelModel m;
    m.cfg_ = cfg;
    m.n_features_ = static_cast<int>(X.front().size());
    m.trained_ = true;
    bool has_pos = false, has_neg = false;
    for (auto v : y) (v ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) {
        m.const_score_ = has_pos ? 1.0 : 0.0;
        return m;
    }
    const int N = static_cast<int>(X.size());
    detail::TreeBuilder builder(X, y, m.cfg_);
    for (int t = 0; t < cfg.n_trees; ++t) {
        std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL +
                            static_cast<std::uint64_t>(t));
        std::uniform_int_distribution<int> pick(0, N - 1);
        std::vector<int> idx(N);
        for (int i = 0; i < N; ++i) idx[i] = pick(rng);
        m.trees_.push_back(builder.build(std::move(idx)));
    }
    return m;
}

struct CelMetrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    bool precision_defined = false;
    bool recall_defined = false;
    int tp = 0, fp = 0, tn = 0, fn = 0;
};

inline CelMetrics cel_metrics(const CelModel& model,
                              const std::vector<std::vector<std::uint8_t>>& X,
                              const std::vector<std::uint8_t>& y) {
    if (X.empty() || X.size() != y.size())
        throw ConfigError("metrics dataset empty or size mismatch");
    CelMetrics r;
    for (size_t i = 0; i < X.size(); ++i) {
        bool pred = model.predict(X[i]).first;
        if (pred && y[i]) ++r.tp;
        else if (pred && !y[i]) ++r.fp;
        else if (!pred && !y[i]) ++r.tn;
        else ++r.fn;
    }
    r.accuracy = static_cast<double>(r.tp + r.tn) / static_cast<double>(X.size());
    if (r.tp + r.fp > 0) {
        r.precision = static_cast<double>(r.tp) / (r.tp + r.fp);
        r.precision_defined = true;
    }
    if (r.tp + r.fn > 0) {
        r.recall = static_cast<double>(r.tp) / (r.tp + r.fn);
        r.recall_defined = true;
    }
    return r;
}

}  // namespace dhn
