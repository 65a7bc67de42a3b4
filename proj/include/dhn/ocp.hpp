#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include <Eigen/Dense>

#include "dhn/autodiff.hpp"
#include "dhn/common.hpp"
#include "dhn/hydraulics.hpp"
#include "dhn/scenario.hpp"
#include "dhn/thermal.hpp"
#include "dhn/topology.hpp"

namespace dhn {

/// Stage cost: averaged squared fractional state of energy over the agent's
/// users plus weighted heat losses. Agents without users drop the first term.
template <typename Scalar>
Scalar stage_cost(const std::vector<Scalar>& S_b, const std::vector<double>& cap_J,
                  const std::vector<Scalar>& T_p, const std::vector<double>& hA,
                  double T_amb, double w_C, double w_Q) {
    Scalar c(0.0);
    if (!S_b.empty()) {
        Scalar flex(0.0);
        for (size_t i = 0; i < S_b.size(); ++i) {
            Scalar f = S_b[i] / Scalar(cap_J[i]);
            flex += f * f;
        }
        c += Scalar(w_C / static_cast<double>(S_b.size())) * flex;
    }
    for (size_t i = 0; i < T_p.size(); ++i)
        c += Scalar(w_Q * hA[i]) * (T_p[i] - Scalar(T_amb));
    return c;
}

/// Values communicated into an agent, one trajectory entry per control step.
struct BoundaryValues {
    std::map<int, std::vector<double>> pipe_T;   // by element id (N_T pipes)
    std::map<int, std::vector<double>> elem_m;   // by element id (N_m)
    std::map<int, std::vector<double>> split_P;  // by split id (from N_P edges)
};

/// Initial condition restricted to an agent.
struct LocalState {
    std::map<int, double> T_p;  // by pipe element id
    std::map<int, double> S_b;  // by user element id, J
};

enum class OcpStatus { Optimal, MaxIter, Infeasible };

/// Static structure of one agent's reduced problem: which flows and pressures
/// are unknown, which balances close, where the boundary values plug in.
struct AgentModel {
    int agent_index = 0;
    std::vector<int> elems;        // block contents
    std::vector<int> local_users;  // element ids, sorted
    std::vector<int> local_pipes;
    bool owns_plant = false;
    bool m0_is_decision = false;  // plant flow free (centralized-like)
    int m0_unknown = -1;          // index when the plant flow is pinned locally

    std::vector<int> flow_elems;            // unknown-flow elements, order = index
    std::map<int, int> flow_idx;            // element id -> unknown index
    std::map<int, int> free_P_idx;          // split id -> unknown index
    std::map<int, int> fixed_P_split;       // split id -> announcing element
    std::set<int> anchor_splits;            // gauge anchor (return-collection split)
    std::vector<int> balance_splits;
    int n_unknowns = 0;

    std::set<int> need_T, need_m;           // neighbor sets actually consumed
    std::set<int> need_P;                   // splits with communicated pressure
    std::vector<int> announce_P_splits;     // pressures this agent must publish

    // Thermal wiring: per local pipe / user, its upstream sources.
    struct Upstream {
        int elem;
        enum class Kind { LocalPipe, CommPipe, User, Plant } kind;
        bool flow_local = false;  // mixing weight from local unknown vs comm value
    };
    std::map<int, std::vector<Upstream>> pipe_upstream;
    std::map<int, Upstream> user_upstream;

    bool structurally_determinate = true;
    std::string indeterminacy;
};

inline AgentModel build_agent_model(const NetworkTopology& topo, const Partition& part,
                                    int agent, const NeighborSets& ns) {
    const auto& g = topo.comp;
    const auto& fg = topo.flow;
    AgentModel m;
    m.agent_index = agent;
    m.elems = part.blocks.at(agent);
    std::set<int> local(m.elems.begin(), m.elems.end());
    const int v0m = g.plant_in();
    m.owns_plant = local.count(v0m) > 0;
    for (int e : m.elems) {
        if (g.kinds[e] == ElementKind::User) m.local_users.push_back(e);
        if (is_pipe(g.kinds[e])) m.local_pipes.push_back(e);
    }

    // Local splits: incident to any local element (plant terminal nodes excluded).
    const int src = fg.plant_source_node(), snk = fg.plant_sink_node();
    const int ret = fg.return_split();
    std::set<int> local_splits;
    for (int e : m.elems) {
        const auto& el = fg.elements[e];
        for (int s : {el.tail, el.head})
            if (s != src && s != snk) local_splits.insert(s);
    }

    // Communicated pressures: E_P edge from a non-local element into a local one
    // fixes the shared split. Real agents take priority as references; an agent
    // with none falls back to the implicit v0+ agent's constant return-split
    // pressure, and the plant agent to a zero anchor at its supply split.
    bool ret_announced = false;
    for (auto [from, to] : topo.comm.e_P) {
        if (!local.count(to) || local.count(from)) continue;
        if (from == g.plant_out()) {
            ret_announced = true;
            continue;
        }
        const auto& a = fg.elements[from];
        const auto& b = fg.elements[to];
        int shared = (a.head == b.tail) ? a.head : (b.head == a.tail ? b.head : -1);
        if (shared < 0) throw TopologyError("pressure edge without shared split");
        m.fixed_P_split[shared] = from;
        m.need_P.insert(from);
    }
    if (m.fixed_P_split.empty()) {
        if (ret_announced && local_splits.count(ret)) {
            m.fixed_P_split[ret] = g.plant_out();
        } else if (m.owns_plant) {
            // A plant block with no external reference holds its supply split
            // at the bus value so its announcements stay in the common gauge
            // rooted at the return-collection split.
            m.fixed_P_split[fg.supply_split()] = v0m;
        }
    }

    // Flow unknowns.
    for (int e : m.elems) {
        if (is_plant(g.kinds[e])) continue;
        m.flow_elems.push_back(e);
    }

    // Balance closure: every incident non-local element's flow must be
    // communicated. v0+ never is (its balance belongs to no agent); v0- counts
    // as known when local.
    std::set<int> comm_flows(ns.n_m.at(agent).begin(), ns.n_m.at(agent).end());
    m.need_m = comm_flows;
    for (int s : local_splits) {
        bool closable = (s != ret);
        if (closable) {
            for (const auto& el : fg.elements) {
                if (el.tail != s && el.head != s) continue;
                if (local.count(el.id)) continue;
                if (!comm_flows.count(el.id)) {
                    closable = false;
                    break;
                }
            }
        }
        if (closable) m.balance_splits.push_back(s);
    }

    const int n_eq = static_cast<int>(m.flow_elems.size() + m.balance_splits.size());
    auto count_unknowns = [&]() {
        int k = static_cast<int>(m.flow_elems.size());
        for (int s : local_splits)
            if (!m.fixed_P_split.count(s) && !m.anchor_splits.count(s)) ++k;
        return k;
    };
    // When exactly one relation is missing and the return-collection split is
    // local, the implicit plant-side agent's constant pressure announcement
    // supplies it.
    if (ret_announced && local_splits.count(ret) && !m.fixed_P_split.count(ret) &&
        n_eq == count_unknowns() - 1)
        m.fixed_P_split[ret] = g.plant_out();

    int k = 0;
    for (int e : m.flow_elems) m.flow_idx[e] = k++;
    for (int s : local_splits) {
        if (m.fixed_P_split.count(s) || m.anchor_splits.count(s)) continue;
        m.free_P_idx[s] = k++;
    }

    if (m.owns_plant) {
        if (n_eq == k) {
            m.m0_is_decision = true;
        } else if (n_eq == k + 1) {
            m.m0_unknown = k++;
        } else {
            m.structurally_determinate = false;
        }
    } else if (n_eq != k) {
        m.structurally_determinate = false;
    }
    if (!m.structurally_determinate)
        m.indeterminacy = "agent " + std::to_string(agent) + ": " + std::to_string(n_eq) +
                          " equations vs " + std::to_string(k) + " unknowns";
    m.n_unknowns = k;

    // Announced pressures: E_P edges from local to non-local elements.
    std::set<int> ann;
    for (auto [from, to] : topo.comm.e_P) {
        if (!local.count(from) || local.count(to)) continue;
        const auto& a = fg.elements[from];
        const auto& b = fg.elements[to];
        int shared = (a.head == b.tail) ? a.head : (b.head == a.tail ? b.head : -1);
        if (shared >= 0) ann.insert(shared);
    }
    m.announce_P_splits.assign(ann.begin(), ann.end());

    // Thermal wiring.
    auto classify = [&](int up) {
        AgentModel::Upstream u;
        u.elem = up;
        if (g.kinds[up] == ElementKind::PlantIn)
            u.kind = AgentModel::Upstream::Kind::Plant;
        else if (g.kinds[up] == ElementKind::User)
            u.kind = AgentModel::Upstream::Kind::User;
        else
            u.kind = local.count(up) ? AgentModel::Upstream::Kind::LocalPipe
                                     : AgentModel::Upstream::Kind::CommPipe;
        u.flow_local = local.count(up) && !is_plant(g.kinds[up]);
        m.need_T.insert(up);
        return u;
    };
    for (int p : m.local_pipes) {
        std::vector<AgentModel::Upstream> ups;
        for (int up : g.in[p]) {
            auto u = classify(up);
            if (!u.flow_local && g.in[p].size() > 1 && !comm_flows.count(up) &&
                g.kinds[up] != ElementKind::PlantIn) {
                m.structurally_determinate = false;
                m.indeterminacy = "mixing weight for element " + std::to_string(up) +
                                  " unavailable at pipe " + std::to_string(p);
            }
            ups.push_back(u);
        }
        m.pipe_upstream[p] = ups;
    }
    for (int u : m.local_users) {
        if (g.in[u].empty()) throw TopologyError("user without upstream element");
        m.user_upstream[u] = classify(g.in[u].front());
    }
    // need_T keeps only true external dependencies, matching Eq.-(17) semantics.
    for (int e : m.elems) m.need_T.erase(e);
    return m;
}

/// Finite-horizon problem for one agent under fixed communicated values.
struct OcpSpec {
    const NetworkTopology* topo = nullptr;
    const Scenario* scenario = nullptr;
    AgentModel model;
    BoundaryValues boundary;
    LocalState init;
    int horizon = 6;
};

struct OcpSolution {
    OcpStatus status = OcpStatus::Optimal;
    Eigen::VectorXd decisions;                 // packed controls
    double cost = 0.0;
    double stationarity = 0.0;
    // Announced trajectories, one entry per control step.
    std::map<int, std::vector<double>> pipe_T;    // local pipe temps
    std::map<int, std::vector<double>> elem_m;    // local element flows (incl. v0-)
    std::map<int, std::vector<double>> split_P;   // announced split pressures
    std::map<int, std::vector<double>> S_b;       // local user states, J
    std::map<int, std::vector<double>> Q_hx;      // delivered heat, W
    double m0 = 0.0;                              // first-step plant flow if owned
    std::string message;
};

namespace detail {

struct RolloutOutputs {
    std::map<int, std::vector<double>> pipe_T, elem_m, split_P, S_b, Q_hx;
};

/// Solves the agent's per-step algebraic system in doubles via damped Newton,
/// then (for Dual inputs) applies one implicit-function correction step so the
/// unknowns carry exact first-order sensitivities.
class LocalHydraulics {
  public:
    LocalHydraulics(const OcpSpec& spec) : spec_(spec), mdl_(spec.model) {
        const auto& topo = *spec_.topo;
        zeta_pipe_.assign(topo.comp.n, 0.0);
        for (int e : mdl_.flow_elems) {
            const auto& el = topo.flow.elements[e];
            if (is_pipe(el.kind))
                zeta_pipe_[e] = spec_.scenario->phys.zeta_per_km_kg *
                                (el.length_m / 1000.0) * kZetaUnit_Pa;
        }
    }

    /// theta by local-user order; m0 used when the plant flow is a decision.
    template <typename Scalar>
    void solve(const std::vector<Scalar>& theta, const Scalar& m0, int step,
               std::vector<Scalar>& flows_out, std::vector<Scalar>& free_P_out,
               Scalar* m0_out) {
        const int n = mdl_.n_unknowns;
        // Value-level Newton.
        Eigen::VectorXd x = warm_.size() == n ? warm_ : initial_guess();
        Eigen::VectorXd r(n), dx(n);
        Eigen::MatrixXd J(n, n);
        std::vector<double> th(theta.size());
        for (size_t i = 0; i < theta.size(); ++i) th[i] = value(theta[i]);
        double m0v = value(m0);
        bool ok = false;
        for (int it = 0; it < 120; ++it) {
            residual(x, th, m0v, step, r, &J);
            if (r.lpNorm<Eigen::Infinity>() <= 1e-9 * scale()) {
                ok = true;
                break;
            }
            Eigen::PartialPivLU<Eigen::MatrixXd> lu(J);
            dx = lu.solve(-r);
            if (!dx.allFinite()) throw SolverError("singular local hydraulic Jacobian");
            double f0 = r.squaredNorm(), t = 1.0;
            bool accepted = false;
            for (int ls = 0; ls < 50; ++ls) {
                Eigen::VectorXd xt = x + t * dx;
                Eigen::VectorXd rt(n);
                residual(xt, th, m0v, step, rt, nullptr);
                bool enough = rt.squaredNorm() < f0 * (1.0 - 1e-4 * t) ||
                              (t < 1e-3 && rt.squaredNorm() < f0) ||
                              rt.squaredNorm() < 1e-28;
                if (enough) {
                    x = xt;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if (!accepted) break;
        }
        if (!ok) {
            residual(x, th, m0v, step, r, nullptr);
            if (r.lpNorm<Eigen::Infinity>() > 1e-7 * scale()) {
#ifdef DHN_DEBUG_LOCAL_SOLVE
                std::fprintf(stderr, "[local solve fail] step=%d m0=%g th:", step, m0v);
                for (double t : th) std::fprintf(stderr, " %g", t);
                std::fprintf(stderr, "\n  x:");
                for (int i = 0; i < n; ++i) std::fprintf(stderr, " %g", x(i));
                std::fprintf(stderr, "\n  r:");
                for (int i = 0; i < n; ++i) std::fprintf(stderr, " %g", r(i));
                std::fprintf(stderr, "\n");
#endif
                throw SolverError("local hydraulic solve failed (" +
                                  std::to_string(r.lpNorm<Eigen::Infinity>()) + ")");
            }
        }
        for (int e : mdl_.flow_elems)
            if (x(mdl_.flow_idx.at(e)) < -1e-8)
                throw SolverError("negative local flow on element " + std::to_string(e));
        warm_ = x;

        std::vector<Scalar> xs(n);
        if constexpr (std::is_same_v<Scalar, double>) {
            for (int i = 0; i < n; ++i) xs[i] = x(i);
        } else {
            // Implicit-function correction: one dual Newton step at the solution.
            std::vector<Scalar> rs(n);
            residual_t<Scalar>(x, theta, m0, step, rs);
            residual(x, th, m0v, step, r, &J);
            Eigen::PartialPivLU<Eigen::MatrixXd> lu(J);
            int dim = 0;
            for (const auto& ri : rs) dim = std::max<int>(dim, ri.grad().size());
            Eigen::VectorXd rv(n);
            Eigen::MatrixXd rg = Eigen::MatrixXd::Zero(n, dim);
            for (int i = 0; i < n; ++i) {
                rv(i) = rs[i].value();
                if (rs[i].grad().size() > 0) rg.row(i) = rs[i].grad().transpose();
            }
            Eigen::VectorXd dv = lu.solve(rv);
            Eigen::MatrixXd dg = dim > 0 ? lu.solve(rg) : rg;
            for (int i = 0; i < n; ++i) {
                xs[i] = Scalar(x(i) - dv(i));
                if (dim > 0) xs[i].grad() = -dg.row(i).transpose();
            }
        }
        flows_out.resize(mdl_.flow_elems.size());
        for (size_t i = 0; i < mdl_.flow_elems.size(); ++i)
            flows_out[i] = xs[mdl_.flow_idx.at(mdl_.flow_elems[i])];
        free_P_out.clear();
        for (const auto& [s, idx] : mdl_.free_P_idx) free_P_out.push_back(xs[idx]);
        if (m0_out) {
            if (mdl_.m0_unknown >= 0)
                *m0_out = xs[mdl_.m0_unknown];
            else
                *m0_out = m0;
        }
    }

    void reset() { warm_.resize(0); }

    double pressure_at(int split, int step, const Eigen::VectorXd& xs) const {
        auto it = mdl_.free_P_idx.find(split);
        if (it != mdl_.free_P_idx.end()) return xs(it->second);
        if (mdl_.anchor_splits.count(split)) return 0.0;
        return boundary_P(split, step);
    }

    double boundary_P(int split, int step) const {
        auto it = spec_.boundary.split_P.find(split);
        if (it == spec_.boundary.split_P.end())
            throw SolverError("missing communicated pressure for split " +
                              std::to_string(split));
        return it->second.at(step);
    }
    double boundary_m(int elem, int step) const {
        auto it = spec_.boundary.elem_m.find(elem);
        if (it == spec_.boundary.elem_m.end())
            throw SolverError("missing communicated flow for element " + std::to_string(elem));
        return it->second.at(step);
    }

  private:
    Eigen::VectorXd initial_guess() const {
        Eigen::VectorXd x = Eigen::VectorXd::Zero(mdl_.n_unknowns);
        for (int e : mdl_.flow_elems) x(mdl_.flow_idx.at(e)) = 1.0;
        if (mdl_.m0_unknown >= 0) x(mdl_.m0_unknown) = 1.0;
        return x;
    }
    double scale() const { return 1.0; }

    template <typename Scalar>
    Scalar pressure_of(const std::vector<Scalar>& xs, int split, int step) const {
        auto it = mdl_.free_P_idx.find(split);
        if (it != mdl_.free_P_idx.end()) return xs[it->second];
        if (mdl_.anchor_splits.count(split)) return Scalar(0.0);
        return Scalar(boundary_P(split, step));
    }

    template <typename Scalar>
    void residual_t(const Eigen::VectorXd& xval, const std::vector<Scalar>& theta,
                    const Scalar& m0, int step, std::vector<Scalar>& r) const {
        const auto& fg = spec_.topo->flow;
        const auto& phys = spec_.scenario->phys;
        const int n = mdl_.n_unknowns;
        std::vector<Scalar> xs(n);
        for (int i = 0; i < n; ++i) xs[i] = Scalar(xval(i));
        r.assign(n, Scalar(0.0));
        int row = 0;
        for (int e : mdl_.flow_elems) {
            const auto& el = fg.elements[e];
            Scalar mflow = xs[mdl_.flow_idx.at(e)];
            Scalar z;
            if (el.kind == ElementKind::User) {
                size_t ui = std::lower_bound(mdl_.local_users.begin(), mdl_.local_users.end(), e) -
                            mdl_.local_users.begin();
                z = Scalar(kZetaUnit_Pa) * valve_friction(theta[ui], phys.mu, phys.theta_min);
            } else {
                z = Scalar(zeta_pipe_[e]);
            }
            // Pressure rows are expressed in bar so they share the O(1) scale
            // of the mass-balance rows.
            r[row] = (z * mflow * abs(mflow) -
                      (pressure_of(xs, el.tail, step) - pressure_of(xs, el.head, step))) *
                     Scalar(1.0 / kZetaUnit_Pa);
            ++row;
        }
        const int v0m = spec_.topo->comp.plant_in();
        for (int s : mdl_.balance_splits) {
            Scalar acc(0.0);
            for (const auto& el : fg.elements) {
                double sgn = (el.head == s) ? 1.0 : (el.tail == s) ? -1.0 : 0.0;
                if (sgn == 0.0) continue;
                auto fit = mdl_.flow_idx.find(el.id);
                if (fit != mdl_.flow_idx.end()) {
                    acc += Scalar(sgn) * xs[fit->second];
                } else if (el.id == v0m) {
                    if (mdl_.owns_plant)
                        acc += Scalar(sgn) * (mdl_.m0_unknown >= 0
                                                  ? xs[mdl_.m0_unknown]
                                                  : m0);
                    else
                        acc += Scalar(sgn * boundary_m(el.id, step));
                } else if (el.kind != ElementKind::PlantOut) {
                    acc += Scalar(sgn * boundary_m(el.id, step));
                }
            }
            r[row++] = acc;
        }
    }

    void residual(const Eigen::VectorXd& x, const std::vector<double>& theta, double m0,
                  int step, Eigen::VectorXd& r, Eigen::MatrixXd* J) const {
        const auto& fg = spec_.topo->flow;
        const auto& phys = spec_.scenario->phys;
        const int n = mdl_.n_unknowns;
        r.setZero(n);
        if (J) J->setZero(n, n);
        auto pidx = [&](int split) {
            auto it = mdl_.free_P_idx.find(split);
            return it == mdl_.free_P_idx.end() ? -1 : it->second;
        };
        auto pval = [&](int split, int kstep) {
            int i = pidx(split);
            if (i >= 0) return x(i);
            if (mdl_.anchor_splits.count(split)) return 0.0;
            return boundary_P(split, kstep);
        };
        int row = 0;
        for (int e : mdl_.flow_elems) {
            const auto& el = fg.elements[e];
            double m = x(mdl_.flow_idx.at(e));
            double z;
            if (el.kind == ElementKind::User) {
                size_t ui = std::lower_bound(mdl_.local_users.begin(), mdl_.local_users.end(), e) -
                            mdl_.local_users.begin();
                z = kZetaUnit_Pa * valve_friction(theta[ui], phys.mu, phys.theta_min);
            } else {
                z = zeta_pipe_[e];
            }
            const double inv = 1.0 / kZetaUnit_Pa;  // pressure rows in bar
            r(row) = (z * m * std::abs(m) - (pval(el.tail, step) - pval(el.head, step))) * inv;
            if (J) {
                // Floor keeps the Jacobian nonsingular at the m=0 kink.
                (*J)(row, mdl_.flow_idx.at(e)) =
                    std::max(2.0 * z * std::abs(m), 2e-6 * z) * inv;
                if (int i = pidx(el.tail); i >= 0) (*J)(row, i) = -inv;
                if (int i = pidx(el.head); i >= 0) (*J)(row, i) = inv;
            }
            ++row;
        }
        const int v0m = spec_.topo->comp.plant_in();
        for (int s : mdl_.balance_splits) {
            for (const auto& el : fg.elements) {
                double sgn = (el.head == s) ? 1.0 : (el.tail == s) ? -1.0 : 0.0;
                if (sgn == 0.0) continue;
                auto fit = mdl_.flow_idx.find(el.id);
                if (fit != mdl_.flow_idx.end()) {
                    r(row) += sgn * x(fit->second);
                    if (J) (*J)(row, fit->second) += sgn;
                } else if (el.id == v0m) {
                    if (mdl_.owns_plant) {
                        if (mdl_.m0_unknown >= 0) {
                            r(row) += sgn * x(mdl_.m0_unknown);
                            if (J) (*J)(row, mdl_.m0_unknown) += sgn;
                        } else {
                            r(row) += sgn * m0;
                        }
                    } else {
                        r(row) += sgn * boundary_m(el.id, step);
                    }
                } else if (el.kind != ElementKind::PlantOut) {
                    r(row) += sgn * boundary_m(el.id, step);
                }
            }
            ++row;
        }
    }

    const OcpSpec& spec_;
    const AgentModel& mdl_;
    std::vector<double> zeta_pipe_;
    Eigen::VectorXd warm_;
};

}  // namespace detail

/// Reduced single-agent OCP: decisions are the local valve positions (and the
/// plant flow when free), everything else is eliminated through the local
/// algebraic system and the explicit thermal rollout.
class OcpProblem {
  public:
    explicit OcpProblem(OcpSpec spec) : spec_(std::move(spec)), hyd_(spec_) {
        const auto& m = spec_.model;
        if (!m.structurally_determinate)
            throw SolverError("structurally indeterminate agent: " + m.indeterminacy);
        n_theta_ = static_cast<int>(m.local_users.size());
        per_step_ = n_theta_ + (m.m0_is_decision ? 1 : 0);
        nu_ = per_step_ * spec_.horizon;
        if (nu_ > kMaxDualDim)
            throw ConfigError("decision dimension exceeds dual capacity");
    }

    int num_decisions() const { return nu_; }
    const OcpSpec& spec() const { return spec_; }

    std::vector<int> m0_indices() const {
        std::vector<int> idx;
        if (spec_.model.m0_is_decision)
            for (int k = 0; k < spec_.horizon; ++k) idx.push_back(k * per_step_ + n_theta_);
        return idx;
    }

    Eigen::VectorXd lower_bounds() const { return bounds(true); }
    Eigen::VectorXd upper_bounds() const { return bounds(false); }

    Eigen::VectorXd initial_guess() const {
        Eigen::VectorXd u(nu_);
        const auto& ctrl = spec_.scenario->ctrl;
        double m0g = guess_m0();
        for (int k = 0; k < spec_.horizon; ++k) {
            for (int i = 0; i < n_theta_; ++i) u(k * per_step_ + i) = 0.5;
            if (spec_.model.m0_is_decision)
                u(k * per_step_ + n_theta_) =
                    std::clamp(m0g, ctrl.m0_min, ctrl.m0_max);
        }
        return u;
    }

    /// Objective + S_b bound constraints (g <= 0), optionally with outputs.
    template <typename Scalar>
    Scalar evaluate(const std::vector<Scalar>& u, std::vector<Scalar>* constraints,
                    detail::RolloutOutputs* out) const {
        const auto& m = spec_.model;
        const auto& sc = *spec_.scenario;
        const auto& topo = *spec_.topo;
        const int H = spec_.horizon;
        const int nsub = sc.ctrl.substeps_per_step();
        const double dt = sc.ctrl.substep_s;

        hyd_.reset();
        std::map<int, Scalar> T;
        std::map<int, Scalar> S;
        for (int p : m.local_pipes) T[p] = Scalar(spec_.init.T_p.at(p));
        std::vector<double> cap(m.local_users.size());
        std::vector<double> demand0(m.local_users.size());
        for (size_t i = 0; i < m.local_users.size(); ++i) {
            int uid = m.local_users[i];
            const auto& b = sc.buildings.at(topo.flow.elements[uid].name);
            cap[i] = b.C_b_JK * sc.phys.dT_b_C;
            S[uid] = Scalar(spec_.init.S_b.at(uid));
        }
        std::vector<double> hA(m.local_pipes.size());
        for (size_t i = 0; i < m.local_pipes.size(); ++i)
            hA[i] = pipe_thermal_params(topo.flow.elements[m.local_pipes[i]], sc.phys).hA;

        if (out) {
            for (int p : m.local_pipes) out->pipe_T[p].assign(H, 0.0);
            for (int e : m.flow_elems) out->elem_m[e].assign(H, 0.0);
            if (m.owns_plant) out->elem_m[topo.comp.plant_in()].assign(H, 0.0);
            for (int s : m.announce_P_splits) out->split_P[s].assign(H, 0.0);
            for (int uid : m.local_users) {
                out->S_b[uid].assign(H, 0.0);
                out->Q_hx[uid].assign(H, 0.0);
            }
        }
        if (constraints) constraints->clear();

        Scalar cost(0.0);
        for (int k = 0; k < H; ++k) {
            std::vector<Scalar> theta(n_theta_);
            for (int i = 0; i < n_theta_; ++i) theta[i] = u[k * per_step_ + i];
            Scalar m0 = m.m0_is_decision ? u[k * per_step_ + n_theta_] : Scalar(0.0);

            std::vector<Scalar> flows, freeP;
            Scalar m0_val(0.0);
            hyd_.solve(theta, m0, k, flows, freeP, &m0_val);
            auto flow_of = [&](int e) -> Scalar {
                auto it = m.flow_idx.find(e);
                if (it != m.flow_idx.end()) return flows[it->second];
                if (e == topo.comp.plant_in() && m.owns_plant) return m0_val;
                return Scalar(hyd_.boundary_m(e, k));
            };

            // Thermal substeps under the fixed per-step hydraulics.
            for (int ss = 0; ss < nsub; ++ss) {
                std::map<int, Scalar> Tn = T;
                for (int p : m.local_pipes) {
                    const auto& ups = m.pipe_upstream.at(p);
                    Scalar T_in(0.0);
                    if (ups.size() == 1) {
                        T_in = upstream_T(ups[0], T, k);
                    } else {
                        Scalar wsum(0.0), tsum(0.0);
                        for (const auto& us : ups) {
                            Scalar w = us.kind == AgentModel::Upstream::Kind::Plant
                                           ? (m.owns_plant ? m0_val
                                                           : Scalar(hyd_.boundary_m(us.elem, k)))
                                           : flow_of(us.elem);
                            wsum += w;
                            tsum += w * upstream_T(us, T, k);
                        }
                        if (value(wsum) <= 1e-12) {
                            if (value(flow_of(p)) > 1e-9)
                                throw SolverError("singular mixing at pipe " + std::to_string(p));
                            T_in = T.at(p);
                        } else {
                            T_in = tsum / wsum;
                        }
                    }
                    auto pp = pipe_thermal_params(topo.flow.elements[p], sc.phys);
                    Tn[p] = pipe_temp_step(T.at(p), T_in, flow_of(p), pp, sc.phys,
                                           sc.phys.T_amb_C, dt);
                }
                for (size_t i = 0; i < m.local_users.size(); ++i) {
                    int uid = m.local_users[i];
                    Scalar T_hx = upstream_T(m.user_upstream.at(uid), T, k);
                    double q_amb = demand_at(uid, k);
                    auto [Sn, Qhx] = soe_step(S.at(uid), flow_of(uid), T_hx, q_amb, sc.phys, dt);
                    S[uid] = Sn;
                    if (out && ss == nsub - 1) out->Q_hx[uid][k] = value(Qhx);
                }
                T = Tn;
            }

            // Stage cost and flexibility bounds at the end of the control step.
            std::vector<Scalar> Svec, Tvec;
            for (size_t i = 0; i < m.local_users.size(); ++i) Svec.push_back(S.at(m.local_users[i]));
            for (int p : m.local_pipes) Tvec.push_back(T.at(p));
            cost += stage_cost(Svec, cap, Tvec, hA, sc.phys.T_amb_C, sc.ctrl.w_C, sc.ctrl.w_Q);
            if (constraints) {
                for (size_t i = 0; i < Svec.size(); ++i) {
                    constraints->push_back(Svec[i] - Scalar(cap[i]));
                    constraints->push_back(-Svec[i] - Scalar(cap[i]));
                }
            }
            if (out) {
                for (int p : m.local_pipes) out->pipe_T[p][k] = value(T.at(p));
                for (int e : m.flow_elems) out->elem_m[e][k] = value(flow_of(e));
                if (m.owns_plant) out->elem_m[topo.comp.plant_in()][k] = value(m0_val);
                {
                    Eigen::VectorXd xs(spec_.model.n_unknowns);
                    int j = 0;
                    for (const auto& [split, idx] : m.free_P_idx) {
                        (void)split;
                        xs(idx) = value(freeP[j++]);
                    }
                    for (int e : m.flow_elems) xs(m.flow_idx.at(e)) = value(flow_of(e));
                    if (m.m0_unknown >= 0) xs(m.m0_unknown) = value(m0_val);
                    for (int s : m.announce_P_splits)
                        out->split_P[s][k] = hyd_.pressure_at(s, k, xs);
                }
                for (int uid : m.local_users) out->S_b[uid][k] = value(S.at(uid));
            }
        }
        return cost;
    }

    double demand_at(int user_elem, int step) const {
        const auto& b =
            spec_.scenario->buildings.at(spec_.topo->flow.elements[user_elem].name);
        int idx = demand_offset_ + step;
        if (b.demand_W.empty()) return 0.0;
        return b.demand_W[std::min<int>(idx, b.demand_W.size() - 1)];
    }
    void set_demand_offset(int steps) { demand_offset_ = steps; }
    void set_boundary(BoundaryValues b) { spec_.boundary = std::move(b); }
    void set_init(LocalState s) { spec_.init = std::move(s); }

  private:
    template <typename Scalar>
    Scalar upstream_T(const AgentModel::Upstream& us, const std::map<int, Scalar>& T,
                      int step) const {
        switch (us.kind) {
            case AgentModel::Upstream::Kind::Plant:
                return Scalar(spec_.scenario->phys.T0_C);
            case AgentModel::Upstream::Kind::User:
                return Scalar(spec_.scenario->phys.T_setR_C);
            case AgentModel::Upstream::Kind::LocalPipe:
                return T.at(us.elem);
            case AgentModel::Upstream::Kind::CommPipe: {
                auto it = spec_.boundary.pipe_T.find(us.elem);
                if (it == spec_.boundary.pipe_T.end())
                    throw SolverError("missing communicated temperature for element " +
                                      std::to_string(us.elem));
                return Scalar(it->second.at(step));
            }
        }
        return Scalar(0.0);
    }

    Eigen::VectorXd bounds(bool lower) const {
        const auto& phys = spec_.scenario->phys;
        const auto& ctrl = spec_.scenario->ctrl;
        Eigen::VectorXd b(nu_);
        for (int k = 0; k < spec_.horizon; ++k) {
            for (int i = 0; i < n_theta_; ++i)
                b(k * per_step_ + i) = lower ? phys.theta_min : 1.0;
            if (spec_.model.m0_is_decision)
                b(k * per_step_ + n_theta_) = lower ? ctrl.m0_min : ctrl.m0_max;
        }
        return b;
    }

    double guess_m0() const {
        const auto& sc = *spec_.scenario;
        double q = 0.0;
        for (const auto& [name, b] : sc.buildings)
            q += b.demand_W.empty() ? 0.0 : b.demand_W.front();
        double dT = std::max(1.0, sc.phys.T0_C - sc.phys.T_setR_C);
        return std::max(sc.ctrl.m0_min, q / (sc.phys.c_p * dT));
    }

    OcpSpec spec_;
    mutable detail::LocalHydraulics hyd_;
    int n_theta_ = 0, per_step_ = 0, nu_ = 0;
    int demand_offset_ = 0;
};

inline OcpSpec assemble_ocp(const NetworkTopology& topo, const Scenario& sc,
                            const Partition& part, int agent, const NeighborSets& ns,
                            BoundaryValues boundary, LocalState init) {
    OcpSpec spec;
    spec.topo = &topo;
    spec.scenario = &sc;
    spec.model = build_agent_model(topo, part, agent, ns);
    spec.horizon = sc.ctrl.horizon_steps();
    // Boundary coverage check: every consumed neighbor value must be present.
    for (int e : spec.model.need_m)
        if (!boundary.elem_m.count(e))
            throw SolverError("missing boundary flow for component " + std::to_string(e));
    for (const auto& [split, ann] : spec.model.fixed_P_split) {
        (void)ann;
        if (!boundary.split_P.count(split))
            throw SolverError("missing boundary pressure for split " + std::to_string(split));
    }
    for (int e : spec.model.need_T)
        if (is_pipe(topo.comp.kinds[e]) && !boundary.pipe_T.count(e))
            throw SolverError("missing boundary temperature for component " + std::to_string(e));
    spec.boundary = std::move(boundary);
    spec.init = std::move(init);
    return spec;
}

namespace detail {

/// Projected-gradient L-BFGS with Armijo backtracking on box constraints.
/// Returns the stationarity measure ||x - P(x - grad)||_inf at the solution.
struct BoxLbfgs {
    int max_iter = 400;
    double tol = 1e-9;
    int memory = 10;

    template <typename F>
    double minimize(F&& fg, Eigen::VectorXd& x, const Eigen::VectorXd& lo,
                    const Eigen::VectorXd& hi, double* fout, bool* converged) const {
        const int n = static_cast<int>(x.size());
        auto proj = [&](Eigen::VectorXd v) {
            for (int i = 0; i < n; ++i) v(i) = std::clamp(v(i), lo(i), hi(i));
            return v;
        };
        Eigen::VectorXd g(n), gn(n);
        double f = fg(x, &g);
        std::vector<Eigen::VectorXd> sk, yk;
        double stat = (x - proj(x - g)).template lpNorm<Eigen::Infinity>();
        *converged = stat <= tol * (1.0 + std::abs(f));
        for (int it = 0; it < max_iter && !*converged; ++it) {
            // Two-loop recursion on the free subspace.
            Eigen::VectorXd d = -g;
            std::vector<double> alpha(sk.size());
            for (int i = static_cast<int>(sk.size()) - 1; i >= 0; --i) {
                double rho = 1.0 / yk[i].dot(sk[i]);
                alpha[i] = rho * sk[i].dot(d);
                d -= alpha[i] * yk[i];
            }
            if (!sk.empty()) {
                double gamma = sk.back().dot(yk.back()) / yk.back().squaredNorm();
                d *= gamma;
            }
            for (size_t i = 0; i < sk.size(); ++i) {
                double rho = 1.0 / yk[i].dot(sk[i]);
                double beta = rho * yk[i].dot(d);
                d += (alpha[i] - beta) * sk[i];
            }
            if (d.dot(g) > -1e-14 * d.norm() * g.norm()) d = -g;

            double t = 1.0, fn = f;
            Eigen::VectorXd xn;
            bool accepted = false;
            for (int ls = 0; ls < 40; ++ls) {
                xn = proj(x + t * d);
                Eigen::VectorXd step = xn - x;
                if (step.lpNorm<Eigen::Infinity>() < 1e-16) break;
                bool ok = true;
                try {
                    fn = fg(xn, nullptr);  // value only; gradient after acceptance
                } catch (const SolverError&) {
                    ok = false;
                }
                if (ok && fn <= f + 1e-4 * g.dot(step)) {
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if (!accepted) {
                // Fall back to a projected steepest-descent probe before giving up.
                t = 1e-2 / std::max(1.0, g.lpNorm<Eigen::Infinity>());
                bool ok = false;
                for (int ls = 0; ls < 30 && !ok; ++ls, t *= 0.5) {
                    xn = proj(x - t * g);
                    if ((xn - x).lpNorm<Eigen::Infinity>() < 1e-16) break;
                    try {
                        fn = fg(xn, nullptr);
                        ok = fn < f;
                    } catch (const SolverError&) {
                    }
                }
                if (!ok) break;
            }
            fn = fg(xn, &gn);
            Eigen::VectorXd s = xn - x, y = gn - g;
            if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
                sk.push_back(s);
                yk.push_back(y);
                if (static_cast<int>(sk.size()) > memory) {
                    sk.erase(sk.begin());
                    yk.erase(yk.begin());
                }
            }
            x = xn;
            f = fn;
            g = gn;
            stat = (x - proj(x - g)).template lpNorm<Eigen::Infinity>();
            *converged = stat <= tol * (1.0 + std::abs(f));
        }
        *fout = f;
        return stat;
    }
};

}  // namespace detail

/// Solves the agent problem: augmented-Lagrangian outer loop over the state
/// bounds (usually inactive), projected L-BFGS inner loop, exact AD gradients.
inline OcpSolution solve_ocp(const OcpProblem& prob,
                             const Eigen::VectorXd* warm_start = nullptr) {
    OcpSolution sol;
    const int nu = prob.num_decisions();
    Eigen::VectorXd x = warm_start && warm_start->size() == nu ? *warm_start
                                                               : prob.initial_guess();
    Eigen::VectorXd lo = prob.lower_bounds(), hi = prob.upper_bounds();
    for (int i = 0; i < nu; ++i) x(i) = std::clamp(x(i), lo(i), hi(i));

    // Feasible starting point: warm start, then the default guess, then the
    // default with the plant flow scaled up (communicated draws may exceed it).
    int n_con = 0;
    {
        auto feasible = [&](const Eigen::VectorXd& xv, int* nc) {
            std::vector<double> u(xv.data(), xv.data() + nu);
            std::vector<double> con;
            try {
                prob.evaluate(u, &con, nullptr);
            } catch (const SolverError& e) {
                sol.message = e.what();
                return false;
            }
            *nc = static_cast<int>(con.size());
            return true;
        };
        bool ok = feasible(x, &n_con);
        if (!ok && warm_start) {
            x = prob.initial_guess();
            for (int i = 0; i < nu; ++i) x(i) = std::clamp(x(i), lo(i), hi(i));
            ok = feasible(x, &n_con);
        }
        auto m0i = prob.m0_indices();
        for (double scale = 2.0; !ok && !m0i.empty() && scale <= 64.0; scale *= 2.0) {
            Eigen::VectorXd xt = prob.initial_guess();
            for (int i : m0i) xt(i) = std::min(hi(i), xt(i) * scale);
            for (int i = 0; i < nu; ++i) xt(i) = std::clamp(xt(i), lo(i), hi(i));
            if ((ok = feasible(xt, &n_con))) x = xt;
        }
        if (!ok) {
            sol.status = OcpStatus::Infeasible;
            return sol;
        }
    }
    Eigen::VectorXd lambda = Eigen::VectorXd::Zero(n_con);
    double mu_pen = 1e-6;  // constraints are in joules; scale accordingly
    double cscale = 1.0;

    detail::BoxLbfgs inner;
    double f = 0.0;
    bool conv = false;
    double stat = 0.0;
    std::vector<double> con_vals(n_con, 0.0);

    auto fg = [&](const Eigen::VectorXd& xv, Eigen::VectorXd* grad) {
        if (!grad) {
            std::vector<double> u(xv.data(), xv.data() + nu);
            std::vector<double> con;
            double c = prob.evaluate(u, &con, static_cast<detail::RolloutOutputs*>(nullptr));
            double L = c;
            for (int j = 0; j < n_con; ++j) {
                double gj = con[j] / cscale;
                double t = lambda(j) + mu_pen * gj * cscale;
                if (t > 0.0)
                    L += lambda(j) * gj * cscale + 0.5 * mu_pen * cscale * cscale * gj * gj;
                con_vals[j] = con[j];
            }
            return L;
        }
        std::vector<Dual> u(nu);
        for (int i = 0; i < nu; ++i) u[i] = Dual::variable(xv(i), i, nu);
        std::vector<Dual> con;
        Dual c = prob.evaluate(u, &con, static_cast<detail::RolloutOutputs*>(nullptr));
        Dual L = c;
        for (int j = 0; j < n_con; ++j) {
            Dual gj = con[j] * Dual(1.0 / cscale);
            double t = lambda(j) + mu_pen * value(gj) * cscale;
            if (t > 0.0) {
                Dual viol = Dual(lambda(j)) * gj * Dual(cscale) +
                            Dual(0.5 * mu_pen * cscale * cscale) * gj * gj;
                L += viol;
            }
            con_vals[j] = value(con[j]);
        }
        grad->resize(nu);
        if (L.grad().size() == nu)
            *grad = L.grad();
        else
            grad->setZero();
        return value(L);
    };

    for (int outer = 0; outer < 8; ++outer) {
        try {
            stat = inner.minimize(fg, x, lo, hi, &f, &conv);
        } catch (const SolverError& e) {
            sol.status = OcpStatus::Infeasible;
            sol.message = e.what();
            return sol;
        }
        double viol = 0.0;
        for (int j = 0; j < n_con; ++j) viol = std::max(viol, con_vals[j]);
        if (viol <= 1e-3) break;  // joules; |S_b| capacity is O(1e8)
        for (int j = 0; j < n_con; ++j)
            lambda(j) = std::max(0.0, lambda(j) + mu_pen * con_vals[j]);
        mu_pen *= 10.0;
    }

    sol.decisions = x;
    sol.stationarity = stat;
    sol.status = conv ? OcpStatus::Optimal : OcpStatus::MaxIter;

    // Final evaluation for the reported trajectories and cost.
    std::vector<double> u(x.data(), x.data() + nu);
    detail::RolloutOutputs out;
    try {
        sol.cost = prob.evaluate(u, static_cast<std::vector<double>*>(nullptr), &out);
    } catch (const SolverError& e) {
        sol.status = OcpStatus::Infeasible;
        sol.message = e.what();
        return sol;
    }
    sol.pipe_T = std::move(out.pipe_T);
    sol.elem_m = std::move(out.elem_m);
    sol.split_P = std::move(out.split_P);
    sol.S_b = std::move(out.S_b);
    sol.Q_hx = std::move(out.Q_hx);
    if (prob.spec().model.owns_plant) {
        int v0m = prob.spec().topo->comp.plant_in();
        sol.m0 = sol.elem_m.at(v0m).front();
    }
    return sol;
}

}  // namespace dhn
