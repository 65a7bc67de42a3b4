#pragma once

#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dhn/ocp.hpp"
#include "dhn/thermal.hpp"

namespace dhn {

/// Bus of communicated trajectories, one entry per control step. Keys are
/// element ids (temperatures, flows) or split ids (pressures).
struct CommValues {
    std::map<int, std::vector<double>> pipe_T;
    std::map<int, std::vector<double>> elem_m;
    std::map<int, std::vector<double>> split_P;
    std::map<int, double> agent_cost;  // by agent index
};

/// Relaxed update x <- omega*incoming + (1-omega)*x, elementwise over the
/// trajectories. Every incoming key must already exist on the receiving side.
inline void communication_update(CommValues& relaxed, const CommValues& incoming,
                                 double omega) {
    auto merge = [&](auto& dst, const auto& src, const char* what) {
        for (const auto& [key, traj] : src) {
            auto it = dst.find(key);
            if (it == dst.end())
                throw ProtocolError(std::string("communicated ") + what + " for unknown key " +
                                    std::to_string(key));
            if (it->second.size() != traj.size())
                throw ProtocolError(std::string("trajectory length mismatch on ") + what +
                                    " key " + std::to_string(key));
            for (size_t k = 0; k < traj.size(); ++k)
                it->second[k] = omega * traj[k] + (1.0 - omega) * it->second[k];
        }
    };
    merge(relaxed.pipe_T, incoming.pipe_T, "temperature");
    merge(relaxed.elem_m, incoming.elem_m, "flow");
    merge(relaxed.split_P, incoming.split_P, "pressure");
    for (const auto& [a, c] : incoming.agent_cost) {
        auto it = relaxed.agent_cost.find(a);
        if (it == relaxed.agent_cost.end())
            throw ProtocolError("cost announcement from unknown agent " + std::to_string(a));
        it->second = omega * c + (1.0 - omega) * it->second;
    }
}

struct ConsensusResult {
    bool converged = false;
    int rounds = 0;
    std::vector<int> agent_iters;   // per agent, 1-based
    std::vector<double> agent_costs;
    double total_cost = 0.0;
    std::vector<double> theta_users;  // first-step valves, topo.users() order
    double m0 = 0.0;                  // first-step plant flow
    // Full-horizon first agent trajectories for downstream evaluation.
    std::map<int, std::vector<double>> theta_traj;  // user elem id -> per step
    std::vector<double> m0_traj;
    std::string note;
};

/// Network-wide initial condition: feeding side at supply temperature, return
/// side at the heat-exchanger setpoint, storage states from the scenario.
inline ThermalState initial_state(const NetworkTopology& topo, const Scenario& sc) {
    ThermalState st;
    st.T_p.setZero(topo.comp.n);
    st.S_b.setZero(topo.comp.n);
    for (const auto& e : topo.flow.elements) {
        if (e.kind == ElementKind::Feeding || e.kind == ElementKind::Bypass)
            st.T_p(e.id) = sc.phys.T0_C;
        else if (e.kind == ElementKind::Return)
            st.T_p(e.id) = sc.phys.T_setR_C;
    }
    for (int u : topo.users()) {
        const auto& b = sc.buildings.at(topo.flow.elements[u].name);
        st.S_b(u) = b.S0_percent / 100.0 * b.C_b_JK * sc.phys.dT_b_C;
    }
    return st;
}

/// Synchronous-iteration consensus over one prediction horizon. Reusable
/// across control steps so warm starts persist.
class ConsensusEngine {
  public:
    ConsensusEngine(const NetworkTopology& topo, const Scenario& sc, const Partition& part)
        : topo_(topo), sc_(sc), part_(part) {
        ns_ = neighbor_sets(part, topo.comm, topo.comp);
        n_agents_ = part.n_agents();
        try {
            for (int a = 0; a < n_agents_; ++a) {
                OcpSpec spec;
                spec.topo = &topo_;
                spec.scenario = &sc_;
                spec.model = build_agent_model(topo_, part_, a, ns_);
                spec.horizon = sc_.ctrl.horizon_steps();
                probs_.push_back(std::make_unique<OcpProblem>(std::move(spec)));
            }
        } catch (const SolverError& e) {
            probs_.clear();
            dead_note_ = e.what();
        } catch (const ConfigError& e) {
            probs_.clear();
            dead_note_ = e.what();
        }
        warm_.assign(n_agents_, Eigen::VectorXd());
        // Agent receiving structure, for the neighbor part of the stop rule.
        in_agents_.assign(n_agents_, {});
        if (!probs_.empty()) {
            for (int a = 0; a < n_agents_; ++a) {
                const auto& m = probs_[a]->spec().model;
                std::set<int> in;
                auto owner = [&](int elem) { return part_.block_of(elem); };
                for (int e : m.need_m) in.insert(owner(e));
                for (int e : m.need_T)
                    if (is_pipe(topo_.comp.kinds[e])) in.insert(owner(e));
                for (const auto& [split, ann] : m.fixed_P_split) {
                    (void)split;
                    in.insert(owner(ann));
                }
                in.erase(a);
                in.erase(-1);
                in_agents_[a].assign(in.begin(), in.end());
            }
        }
    }

    bool viable() const { return !probs_.empty(); }
    const std::string& dead_note() const { return dead_note_; }

    void shift_warm_starts() {
        for (int a = 0; a < n_agents_; ++a) {
            auto& w = warm_[a];
            if (w.size() == 0) continue;
            const auto& m = probs_[a]->spec().model;
            int per = static_cast<int>(m.local_users.size()) + (m.m0_is_decision ? 1 : 0);
            int H = probs_[a]->spec().horizon;
            if (per == 0) continue;
            for (int k = 0; k + 1 < H; ++k)
                w.segment(k * per, per) = w.segment((k + 1) * per, per);
        }
    }

    ConsensusResult run(const ThermalState& st, int demand_offset,
                        const CommValues* bus0 = nullptr, CommValues* bus_out = nullptr) {
        ConsensusResult res;
        res.agent_iters.assign(n_agents_, 1);
        res.agent_costs.assign(n_agents_, 0.0);
        if (!viable()) {
            res.note = dead_note_.empty() ? "non-viable partition" : dead_note_;
            return res;
        }
        const auto& ctrl = sc_.ctrl;
        const int H = ctrl.horizon_steps();

        CommValues bus = bus0 ? *bus0 : initial_bus(st, demand_offset);
        std::vector<CommValues> prev_ann(n_agents_);
        std::vector<bool> have_prev(n_agents_, false);
        std::vector<bool> self_ok(n_agents_, false);
        std::vector<OcpSolution> sols(n_agents_);
        std::vector<int> fail_streak(n_agents_, 0);
        std::deque<double> delta_hist;
        double best_delta = std::numeric_limits<double>::infinity();
        int stall = 0;

        for (int a = 0; a < n_agents_; ++a)
            probs_[a]->set_demand_offset(demand_offset);

        int round = 0;
        for (round = 1; round <= ctrl.max_consensus_iters; ++round) {
            CommValues announce;
            double round_delta = 0.0;
            for (int a = 0; a < n_agents_; ++a) {
                auto& prob = *probs_[a];
                prob.set_boundary(extract_boundary(prob.spec().model, bus));
                prob.set_init(extract_init(prob.spec().model, st));
                OcpSolution sol = solve_ocp(prob, warm_[a].size() ? &warm_[a] : nullptr);
                if (sol.status == OcpStatus::Infeasible) {
                    // Transiently inconsistent communicated values can make a
                    // local problem infeasible mid-iteration; the agent then
                    // holds its last announcement for this round. Persistent
                    // failure ends the run as non-converged.
                    if (!have_prev[a] || ++fail_streak[a] > 5) {
                        res.rounds = round;
                        res.note = "agent " + std::to_string(a) + " infeasible: " + sol.message;
                        return res;
                    }
                    self_ok[a] = false;
                    res.agent_iters[a] = round;
                    round_delta = std::max(round_delta, 2.0);
                    merge_into(announce, prev_ann[a]);
                    continue;
                }
                fail_streak[a] = 0;
                warm_[a] = sol.decisions;
                CommValues ann;
                ann.pipe_T = sol.pipe_T;
                ann.elem_m = sol.elem_m;
                ann.split_P = sol.split_P;
                ann.agent_cost[a] = sol.cost;

                double d = have_prev[a] ? announcement_delta(prev_ann[a], ann, a) : 1e9;
                bool ok;
                if (!have_prev[a])
                    ok = in_agents_[a].empty();  // nothing received, nothing can change
                else
                    ok = d <= 1.0;
                round_delta = std::max(round_delta, have_prev[a] ? d : 0.0);
                self_ok[a] = ok;
                if (!ok) res.agent_iters[a] = round;
                prev_ann[a] = ann;
                have_prev[a] = true;
                sols[a] = std::move(sol);
                merge_into(announce, prev_ann[a]);
            }
            communication_update(bus, announce, ctrl.omega);

            bool all_ok = true;
            for (int a = 0; a < n_agents_; ++a) all_ok = all_ok && self_ok[a];
            if (all_ok) {
                res.converged = true;
                break;
            }
            // Early exit on a sustained blow-up of the normalized deltas.
            delta_hist.push_back(round_delta);
            if (delta_hist.size() > 5) delta_hist.pop_front();
            if (round >= 10 && delta_hist.size() == 5 && delta_hist.front() > 50.0 &&
                delta_hist.back() >= delta_hist.front()) {
                res.note = "diverging announcements";
                break;
            }
            // Stall exit: convergence needs the deltas to fall below 1; if the
            // best delta seen stops improving for a long window, it will not.
            if (round_delta < best_delta * 0.999) {
                best_delta = round_delta;
                stall = 0;
            } else if (++stall >= 15) {
                res.note = "stalled announcements";
                break;
            }
        }
        res.rounds = std::min(round, ctrl.max_consensus_iters);
        if (!res.converged && res.note.empty()) res.note = "iteration cap reached";
        if (bus_out) *bus_out = bus;

        // Applied controls and reporting.
        res.theta_users.assign(topo_.users().size(), 0.5);
        res.m0_traj.assign(H, 0.0);
        for (int a = 0; a < n_agents_; ++a) {
            const auto& m = probs_[a]->spec().model;
            res.agent_costs[a] = sols[a].cost;
            res.total_cost += sols[a].cost;
            int per = static_cast<int>(m.local_users.size()) + (m.m0_is_decision ? 1 : 0);
            const auto& users = topo_.users();
            for (size_t i = 0; i < m.local_users.size(); ++i) {
                size_t gi = std::lower_bound(users.begin(), users.end(), m.local_users[i]) -
                            users.begin();
                std::vector<double> traj(H);
                for (int k = 0; k < H; ++k)
                    traj[k] = sols[a].decisions(k * per + static_cast<int>(i));
                res.theta_users[gi] = traj[0];
                res.theta_traj[m.local_users[i]] = std::move(traj);
            }
            if (m.owns_plant) {
                res.m0 = sols[a].elem_m.at(topo_.comp.plant_in()).front();
                for (int k = 0; k < H; ++k)
                    res.m0_traj[k] = sols[a].elem_m.at(topo_.comp.plant_in())[k];
            }
        }
        return res;
    }

  private:
    CommValues initial_bus(const ThermalState& st, int demand_offset) const {
        const int H = sc_.ctrl.horizon_steps();
        // Steady hydraulics at half-open valves seeds flows and pressures.
        std::vector<double> theta(topo_.users().size(), 0.5);
        double q = 0.0;
        for (int u : topo_.users()) {
            const auto& b = sc_.buildings.at(topo_.flow.elements[u].name);
            if (!b.demand_W.empty())
                q += b.demand_W[std::min<size_t>(demand_offset, b.demand_W.size() - 1)];
        }
        double dT = std::max(1.0, sc_.phys.T0_C - sc_.phys.T_setR_C);
        double m0 = std::clamp(q / (sc_.phys.c_p * dT), sc_.ctrl.m0_min, sc_.ctrl.m0_max);
        HydraulicState hyd =
            solve_flow(topo_, friction_set(topo_, sc_.phys, theta), m0);

        CommValues bus;
        const auto& fg = topo_.flow;
        double pref = hyd.P_S(fg.return_split());
        for (const auto& e : fg.elements) {
            if (is_pipe(e.kind)) bus.pipe_T[e.id].assign(H, st.T_p(e.id));
            bus.elem_m[e.id].assign(H, hyd.m_e(e.id));
        }
        for (int s = 0; s < fg.n_splits; ++s) {
            if (s == fg.plant_source_node() || s == fg.plant_sink_node()) continue;
            bus.split_P[s].assign(H, hyd.P_S(s) - pref);
        }
        for (int a = 0; a < n_agents_; ++a) bus.agent_cost[a] = 0.0;
        return bus;
    }

    BoundaryValues extract_boundary(const AgentModel& m, const CommValues& bus) const {
        BoundaryValues b;
        for (int e : m.need_m) b.elem_m[e] = bus.elem_m.at(e);
        for (const auto& [split, ann] : m.fixed_P_split) {
            (void)ann;
            b.split_P[split] = bus.split_P.at(split);
        }
        for (int e : m.need_T)
            if (is_pipe(topo_.comp.kinds[e])) b.pipe_T[e] = bus.pipe_T.at(e);
        return b;
    }

    LocalState extract_init(const AgentModel& m, const ThermalState& st) const {
        LocalState ls;
        for (int p : m.local_pipes) ls.T_p[p] = st.T_p(p);
        for (int u : m.local_users) ls.S_b[u] = st.S_b(u);
        return ls;
    }

    /// Max over the agent's announced values of |delta| / threshold.
    double announcement_delta(const CommValues& prev, const CommValues& cur, int agent) const {
        const auto& ctrl = sc_.ctrl;
        double d = 0.0;
        const int v0m = topo_.comp.plant_in();
        for (const auto& [e, traj] : cur.elem_m) {
            const auto& p = prev.elem_m.at(e);
            double eps = (e == v0m) ? ctrl.eps_mdot_0 : ctrl.eps_mdot_p;
            for (size_t k = 0; k < traj.size(); ++k)
                d = std::max(d, std::abs(traj[k] - p[k]) / eps);
        }
        for (const auto& [s, traj] : cur.split_P) {
            const auto& p = prev.split_P.at(s);
            for (size_t k = 0; k < traj.size(); ++k)
                d = std::max(d, std::abs(traj[k] - p[k]) / ctrl.eps_P_S);
        }
        d = std::max(d, std::abs(cur.agent_cost.at(agent) - prev.agent_cost.at(agent)) /
                            ctrl.eps_cost);
        return d;
    }

    static void merge_into(CommValues& dst, const CommValues& src) {
        for (const auto& [k, v] : src.pipe_T) dst.pipe_T[k] = v;
        for (const auto& [k, v] : src.elem_m) dst.elem_m[k] = v;
        for (const auto& [k, v] : src.split_P) dst.split_P[k] = v;
        for (const auto& [k, v] : src.agent_cost) dst.agent_cost[k] = v;
    }

    const NetworkTopology& topo_;
    const Scenario& sc_;
    Partition part_;
    NeighborSets ns_;
    int n_agents_ = 0;
    std::vector<std::unique_ptr<OcpProblem>> probs_;
    std::vector<Eigen::VectorXd> warm_;
    std::vector<std::vector<int>> in_agents_;
    std::string dead_note_;
};

/// Tabular simulation record with CSV export.
struct SimulationLog {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    void to_csv(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw ConfigError("cannot open " + path + " for writing");
        for (size_t i = 0; i < columns.size(); ++i)
            f << columns[i] << (i + 1 < columns.size() ? "," : "\n");
        f.setf(std::ios::fmtflags(0), std::ios::floatfield);
        f.precision(10);
        for (const auto& row : rows) {
            for (size_t i = 0; i < row.size(); ++i)
                f << row[i] << (i + 1 < row.size() ? "," : "\n");
        }
    }
};

struct RolloutResult {
    SimulationLog log;
    double total_cost = 0.0;  // accumulated stage cost over the window
    int steps = 0;
    int converged_steps = 0;
    bool all_converged = true;
};

/// Receding-horizon simulation: consensus at every control step, first move
/// applied to the plant model; on non-convergence the previous move is held.
inline RolloutResult rollout(const NetworkTopology& topo, const Scenario& sc,
                             const Partition& part) {
    RolloutResult rr;
    ConsensusEngine engine(topo, sc, part);
    ThermalState st = initial_state(topo, sc);
    const auto& users = topo.users();
    const auto& pipes = topo.pipes();
    const int nsub = sc.ctrl.substeps_per_step();
    const int steps = sc.ctrl.sim_steps();

    rr.log.columns = {"time_s", "m0_kgps", "rounds", "converged", "stage_cost"};
    for (int u : users) rr.log.columns.push_back("theta_" + topo.flow.elements[u].name);
    for (int u : users) rr.log.columns.push_back("flex_pct_" + topo.flow.elements[u].name);
    for (int u : users) rr.log.columns.push_back("Qhx_W_" + topo.flow.elements[u].name);
    for (int p : pipes) rr.log.columns.push_back("T_" + topo.flow.elements[p].name);

    std::vector<double> theta(users.size(), 0.5);
    double m0 = sc.ctrl.m0_min;
    {
        double q = 0.0;
        for (int u : users) {
            const auto& b = sc.buildings.at(topo.flow.elements[u].name);
            if (!b.demand_W.empty()) q += b.demand_W.front();
        }
        m0 = std::clamp(q / (sc.phys.c_p * std::max(1.0, sc.phys.T0_C - sc.phys.T_setR_C)),
                        sc.ctrl.m0_min, sc.ctrl.m0_max);
    }

    std::vector<double> caps(users.size()), hA(pipes.size());
    for (size_t i = 0; i < users.size(); ++i)
        caps[i] = sc.buildings.at(topo.flow.elements[users[i]].name).C_b_JK * sc.phys.dT_b_C;
    for (size_t i = 0; i < pipes.size(); ++i)
        hA[i] = pipe_thermal_params(topo.flow.elements[pipes[i]], sc.phys).hA;

    for (int k = 0; k < steps; ++k) {
        ConsensusResult cr = engine.run(st, k);
        if (cr.converged) {
            theta = cr.theta_users;
            if (cr.m0 > 0.0) m0 = cr.m0;
            ++rr.converged_steps;
        } else {
            rr.all_converged = false;  // hold the previous move
        }
        engine.shift_warm_starts();

        HydraulicState hyd = solve_flow(topo, friction_set(topo, sc.phys, theta), m0);
        std::vector<double> qhx(users.size(), 0.0);
        for (int ss = 0; ss < nsub; ++ss) {
            ThermalState next = network_temp_step(st, hyd, topo, sc.phys, sc.ctrl.substep_s);
            for (size_t i = 0; i < users.size(); ++i) {
                int u = users[i];
                const auto& b = sc.buildings.at(topo.flow.elements[u].name);
                double q_amb = b.demand_W.empty()
                                   ? 0.0
                                   : b.demand_W[std::min<size_t>(k, b.demand_W.size() - 1)];
                double T_hx = user_hx_inlet(u, st, topo, sc.phys);
                auto [Sn, Qhx] =
                    soe_step(st.S_b(u), hyd.m_e(u), T_hx, q_amb, sc.phys, sc.ctrl.substep_s);
                next.S_b(u) = Sn;
                qhx[i] = Qhx;
            }
            st = next;
        }

        std::vector<double> Svec(users.size()), Tvec(pipes.size());
        for (size_t i = 0; i < users.size(); ++i) Svec[i] = st.S_b(users[i]);
        for (size_t i = 0; i < pipes.size(); ++i) Tvec[i] = st.T_p(pipes[i]);
        double c = stage_cost(Svec, caps, Tvec, hA, sc.phys.T_amb_C, sc.ctrl.w_C, sc.ctrl.w_Q);
        rr.total_cost += c;

        std::vector<double> row = {st.time_s, m0, static_cast<double>(cr.rounds),
                                   cr.converged ? 1.0 : 0.0, c};
        for (double t : theta) row.push_back(t);
        for (size_t i = 0; i < users.size(); ++i)
            row.push_back(100.0 * Svec[i] / caps[i]);
        for (double q : qhx) row.push_back(q);
        for (double t : Tvec) row.push_back(t);
        rr.log.rows.push_back(std::move(row));
        ++rr.steps;
    }
    return rr;
}

}  // namespace dhn
