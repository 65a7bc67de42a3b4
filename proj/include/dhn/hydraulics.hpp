#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "dhn/autodiff.hpp"
#include "dhn/common.hpp"
#include "dhn/scenario.hpp"
#include "dhn/topology.hpp"

namespace dhn {

/// Friction values are specified in (km*kg)^-1: one unit drops one bar over one
/// km at 1 kg/s. Converted once into SI Pa*s^2/kg^2.
inline constexpr double kZetaUnit_Pa = 1e5;

/// Valve friction map: fully open adds nothing, closing blows up quadratically
/// in (1/theta - 1). Returns the raw dimensionless value; kZetaUnit_Pa
/// converts it to SI alongside the pipe values.
template <typename Scalar>
Scalar valve_friction(const Scalar& theta, double mu, double theta_min) {
    if (value(theta) < theta_min - 1e-12 || value(theta) > 1.0 + 1e-12)
        throw ConfigError("valve position out of [theta_min, 1]");
    Scalar inv = Scalar(1.0) / theta;
    Scalar t = inv - Scalar(1.0);
    return Scalar(mu) * t * t;
}

struct FrictionSet {
    std::vector<double> zeta;  // SI, per element; 0 for plant edges
};

/// Assembles SI frictions from pipe lengths and valve positions (one theta per
/// user element, in element-id order of topo.users()).
inline FrictionSet friction_set(const NetworkTopology& topo, const PhysicalParams& phys,
                                const std::vector<double>& theta_users) {
    FrictionSet fs;
    fs.zeta.resize(topo.comp.n, 0.0);
    size_t ui = 0;
    for (const auto& e : topo.flow.elements) {
        if (is_pipe(e.kind)) {
            fs.zeta[e.id] = phys.zeta_per_km_kg * (e.length_m / 1000.0) * kZetaUnit_Pa;
        } else if (e.kind == ElementKind::User) {
            if (ui >= theta_users.size())
                throw ConfigError("missing valve position for user " + e.name);
            fs.zeta[e.id] =
                kZetaUnit_Pa * valve_friction(theta_users[ui++], phys.mu, phys.theta_min);
        }
    }
    return fs;
}

struct HydraulicState {
    Eigen::VectorXd m_e;   // kg/s per element (plant edges included)
    Eigen::VectorXd P_S;   // Pa per split, gauged so P(head of v0-) = 0
    Eigen::VectorXd dP_e;  // Pa per element
    double m0 = 0.0;
};

namespace detail {

/// Index map for the full-network algebraic system. Unknowns: flows of all
/// non-plant elements, pressures of internal splits minus the return-side
/// anchor. Equations: one pressure-drop residual per non-plant element, one
/// mass balance per internal split except the return-collection split (whose
/// balance only defines the unmodeled v0+ drain).
struct FullSystemMap {
    std::vector<int> flow_idx;       // element id -> unknown index or -1
    std::vector<int> pressure_idx;   // split id -> unknown index or -1
    std::vector<int> balance_splits; // splits with balance equations
    std::vector<int> flow_elements;  // element ids with flow unknowns
    int n = 0;

    explicit FullSystemMap(const NetworkTopology& topo) {
        const auto& fg = topo.flow;
        flow_idx.assign(topo.comp.n, -1);
        pressure_idx.assign(fg.n_splits, -1);
        int k = 0;
        for (const auto& e : fg.elements)
            if (!is_plant(e.kind)) {
                flow_idx[e.id] = k++;
                flow_elements.push_back(e.id);
            }
        const int src = fg.plant_source_node(), snk = fg.plant_sink_node();
        const int ret = fg.return_split();
        for (int s = 0; s < fg.n_splits; ++s) {
            if (s == src || s == snk || s == ret) continue;
            pressure_idx[s] = k++;
            balance_splits.push_back(s);
        }
        n = k;
        if (static_cast<int>(flow_elements.size() + balance_splits.size()) != n)
            throw TopologyError("full hydraulic system is not square");
    }
};

}  // namespace detail

/// Damped-Newton solve of the flow/pressure network for a given plant flow.
/// Throws SolverError on non-convergence and on negative converged flows
/// (flow directions are fixed by the graph).
inline HydraulicState solve_flow(const NetworkTopology& topo, const FrictionSet& zeta,
                                 double m0, const Eigen::VectorXd* warm_start = nullptr,
                                 int max_iter = 60) {
    if (m0 <= 0) throw SolverError("plant flow must be positive");
    const auto& fg = topo.flow;
    detail::FullSystemMap map(topo);
    const int n = map.n;
    Eigen::VectorXd x(n);
    if (warm_start && warm_start->size() == n) {
        x = *warm_start;
    } else {
        x.setZero();
        for (int e : map.flow_elements) x(map.flow_idx[e]) = m0 * 0.5;
    }

    const int supply = fg.supply_split();
    const int v0m = fg.plant_in();

    auto residual = [&](const Eigen::VectorXd& xv, Eigen::VectorXd& r,
                        Eigen::MatrixXd* J) {
        r.setZero(n);
        if (J) J->setZero(n, n);
        int row = 0;
        for (int eid : map.flow_elements) {
            const auto& e = fg.elements[eid];
            double m = xv(map.flow_idx[eid]);
            double Pt = map.pressure_idx[e.tail] >= 0 ? xv(map.pressure_idx[e.tail]) : 0.0;
            double Ph = map.pressure_idx[e.head] >= 0 ? xv(map.pressure_idx[e.head]) : 0.0;
            // Pressure rows in bar so they share the O(1) scale of the balances.
            const double inv = 1.0 / kZetaUnit_Pa;
            r(row) = (zeta.zeta[eid] * m * std::abs(m) - (Pt - Ph)) * inv;
            if (J) {
                (*J)(row, map.flow_idx[eid]) =
                    std::max(2.0 * zeta.zeta[eid] * std::abs(m), 2e-6 * zeta.zeta[eid]) * inv;
                if (map.pressure_idx[e.tail] >= 0) (*J)(row, map.pressure_idx[e.tail]) = -inv;
                if (map.pressure_idx[e.head] >= 0) (*J)(row, map.pressure_idx[e.head]) = inv;
            }
            ++row;
        }
        for (int s : map.balance_splits) {
            for (const auto& e : fg.elements) {
                double sgn = (e.tail == s) ? -1.0 : (e.head == s) ? 1.0 : 0.0;
                if (sgn == 0.0) continue;
                if (e.id == v0m) {
                    r(row) += sgn * m0;
                } else if (map.flow_idx[e.id] >= 0) {
                    r(row) += sgn * xv(map.flow_idx[e.id]);
                    if (J) (*J)(row, map.flow_idx[e.id]) += sgn;
                }
            }
            ++row;
        }
        // Supply split may be in balance_splits already; the v0- injection above
        // covers it. (Nothing extra to do.)
        (void)supply;
    };

    Eigen::VectorXd r(n), dx(n);
    Eigen::MatrixXd J(n, n);
    double scale = std::max(1.0, m0);
    for (int it = 0; it < max_iter; ++it) {
        residual(x, r, &J);
        double rn = r.lpNorm<Eigen::Infinity>();
        if (rn <= 1e-10 * scale) {
            for (int eid : map.flow_elements)
                if (x(map.flow_idx[eid]) < -1e-9)
                    throw SolverError("negative flow on element " + std::to_string(eid) +
                                      "; fixed flow directions violated");
            break;
        }
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(J);
        dx = lu.solve(-r);
        if (!dx.allFinite()) throw SolverError("singular hydraulic Jacobian");
        // Backtracking on ||r||^2.
        double f0 = r.squaredNorm(), t = 1.0;
        Eigen::VectorXd rt(n);
        for (int ls = 0; ls < 30; ++ls) {
            Eigen::VectorXd xt = x + t * dx;
            residual(xt, rt, nullptr);
            if (rt.squaredNorm() < f0 * (1.0 - 1e-4 * t) || rt.squaredNorm() < 1e-30) {
                x = xt;
                break;
            }
            t *= 0.5;
            if (ls == 29) throw SolverError("hydraulic line search failed, |r|=" +
                                            std::to_string(std::sqrt(f0)));
        }
        if (it == max_iter - 1) {
            residual(x, r, nullptr);
            if (r.lpNorm<Eigen::Infinity>() > 1e-8 * scale)
                throw SolverError("hydraulic Newton did not converge, |r|inf=" +
                                  std::to_string(r.lpNorm<Eigen::Infinity>()));
        }
    }

    HydraulicState st;
    st.m0 = m0;
    st.m_e.setZero(topo.comp.n);
    st.P_S.setZero(fg.n_splits);
    st.dP_e.setZero(topo.comp.n);
    for (int eid : map.flow_elements) st.m_e(eid) = x(map.flow_idx[eid]);
    st.m_e(fg.plant_in()) = m0;
    // v0+ drain = net inflow at the return-collection split.
    double drain = 0.0;
    for (const auto& e : fg.elements)
        if (!is_plant(e.kind)) {
            if (e.head == fg.return_split()) drain += st.m_e(e.id);
            if (e.tail == fg.return_split()) drain -= st.m_e(e.id);
        }
    st.m_e(fg.plant_out()) = drain;
    for (int s = 0; s < fg.n_splits; ++s)
        if (map.pressure_idx[s] >= 0) st.P_S(s) = x(map.pressure_idx[s]);
    // Re-gauge so the split fed by v0- is the zero reference.
    double ref = st.P_S(fg.supply_split());
    for (int s = 0; s < fg.n_splits; ++s) st.P_S(s) -= ref;
    st.P_S(fg.plant_source_node()) = st.P_S(fg.supply_split());
    st.P_S(fg.plant_sink_node()) = st.P_S(fg.return_split());
    for (const auto& e : fg.elements)
        if (!is_plant(e.kind)) st.dP_e(e.id) = st.P_S(e.tail) - st.P_S(e.head);
    return st;
}

}  // namespace dhn
