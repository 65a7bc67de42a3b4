#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "dhn/common.hpp"
#include "dhn/hydraulics.hpp"
#include "dhn/scenario.hpp"
#include "dhn/topology.hpp"

namespace dhn {

/// Per-pipe geometry for the bulk temperature model: water volume and lateral
/// heat transfer conductance hA = h*pi*D*L.
struct PipeThermalParams {
    double V_p = 0.0;  // m^3
    double hA = 0.0;   // W/K
};

inline PipeThermalParams pipe_thermal_params(const Element& e, const PhysicalParams& phys) {
    double D = e.diameter_m > 0.0
                   ? e.diameter_m
                   : (e.kind == ElementKind::Bypass ? phys.bypass_diameter_m
                                                    : phys.pipe_diameter_m);
    PipeThermalParams p;
    p.V_p = M_PI * D * D / 4.0 * e.length_m;
    p.hA = phys.h_Wm2K * M_PI * D * e.length_m;
    return p;
}

/// Explicit bulk-temperature update for one pipe over one thermal substep.
template <typename Scalar>
Scalar pipe_temp_step(const Scalar& T_p, const Scalar& T_in, const Scalar& m_dot,
                      const PipeThermalParams& pp, const PhysicalParams& phys,
                      double T_amb, double dt) {
    if (value(m_dot) < -1e-6) throw SolverError("pipe flow must be nonnegative");
    double adv_coeff = dt / (phys.rho * pp.V_p);
    // Saturate the advection term at full replacement: for dt*m/(rho*V) <= 1
    // this is the plain explicit update, beyond it the pipe content is flushed
    // within one substep and T' = T_in is the stable limit.
    Scalar frac = m_dot * Scalar(adv_coeff);
    if (value(frac) > 1.0) frac = Scalar(1.0);
    if (value(frac) < 0.0) frac = Scalar(0.0);
    Scalar adv = frac * (T_in - T_p);
    Scalar loss = Scalar(dt * pp.hA / (phys.rho * phys.c_p * pp.V_p)) * (Scalar(T_amb) - T_p);
    return T_p + adv + loss;
}

/// Building state-of-energy update; returns the new state and the delivered heat.
template <typename Scalar>
std::pair<Scalar, Scalar> soe_step(const Scalar& S_b, const Scalar& m_b, const Scalar& T_hx,
                                   double Q_amb_W, const PhysicalParams& phys, double dt) {
    if (value(m_b) < -1e-6) throw SolverError("building flow must be nonnegative");
    Scalar Q_hx = m_b * Scalar(phys.c_p) * (T_hx - Scalar(phys.T_setR_C));
    Scalar S_next = S_b + Scalar(dt) * (Q_hx - Scalar(Q_amb_W));
    return {S_next, Q_hx};
}

/// Whole-network thermal state for plant simulation.
struct ThermalState {
    Eigen::VectorXd T_p;  // per element; meaningful for pipes only
    Eigen::VectorXd S_b;  // per element; meaningful for users only
    double time_s = 0.0;
};

/// Inlet temperature of a pipe: single upstream temperature on the feeding side,
/// flow-weighted mix at return-side junctions. Users feed T_setR, v0- feeds T0.
inline double inlet_temperature(int pipe, const ThermalState& st, const HydraulicState& hyd,
                                const NetworkTopology& topo, const PhysicalParams& phys) {
    const auto& ups = topo.comp.in[pipe];
    if (ups.empty()) return phys.T_amb_C;
    double wsum = 0.0, tsum = 0.0;
    for (int u : ups) {
        double T;
        switch (topo.comp.kinds[u]) {
            case ElementKind::PlantIn: T = phys.T0_C; break;
            case ElementKind::User: T = phys.T_setR_C; break;
            default: T = st.T_p(u); break;
        }
        double w = hyd.m_e(u);
        wsum += w;
        tsum += w * T;
    }
    if (wsum <= 1e-12) {
        if (hyd.m_e(pipe) > 1e-9)
            throw SolverError("zero inflow feeding a pipe with nonzero flow at junction of element " +
                              std::to_string(pipe));
        return value(st.T_p(pipe));  // no advection this substep
    }
    return tsum / wsum;
}

/// Advances all pipe temperatures by one substep under a fixed hydraulic state.
inline ThermalState network_temp_step(const ThermalState& st, const HydraulicState& hyd,
                                      const NetworkTopology& topo, const PhysicalParams& phys,
                                      double dt) {
    ThermalState out = st;
    out.time_s += dt;
    for (int p : topo.pipes()) {
        double T_in = inlet_temperature(p, st, hyd, topo, phys);
        auto pp = pipe_thermal_params(topo.flow.elements[p], phys);
        out.T_p(p) = pipe_temp_step(st.T_p(p), T_in, hyd.m_e(p), pp, phys, phys.T_amb_C, dt);
    }
    return out;
}

/// Hx inlet temperature seen by a user: temperature of the feeding-side element
/// directly upstream.
inline double user_hx_inlet(int user, const ThermalState& st, const NetworkTopology& topo,
                            const PhysicalParams& phys) {
    const auto& ups = topo.comp.in[user];
    if (ups.empty()) throw TopologyError("user has no upstream element");
    int u = ups.front();
    if (topo.comp.kinds[u] == ElementKind::PlantIn) return phys.T0_C;
    return st.T_p(u);
}

}  // namespace dhn
