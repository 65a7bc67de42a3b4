#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>

#include "dhn/dmpc.hpp"
#include "dhn/thermal.hpp"

namespace {

std::string data_path(const std::string& f) { return std::string(DHN_DATA_DIR "/") + f; }

}  // namespace

TEST_CASE("pipe geometry: volume and lateral conductance") {
    dhn::PhysicalParams phys;
    dhn::Element e;
    e.kind = dhn::ElementKind::Feeding;
    e.length_m = 80.0;
    auto pp = dhn::pipe_thermal_params(e, phys);
    CHECK(pp.V_p == Catch::Approx(M_PI * 0.4 * 0.4 / 4.0 * 80.0));
    CHECK(pp.hA == Catch::Approx(1.5 * M_PI * 0.4 * 80.0));

    dhn::Element b = e;
    b.kind = dhn::ElementKind::Bypass;
    auto bp = dhn::pipe_thermal_params(b, phys);
    CHECK(bp.hA == Catch::Approx(1.5 * M_PI * 0.15 * 80.0));

    b.diameter_m = 0.2;  // explicit diameter wins over the kind default
    CHECK(dhn::pipe_thermal_params(b, phys).hA == Catch::Approx(1.5 * M_PI * 0.2 * 80.0));
}

TEST_CASE("steady pipe temperature matches the closed-form heat balance") {
    // 80 m feeding pipe, ~0.2387 kg/s so that m*c_p = 1000 W/K, hA ~ 150.8 W/K:
    // T* = (m c_p T_in + hA T_amb) / (m c_p + hA) = 67.68 C.
    dhn::PhysicalParams phys;
    dhn::Element e;
    e.kind = dhn::ElementKind::Feeding;
    e.length_m = 80.0;
    auto pp = dhn::pipe_thermal_params(e, phys);
    const double mcp = 1000.0;
    const double m_dot = mcp / phys.c_p;
    const double T_in = 80.0, T_amb = -14.0;
    const double T_star = (mcp * T_in + pp.hA * T_amb) / (mcp + pp.hA);
    CHECK(T_star == Catch::Approx(67.68).margin(0.005));

    double T = 40.0;
    for (int i = 0; i < 400000; ++i) {
        double Tn = dhn::pipe_temp_step(T, T_in, m_dot, pp, phys, T_amb, 30.0);
        if (std::abs(Tn - T) < 1e-14) {
            T = Tn;
            break;
        }
        T = Tn;
    }
    CHECK(std::abs(T - T_star) <= 1e-9);

    // The fixed point is unchanged by the starting side.
    double T2 = 95.0;
    for (int i = 0; i < 400000; ++i) {
        double Tn = dhn::pipe_temp_step(T2, T_in, m_dot, pp, phys, T_amb, 30.0);
        if (std::abs(Tn - T2) < 1e-14) break;
        T2 = Tn;
    }
    CHECK(std::abs(T2 - T_star) <= 1e-9);
}

TEST_CASE("zero flow relaxes the pipe toward ambient") {
    dhn::PhysicalParams phys;
    dhn::Element e;
    e.kind = dhn::ElementKind::Return;
    e.length_m = 50.0;
    auto pp = dhn::pipe_thermal_params(e, phys);
    double T = 60.0;
    for (int i = 0; i < 2000000; ++i) T = dhn::pipe_temp_step(T, 99.0, 0.0, pp, phys, -14.0, 30.0);
    CHECK(T == Catch::Approx(-14.0).margin(1e-6));
}

TEST_CASE("advection saturates at full replacement for very large flows") {
    dhn::PhysicalParams phys;
    dhn::Element e;
    e.kind = dhn::ElementKind::Bypass;
    e.length_m = 3.0;
    auto pp = dhn::pipe_thermal_params(e, phys);
    // dt*m/(rho V) >> 1: the update must not overshoot past T_in.
    double T = dhn::pipe_temp_step(40.0, 80.0, 50.0, pp, phys, -14.0, 30.0);
    CHECK(T <= 80.0 + 1e-9);
    CHECK(T >= 40.0);
    CHECK_THROWS_AS(dhn::pipe_temp_step(40.0, 80.0, -1.0, pp, phys, -14.0, 30.0),
                    dhn::SolverError);
}

TEST_CASE("state of energy integrates delivered minus demanded heat") {
    dhn::PhysicalParams phys;
    auto [S, Q] = dhn::soe_step(1.0e6, 0.5, 70.0, 20000.0, phys, 30.0);
    double q_expect = 0.5 * phys.c_p * (70.0 - phys.T_setR_C);
    CHECK(Q == Catch::Approx(q_expect));
    CHECK(S == Catch::Approx(1.0e6 + 30.0 * (q_expect - 20000.0)));
    CHECK_THROWS_AS(dhn::soe_step(0.0, -0.5, 70.0, 0.0, phys, 30.0), dhn::SolverError);
}

TEST_CASE("junction mixing stays inside the upstream temperature envelope") {
    auto topo = dhn::load_network(data_path("four_user.json"));
    dhn::PhysicalParams phys;
    // Element 7 (R1) is fed by R3 (6) and U1 (2): a genuine return-side mix of
    // a pipe temperature and the heat-exchanger setpoint.
    const int pipe = 7;
    REQUIRE(topo.comp.in[pipe].size() == 2);

    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> temp(20.0, 90.0);
    std::uniform_real_distribution<double> flow(0.01, 5.0);
    for (int trial = 0; trial < 1000; ++trial) {
        dhn::ThermalState st;
        st.T_p.setZero(topo.comp.n);
        st.S_b.setZero(topo.comp.n);
        dhn::HydraulicState hyd;
        hyd.m_e.setZero(topo.comp.n);
        double lo = 1e9, hi = -1e9;
        for (int u : topo.comp.in[pipe]) {
            double T = topo.comp.kinds[u] == dhn::ElementKind::User ? phys.T_setR_C
                                                                    : temp(rng);
            if (dhn::is_pipe(topo.comp.kinds[u])) st.T_p(u) = T;
            hyd.m_e(u) = flow(rng);
            lo = std::min(lo, T);
            hi = std::max(hi, T);
        }
        double T_mix = dhn::inlet_temperature(pipe, st, hyd, topo, phys);
        CHECK(T_mix >= lo - 1e-12);
        CHECK(T_mix <= hi + 1e-12);
    }
}

TEST_CASE("network step leaves a uniform equilibrium untouched when lossless") {
    auto topo = dhn::load_network(data_path("two_user.json"));
    dhn::Scenario sc = dhn::load_scenario(data_path("scenario_two_user.json"));
    dhn::PhysicalParams phys = sc.phys;
    phys.h_Wm2K = 0.0;       // no lateral loss
    phys.T_setR_C = 55.0;    // users discharge at the uniform temperature
    phys.T0_C = 55.0;
    auto fs = dhn::friction_set(topo, phys, {0.5, 0.5});
    auto hyd = dhn::solve_flow(topo, fs, 2.0);
    dhn::ThermalState st;
    st.T_p.setConstant(topo.comp.n, 55.0);
    st.S_b.setZero(topo.comp.n);
    auto next = dhn::network_temp_step(st, hyd, topo, phys, 30.0);
    for (int p : topo.pipes()) CHECK(next.T_p(p) == Catch::Approx(55.0).margin(1e-12));
    CHECK(next.time_s == Catch::Approx(30.0));
}

TEST_CASE("user hx inlet is the upstream feeding temperature") {
    auto topo = dhn::load_network(data_path("two_user.json"));
    dhn::PhysicalParams phys;
    dhn::ThermalState st;
    st.T_p.setZero(topo.comp.n);
    st.S_b.setZero(topo.comp.n);
    st.T_p(1) = 72.5;  // F1 feeds U1
    CHECK(dhn::user_hx_inlet(2, st, topo, phys) == Catch::Approx(72.5));
}
