#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "dhn/scenario.hpp"
#include "dhn/topology.hpp"

namespace {

std::string data_path(const std::string& f) { return std::string(DHN_DATA_DIR "/") + f; }

}  // namespace

TEST_CASE("nominal scenario loads with table defaults") {
    auto sc = dhn::load_scenario(data_path("scenario_nominal.json"));
    CHECK(sc.phys.T0_C == 80.0);
    CHECK(sc.phys.T_amb_C == -14.0);
    CHECK(sc.phys.dT_b_C == 2.0);
    CHECK(sc.ctrl.w_C == 5.0);
    CHECK(sc.ctrl.w_Q == 3e-6);
    CHECK(sc.ctrl.omega == 0.5);
    CHECK(sc.ctrl.horizon_steps() == 6);
    CHECK(sc.ctrl.substeps_per_step() == 20);
    CHECK(sc.ctrl.sim_steps() == 72);
    REQUIRE(sc.buildings.count("U1") == 1);
    CHECK(sc.buildings.at("U1").C_b_JK == Catch::Approx(526e6));
    CHECK(sc.buildings.at("U1").S0_percent == Catch::Approx(-4.0));
    CHECK(sc.buildings.at("U2").C_b_JK == Catch::Approx(78e6));
    CHECK(sc.buildings.at("U3").C_b_JK == Catch::Approx(400e6));
    CHECK(sc.buildings.at("U4").C_b_JK == Catch::Approx(901e6));

    auto topo = dhn::load_network(data_path("four_user.json"));
    CHECK_NOTHROW(sc.validate(topo));
}

TEST_CASE("scenario validation catches missing and invalid buildings") {
    auto topo = dhn::load_network(data_path("four_user.json"));
    auto sc = dhn::load_scenario(data_path("scenario_nominal.json"));
    auto broken = sc;
    broken.buildings.erase("U3");
    CHECK_THROWS_AS(broken.validate(topo), dhn::ConfigError);

    auto bad_s0 = sc;
    bad_s0.buildings.at("U1").S0_percent = 140.0;
    CHECK_THROWS_AS(bad_s0.validate(topo), dhn::ConfigError);

    auto bad_ctrl = sc;
    bad_ctrl.ctrl.omega = 0.0;
    CHECK_THROWS_AS(bad_ctrl.validate(topo), dhn::ConfigError);

    auto bad_grid = sc;
    bad_grid.ctrl.substep_s = 37.0;
    CHECK_THROWS_AS(bad_grid.validate(topo), dhn::ConfigError);
}

TEST_CASE("synthetic demand is nonnegative and periodic in the mean") {
    auto d = dhn::sinusoid_demand(10e3, 15e3, 86400.0, 0.0, 288, 600.0);
    REQUIRE(d.size() == 288);
    for (double v : d) CHECK(v >= 0.0);
    // Peak exceeds the mean, trough is clamped at zero.
    CHECK(*std::max_element(d.begin(), d.end()) > 10e3);
    CHECK(*std::min_element(d.begin(), d.end()) == 0.0);
}

TEST_CASE("demand CSV loads and resamples piecewise constant") {
    const std::string path = "test_demand_tmp.csv";
    {
        std::ofstream f(path);
        f << "time_s,U1,U2\n0,1000,2000\n1200,3000,4000\n";
    }
    auto series = dhn::load_demand_csv(path, 600.0);
    std::remove(path.c_str());
    REQUIRE(series.count("U1") == 1);
    REQUIRE(series.at("U1").size() == 3);
    CHECK(series.at("U1")[0] == 1000.0);
    CHECK(series.at("U1")[1] == 1000.0);  // hold until the next sample time
    CHECK(series.at("U1")[2] == 3000.0);
    CHECK(series.at("U2")[2] == 4000.0);

    {
        std::ofstream f(path);
        f << "time_s,U1\n600,5\n0,6\n";
    }
    CHECK_THROWS_AS(dhn::load_demand_csv(path, 600.0), dhn::ParseError);
    std::remove(path.c_str());
}

TEST_CASE("sensitivity cases perturb exactly their target parameter") {
    auto sc = dhn::load_scenario(data_path("scenario_nominal.json"));

    auto a = dhn::apply_case(sc, dhn::CaseId::A);
    CHECK(a.phys.T0_C == sc.phys.T0_C);
    CHECK(a.label == "a");

    CHECK(dhn::apply_case(sc, dhn::CaseId::B).phys.T0_C == Catch::Approx(75.0));
    CHECK(dhn::apply_case(sc, dhn::CaseId::C).phys.T0_C == Catch::Approx(85.0));
    CHECK(dhn::apply_case(sc, dhn::CaseId::F).phys.dT_b_C == Catch::Approx(1.8));
    CHECK(dhn::apply_case(sc, dhn::CaseId::G).phys.dT_b_C == Catch::Approx(2.2));
    CHECK(dhn::apply_case(sc, dhn::CaseId::H).phys.h_Wm2K == Catch::Approx(1.3));
    CHECK(dhn::apply_case(sc, dhn::CaseId::I).phys.h_Wm2K == Catch::Approx(1.7));
    CHECK(dhn::apply_case(sc, dhn::CaseId::J).phys.pipe_diameter_m == Catch::Approx(0.35));
    CHECK(dhn::apply_case(sc, dhn::CaseId::K).phys.pipe_diameter_m == Catch::Approx(0.45));

    auto d = dhn::apply_case(sc, dhn::CaseId::D);
    CHECK(d.phys.T_amb_C == Catch::Approx(2.4));
    auto e = dhn::apply_case(sc, dhn::CaseId::E);
    CHECK(e.phys.T_amb_C == Catch::Approx(2.2));

    auto l = dhn::apply_case(sc, dhn::CaseId::L);
    CHECK(l.buildings.at("U1").C_b_JK == Catch::Approx(2390e6));
    CHECK(l.buildings.at("U1").S0_percent == 0.0);
    CHECK(l.buildings.at("U2").C_b_JK == sc.buildings.at("U2").C_b_JK);

    auto m = dhn::apply_case(sc, dhn::CaseId::M);
    CHECK(m.buildings.at("U2").C_b_JK == Catch::Approx(2390e6));

    auto br = dhn::apply_case(sc, dhn::CaseId::BRetuned);
    CHECK(br.phys.T0_C == Catch::Approx(75.0));
    CHECK(br.ctrl.w_C == Catch::Approx(10.0));
    CHECK(br.label == "b-retuned");
}

TEST_CASE("case names round-trip") {
    for (const auto& [id, name] : dhn::all_cases()) {
        CHECK(dhn::case_name(id) == name);
        CHECK(dhn::case_from_string(name) == id);
    }
    CHECK_THROWS_AS(dhn::case_from_string("zz"), dhn::ConfigError);
}
