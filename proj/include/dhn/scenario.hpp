#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dhn/common.hpp"
#include "dhn/topology.hpp"

namespace dhn {

/// Network-wide physical constants (Table-1 style values are the defaults).
struct PhysicalParams {
    double T0_C = 80.0;             // plant supply temperature
    double T_amb_C = -14.0;         // constant ambient temperature
    double pipe_diameter_m = 0.40;  // feeding / return pipes
    double bypass_diameter_m = 0.15;
    double h_Wm2K = 1.5;            // pipe heat transfer coefficient
    double dT_b_C = 2.0;            // allowed building temperature deviation
    double zeta_per_km_kg = 1.0;    // pipe friction, (km*kg)^-1
    double theta_min = 0.01;
    double mu = 2.6;                // valve friction scaling
    double rho = 977.0;             // hot water density, kg/m^3
    double c_p = 4190.0;            // J/kgK
    double T_setR_C = 40.0;         // heat exchanger outlet setpoint

    void validate() const {
        if (pipe_diameter_m <= 0 || bypass_diameter_m <= 0)
            throw ConfigError("pipe diameters must be positive");
        if (theta_min <= 0 || theta_min >= 1)
            throw ConfigError("theta_min must be in (0,1)");
        if (dT_b_C <= 0) throw ConfigError("dT_b must be positive");
    }
};

struct BuildingParams {
    double C_b_JK = 0.0;       // heat storage capacity coefficient
    double S0_percent = 0.0;   // initial state of energy, % of C_b*dT_b
    std::vector<double> demand_W;  // per control step
};

struct ControllerParams {
    double w_C = 5.0;
    double w_Q = 3e-6;
    double w_mPoA = 1.0;
    double w_sz = 0.06;
    double w_iter = 0.04;
    // Consensus thresholds (no temperature entry by design).
    double eps_mdot_p = 0.2;    // kg/s, per-pipe flow
    double eps_mdot_0 = 0.3;    // kg/s, plant flow
    double eps_P_S = 5000.0;    // Pa, split pressures
    double eps_cost = 0.5;      // local cost
    double omega = 0.5;
    double control_step_s = 600.0;
    double substep_s = 30.0;
    double horizon_s = 3600.0;
    double rollout_step_s = 600.0;
    double sim_window_s = 43200.0;
    int max_consensus_iters = 100;
    double m0_min = 0.05;  // keeps the hydraulic system away from singularity
    double m0_max = 50.0;

    int horizon_steps() const {
        return static_cast<int>(std::llround(horizon_s / control_step_s));
    }
    int substeps_per_step() const {
        return static_cast<int>(std::llround(control_step_s / substep_s));
    }
    int sim_steps() const {
        return static_cast<int>(std::llround(sim_window_s / control_step_s));
    }

    void validate() const {
        if (omega <= 0 || omega > 1) throw ConfigError("omega must be in (0,1]");
        if (std::fmod(control_step_s, substep_s) != 0.0)
            throw ConfigError("control step must be a multiple of the thermal substep");
        if (std::fmod(horizon_s, control_step_s) != 0.0)
            throw ConfigError("horizon must be a multiple of the control step");
    }
};

enum class CaseId { A, B, C, D, E, F, G, H, I, J, K, L, M, BRetuned };

inline const std::vector<std::pair<CaseId, std::string>>& all_cases() {
    static const std::vector<std::pair<CaseId, std::string>> cs = {
        {CaseId::A, "a"}, {CaseId::B, "b"}, {CaseId::C, "c"}, {CaseId::D, "d"},
        {CaseId::E, "e"}, {CaseId::F, "f"}, {CaseId::G, "g"}, {CaseId::H, "h"},
        {CaseId::I, "i"}, {CaseId::J, "j"}, {CaseId::K, "k"}, {CaseId::L, "l"},
        {CaseId::M, "m"}, {CaseId::BRetuned, "b-retuned"}};
    return cs;
}

inline std::string case_name(CaseId c) {
    for (const auto& [id, name] : all_cases())
        if (id == c) return name;
    throw ConfigError("unknown case id");
}

inline CaseId case_from_string(const std::string& s) {
    for (const auto& [id, name] : all_cases())
        if (name == s) return id;
    throw ConfigError("unknown case id: " + s);
}

/// Full problem instance: physics, buildings, controller settings and demand.
struct Scenario {
    PhysicalParams phys;
    ControllerParams ctrl;
    std::map<std::string, BuildingParams> buildings;  // keyed by user element name
    // Alternate demand sets for the seasonal / building-type cases, keyed
    // "november", "december", "commercial".
    std::map<std::string, std::map<std::string, std::vector<double>>> alt_demands;
    std::map<std::string, double> alt_T_amb = {{"november", 2.4}, {"december", 2.2}};
    double commercial_C_b_JK = 2390e6;
    std::string label = "nominal";

    void validate(const NetworkTopology& topo) const {
        phys.validate();
        ctrl.validate();
        for (int u : topo.users()) {
            const std::string& nm = topo.flow.elements[u].name;
            auto it = buildings.find(nm);
            if (it == buildings.end())
                throw ConfigError("scenario is missing building parameters for user " + nm);
            if (it->second.C_b_JK <= 0)
                throw ConfigError("C_b must be positive for user " + nm);
            if (std::abs(it->second.S0_percent) > 100.0)
                throw ConfigError("initial S_b out of range for user " + nm);
        }
    }
};

/// Piecewise-constant synthetic demand: mean + amp*sin(2*pi*t/period + phase),
/// clamped at zero, sampled at control-step midpoints.
inline std::vector<double> sinusoid_demand(double mean_W, double amp_W, double period_s,
                                           double phase, int n_steps, double step_s) {
    std::vector<double> d(n_steps);
    for (int k = 0; k < n_steps; ++k) {
        double t = (k + 0.5) * step_s;
        d[k] = std::max(0.0, mean_W + amp_W * std::sin(2.0 * M_PI * t / period_s + phase));
    }
    return d;
}

inline std::map<std::string, std::vector<double>> load_demand_csv(
    const std::string& path, double control_step_s) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open demand file: " + path);
    std::string line;
    if (!std::getline(f, line)) throw ParseError("demand file is empty: " + path);
    std::vector<std::string> names;
    {
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) names.push_back(tok);
    }
    if (names.empty() || names[0] != "time_s")
        throw ParseError("demand file must start with a time_s column");
    std::vector<double> times;
    std::vector<std::vector<double>> cols(names.size() - 1);
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        size_t c = 0;
        while (std::getline(ss, tok, ',')) {
            double v = std::stod(tok);
            if (c == 0) {
                if (!times.empty() && v <= times.back())
                    throw ParseError("demand time column must be strictly increasing");
                times.push_back(v);
            } else {
                if (v < 0) throw ParseError("negative demand in " + path);
                cols.at(c - 1).push_back(v);
            }
            ++c;
        }
        if (c != names.size()) throw ParseError("ragged row in demand file");
    }
    if (times.empty()) throw ParseError("demand file has no samples: " + path);
    // Piecewise-constant resample onto the control grid, holding the last value.
    double t_end = times.back() + control_step_s;
    int n_steps = static_cast<int>(std::llround(t_end / control_step_s));
    std::map<std::string, std::vector<double>> out;
    for (size_t c = 1; c < names.size(); ++c) {
        std::vector<double> series(n_steps);
        size_t idx = 0;
        for (int k = 0; k < n_steps; ++k) {
            double t = k * control_step_s;
            while (idx + 1 < times.size() && times[idx + 1] <= t) ++idx;
            series[k] = cols[c - 1][idx];
        }
        out[names[c]] = series;
    }
    return out;
}

namespace detail {
inline void read_phys(const nlohmann::json& j, PhysicalParams& p) {
    p.T0_C = j.value("T0_C", p.T0_C);
    p.T_amb_C = j.value("T_amb_C", p.T_amb_C);
    p.pipe_diameter_m = j.value("pipe_diameter_m", p.pipe_diameter_m);
    p.bypass_diameter_m = j.value("bypass_diameter_m", p.bypass_diameter_m);
    p.h_Wm2K = j.value("h_Wm2K", p.h_Wm2K);
    p.dT_b_C = j.value("dT_b_C", p.dT_b_C);
    p.zeta_per_km_kg = j.value("zeta_per_km_kg", p.zeta_per_km_kg);
    p.theta_min = j.value("theta_min", p.theta_min);
    p.mu = j.value("mu", p.mu);
    p.rho = j.value("rho", p.rho);
    p.c_p = j.value("c_p", p.c_p);
    p.T_setR_C = j.value("T_setR_C", p.T_setR_C);
}
inline void read_ctrl(const nlohmann::json& j, ControllerParams& c) {
    c.w_C = j.value("w_C", c.w_C);
    c.w_Q = j.value("w_Q", c.w_Q);
    c.w_mPoA = j.value("w_mPoA", c.w_mPoA);
    c.w_sz = j.value("w_sz", c.w_sz);
    c.w_iter = j.value("w_iter", c.w_iter);
    c.eps_mdot_p = j.value("eps_mdot_p", c.eps_mdot_p);
    c.eps_mdot_0 = j.value("eps_mdot_0", c.eps_mdot_0);
    c.eps_P_S = j.value("eps_P_S", c.eps_P_S);
    c.eps_cost = j.value("eps_cost", c.eps_cost);
    c.omega = j.value("omega", c.omega);
    c.control_step_s = j.value("control_step_s", c.control_step_s);
    c.substep_s = j.value("substep_s", c.substep_s);
    c.horizon_s = j.value("horizon_s", c.horizon_s);
    c.rollout_step_s = j.value("rollout_step_s", c.rollout_step_s);
    c.sim_window_s = j.value("sim_window_s", c.sim_window_s);
    c.max_consensus_iters = j.value("max_consensus_iters", c.max_consensus_iters);
    c.m0_min = j.value("m0_min", c.m0_min);
    c.m0_max = j.value("m0_max", c.m0_max);
}
}  // namespace detail

/// Loads a scenario JSON; every field is optional except per-user C_b entries,
/// defaults follow the nominal tables. Demand comes inline, from a CSV next to
/// the scenario file, or from the synthetic generator spec.
inline Scenario load_scenario(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open scenario file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ParseError(std::string("scenario parse failure: ") + e.what());
    }
    Scenario s;
    if (j.contains("physical")) detail::read_phys(j["physical"], s.phys);
    if (j.contains("controller")) detail::read_ctrl(j["controller"], s.ctrl);
    s.label = j.value("label", s.label);
    s.commercial_C_b_JK = j.value("commercial_C_b_MJK", s.commercial_C_b_JK / 1e6) * 1e6;
    if (!j.contains("buildings")) throw ParseError("scenario is missing 'buildings'");
    int n_steps = s.ctrl.sim_steps() + s.ctrl.horizon_steps();
    for (auto it = j["buildings"].begin(); it != j["buildings"].end(); ++it) {
        BuildingParams b;
        const auto& jb = it.value();
        if (!jb.contains("C_b_MJK"))
            throw ParseError("building " + it.key() + " is missing C_b_MJK");
        b.C_b_JK = jb["C_b_MJK"].get<double>() * 1e6;
        b.S0_percent = jb.value("S0_percent", 0.0);
        if (jb.contains("demand_W")) {
            b.demand_W = jb["demand_W"].get<std::vector<double>>();
        } else if (jb.contains("demand")) {
            const auto& jd = jb["demand"];
            b.demand_W = sinusoid_demand(jd.value("mean_W", 10e3), jd.value("amp_W", 0.0),
                                         jd.value("period_s", 86400.0),
                                         jd.value("phase", 0.0), n_steps,
                                         s.ctrl.control_step_s);
        } else {
            throw ParseError("building " + it.key() + " has no demand specification");
        }
        s.buildings[it.key()] = b;
    }
    if (j.contains("demand_csv")) {
        auto dir = path.find_last_of('/') == std::string::npos
                       ? std::string{}
                       : path.substr(0, path.find_last_of('/') + 1);
        auto series = load_demand_csv(dir + j["demand_csv"].get<std::string>(),
                                      s.ctrl.control_step_s);
        for (auto& [name, d] : series)
            if (s.buildings.count(name)) s.buildings[name].demand_W = d;
    }
    if (j.contains("alt_demands")) {
        for (auto it = j["alt_demands"].begin(); it != j["alt_demands"].end(); ++it)
            for (auto bu = it.value().begin(); bu != it.value().end(); ++bu)
                s.alt_demands[it.key()][bu.key()] =
                    bu.value().get<std::vector<double>>();
    }
    return s;
}

namespace detail {
/// Deterministic synthetic alternates when a scenario ships none: seasonal
/// demand scaled down with shifted phase, commercial demand flat-ish daytime.
inline std::vector<double> scaled(const std::vector<double>& d, double f) {
    std::vector<double> r = d;
    for (auto& x : r) x *= f;
    return r;
}
}  // namespace detail

/// Produces the perturbed scenario for a sensitivity case. Case a is the identity.
inline Scenario apply_case(const Scenario& nominal, CaseId c) {
    Scenario s = nominal;
    s.label = case_name(c);
    auto seasonal = [&](const std::string& season, double scale) {
        s.phys.T_amb_C = s.alt_T_amb.at(season);
        auto it = s.alt_demands.find(season);
        for (auto& [name, b] : s.buildings) {
            if (it != s.alt_demands.end() && it->second.count(name))
                b.demand_W = it->second.at(name);
            else
                b.demand_W = detail::scaled(b.demand_W, scale);
        }
    };
    auto commercial = [&](const std::string& user) {
        auto it = s.buildings.find(user);
        if (it == s.buildings.end()) throw ConfigError("case changes unknown user " + user);
        it->second.C_b_JK = s.commercial_C_b_JK;
        it->second.S0_percent = 0.0;
        auto alt = s.alt_demands.find("commercial");
        if (alt != s.alt_demands.end() && alt->second.count(user))
            it->second.demand_W = alt->second.at(user);
        else
            it->second.demand_W = detail::scaled(it->second.demand_W, 3.0);
    };
    switch (c) {
        case CaseId::A: break;
        case CaseId::B: s.phys.T0_C -= 5.0; break;
        case CaseId::C: s.phys.T0_C += 5.0; break;
        case CaseId::D: seasonal("november", 0.35); break;
        case CaseId::E: seasonal("december", 0.45); break;
        case CaseId::F: s.phys.dT_b_C -= 0.2; break;
        case CaseId::G: s.phys.dT_b_C += 0.2; break;
        case CaseId::H: s.phys.h_Wm2K -= 0.2; break;
        case CaseId::I: s.phys.h_Wm2K += 0.2; break;
        case CaseId::J: s.phys.pipe_diameter_m = 0.35; break;
        case CaseId::K: s.phys.pipe_diameter_m = 0.45; break;
        case CaseId::L: commercial("U1"); break;
        case CaseId::M: commercial("U2"); break;
        case CaseId::BRetuned:
            s.phys.T0_C -= 5.0;
            s.ctrl.w_C = 10.0;
            break;
    }
    return s;
}

}  // namespace dhn
