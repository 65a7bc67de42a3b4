#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dhn/search.hpp"

namespace dhn {

struct ControllerOutcome {
    std::string name;
    Partition part;
    double cost = std::numeric_limits<double>::quiet_NaN();
    double pct_increase = std::numeric_limits<double>::quiet_NaN();
    bool ok = false;
    bool applicable = true;  // false: column intentionally empty (Table-4 dash)
    std::string note;
    SimulationLog log;
};

struct CaseResult {
    CaseId id = CaseId::A;
    std::string name;
    Partition olm_part, baseline_part, nominal_part;
    OlmScore olm_score;
    ControllerOutcome centralized, olm, nominal, baseline;
    long long search_evaluations = 0;
    std::string error;  // nonempty when the whole case failed
};

struct HarnessParams {
    SearchParams search;
    SearchMode mode = SearchMode::Learned;
    std::string out_dir = ".";
    bool write_files = true;
    bool write_svg = true;
};

namespace detail {

inline int log_column(const SimulationLog& log, const std::string& name) {
    for (size_t i = 0; i < log.columns.size(); ++i)
        if (log.columns[i] == name) return static_cast<int>(i);
    return -1;
}

/// Minimal SVG polyline chart; one line per series, shared x axis.
inline void svg_line_plot(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::vector<double>& x,
                          const std::vector<std::pair<std::string, std::vector<double>>>& series) {
    if (x.empty() || series.empty()) return;
    const double W = 860, H = 420, L = 70, R = 170, T = 40, B = 50;
    double xmin = x.front(), xmax = x.back();
    double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
    for (const auto& [n, v] : series)
        for (double d : v) {
            if (!std::isfinite(d)) continue;
            ymin = std::min(ymin, d);
            ymax = std::max(ymax, d);
        }
    if (!(ymax > ymin)) { ymax = ymin + 1.0; }
    if (!(xmax > xmin)) xmax = xmin + 1.0;
    auto px = [&](double v) { return L + (v - xmin) / (xmax - xmin) * (W - L - R); };
    auto py = [&](double v) { return H - B - (v - ymin) / (ymax - ymin) * (H - T - B); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write plot: " + path);
    f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H
      << "' font-family='sans-serif' font-size='12'>\n";
    f << "<rect width='100%' height='100%' fill='white'/>\n";
    f << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-size='15'>" << title
      << "</text>\n";
    for (int i = 0; i <= 4; ++i) {
        double yv = ymin + (ymax - ymin) * i / 4.0;
        f << "<line x1='" << L << "' y1='" << py(yv) << "' x2='" << W - R << "' y2='"
          << py(yv) << "' stroke='#ddd'/>\n";
        f << "<text x='" << L - 6 << "' y='" << py(yv) + 4 << "' text-anchor='end'>" << yv
          << "</text>\n";
        double xv = xmin + (xmax - xmin) * i / 4.0;
        f << "<text x='" << px(xv) << "' y='" << H - B + 18 << "' text-anchor='middle'>"
          << xv << "</text>\n";
    }
    f << "<text x='" << (L + W - R) / 2 << "' y='" << H - 12 << "' text-anchor='middle'>"
      << x_label << "</text>\n";
    int ci = 0;
    for (const auto& [name, v] : series) {
        const char* col = colors[ci % 8];
        f << "<polyline fill='none' stroke='" << col << "' stroke-width='1.6' points='";
        for (size_t i = 0; i < x.size() && i < v.size(); ++i) {
            if (!std::isfinite(v[i])) continue;
            f << px(x[i]) << ',' << py(v[i]) << ' ';
        }
        f << "'/>\n";
        f << "<text x='" << W - R + 10 << "' y='" << T + 16 * ci + 10 << "' fill='" << col
          << "'>" << name << "</text>\n";
        ++ci;
    }
    f << "</svg>\n";
}

inline ControllerOutcome run_controller(const std::string& name, const NetworkTopology& topo,
                                        const Scenario& sc, const Partition& part) {
    ControllerOutcome out;
    out.name = name;
    out.part = part;
    try {
        RolloutResult rr = rollout(topo, sc, part);
        out.cost = rr.total_cost;
        out.log = std::move(rr.log);
        out.ok = true;
        if (!rr.all_converged)
            out.note = std::to_string(rr.steps - rr.converged_steps) + " of " +
                       std::to_string(rr.steps) + " steps held previous input";
    } catch (const std::exception& e) {
        out.note = e.what();
    }
    return out;
}

}  // namespace detail

/// One sensitivity case: search for the OLM partition, then roll out the
/// centralized, OLM, fixed-nominal and modularity-baseline controllers over
/// the simulation window. Rollout failures mark the column, not the case.
inline CaseResult run_case(const NetworkTopology& topo, const Scenario& nominal_sc,
                           CaseId id, const Partition& nominal_part,
                           const HarnessParams& hp) {
    namespace fs = std::filesystem;
    CaseResult cr;
    cr.id = id;
    cr.name = case_name(id);
    Scenario sc = apply_case(nominal_sc, id);
    sc.validate(topo);

    SearchParams sp = hp.search;
    if (hp.write_files) {
        fs::create_directories(hp.out_dir);
        if (sp.log_path.empty())
            sp.log_path = (fs::path(hp.out_dir) / ("search_log_" + cr.name + ".csv")).string();
    }
    OlmEvaluator ev(topo, sc);
    SearchResult sr = run_lebnb(topo, sc, sp, hp.mode, ev);
    cr.olm_part = sr.best;
    cr.olm_score = sr.best_score;
    cr.search_evaluations = sr.evaluations;
    cr.baseline_part = baseline_modularity(topo.comp);
    cr.nominal_part = nominal_part;

    cr.centralized =
        detail::run_controller("centralized", topo, sc, single_block_partition(topo.comp));
    cr.olm = detail::run_controller("olm", topo, sc, cr.olm_part);
    if (nominal_part.blocks.empty() || nominal_part == cr.olm_part) {
        cr.nominal.name = "nominal";
        cr.nominal.applicable = false;  // Table-4 dash: nominal is the OLM partition
    } else {
        cr.nominal = detail::run_controller("nominal", topo, sc, nominal_part);
    }
    cr.baseline = detail::run_controller("baseline", topo, sc, cr.baseline_part);

    if (cr.centralized.ok && cr.centralized.cost > 0.0) {
        auto pct = [&](ControllerOutcome& o) {
            if (o.ok) o.pct_increase = 100.0 * (o.cost / cr.centralized.cost - 1.0);
        };
        cr.centralized.pct_increase = 0.0;
        pct(cr.olm);
        pct(cr.nominal);
        pct(cr.baseline);
    } else if (!cr.centralized.ok) {
        cr.error = "centralized rollout failed: " + cr.centralized.note;
    }

    if (hp.write_files) {
        fs::create_directories(hp.out_dir);
        std::vector<ControllerOutcome*> ctrls{&cr.centralized, &cr.olm, &cr.nominal,
                                              &cr.baseline};
        // Cumulative cost over time, one column per controller.
        SimulationLog cost;
        cost.columns = {"time_s"};
        std::vector<double> xs;
        const SimulationLog* ref = nullptr;
        for (auto* c : ctrls)
            if (c->ok && !c->log.rows.empty()) { ref = &c->log; break; }
        if (ref) {
            int tcol = detail::log_column(*ref, "time_s");
            for (const auto& r : ref->rows) xs.push_back(r[tcol]);
            std::vector<std::vector<double>> cum;
            for (auto* c : ctrls) {
                if (!c->ok) continue;
                cost.columns.push_back("cum_cost_" + c->name);
                int sc_col = detail::log_column(c->log, "stage_cost");
                std::vector<double> acc;
                double a = 0.0;
                for (const auto& r : c->log.rows) acc.push_back(a += r[sc_col]);
                cum.push_back(std::move(acc));
            }
            for (size_t i = 0; i < xs.size(); ++i) {
                std::vector<double> row{xs[i]};
                for (const auto& acc : cum) row.push_back(i < acc.size() ? acc[i] : 0.0);
                cost.rows.push_back(std::move(row));
            }
            cost.to_csv((fs::path(hp.out_dir) / ("case_" + cr.name + "_cost.csv")).string());

            // Plant flow and used flexibility (OLM controller) over time.
            SimulationLog ff;
            ff.columns = {"time_s"};
            std::vector<int> src_cols;
            std::vector<const SimulationLog*> src_logs;
            for (auto* c : ctrls) {
                if (!c->ok) continue;
                ff.columns.push_back("m0_" + c->name);
                src_logs.push_back(&c->log);
                src_cols.push_back(detail::log_column(c->log, "m0_kgps"));
            }
            const ControllerOutcome& fo = cr.olm.ok ? cr.olm : cr.centralized;
            std::vector<int> flex_cols;
            for (size_t i = 0; i < fo.log.columns.size(); ++i)
                if (fo.log.columns[i].rfind("flex_pct_", 0) == 0) {
                    ff.columns.push_back(fo.log.columns[i] + "_" + fo.name);
                    flex_cols.push_back(static_cast<int>(i));
                }
            for (size_t i = 0; i < xs.size(); ++i) {
                std::vector<double> row{xs[i]};
                for (size_t s = 0; s < src_logs.size(); ++s)
                    row.push_back(i < src_logs[s]->rows.size()
                                      ? src_logs[s]->rows[i][src_cols[s]]
                                      : 0.0);
                for (int c : flex_cols)
                    row.push_back(i < fo.log.rows.size() ? fo.log.rows[i][c] : 0.0);
                ff.rows.push_back(std::move(row));
            }
            ff.to_csv(
                (fs::path(hp.out_dir) / ("case_" + cr.name + "_flow_flex.csv")).string());

            if (hp.write_svg) {
                std::vector<std::pair<std::string, std::vector<double>>> cser;
                size_t ci = 0;
                for (auto* c : ctrls) {
                    if (!c->ok) continue;
                    std::vector<double> acc;
                    int sc_col = detail::log_column(c->log, "stage_cost");
                    double a = 0.0;
                    for (const auto& r : c->log.rows) acc.push_back(a += r[sc_col]);
                    cser.push_back({c->name, std::move(acc)});
                    ++ci;
                }
                detail::svg_line_plot(
                    (fs::path(hp.out_dir) / ("case_" + cr.name + "_cost.svg")).string(),
                    "Cumulative cost, case " + cr.name, "time [s]", xs, cser);
                std::vector<std::pair<std::string, std::vector<double>>> fser;
                for (size_t s = 0; s < src_logs.size(); ++s) {
                    std::vector<double> v;
                    for (const auto& r : src_logs[s]->rows) v.push_back(r[src_cols[s]]);
                    fser.push_back({ff.columns[1 + s], std::move(v)});
                }
                detail::svg_line_plot(
                    (fs::path(hp.out_dir) / ("case_" + cr.name + "_flow.svg")).string(),
                    "Plant flow, case " + cr.name, "time [s]", xs, fser);
            }
        }
    }
    return cr;
}

/// Full study: case a fixes the nominal partition, the remaining cases reuse
/// it; writes the Table-4 style summary.
inline std::vector<CaseResult> run_sensitivity(const NetworkTopology& topo,
                                               const Scenario& nominal_sc,
                                               const HarnessParams& hp) {
    namespace fs = std::filesystem;
    std::vector<CaseResult> results;
    Partition nominal_part;  // empty until case a is solved
    for (const auto& [id, name] : all_cases()) {
        try {
            CaseResult cr = run_case(topo, nominal_sc, id, nominal_part, hp);
            if (id == CaseId::A) nominal_part = cr.olm_part;
            results.push_back(std::move(cr));
        } catch (const std::exception& e) {
            CaseResult cr;
            cr.id = id;
            cr.name = name;
            cr.error = e.what();
            results.push_back(std::move(cr));
        }
    }

    if (hp.write_files) {
        fs::create_directories(hp.out_dir);
        std::ofstream t((fs::path(hp.out_dir) / "table4.csv").string());
        if (!t) throw ConfigError("cannot write table4.csv");
        t << "case,olm_pct_increase,nominal_pct_increase,baseline_pct_increase,"
             "centralized_cost,olm_partition,baseline_partition,search_evaluations,error\n";
        double nom_sum = 0.0;
        int nom_n = 0;
        auto cell = [](const ControllerOutcome& o) {
            if (!o.applicable || !o.ok || !std::isfinite(o.pct_increase)) return std::string();
            std::ostringstream os;
            os << o.pct_increase;
            return os.str();
        };
        for (const auto& r : results) {
            t << r.name << ',' << cell(r.olm) << ',' << cell(r.nominal) << ','
              << cell(r.baseline) << ',';
            if (r.centralized.ok) t << r.centralized.cost;
            t << ",\"" << r.olm_part.key() << "\",\"" << r.baseline_part.key() << "\","
              << r.search_evaluations << ',' << r.error << '\n';
            if (r.nominal.applicable && r.nominal.ok && std::isfinite(r.nominal.pct_increase)) {
                nom_sum += r.nominal.pct_increase;
                ++nom_n;
            }
        }
        if (nom_n > 0)
            t << "average_nominal,," << nom_sum / nom_n << ",,,,,,\n";
    }
    return results;
}

}  // namespace dhn
