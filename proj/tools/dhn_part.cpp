#include <cstdio>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "dhn/harness.hpp"

namespace {

dhn::Partition parse_partition(const std::string& s) {
    std::vector<std::vector<int>> blocks;
    std::vector<int> cur;
    std::string tok;
    auto flush_tok = [&]() {
        if (!tok.empty()) {
            cur.push_back(std::stoi(tok));
            tok.clear();
        }
    };
    for (char c : s) {
        if (c == '|') {
            flush_tok();
            if (!cur.empty()) blocks.push_back(std::move(cur));
            cur.clear();
        } else if (c == ',') {
            flush_tok();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            tok.push_back(c);
        }
    }
    flush_tok();
    if (!cur.empty()) blocks.push_back(std::move(cur));
    if (blocks.empty()) throw dhn::ConfigError("empty partition string");
    return dhn::Partition(std::move(blocks));
}

void print_score(const dhn::OlmScore& s) {
    if (s.converged)
        std::printf("c_olm=%.6f  c_mPoA=%.6f  c_sz=%.0f  c_iter=%.0f\n", s.c_olm, s.c_mPoA,
                    s.c_sz, s.c_iter);
    else
        std::printf("c_olm=inf (non-converging)  c_sz=%.0f\n", s.c_sz);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"District heating network partitioning and distributed MPC workbench"};
    app.require_subcommand(1);

    std::string network = "data/four_user.json";
    std::string scenario = "data/scenario_nominal.json";
    std::string case_id = "a";
    std::string mode = "learned";
    std::string out_dir = "out";
    std::string partition_str;
    std::uint64_t seed = 0;
    app.add_option("--network", network, "network topology JSON");
    app.add_option("--scenario", scenario, "scenario JSON");
    app.add_option("--case", case_id, "sensitivity case id (a..m, b-retuned)");
    app.add_option("--mode", mode, "search mode: learned|exact")
        ->check(CLI::IsMember({"learned", "exact"}));
    app.add_option("--seed", seed, "random seed");
    app.add_option("--out-dir", out_dir, "output directory");

    auto* cmd_part = app.add_subcommand("partition", "search for the OLM-minimizing partition");
    auto* cmd_eval = app.add_subcommand("evaluate", "score one partition with the OLM");
    cmd_eval->add_option("--partition", partition_str,
                         "blocks as id lists, e.g. \"0,1,8|2,...\"; default single block");
    auto* cmd_sim = app.add_subcommand("simulate", "closed-loop rollout of one partition");
    cmd_sim->add_option("--partition", partition_str,
                        "partition to control with; default single block (centralized)");
    auto* cmd_sens = app.add_subcommand("sensitivity", "run the full case study a..m");
    auto* cmd_enum = app.add_subcommand("enumerate", "flat-enumerate all valid partitions");
    // Shared options may appear after the subcommand name too.
    for (auto* c : {cmd_part, cmd_eval, cmd_sim, cmd_sens, cmd_enum}) c->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        auto topo = dhn::load_network(network);
        auto sc0 = dhn::load_scenario(scenario);
        sc0.validate(topo);
        auto sc = dhn::apply_case(sc0, dhn::case_from_string(case_id));
        std::filesystem::create_directories(out_dir);
        const auto out = [&](const std::string& f) {
            return (std::filesystem::path(out_dir) / f).string();
        };
        const dhn::SearchMode smode =
            mode == "exact" ? dhn::SearchMode::Exact : dhn::SearchMode::Learned;

        if (cmd_part->parsed()) {
            dhn::SearchParams sp;
            sp.seed = seed;
            sp.cel.seed = seed;
            sp.log_path = out("search_log_" + sc.label + ".csv");
            sp.resume_path = out("search_resume_" + sc.label + ".json");
            dhn::OlmEvaluator ev(topo, sc);
            auto res = dhn::run_lebnb(topo, sc, sp, smode, ev);
            std::printf("best partition: %s\n", res.best.key().c_str());
            print_score(res.best_score);
            std::printf("evaluations: %lld\nlog: %s\n", res.evaluations, sp.log_path.c_str());
            if (!res.warning.empty()) std::printf("warning: %s\n", res.warning.c_str());
        } else if (cmd_eval->parsed()) {
            dhn::Partition p = partition_str.empty()
                                   ? dhn::single_block_partition(topo.comp)
                                   : parse_partition(partition_str);
            if (auto v = dhn::validate_partition(p, topo.comp); !v.empty())
                throw dhn::ConfigError("invalid partition: " + v.front());
            dhn::OlmEvaluator ev(topo, sc);
            std::printf("partition: %s\n", p.key().c_str());
            print_score(ev.evaluate(p));
        } else if (cmd_sim->parsed()) {
            dhn::Partition p = partition_str.empty()
                                   ? dhn::single_block_partition(topo.comp)
                                   : parse_partition(partition_str);
            if (auto v = dhn::validate_partition(p, topo.comp); !v.empty())
                throw dhn::ConfigError("invalid partition: " + v.front());
            auto rr = dhn::rollout(topo, sc, p);
            const std::string path = out("sim_" + sc.label + ".csv");
            rr.log.to_csv(path);
            std::printf("steps=%d converged=%d/%d total_cost=%.6f\nlog: %s\n", rr.steps,
                        rr.converged_steps, rr.steps, rr.total_cost, path.c_str());
        } else if (cmd_sens->parsed()) {
            dhn::HarnessParams hp;
            hp.mode = smode;
            hp.search.seed = seed;
            hp.search.cel.seed = seed;
            hp.out_dir = out_dir;
            auto results = dhn::run_sensitivity(topo, sc0, hp);
            for (const auto& r : results) {
                if (!r.error.empty()) {
                    std::printf("case %-9s FAILED: %s\n", r.name.c_str(), r.error.c_str());
                    continue;
                }
                std::printf("case %-9s olm%%=%8.3f nominal%%=%8s baseline%%=%8.3f  %s\n",
                            r.name.c_str(), r.olm.pct_increase,
                            r.nominal.applicable && r.nominal.ok
                                ? std::to_string(r.nominal.pct_increase).c_str()
                                : "-",
                            r.baseline.pct_increase, r.olm_part.key().c_str());
            }
            std::printf("table: %s\n", out("table4.csv").c_str());
        } else if (cmd_enum->parsed()) {
            auto parts = dhn::enumerate_valid_partitions(topo);
            dhn::OlmEvaluator ev(topo, sc);
            const std::string path = out("enumeration_" + sc.label + ".csv");
            std::ofstream f(path);
            f << "partition,converged,c_olm,c_mPoA,c_sz,c_iter\n";
            int conv = 0;
            double best = std::numeric_limits<double>::infinity();
            std::string best_key;
            for (const auto& p : parts) {
                auto s = ev.evaluate(p);
                f << '"' << p.key() << "\"," << (s.converged ? 1 : 0) << ','
                  << (s.converged ? std::to_string(s.c_olm) : "inf") << ',' << s.c_mPoA
                  << ',' << s.c_sz << ',' << s.c_iter << '\n';
                if (s.converged) {
                    ++conv;
                    if (s.c_olm < best) { best = s.c_olm; best_key = p.key(); }
                }
            }
            std::printf("%zu valid partitions, %d converging (%.1f%%)\n", parts.size(), conv,
                        100.0 * conv / std::max<size_t>(1, parts.size()));
            if (conv) std::printf("best: %s c_olm=%.6f\n", best_key.c_str(), best);
            std::printf("log: %s\n", path.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
