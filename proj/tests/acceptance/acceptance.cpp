// Runs the recipe for each acceptance criterion through the same code path as
// the ddram tool and prints one PASS/FAIL line per criterion. A criterion
// passes when every check in its recipe holds within the runtime budget.

#include "ddram/ddram.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

struct Criterion {
    int id;
    const char* recipe;
    const char* title;
    double budget_s;
};

const std::vector<Criterion> kCriteria = {
    {1, "c01_tau_law.toml", "midpoint-time law", 10},
    {2, "c02_noise_pair.toml", "noise pair covariance", 10},
    {3, "c03_reductions.toml", "reduction identities and factor inversion", 30},
    {4, "c04_stationary.toml", "stationary exactness", 60},
    {5, "c05_score_oracles.toml", "score oracles and Lipschitz profile", 30},
    {6, "c06_local_error_orders.toml", "local-error orders", 60},
    {7, "c07_sde_ordering.toml", "SDE sampler ordering", 600},
    {8, "c08_ode_ordering.toml", "ODE sampler ordering", 600},
    {9, "c09_schedule_scaling.toml", "theory schedule scaling", 5},
    {10, "c10_score_audit.toml", "score perturbation audit", 30},
};

bool run(const Criterion& c, const std::filesystem::path& out_root, bool verbose) {
    const auto path = std::filesystem::path(DDRAM_RECIPE_DIR) / c.recipe;
    std::ostringstream log;
    ddram::RunOptions opt;
    opt.out_dir = out_root / std::filesystem::path(c.recipe).stem();
    opt.log = verbose ? &std::cout : &log;
    const auto start = std::chrono::steady_clock::now();
    std::string summary;
    bool pass = false;
    try {
        const auto cfg = ddram::load_experiment(path.string());
        const auto res = ddram::run_command(cfg.command, cfg, opt);
        pass = res.all_pass() && !res.checks.empty();
        for (const auto& chk : res.checks)
            if (!chk.pass) summary += "; failed " + chk.name + ": " + chk.detail;
    } catch (const std::exception& e) {
        summary = std::string("; error: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > c.budget_s) {
        pass = false;
        summary += "; over budget";
    }
    std::ostringstream line;
    line.precision(3);
    line << (pass ? "PASS" : "FAIL") << " C" << c.id << ' ' << c.title << " (" << secs << " s of " << c.budget_s
         << " s)" << summary;
    std::cout << line.str() << std::endl;
    if (!pass && !verbose) std::cout << log.str();
    return pass;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ddram acceptance criteria"};
    int only = 0;
    std::string out = "acceptance_out";
    bool verbose = false;
    app.add_option("--only", only, "run a single criterion (1-10)")->check(CLI::Range(1, 10));
    app.add_option("--out", out, "output root directory");
    app.add_flag("-v,--verbose", verbose, "stream command output");
    CLI11_PARSE(app, argc, argv);

    bool all = true;
    for (const auto& c : kCriteria)
        if (only == 0 || only == c.id) all = run(c, out, verbose) && all;
    return all ? 0 : 1;
}
