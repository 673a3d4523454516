#pragma once

// The five commands behind the ddram tool. Each one reads a validated
// ExperimentConfig, writes its outputs under an output directory and returns
// the outcome of any [check] thresholds the config declares.

#include "ddram/config.hpp"
#include "ddram/metrics.hpp"
#include "ddram/noise_kernels.hpp"
#include "ddram/ou_process.hpp"
#include "ddram/process.hpp"
#include "ddram/samplers.hpp"
#include "ddram/schedules.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace ddram {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct CommandResult {
    std::vector<CheckResult> checks;
    std::vector<std::filesystem::path> files;

    bool all_pass() const {
        return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
    }
};

struct RunOptions {
    std::filesystem::path out_dir = ".";
    std::optional<std::uint64_t> seed;  // overrides the config seed
    int threads = 0;                    // 0: config value, then DDRAM_THREADS
    std::ostream* log = &std::cout;
};

namespace detail {

inline std::string fmt(double v, int precision = 6) {
    std::ostringstream out;
    out << std::setprecision(precision) << v;
    return out.str();
}

struct RunContext {
    const ExperimentConfig& cfg;
    RunOptions opt;
    std::uint64_t seed;
    int threads;

    std::string header() const {
        std::ostringstream out;
        out << "# ddram " << kVersion << " command=" << (cfg.command.empty() ? "?" : cfg.command)
            << " config=" << cfg.doc->hash_hex() << " seed=" << seed << '\n';
        return out.str();
    }

    std::ofstream open(const std::string& name, CommandResult& res, bool binary = false) const {
        std::filesystem::create_directories(opt.out_dir);
        const auto path = opt.out_dir / name;
        std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
        if (!out) throw std::runtime_error("cannot write " + path.string());
        res.files.push_back(path);
        return out;
    }

    std::ostream& log() const { return *opt.log; }
};

inline RunContext make_context(const ExperimentConfig& cfg, const RunOptions& opt) {
    RunContext ctx{cfg, opt, opt.seed.value_or(cfg.seed), opt.threads};
    if (ctx.threads <= 0) ctx.threads = cfg.threads > 0 ? cfg.threads : default_thread_count();
    return ctx;
}

/// Converts setup failures (incompatible options found only while building
/// schedules and samplers) into config errors.
template <class F>
auto setup(const ExperimentConfig& cfg, const std::string& what, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(cfg.doc->path + ": " + what + ": " + e.what());
    }
}

inline ScoreField build_score(const ExperimentConfig& cfg) {
    const auto exact = ScoreField::exact(cfg.require_target("sampling"));
    return cfg.score_epsilon > 0.0 ? perturb_score(exact, cfg.score_epsilon) : exact;
}

inline bool needs_process(const ExperimentConfig& cfg, SamplerKind kind) {
    return uses_process_grid(kind) || (kind == SamplerKind::rmd_general && cfg.process);
}

inline StepSchedule build_schedule(const ExperimentConfig& cfg, SamplerKind kind, int steps) {
    const auto& s = cfg.schedule;
    const bool process = needs_process(cfg, kind);
    if (s.kind == "log_sigma") {
        if (!cfg.process) throw DomainError("a log_sigma schedule needs a [process] table");
        if (!process) throw DomainError(to_string(kind) + " runs on an algorithmic grid, not a log_sigma grid");
        return log_sigma_schedule(*cfg.process, s.sigma_min, s.sigma_max, s.rho, steps);
    }
    if (process && s.kind != "explicit")
        throw DomainError(to_string(kind) + " with a process needs a log_sigma or explicit schedule");
    if (s.kind == "uniform") return uniform_schedule(s.horizon, steps, s.delta);
    if (s.kind == "decaying") return decaying_schedule(s.horizon, s.delta, steps);
    if (s.kind == "theory") {
        const auto& t = cfg.require_target("theory schedule");
        return theory_schedule({s.epsilon, s.beta0, t.dim(), std::sqrt(t.second_moment()), s.c_h}, s.max_steps);
    }
    StepSchedule g;
    g.axis = process ? ScheduleAxis::process : ScheduleAxis::algorithmic;
    g.times = s.times;
    g.horizon = process ? s.times.front() : s.horizon;
    g.validate();
    return g;
}

inline SamplingProblem build_problem(const ExperimentConfig& cfg, SamplerKind kind, const StepSchedule& grid) {
    const auto& target = cfg.require_target("sampling");
    SamplingProblem p;
    p.dim = target.dim();
    if (needs_process(cfg, kind)) {
        if (cfg.score_epsilon > 0.0) throw DomainError("perturbed scores apply to OU samplers only");
        ProcessSpec spec = *cfg.process;
        const double t_start = grid.times.front();
        spec.start_variance = forward_variance(spec, target, t_start);
        p.sde = semilinear(spec, analytic_reparam_score(target));
        p.prior_variance = spec.prior_variance(t_start);
    } else {
        p.score = build_score(cfg);
    }
    return p;
}

inline Sampler build_sampler(const ExperimentConfig& cfg, SamplerKind kind, int steps) {
    const auto grid = build_schedule(cfg, kind, steps);
    SamplerOptions o;
    o.kind = kind;
    o.truncation_r = cfg.truncation_r;
    o.force_numeric_factors = cfg.numeric_factors;
    return Sampler(build_problem(cfg, kind, grid), grid, o);
}

/// Steps that spend at most nfe score evaluations.
inline int steps_for_nfe(SamplerKind kind, int nfe) {
    if (kind == SamplerKind::heun_ode) return (nfe + 1) / 2;
    return is_midpoint(kind) ? nfe / 2 : nfe;
}

inline std::pair<double, double> range_of(const ConfigTable& t, const std::string& key) {
    const auto v = t.require<std::vector<double>>(key);
    if (v.size() != 2 || v[0] > v[1]) t.fail(key, "expected [low, high]");
    return {v[0], v[1]};
}

inline void write_samples(std::ostream& out, const Matrix& samples, const std::string& trailer) {
    auto put = [&](auto v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
    out.write("DDRM", 4);
    put(std::uint32_t{1});
    put(static_cast<std::uint32_t>(samples.cols()));
    put(static_cast<std::uint64_t>(samples.rows()));
    for (Eigen::Index i = 0; i < samples.rows(); ++i)
        for (Eigen::Index j = 0; j < samples.cols(); ++j) put(static_cast<double>(samples(i, j)));
    out << trailer;
}

inline void report_checks(const RunContext& ctx, const CommandResult& res) {
    for (const auto& c : res.checks) ctx.log() << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
}

}  // namespace detail

/// Reads a DDRM sample file; the trailing metadata line is ignored.
inline Matrix read_samples(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    char magic[4];
    std::uint32_t version = 0, dim = 0;
    std::uint64_t count = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&dim), sizeof dim);
    in.read(reinterpret_cast<char*>(&count), sizeof count);
    if (!in || std::string(magic, 4) != "DDRM") throw std::runtime_error(path.string() + ": not a DDRM file");
    Matrix m(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) in.read(reinterpret_cast<char*>(&m(i, j)), sizeof(double));
    if (!in) throw std::runtime_error(path.string() + ": truncated DDRM file");
    return m;
}

// ---- sample ---------------------------------------------------------------

inline CommandResult cmd_sample(const ExperimentConfig& cfg, const RunOptions& opt) {
    const auto ctx = detail::make_context(cfg, opt);
    const auto& target = cfg.require_target("sample");
    const auto sampler = detail::setup(cfg, "sampler", [&] {
        return detail::build_sampler(cfg, cfg.sampler, cfg.schedule.steps);
    });
    std::optional<double> max_cov, max_mean, max_sw2;
    if (cfg.check) {
        max_cov = cfg.check->has("max_cov_gap") ? std::optional(cfg.check->require<double>("max_cov_gap")) : std::nullopt;
        max_mean = cfg.check->has("max_mean_gap") ? std::optional(cfg.check->require<double>("max_mean_gap")) : std::nullopt;
        max_sw2 = cfg.check->has("max_sliced_w2") ? std::optional(cfg.check->require<double>("max_sliced_w2")) : std::nullopt;
        cfg.check->finish();
    }

    CommandResult res;
    const auto& grid = sampler.schedule();
    ctx.log() << "sample: " << to_string(cfg.sampler) << ", " << grid.steps() << " steps, " << sampler.nfe_per_chain()
              << " NFE per chain, " << cfg.chains << " chains, " << ctx.threads << " threads\n";
    const auto t0 = std::chrono::steady_clock::now();
    const auto batch = run_chains(sampler, ctx.seed, cfg.chains, ctx.threads);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    // compare against the law the grid targets: pi at the end gap on OU grids, pi_0 otherwise
    const double t_law = grid.axis == ScheduleAxis::algorithmic ? grid.end_gap() : 0.0;
    const auto law = marginal(target, t_law).family;
    const auto gap = moment_gap(batch.samples, law.mean(), law.covariance());
    const SlicedReference ref(target, 128, ctx.seed ^ 0x5eedULL, 100000);
    const double sw2 = ref.distance(batch.samples);

    {
        auto out = ctx.open("samples.ddrm", res, true);
        detail::write_samples(out, batch.samples, ctx.header());
    }
    {
        auto out = ctx.open("samples.csv", res);
        out << ctx.header() << std::setprecision(17);
        for (Eigen::Index j = 0; j < batch.samples.cols(); ++j) out << (j ? "," : "") << 'x' << j;
        out << '\n';
        for (Eigen::Index i = 0; i < batch.samples.rows(); ++i) {
            for (Eigen::Index j = 0; j < batch.samples.cols(); ++j) out << (j ? "," : "") << batch.samples(i, j);
            out << '\n';
        }
    }
    {
        auto out = ctx.open("metrics.csv", res);
        out << ctx.header() << std::setprecision(10);
        out << "sampler,steps,nfe,chains,end_gap,mean_gap,cov_gap,sliced_w2\n";
        out << to_string(cfg.sampler) << ',' << grid.steps() << ',' << sampler.nfe_per_chain() << ',' << cfg.chains
            << ',' << (grid.axis == ScheduleAxis::algorithmic ? grid.end_gap() : grid.times.back()) << ','
            << gap.mean_gap << ',' << gap.cov_gap << ',' << sw2 << '\n';
    }
    ctx.log() << "  mean gap " << gap.mean_gap << ", covariance gap " << gap.cov_gap << ", sliced W2 " << sw2 << " ("
              << detail::fmt(secs, 3) << " s)\n";
    if (max_cov)
        res.checks.push_back({"covariance gap", gap.cov_gap <= *max_cov,
                              "operator norm " + detail::fmt(gap.cov_gap) + " <= " + detail::fmt(*max_cov)});
    if (max_mean)
        res.checks.push_back({"mean gap", gap.mean_gap <= *max_mean,
                              "norm " + detail::fmt(gap.mean_gap) + " <= " + detail::fmt(*max_mean)});
    if (max_sw2)
        res.checks.push_back({"sliced W2", sw2 <= *max_sw2, detail::fmt(sw2) + " <= " + detail::fmt(*max_sw2)});
    detail::report_checks(ctx, res);
    return res;
}

// ---- local-error ----------------------------------------------------------

inline CommandResult cmd_local_error(const ExperimentConfig& cfg, const RunOptions& opt) {
    const auto ctx = detail::make_context(cfg, opt);
    const auto& target = cfg.require_target("local-error");
    const auto& le = cfg.local_error;
    if (le.method == "analytic" && target.kind() != TargetFamily::Kind::gaussian)
        throw ConfigError(cfg.doc->path + ": local-error: the analytic method needs a Gaussian target");
    if (le.start && le.start->size() != target.dim())
        throw ConfigError(cfg.doc->path + ": local_error.start: dimension does not match the target");
    for (auto k : le.samplers)
        if (uses_process_grid(k)) throw ConfigError(cfg.doc->path + ": local-error: " + to_string(k) + " is not an OU sampler");

    std::string check_sampler = "rmd";
    std::optional<std::pair<double, double>> strong_range, weak_range;
    std::optional<std::string> weak_below;
    if (cfg.check) {
        check_sampler = cfg.check->get<std::string>("sampler", check_sampler);
        if (cfg.check->has("strong_order")) strong_range = detail::range_of(*cfg.check, "strong_order");
        if (cfg.check->has("weak_order")) weak_range = detail::range_of(*cfg.check, "weak_order");
        if (cfg.check->has("weak_below")) weak_below = cfg.check->require<std::string>("weak_below");
        cfg.check->finish();
    }

    const auto score = detail::build_score(cfg);
    std::map<SamplerKind, ErrorReport> reports;
    for (auto kind : le.samplers) {
        ErrorReport rep;
        rep.target = target.to_json().dump();
        rep.sampler = to_string(kind);
        rep.horizon = le.horizon;
        rep.t_left = le.t_left;
        rep.method = le.method;
        for (double h : le.hs) {
            LocalError e;
            if (le.method == "analytic") {
                e = le.start ? local_errors(kind, target, *le.start, le.horizon, le.t_left, h, cfg.truncation_r)
                             : local_errors_averaged(kind, target, le.horizon, le.t_left, h, le.start_points, ctx.seed,
                                                     cfg.truncation_r);
            } else {
                Vector x;
                if (le.start) {
                    x = *le.start;
                } else {
                    RandomStream rng(ctx.seed, "local-error-start");
                    x = forward_sample(target, le.horizon - le.t_left, rng);
                }
                e = local_errors_mc(kind, score, x, le.horizon, le.t_left, h, le.mc_samples, ctx.seed, le.substeps,
                                    cfg.truncation_r);
            }
            rep.rows.push_back({h, e});
        }
        reports[kind] = rep;
    }

    CommandResult res;
    {
        auto out = ctx.open("local_error.csv", res);
        out << ctx.header() << "sampler,method,h,metric,value,se\n";
        for (const auto& [_, rep] : reports) {
            const auto csv = rep.to_csv();
            out << csv.substr(csv.find('\n') + 1);
        }
    }
    {
        auto out = ctx.open("local_error.json", res);
        nlohmann::json j;
        j["tool"] = std::string("ddram ") + kVersion;
        j["config"] = cfg.doc->hash_hex();
        j["seed"] = ctx.seed;
        for (const auto& [_, rep] : reports) j["reports"].push_back(rep.to_json());
        out << j.dump(2) << '\n';
    }
    for (const auto& [kind, rep] : reports) {
        ctx.log() << to_string(kind) << ":\n";
        for (const auto& r : rep.rows)
            ctx.log() << "  h=" << detail::fmt(r.h) << " weak=" << detail::fmt(r.error.weak)
                      << " strong=" << detail::fmt(r.error.strong) << '\n';
        if (rep.rows.size() >= 3)
            ctx.log() << "  orders: weak " << detail::fmt(rep.weak_fit().slope, 4) << ", strong "
                      << detail::fmt(rep.strong_fit().slope, 4) << '\n';
    }

    bool ordered = true;
    for (const auto& [_, rep] : reports)
        for (const auto& r : rep.rows) ordered = ordered && r.error.weak <= r.error.strong;
    res.checks.push_back({"weak <= strong", ordered, "every row"});
    if (strong_range || weak_range || weak_below) {
        const auto kind = sampler_from_string(check_sampler);
        if (!reports.count(kind)) throw ConfigError(cfg.doc->path + ": check.sampler is not in the sweep");
        const auto& rep = reports.at(kind);
        if (rep.rows.size() < 3) throw ConfigError(cfg.doc->path + ": order checks need at least 3 step sizes");
        if (strong_range) {
            const auto f = rep.strong_fit();
            res.checks.push_back({check_sampler + " strong order", f.slope >= strong_range->first && f.slope <= strong_range->second,
                                  detail::fmt(f.slope, 4) + " +- " + detail::fmt(f.band, 2) + " in [" +
                                      detail::fmt(strong_range->first) + ", " + detail::fmt(strong_range->second) + "]"});
        }
        if (weak_range) {
            const auto f = rep.weak_fit();
            res.checks.push_back({check_sampler + " weak order", f.slope >= weak_range->first && f.slope <= weak_range->second,
                                  detail::fmt(f.slope, 4) + " +- " + detail::fmt(f.band, 2) + " in [" +
                                      detail::fmt(weak_range->first) + ", " + detail::fmt(weak_range->second) + "]"});
        }
        if (weak_below) {
            const auto other = sampler_from_string(*weak_below);
            if (!reports.count(other)) throw ConfigError(cfg.doc->path + ": check.weak_below is not in the sweep");
            const auto& o = reports.at(other);
            bool below = true;
            double worst = 0.0;
            for (std::size_t i = 0; i < rep.rows.size(); ++i) {
                below = below && rep.rows[i].error.weak < o.rows[i].error.weak;
                worst = std::max(worst, rep.rows[i].error.weak / o.rows[i].error.weak);
            }
            res.checks.push_back({check_sampler + " weak error below " + *weak_below, below,
                                  "largest ratio " + detail::fmt(worst, 4) + " over " + std::to_string(rep.rows.size()) +
                                      " step sizes"});
        }
    }
    detail::report_checks(ctx, res);
    return res;
}

// ---- convergence ----------------------------------------------------------

struct ConvergencePoint {
    int replicate = 0;
    SamplerKind sampler = SamplerKind::rmd;
    int budget = 0;
    std::size_t nfe = 0;
    std::size_t steps = 0;
    double value = 0.0;
};

inline CommandResult cmd_convergence(const ExperimentConfig& cfg, const RunOptions& opt) {
    const auto ctx = detail::make_context(cfg, opt);
    const auto& target = cfg.require_target("convergence");
    const auto& cv = cfg.convergence;

    std::vector<SamplerKind> ordering;
    int ordering_min_nfe = 0;
    int ordering_replicates = cv.replicates;
    std::optional<double> monotone_se;
    if (cfg.check) {
        for (const auto& s : cfg.check->get<std::vector<std::string>>("ordering", {}))
            ordering.push_back(detail::parse_sampler(*cfg.check, "ordering", s));
        ordering_min_nfe = cfg.check->get("ordering_min_nfe", 0);
        ordering_replicates = cfg.check->get("ordering_replicates", ordering_replicates);
        if (cfg.check->has("monotone_se")) monotone_se = cfg.check->require<double>("monotone_se");
        cfg.check->finish();
        for (auto k : ordering)
            if (std::find(cv.samplers.begin(), cv.samplers.end(), k) == cv.samplers.end())
                cfg.check->fail("ordering", to_string(k) + " is not among convergence.samplers");
    }

    // build every sampler up front so configuration problems surface before any run
    std::map<std::pair<SamplerKind, int>, Sampler> samplers;
    for (auto kind : cv.samplers)
        for (int budget : cv.nfe) {
            const int steps = detail::steps_for_nfe(kind, budget);
            if (steps < 1) throw ConfigError(cfg.doc->path + ": NFE budget " + std::to_string(budget) + " too small for " + to_string(kind));
            samplers.emplace(std::pair{kind, budget}, detail::setup(cfg, "sampler", [&] {
                                 return detail::build_sampler(cfg, kind, steps);
                             }));
        }
    const SlicedReference ref(target, cv.n_proj, ctx.seed ^ 0x5eedULL, cv.reference_samples);

    std::vector<ConvergencePoint> points;
    for (int r = 0; r < cv.replicates; ++r) {
        const std::uint64_t seed = ctx.seed + static_cast<std::uint64_t>(r);
        for (auto kind : cv.samplers)
            for (int budget : cv.nfe) {
                const auto& s = samplers.at({kind, budget});
                const auto batch = run_chains(s, seed, cfg.chains, ctx.threads);
                ConvergencePoint p{r, kind, budget, batch.nfe_per_chain, s.schedule().steps(), ref.distance(batch.samples)};
                ctx.log() << "replicate " << r << ' ' << std::setw(12) << std::left << to_string(kind) << std::right
                          << " NFE " << std::setw(4) << p.nfe << "  sliced W2 " << detail::fmt(p.value) << '\n';
                points.push_back(p);
            }
    }

    CommandResult res;
    {
        auto out = ctx.open("convergence.csv", res);
        out << ctx.header() << std::setprecision(10) << "replicate,sampler,nfe_budget,nfe,steps,metric,value\n";
        for (const auto& p : points)
            out << p.replicate << ',' << to_string(p.sampler) << ',' << p.budget << ',' << p.nfe << ',' << p.steps
                << ",sliced_w2," << p.value << '\n';
    }

    auto value = [&](int r, SamplerKind k, int budget) {
        for (const auto& p : points)
            if (p.replicate == r && p.sampler == k && p.budget == budget) return p.value;
        return std::numeric_limits<double>::quiet_NaN();
    };
    if (ordering.size() >= 2) {
        int good = 0;
        std::ostringstream detail_msg;
        for (int r = 0; r < cv.replicates; ++r) {
            bool ok = true;
            for (int budget : cv.nfe) {
                if (budget < ordering_min_nfe) continue;
                for (std::size_t i = 0; i + 1 < ordering.size(); ++i)
                    if (!(value(r, ordering[i], budget) <= value(r, ordering[i + 1], budget))) {
                        ok = false;
                        detail_msg << " [rep " << r << " NFE " << budget << ": " << to_string(ordering[i]) << ' '
                                   << detail::fmt(value(r, ordering[i], budget), 4) << " > " << to_string(ordering[i + 1])
                                   << ' ' << detail::fmt(value(r, ordering[i + 1], budget), 4) << ']';
                    }
            }
            good += ok;
        }
        std::string names;
        for (std::size_t i = 0; i < ordering.size(); ++i) names += (i ? " <= " : "") + to_string(ordering[i]);
        res.checks.push_back({"ordering " + names, good >= ordering_replicates,
                              std::to_string(good) + " of " + std::to_string(cv.replicates) +
                                  " replicates hold at every NFE >= " + std::to_string(ordering_min_nfe) + detail_msg.str()});
    }
    if (monotone_se) {
        for (auto kind : cv.samplers) {
            bool ok = true;
            std::ostringstream msg;
            for (std::size_t i = 0; i + 1 < cv.nfe.size(); ++i) {
                std::vector<double> d;
                for (int r = 0; r < cv.replicates; ++r)
                    d.push_back(value(r, kind, cv.nfe[i + 1]) - value(r, kind, cv.nfe[i]));
                double mean = 0.0, var = 0.0;
                for (double x : d) mean += x / d.size();
                for (double x : d) var += (x - mean) * (x - mean);
                const double se = d.size() > 1 ? std::sqrt(var / (d.size() - 1) / d.size()) : 0.0;
                if (mean > *monotone_se * se) {
                    ok = false;
                    msg << " [NFE " << cv.nfe[i] << "->" << cv.nfe[i + 1] << ": +" << detail::fmt(mean, 3) << ", se "
                        << detail::fmt(se, 3) << ']';
                }
            }
            res.checks.push_back({to_string(kind) + " nonincreasing in NFE", ok,
                                  "paired increments within " + detail::fmt(*monotone_se) + " SE" + msg.str()});
        }
    }
    detail::report_checks(ctx, res);
    return res;
}

// ---- validate -------------------------------------------------------------

namespace detail {

struct ValidateRow {
    std::string check;
    std::string item;
    double value;
    double threshold;
    bool pass;
};

inline std::vector<ProcessSpec> named_specs_for_validation() {
    std::vector<ProcessSpec> out = {ProcessSpec::ou(), ProcessSpec::vp(0.1, 20.0), ProcessSpec::ve(), ProcessSpec::edm()};
    for (auto base : {ProcessSpec::vp(0.1, 20.0), ProcessSpec::edm()}) {
        base.churn = ChurnKind::none;
        out.push_back(base);
        base.churn = ChurnKind::matched;
        out.push_back(base);
    }
    return out;
}

inline std::string spec_label(const ProcessSpec& s) {
    static const char* churn[] = {"none", "song", "matched", "constant"};
    return to_string(s.kind) + "/" + churn[static_cast<int>(s.churn)] + "/" + to_string(s.resolved_lambda());
}

inline double ks_statistic(std::vector<double> xs, const std::function<double(double)>& cdf) {
    std::sort(xs.begin(), xs.end());
    const double n = static_cast<double>(xs.size());
    double d = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double f = cdf(xs[i]);
        d = std::max({d, f - i / n, (i + 1) / n - f});
    }
    return d;
}

// gradient of log pi_t by a five-point central stencil
inline Vector fd_gradient(const TargetFamily& f, double t, const Vector& x, double e) {
    Vector g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        auto at = [&](double s) {
            Vector y = x;
            y[i] += s;
            return log_density(f, t, y);
        };
        g[i] = (-at(2 * e) + 8 * at(e) - 8 * at(-e) + at(-2 * e)) / (12 * e);
    }
    return g;
}

}  // namespace detail

inline CommandResult cmd_validate(const ExperimentConfig& cfg, const RunOptions& opt) {
    const auto ctx = detail::make_context(cfg, opt);
    if (!cfg.validate) throw ConfigError(cfg.doc->path + ": validate needs a [validate] table");
    const auto& v = *cfg.validate;
    std::vector<detail::ValidateRow> rows;
    CommandResult res;

    auto summarize = [&](const std::string& name, const std::string& what) {
        bool pass = true;
        double worst = 0.0;
        int n = 0;
        for (const auto& r : rows)
            if (r.check == name) pass = pass && r.pass, worst = std::max(worst, r.value), ++n;
        res.checks.push_back({name, pass, what + " (" + std::to_string(n) + " cases, largest " + detail::fmt(worst, 4) + ")"});
    };

    if (auto t = v.optional_table("tau_law")) {
        const auto hs = t->get<std::vector<double>>("h", {0.05, 0.5, 1.0});
        const auto draws = t->get<std::size_t>("draws", 1'000'000);
        const double max_ks = t->require<double>("max_ks");
        const bool truncated = t->get("truncated", false);
        const double r = t->get("truncation_r", 4.0);
        t->finish();
        for (std::size_t i = 0; i < hs.size(); ++i) {
            const double h = hs[i];
            if (!(h > 0.0) || (truncated && !(h < 1.0))) t->fail("h", "invalid step " + detail::fmt(h));
            RandomStream rng(ctx.seed, "validate-tau", i);
            std::vector<double> xs(draws);
            const double rho = truncation_level(h, r);
            for (auto& x : xs) x = truncated ? sample_tau_truncated(h, rho, rng) : sample_tau(h, rng);
            const double ks = truncated ? detail::ks_statistic(xs, [&](double x) { return truncated_tau_cdf(h, rho, x); })
                                        : detail::ks_statistic(xs, [&](double x) { return tau_cdf(h, x); });
            rows.push_back({"tau_law", "h=" + detail::fmt(h), ks, max_ks, ks < max_ks});
        }
        summarize("tau_law", "KS distance < " + detail::fmt(max_ks));
    }

    if (auto t = v.optional_table("noise_pair")) {
        const double tau = t->get("tau", 0.3), h = t->get("h", 0.5);
        const auto draws = t->get<std::size_t>("draws", 1'000'000);
        const double tol = t->require<double>("tolerance");
        t->finish();
        if (!(h > 0.0 && tau >= 0.0 && tau <= h)) t->fail("tau", "need 0 <= tau <= h");
        RandomStream rng(ctx.seed, "validate-noise-pair");
        double vp = 0, vx = 0, c = 0;
        for (std::size_t i = 0; i < draws; ++i) {
            const double z1 = rng.normal(), z2 = rng.normal();
            const auto p = correlated_pair(tau, h, Vector::Constant(1, z1), Vector::Constant(1, z2));
            vp += p.xi_plus[0] * p.xi_plus[0];
            vx += p.xi[0] * p.xi[0];
            c += p.xi_plus[0] * p.xi[0];
        }
        const double n = static_cast<double>(draws);
        const double want_vp = -std::expm1(-2 * tau), want_c = std::exp(tau - h) - std::exp(-tau - h),
                     want_vx = -std::expm1(-2 * h);
        for (auto [name, got, want] : {std::tuple{"var_xi_plus", vp / n, want_vp}, std::tuple{"cov", c / n, want_c},
                                       std::tuple{"var_xi", vx / n, want_vx}})
            rows.push_back({"noise_pair", std::string(name) + " " + detail::fmt(got) + " vs " + detail::fmt(want),
                            std::abs(got - want), tol, std::abs(got - want) < tol});
        summarize("noise_pair", "moment deviations < " + detail::fmt(tol));
    }

    if (auto t = v.optional_table("reductions")) {
        const auto steps = t->get<std::size_t>("steps", 10000);
        const double tol = t->require<double>("tolerance");
        const double T = t->get("T", 3.0);
        t->finish();
        const auto& target = cfg.require_target("validate.reductions");
        const auto score = detail::build_score(cfg);
        const auto sde = ou_semilinear(score, T);
        const auto rme = without_linear_part(sde);
        auto f_of = [&](double tt, const Vector& x) { return Vector(-x + 2.0 * score.relative(T - tt, x)); };
        double dev_ou = 0.0, dev_rme = 0.0;
        for (std::size_t i = 0; i < steps; ++i) {
            RandomStream rng(ctx.seed, "validate-reductions", i);
            const double t0 = (T - 0.1) * rng.uniform();
            const double h = std::min(0.5, T - 0.05 - t0) * (0.02 + 0.98 * rng.uniform());
            const Vector x = std::sqrt(2.0) * rng.normal_vector(target.dim());
            const auto n = draw_step_noise(rng, target.dim());
            const auto f = factors_closed_form(sde, t0, t0 + h);
            dev_ou = std::max(dev_ou, (step_rmd_general(sde, *f, x, n) - step_rmd(x, h, score, T, t0, n)).cwiseAbs().maxCoeff());
            // randomized midpoint with Euler updates, written out directly
            const auto g = factors_closed_form(rme, t0, t0 + h);
            const double tau = (1.0 - n.u) * h;
            const Vector w_tau = std::sqrt(2.0 * tau) * n.z1;
            const Vector w_h = w_tau + std::sqrt(2.0 * (h - tau)) * n.z2;
            const Vector plus = x + tau * f_of(t0, x) + w_tau;
            const Vector direct = x + h * f_of(t0 + tau, plus) + w_h;
            dev_rme = std::max(dev_rme, (step_rmd_general(rme, *g, x, n) - direct).cwiseAbs().maxCoeff());
        }
        rows.push_back({"reductions", "general(OU) vs rmd", dev_ou, tol, dev_ou < tol});
        rows.push_back({"reductions", "general(lambda=0) vs rme", dev_rme, tol, dev_rme < tol});
        summarize("reductions", "max abs deviation < " + detail::fmt(tol) + " over " + std::to_string(steps) + " steps");
    }

    if (auto t = v.optional_table("inversion")) {
        const double tol = t->require<double>("tolerance");
        const auto points = t->get("points", 25);
        t->finish();
        const auto family = cfg.target ? *cfg.target : TargetFamily::standard_gaussian(1);
        for (const auto& spec : detail::named_specs_for_validation()) {
            const auto sde = semilinear(spec, analytic_reparam_score(family));
            for (auto [a, b] : {std::pair{0.05, 1.5}, std::pair{1.5, 0.05}, std::pair{0.3, 0.35}}) {
                double worst = 0.0;
                for (bool numeric : {false, true}) {
                    const auto f = numeric ? factors_numeric(sde, a, b) : factors_closed_form(sde, a, b);
                    for (int k = 0; k <= points; ++k) {
                        const double tt = a + (b - a) * k / points;
                        worst = std::max(worst, std::abs(f->normalizer_inverse(f->normalizer(tt)) - tt));
                    }
                }
                rows.push_back({"inversion", detail::spec_label(spec) + " [" + detail::fmt(a) + ", " + detail::fmt(b) + "]",
                                worst, tol, worst < tol});
            }
        }
        summarize("inversion", "|inverse(normalizer(t)) - t| < " + detail::fmt(tol));
    }

    if (auto t = v.optional_table("gradcheck")) {
        const auto times = t->get<std::vector<double>>("times", {0.05, 0.5, 2.0});
        const double tol = t->require<double>("rel_tol");
        const auto points = t->get("points", 20);
        std::vector<std::pair<std::string, TargetFamily>> families;
        for (const auto& ft : t->table_array("families")) {
            ft.consume_all();
            try {
                auto fam = TargetFamily::from_json(ft.json());
                families.emplace_back(ft.json().value("variant", std::string("?")), std::move(fam));
            } catch (const std::exception& e) {
                ft.fail("", e.what());
            }
        }
        t->finish();
        if (families.empty()) families.emplace_back("target", cfg.require_target("validate.gradcheck"));
        for (const auto& [name, fam] : families)
            for (std::size_t ti = 0; ti < times.size(); ++ti) {
                double worst = 0.0;
                for (int i = 0; i < points; ++i) {
                    RandomStream rng(ctx.seed, "validate-gradcheck", static_cast<std::uint64_t>(i), static_cast<std::uint32_t>(ti));
                    const Vector x = forward_sample(fam, times[ti], rng);
                    const Vector s = score(fam, times[ti], x);
                    const Vector g = detail::fd_gradient(fam, times[ti], x, 1e-3);
                    worst = std::max(worst, (s - g).norm() / std::max(g.norm(), 1e-3));
                }
                rows.push_back({"gradcheck", name + " d=" + std::to_string(fam.dim()) + " t=" + detail::fmt(times[ti]),
                                worst, tol, worst < tol});
            }
        summarize("gradcheck", "relative error < " + detail::fmt(tol));
    }

    if (auto t = v.optional_table("lipschitz_profile")) {
        const auto times = t->get<std::vector<double>>("times", {0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 3.0});
        const auto pairs = t->get<std::size_t>("pairs", 10000);
        const double factor = t->require<double>("factor");
        const double beta0 = t->get("beta0", 1.0);
        const bool fit = t->get("fit_constant", false);
        t->finish();
        const auto& target = cfg.require_target("validate.lipschitz_profile");
        const auto rep = assumption_audit(ScoreField::exact(target), target, times, 0, ctx.seed, pairs);
        const double c = fit ? rep.fitted_constant : beta0;
        for (const auto& r : rep.rows) {
            const double pred = c * r.profile;
            const double ratio = std::max(r.lipschitz / pred, pred / r.lipschitz);
            rows.push_back({"lipschitz_profile", "t=" + detail::fmt(r.t) + " estimate " + detail::fmt(r.lipschitz, 4) +
                                                     " vs profile " + detail::fmt(pred, 4),
                            ratio, factor, ratio <= factor});
        }
        summarize("lipschitz_profile", "two-sided ratio to " + detail::fmt(c, 4) + "/(1 - e^{-2t}) <= " + detail::fmt(factor));
    }

    if (auto t = v.optional_table("schedule_scaling")) {
        const auto eps = t->get<std::vector<double>>("epsilon", {0.1, 0.05});
        const auto dims = t->get<std::vector<int>>("dims", {4, 16, 64});
        const auto [lo, hi] = detail::range_of(*t, "ratio");
        const double beta0 = t->get("beta0", 1.0), c_h = t->get("C_h", 0.05);
        const double m2 = t->get("M2", 0.0);
        t->finish();
        auto steps = [&](double e, int d) { return static_cast<double>(theory_schedule({e, beta0, d, m2, c_h}).steps()); };
        for (double e : eps)
            for (int d : dims) {
                const double r_eps = steps(e / 2, d) / steps(e, d);
                const double r_dim = steps(e, 4 * d) / steps(e, d);
                rows.push_back({"schedule_scaling", "N(eps/2)/N(eps) eps=" + detail::fmt(e) + " d=" + std::to_string(d), r_eps, hi,
                                r_eps >= lo && r_eps <= hi});
                rows.push_back({"schedule_scaling", "N(4d)/N(d) eps=" + detail::fmt(e) + " d=" + std::to_string(d), r_dim, hi,
                                r_dim >= lo && r_dim <= hi});
            }
        summarize("schedule_scaling", "step-count ratios in [" + detail::fmt(lo) + ", " + detail::fmt(hi) + "]");
    }

    if (auto t = v.optional_table("score_audit")) {
        const double eps = t->get("epsilon", 0.1);
        const auto times = t->get<std::vector<double>>("times", {0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0});
        const auto samples = t->get<std::size_t>("samples", 100000);
        const auto [lo, hi] = detail::range_of(*t, "band");
        t->finish();
        const auto& target = cfg.require_target("validate.score_audit");
        const auto rep = assumption_audit(perturb_score(ScoreField::exact(target), eps), target, times, samples, ctx.seed, 0);
        for (const auto& r : rep.rows)
            rows.push_back({"score_audit", "t=" + detail::fmt(r.t) + " L2 error " + detail::fmt(r.l2_error, 5) + " +- " +
                                               detail::fmt(r.l2_se, 2),
                            r.l2_error, hi, r.l2_error > lo && r.l2_error < hi});
        summarize("score_audit", "L2 score error in (" + detail::fmt(lo) + ", " + detail::fmt(hi) + ")");
    }
    v.finish();
    if (rows.empty()) throw ConfigError(cfg.doc->path + ": [validate] enables no checks");

    {
        auto out = ctx.open("validate.csv", res);
        out << ctx.header() << std::setprecision(10) << "check,item,value,threshold,pass\n";
        for (const auto& r : rows)
            out << r.check << ",\"" << r.item << "\"," << r.value << ',' << r.threshold << ',' << (r.pass ? "true" : "false")
                << '\n';
    }
    for (const auto& r : rows)
        ctx.log() << "  " << (r.pass ? "ok   " : "FAIL ") << r.check << ": " << r.item << " -> " << detail::fmt(r.value, 6)
                  << '\n';
    detail::report_checks(ctx, res);
    return res;
}

// ---- plotdata -------------------------------------------------------------

namespace detail {

struct CsvTable {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return static_cast<int>(i);
        return -1;
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (char ch : line) {
        if (ch == '"') quoted = !quoted;
        else if (ch == ',' && !quoted) out.push_back(cur), cur.clear();
        else cur += ch;
    }
    out.push_back(cur);
    return out;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    CsvTable t;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (t.columns.empty()) t.columns = split_csv_line(line);
        else t.rows.push_back(split_csv_line(line));
    }
    return t;
}

inline std::string svg_escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        if (ch == '<') out += "&lt;";
        else if (ch == '>') out += "&gt;";
        else if (ch == '&') out += "&amp;";
        else out += ch;
    }
    return out;
}

using Series = std::map<std::string, std::vector<std::pair<double, double>>>;

inline std::string line_chart(const std::string& title, const Series& series, const std::string& xlabel,
                              const std::string& ylabel, bool log_x, bool log_y) {
    const double W = 640, H = 420, L = 70, R = 150, Tm = 40, B = 50;
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    auto tx = [&](double x) { return log_x ? std::log10(x) : x; };
    auto ty = [&](double y) { return log_y ? std::log10(y) : y; };
    for (const auto& [_, pts] : series)
        for (auto [x, y] : pts) {
            if ((log_x && x <= 0) || (log_y && y <= 0)) continue;
            x0 = std::min(x0, tx(x)), x1 = std::max(x1, tx(x));
            y0 = std::min(y0, ty(y)), y1 = std::max(y1, ty(y));
        }
    if (!(x1 > x0)) x0 -= 0.5, x1 += 0.5;
    if (!(y1 > y0)) y0 -= 0.5, y1 += 0.5;
    auto px = [&](double x) { return L + (tx(x) - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (ty(y) - y0) / (y1 - y0) * (H - Tm - B); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
    std::ostringstream s;
    s << std::setprecision(6);
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << svg_escape(title) << "</text>\n";
    s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << L << "\" y1=\"" << Tm << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fx = x0 + (x1 - x0) * i / 4, fy = y0 + (y1 - y0) * i / 4;
        const double vx = log_x ? std::pow(10.0, fx) : fx, vy = log_y ? std::pow(10.0, fy) : fy;
        s << "<text x=\"" << px(vx) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt(vx, 3) << "</text>\n";
        s << "<text x=\"" << L - 6 << "\" y=\"" << py(vy) + 4 << "\" text-anchor=\"end\">" << fmt(vy, 3) << "</text>\n";
    }
    s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << svg_escape(xlabel) << "</text>\n";
    s << "<text transform=\"translate(16," << (Tm + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << svg_escape(ylabel)
      << "</text>\n";
    int c = 0;
    for (const auto& [name, pts] : series) {
        const char* color = colors[c % 8];
        s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (auto [x, y] : pts)
            if ((!log_x || x > 0) && (!log_y || y > 0)) s << px(x) << ',' << py(y) << ' ';
        s << "\"/>\n";
        for (auto [x, y] : pts)
            if ((!log_x || x > 0) && (!log_y || y > 0))
                s << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        const double ly = Tm + 10 + 18 * c;
        s << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 32 << "\" y2=\"" << ly << "\" stroke=\""
          << color << "\" stroke-width=\"2\"/>\n";
        s << "<text x=\"" << W - R + 38 << "\" y=\"" << ly + 4 << "\">" << svg_escape(name) << "</text>\n";
        ++c;
    }
    s << "</svg>\n";
    return s.str();
}

}  // namespace detail

inline CommandResult cmd_plotdata(const ExperimentConfig& cfg, const RunOptions& opt) {
    const auto ctx = detail::make_context(cfg, opt);
    const auto& p = cfg.plot;
    if (p.inputs.empty()) throw ConfigError(cfg.doc->path + ": plotdata.inputs is empty");
    // facet -> series -> x -> (sum, count)
    std::map<std::string, std::map<std::string, std::map<double, std::pair<double, int>>>> acc;
    for (const auto& input : p.inputs) {
        const std::filesystem::path path = std::filesystem::path(input).is_absolute() ? std::filesystem::path(input) : cfg.base_dir / input;
        const auto table = detail::read_csv(path);
        const int xi = table.column(p.x), yi = table.column(p.y), fi = table.column(p.facet);
        if (xi < 0 || yi < 0) throw ConfigError(cfg.doc->path + ": plotdata: " + path.string() + " lacks column '" + (xi < 0 ? p.x : p.y) + "'");
        std::vector<int> si;
        for (const auto& s : p.series) {
            const int k = table.column(s);
            if (k < 0) throw ConfigError(cfg.doc->path + ": plotdata: " + path.string() + " lacks series column '" + s + "'");
            si.push_back(k);
        }
        for (const auto& row : table.rows) {
            if (row.size() != table.columns.size()) continue;
            std::string name;
            for (std::size_t k = 0; k < si.size(); ++k) name += (k ? "/" : "") + row[si[k]];
            const std::string facet = fi >= 0 ? row[fi] : p.y;
            auto& cell = acc[facet][name][std::stod(row[xi])];
            cell.first += std::stod(row[yi]);
            cell.second += 1;
        }
    }
    CommandResult res;
    {
        auto out = ctx.open("plot_long.csv", res);
        out << ctx.header() << std::setprecision(10) << "facet,series," << p.x << ',' << p.y << ",n\n";
        for (const auto& [facet, series] : acc)
            for (const auto& [name, xs] : series)
                for (const auto& [x, cell] : xs) out << facet << ',' << name << ',' << x << ',' << cell.first / cell.second << ',' << cell.second << '\n';
    }
    for (const auto& [facet, series] : acc) {
        detail::Series pts;
        for (const auto& [name, xs] : series)
            for (const auto& [x, cell] : xs) pts[name].emplace_back(x, cell.first / cell.second);
        auto out = ctx.open("plot_" + facet + ".svg", res);
        out << "<!-- ddram " << kVersion << " config=" << cfg.doc->hash_hex() << " seed=" << ctx.seed << " -->\n";
        out << detail::line_chart(facet, pts, p.x, p.y, p.log_x, p.log_y);
    }
    for (const auto& f : res.files) ctx.log() << "wrote " << f.string() << '\n';
    return res;
}

// ---- dispatch -------------------------------------------------------------

inline const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names = {"sample", "local-error", "convergence", "validate", "plotdata"};
    return names;
}

inline CommandResult run_command(const std::string& command, const ExperimentConfig& cfg, const RunOptions& opt) {
    if (!cfg.command.empty() && cfg.command != command)
        throw ConfigError(cfg.doc->path + ": config is for '" + cfg.command + "', not '" + command + "'");
    ExperimentConfig local = cfg;
    local.command = command;
    if (command == "sample") return cmd_sample(local, opt);
    if (command == "local-error") return cmd_local_error(local, opt);
    if (command == "convergence") return cmd_convergence(local, opt);
    if (command == "validate") return cmd_validate(local, opt);
    if (command == "plotdata") return cmd_plotdata(local, opt);
    throw ConfigError("unknown command '" + command + "'");
}

}  // namespace ddram
