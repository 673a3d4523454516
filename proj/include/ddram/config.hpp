#pragma once

// Experiment configuration: TOML or JSON files mapped onto one JSON tree,
// with source lines kept so that every validation error names its line.

#include "ddram/core.hpp"
#include "ddram/ou_process.hpp"
#include "ddram/process.hpp"
#include "ddram/rng.hpp"
#include "ddram/samplers.hpp"
#include "ddram/schedules.hpp"

#include <json.hpp>
#include <toml.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace ddram {

struct ConfigDocument {
    std::string path;
    nlohmann::json root;
    std::map<std::string, int> lines;  // JSON pointer -> source line (TOML only)

    int line_of(const std::string& pointer) const {
        for (std::string p = pointer;; p = p.substr(0, p.rfind('/'))) {
            if (auto it = lines.find(p); it != lines.end()) return it->second;
            if (p.empty()) return 0;
        }
    }

    [[noreturn]] void fail(const std::string& pointer, const std::string& msg) const {
        std::ostringstream out;
        out << path;
        if (const int line = line_of(pointer); line > 0) out << ':' << line;
        out << ": ";
        if (!pointer.empty()) {
            std::string dotted = pointer.substr(1);
            for (auto& ch : dotted)
                if (ch == '/') ch = '.';
            out << dotted << ": ";
        }
        out << msg;
        throw ConfigError(out.str());
    }

    /// FNV-1a of the canonical JSON dump; independent of formatting and key order.
    std::uint64_t hash() const { return fnv1a64(root.dump()); }

    std::string hash_hex() const {
        std::ostringstream out;
        out << std::hex << std::setw(16) << std::setfill('0') << hash();
        return out.str();
    }
};

namespace detail {

inline nlohmann::json toml_to_json(const toml::node& node, const std::string& pointer, std::map<std::string, int>& lines,
                                   const std::string& path) {
    lines[pointer] = static_cast<int>(node.source().begin.line);
    if (auto t = node.as_table()) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [k, v] : *t) {
            const std::string key(k.str());
            j[key] = toml_to_json(v, pointer + "/" + key, lines, path);
        }
        return j;
    }
    if (auto a = node.as_array()) {
        nlohmann::json j = nlohmann::json::array();
        for (std::size_t i = 0; i < a->size(); ++i)
            j.push_back(toml_to_json(*a->get(i), pointer + "/" + std::to_string(i), lines, path));
        return j;
    }
    if (auto v = node.as_string()) return v->get();
    if (auto v = node.as_integer()) return v->get();
    if (auto v = node.as_floating_point()) return v->get();
    if (auto v = node.as_boolean()) return v->get();
    std::ostringstream msg;
    msg << path << ':' << node.source().begin.line << ": dates and times are not supported";
    throw ConfigError(msg.str());
}

}  // namespace detail

inline ConfigDocument parse_config_text(const std::string& text, const std::string& path) {
    ConfigDocument doc;
    doc.path = path;
    const bool json = std::filesystem::path(path).extension() == ".json";
    if (json) {
        try {
            doc.root = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            const auto upto = text.substr(0, std::min<std::size_t>(e.byte, text.size()));
            const int line = 1 + static_cast<int>(std::count(upto.begin(), upto.end(), '\n'));
            throw ConfigError(path + ":" + std::to_string(line) + ": invalid JSON");
        }
    } else {
        try {
            const auto tbl = toml::parse(text, path);
            doc.root = detail::toml_to_json(tbl, "", doc.lines, path);
        } catch (const toml::parse_error& e) {
            std::ostringstream msg;
            msg << path << ':' << e.source().begin.line << ": " << e.description();
            throw ConfigError(msg.str());
        }
    }
    if (!doc.root.is_object()) throw ConfigError(path + ": top level must be a table");
    return doc;
}

inline ConfigDocument load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path + ": cannot open config file");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

/// One table of a config document. Reads record the keys they touch and
/// finish() rejects the rest, so typos fail loudly.
class ConfigTable {
public:
    ConfigTable(std::shared_ptr<const ConfigDocument> doc, std::string pointer)
        : doc_(std::move(doc)), ptr_(std::move(pointer)) {
        node_ = &doc_->root;
        if (!ptr_.empty()) node_ = &doc_->root.at(nlohmann::json::json_pointer(ptr_));
        if (!node_->is_object()) doc_->fail(ptr_, "expected a table");
    }

    bool has(const std::string& key) const { return node_->contains(key); }

    template <class T>
    T get(const std::string& key, T fallback) const {
        if (!has(key)) {
            used_.insert(key);
            return fallback;
        }
        return require<T>(key);
    }

    template <class T>
    T require(const std::string& key) const {
        used_.insert(key);
        if (!has(key)) doc_->fail(ptr_ + "/" + key, "missing required key");
        const auto& v = node_->at(key);
        try {
            if constexpr (std::is_same_v<T, double>) {
                if (!v.is_number()) throw nlohmann::json::type_error::create(302, "expected a number", &v);
            } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
                if (!v.is_number_integer()) throw nlohmann::json::type_error::create(302, "expected an integer", &v);
                if constexpr (std::is_unsigned_v<T>)
                    if (v.get<std::int64_t>() < 0) doc_->fail(ptr_ + "/" + key, "must be nonnegative");
            }
            return v.get<T>();
        } catch (const nlohmann::json::exception&) {
            doc_->fail(ptr_ + "/" + key, std::string("wrong type, expected ") + type_name<T>());
        }
    }

    ConfigTable table(const std::string& key) const {
        used_.insert(key);
        if (!has(key)) doc_->fail(ptr_ + "/" + key, "missing required table");
        return ConfigTable(doc_, ptr_ + "/" + key);
    }

    std::optional<ConfigTable> optional_table(const std::string& key) const {
        used_.insert(key);
        if (!has(key)) return std::nullopt;
        return ConfigTable(doc_, ptr_ + "/" + key);
    }

    std::vector<ConfigTable> table_array(const std::string& key) const {
        used_.insert(key);
        std::vector<ConfigTable> out;
        if (!has(key)) return out;
        const auto& a = node_->at(key);
        if (!a.is_array()) doc_->fail(ptr_ + "/" + key, "expected an array of tables");
        for (std::size_t i = 0; i < a.size(); ++i) out.emplace_back(doc_, ptr_ + "/" + key + "/" + std::to_string(i));
        return out;
    }

    const nlohmann::json& json() const { return *node_; }
    const std::string& pointer() const { return ptr_; }
    const ConfigDocument& document() const { return *doc_; }

    /// Marks every key as read; for tables handed on whole to another parser.
    void consume_all() const {
        for (const auto& [k, _] : node_->items()) used_.insert(k);
    }

    [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
        doc_->fail(key.empty() ? ptr_ : ptr_ + "/" + key, msg);
    }

    void finish() const {
        for (const auto& [k, _] : node_->items())
            if (!used_.count(k)) doc_->fail(ptr_ + "/" + k, "unknown key");
    }

private:
    template <class T>
    static const char* type_name() {
        if constexpr (std::is_same_v<T, double>) return "a number";
        else if constexpr (std::is_same_v<T, bool>) return "a boolean";
        else if constexpr (std::is_integral_v<T>) return "an integer";
        else if constexpr (std::is_same_v<T, std::string>) return "a string";
        else return "an array";
    }

    std::shared_ptr<const ConfigDocument> doc_;
    std::string ptr_;
    const nlohmann::json* node_;
    mutable std::set<std::string> used_;
};

// ---- typed configuration --------------------------------------------------

struct ScheduleConfig {
    std::string kind = "uniform";  // uniform, theory, decaying, log_sigma, explicit
    double horizon = 5.0;
    double delta = 1e-3;
    int steps = 64;
    double epsilon = 0.1, beta0 = 1.0, c_h = 0.05;
    std::size_t max_steps = 50'000'000;
    double sigma_min = 0.002, sigma_max = 80.0, rho = 7.0;
    std::vector<double> times;
};

struct LocalErrorConfig {
    std::vector<SamplerKind> samplers = {SamplerKind::rmd, SamplerKind::eed_exact};
    std::vector<double> hs;
    double horizon = 5.0;
    double t_left = 2.5;
    std::string method = "analytic";  // or monte_carlo
    int start_points = 32;
    std::optional<Vector> start;
    std::size_t mc_samples = 20000;
    int substeps = 256;
};

struct ConvergenceConfig {
    std::vector<SamplerKind> samplers = {SamplerKind::rmd, SamplerKind::eed_exact, SamplerKind::emd};
    std::vector<int> nfe = {16, 32, 64, 128, 256};
    int replicates = 3;
    int n_proj = 128;
    std::size_t reference_samples = 100000;
};

struct PlotConfig {
    std::vector<std::string> inputs;  // CSV files from earlier runs
    std::string x = "nfe";
    std::string y = "value";
    std::vector<std::string> series = {"sampler"};
    std::string facet = "metric";
    bool log_x = true, log_y = true;
};

struct ExperimentConfig {
    std::shared_ptr<const ConfigDocument> doc;
    std::string command;
    std::uint64_t seed = 0;
    std::size_t chains = 1000;
    int threads = 0;
    std::optional<TargetFamily> target;
    std::optional<ProcessSpec> process;
    double score_epsilon = 0.0;
    SamplerKind sampler = SamplerKind::rmd;
    double truncation_r = 4.0;
    bool numeric_factors = false;
    ScheduleConfig schedule;
    LocalErrorConfig local_error;
    ConvergenceConfig convergence;
    PlotConfig plot;
    std::optional<ConfigTable> validate;  // read by the validate command
    std::optional<ConfigTable> check;     // read by each command
    std::filesystem::path base_dir;

    const TargetFamily& require_target(const char* who) const {
        if (!target) doc->fail("", std::string(who) + " needs a [target] table");
        return *target;
    }
};

namespace detail {

inline SamplerKind parse_sampler(const ConfigTable& t, const std::string& key, const std::string& name) {
    try {
        return sampler_from_string(name);
    } catch (const DomainError&) {
        t.fail(key, "unknown sampler '" + name + "'");
    }
}

inline std::vector<SamplerKind> parse_samplers(const ConfigTable& t, const std::string& key,
                                               std::vector<SamplerKind> fallback) {
    if (!t.has(key)) {
        t.get<std::vector<std::string>>(key, {});
        return fallback;
    }
    std::vector<SamplerKind> out;
    for (const auto& s : t.require<std::vector<std::string>>(key)) out.push_back(parse_sampler(t, key, s));
    if (out.empty()) t.fail(key, "needs at least one sampler");
    return out;
}

inline ProcessSpec parse_process(const ConfigTable& t) {
    const auto kind = t.require<std::string>("kind");
    ProcessSpec p;
    if (kind == "ou") p = ProcessSpec::ou();
    else if (kind == "vp") p = ProcessSpec::vp(t.get("beta_min", 0.1), t.get("beta_max", 20.0));
    else if (kind == "ve") p = ProcessSpec::ve();
    else if (kind == "edm") p = ProcessSpec::edm();
    else t.fail("kind", "unknown process '" + kind + "' (ou, vp, ve, edm)");
    const auto churn = t.get<std::string>("churn", "song");
    if (churn == "none") p.churn = ChurnKind::none;
    else if (churn == "song") p.churn = ChurnKind::song;
    else if (churn == "matched") p.churn = ChurnKind::matched;
    else if (churn == "constant") p.churn = ChurnKind::constant;
    else t.fail("churn", "unknown churn '" + churn + "' (none, song, matched, constant)");
    p.churn_value = t.get("churn_value", 0.0);
    p.churn_value_after = t.get("churn_value_after", p.churn_value);
    p.churn_break = t.get("churn_break", std::numeric_limits<double>::infinity());
    if (t.has("lambda")) {
        const auto l = t.require<std::string>("lambda");
        if (l == "zero") p.lambda_choice = LambdaChoice::zero;
        else if (l == "scale_only") p.lambda_choice = LambdaChoice::scale_only;
        else if (l == "relative_score") p.lambda_choice = LambdaChoice::relative_score;
        else if (l == "network_adapted") p.lambda_choice = LambdaChoice::network_adapted;
        else t.fail("lambda", "unknown lambda choice '" + l + "'");
    }
    p.sigma_data = t.get("sigma_data", 0.5);
    try {
        p.validate();
    } catch (const DomainError& e) {
        t.fail("", e.what());
    }
    t.finish();
    return p;
}

inline ScheduleConfig parse_schedule(const ConfigTable& t) {
    ScheduleConfig s;
    s.kind = t.get<std::string>("kind", s.kind);
    s.horizon = t.get("T", s.horizon);
    s.delta = t.get("delta", s.delta);
    s.steps = t.get("N", s.steps);
    s.epsilon = t.get("epsilon", s.epsilon);
    s.beta0 = t.get("beta0", s.beta0);
    s.c_h = t.get("C_h", s.c_h);
    s.max_steps = t.get("max_steps", s.max_steps);
    s.sigma_min = t.get("sigma_min", s.sigma_min);
    s.sigma_max = t.get("sigma_max", s.sigma_max);
    s.rho = t.get("rho", s.rho);
    s.times = t.get<std::vector<double>>("times", {});
    static const std::set<std::string> kinds = {"uniform", "theory", "decaying", "log_sigma", "explicit"};
    if (!kinds.count(s.kind)) t.fail("kind", "unknown schedule '" + s.kind + "'");
    if (s.kind == "explicit" && s.times.empty()) t.fail("times", "explicit schedule needs times");
    t.finish();
    return s;
}

}  // namespace detail

/// Parses and validates a configuration. Everything that can be checked
/// without running is checked here; failures are ConfigError.
inline ExperimentConfig parse_experiment(ConfigDocument doc) {
    ExperimentConfig cfg;
    cfg.doc = std::make_shared<const ConfigDocument>(std::move(doc));
    cfg.base_dir = std::filesystem::path(cfg.doc->path).parent_path();
    const ConfigTable root(cfg.doc, "");
    cfg.command = root.get<std::string>("command", "");
    cfg.seed = root.get<std::uint64_t>("seed", 0);
    cfg.chains = root.get<std::size_t>("chains", cfg.chains);
    cfg.threads = root.get("threads", 0);

    if (auto t = root.optional_table("target")) {
        t->consume_all();
        try {
            cfg.target = TargetFamily::from_json(t->json());
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            const auto q = msg.find('\'');
            const std::string key = q == std::string::npos ? "" : msg.substr(q + 1, msg.rfind('\'') - q - 1);
            if (!key.empty() && t->has(key)) t->fail(key, "unknown key");
            t->fail("", msg);
        } catch (const std::exception& e) {
            t->fail("", e.what());
        }
    }
    if (auto t = root.optional_table("process")) cfg.process = detail::parse_process(*t);
    if (auto t = root.optional_table("score")) {
        const auto kind = t->get<std::string>("kind", "exact");
        if (kind == "exact") cfg.score_epsilon = 0.0;
        else if (kind == "perturbed") cfg.score_epsilon = t->require<double>("epsilon");
        else t->fail("kind", "unknown score kind '" + kind + "' (exact, perturbed)");
        if (!(cfg.score_epsilon >= 0.0)) t->fail("epsilon", "must be nonnegative");
        t->finish();
    }
    if (auto t = root.optional_table("sampler")) {
        cfg.sampler = detail::parse_sampler(*t, "kind", t->require<std::string>("kind"));
        cfg.truncation_r = t->get("truncation_r", cfg.truncation_r);
        cfg.numeric_factors = t->get("numeric_factors", false);
        if (!(cfg.truncation_r > 0.0)) t->fail("truncation_r", "must be positive");
        t->finish();
    }
    if (auto t = root.optional_table("schedule")) cfg.schedule = detail::parse_schedule(*t);
    if (auto t = root.optional_table("local_error")) {
        auto& le = cfg.local_error;
        le.samplers = detail::parse_samplers(*t, "samplers", le.samplers);
        le.hs = t->get<std::vector<double>>("h", {});
        if (t->has("h_exponents")) {
            const auto ex = t->require<std::vector<int>>("h_exponents");
            if (ex.size() != 2 || ex[0] > ex[1]) t->fail("h_exponents", "expected [k_min, k_max] for h = 2^-k");
            for (int k = ex[0]; k <= ex[1]; ++k) le.hs.push_back(std::ldexp(1.0, -k));
        }
        if (le.hs.empty()) t->fail("", "needs 'h' or 'h_exponents'");
        le.horizon = t->get("T", le.horizon);
        le.t_left = t->get("t_left", le.t_left);
        le.method = t->get<std::string>("method", le.method);
        if (le.method != "analytic" && le.method != "monte_carlo")
            t->fail("method", "expected 'analytic' or 'monte_carlo'");
        le.start_points = t->get("start_points", le.start_points);
        if (t->has("start")) {
            const auto v = t->require<std::vector<double>>("start");
            le.start = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
        }
        le.mc_samples = t->get("mc_samples", le.mc_samples);
        le.substeps = t->get("substeps", le.substeps);
        for (double h : le.hs)
            if (!(h > 0.0 && le.t_left + h < le.horizon)) t->fail("h", "every h must be positive and fit before T");
        t->finish();
    }
    if (auto t = root.optional_table("convergence")) {
        auto& cv = cfg.convergence;
        cv.samplers = detail::parse_samplers(*t, "samplers", cv.samplers);
        cv.nfe = t->get("nfe", cv.nfe);
        cv.replicates = t->get("replicates", cv.replicates);
        cv.n_proj = t->get("n_proj", cv.n_proj);
        cv.reference_samples = t->get("reference_samples", cv.reference_samples);
        if (cv.nfe.empty()) t->fail("nfe", "needs at least one NFE budget");
        for (int n : cv.nfe)
            if (n < 2) t->fail("nfe", "NFE budgets must be at least 2");
        if (cv.replicates < 1) t->fail("replicates", "must be at least 1");
        t->finish();
    }
    if (auto t = root.optional_table("plotdata")) {
        auto& p = cfg.plot;
        p.inputs = t->require<std::vector<std::string>>("inputs");
        p.x = t->get("x", p.x);
        p.y = t->get("y", p.y);
        p.series = t->get("series", p.series);
        p.facet = t->get("facet", p.facet);
        p.log_x = t->get("log_x", p.log_x);
        p.log_y = t->get("log_y", p.log_y);
        t->finish();
    }
    cfg.validate = root.optional_table("validate");
    cfg.check = root.optional_table("check");
    root.finish();
    return cfg;
}

inline ExperimentConfig load_experiment(const std::string& path) { return parse_experiment(load_config(path)); }

}  // namespace ddram
