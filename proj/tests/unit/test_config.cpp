#include "ddram/config.hpp"
#include "ddram/experiment.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ddram;

namespace {

ExperimentConfig parse(const std::string& text, const std::string& path = "cfg.toml") {
    return parse_experiment(parse_config_text(text, path));
}

std::string error_of(const std::string& text, const std::string& path = "cfg.toml") {
    try {
        parse(text, path);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

const char* kSample = R"(command = "sample"
seed = 11
chains = 50

[target]
variant = "gaussian"
mean = [0.0, 1.0]
cov = [[1.0, 0.0], [0.0, 2.0]]

[sampler]
kind = "eed_exact"

[schedule]
kind = "uniform"
T = 4.0
delta = 0.01
N = 20
)";

std::filesystem::path scratch(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "ddram_test_config";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST(ConfigParse, TomlFields) {
    const auto cfg = parse(kSample);
    EXPECT_EQ(cfg.command, "sample");
    EXPECT_EQ(cfg.seed, 11u);
    EXPECT_EQ(cfg.chains, 50u);
    ASSERT_TRUE(cfg.target);
    EXPECT_EQ(cfg.target->dim(), 2);
    EXPECT_EQ(cfg.sampler, SamplerKind::eed_exact);
    EXPECT_EQ(cfg.schedule.kind, "uniform");
    EXPECT_EQ(cfg.schedule.horizon, 4.0);
    EXPECT_EQ(cfg.schedule.delta, 0.01);
    EXPECT_EQ(cfg.schedule.steps, 20);
}

TEST(ConfigParse, JsonMatchesToml) {
    const auto json = parse(R"({"command": "sample", "seed": 11, "chains": 50,
        "target": {"variant": "gaussian", "mean": [0.0, 1.0], "cov": [[1.0, 0.0], [0.0, 2.0]]},
        "sampler": {"kind": "eed_exact"},
        "schedule": {"kind": "uniform", "T": 4.0, "delta": 0.01, "N": 20}})",
                            "cfg.json");
    const auto toml = parse(kSample);
    EXPECT_EQ(json.doc->hash(), toml.doc->hash());
    EXPECT_EQ(json.schedule.steps, toml.schedule.steps);
}

TEST(ConfigParse, HashIgnoresFormattingButNotValues) {
    std::string reordered = kSample;
    reordered.replace(reordered.find("seed = 11\nchains = 50"), 21, "chains = 50\nseed = 11");
    EXPECT_EQ(parse(reordered).doc->hash(), parse(kSample).doc->hash());
    std::string changed = kSample;
    changed.replace(changed.find("N = 20"), 6, "N = 21");
    EXPECT_NE(parse(changed).doc->hash(), parse(kSample).doc->hash());
    EXPECT_EQ(parse(kSample).doc->hash_hex().size(), 16u);
}

TEST(ConfigErrors, UnknownKeyNamesLineAndKey) {
    std::string text = kSample;
    text.replace(text.find("N = 20"), 6, "steps = 20");
    EXPECT_EQ(error_of(text), "cfg.toml:17: schedule.steps: unknown key");
}

TEST(ConfigErrors, UnknownRootKey) {
    const std::string msg = error_of(std::string("sead = 1\n") + kSample);
    EXPECT_EQ(msg, "cfg.toml:1: sead: unknown key");
}

TEST(ConfigErrors, WrongType) {
    std::string text = kSample;
    text.replace(text.find("N = 20"), 6, "N = \"20\"");
    EXPECT_EQ(error_of(text), "cfg.toml:17: schedule.N: wrong type, expected an integer");
}

TEST(ConfigErrors, NegativeUnsigned) {
    std::string text = kSample;
    text.replace(text.find("chains = 50"), 11, "chains = -5");
    EXPECT_EQ(error_of(text), "cfg.toml:3: chains: must be nonnegative");
}

TEST(ConfigErrors, UnknownSampler) {
    std::string text = kSample;
    text.replace(text.find("eed_exact"), 9, "rk4");
    EXPECT_EQ(error_of(text), "cfg.toml:11: sampler.kind: unknown sampler 'rk4'");
}

TEST(ConfigErrors, UnknownTargetKey) {
    std::string text = kSample;
    text.replace(text.find("mean = "), 7, "mu = ");
    EXPECT_EQ(error_of(text), "cfg.toml:7: target.mu: unknown key");
}

TEST(ConfigErrors, TomlSyntaxError) {
    const std::string msg = error_of("seed = 1\nchains = [\n");
    EXPECT_EQ(msg.rfind("cfg.toml:", 0), 0u) << msg;
}

TEST(ConfigErrors, JsonSyntaxErrorLine) {
    EXPECT_EQ(error_of("{\n\"seed\": 1,\n\"chains\": ]\n}", "cfg.json"), "cfg.json:3: invalid JSON");
}

TEST(ConfigErrors, BadProcess) {
    EXPECT_NE(error_of("[process]\nkind = \"vq\"\n").find("process.kind: unknown process 'vq'"), std::string::npos);
    EXPECT_NE(error_of("[process]\nkind = \"ve\"\nchurn = \"lots\"\n").find("process.churn"), std::string::npos);
}

TEST(ConfigErrors, LocalErrorNeedsStepSizes) {
    EXPECT_NE(error_of("[local_error]\nsamplers = [\"rmd\"]\n").find("needs 'h' or 'h_exponents'"), std::string::npos);
    EXPECT_NE(error_of("[local_error]\nh = [3.0]\nT = 5.0\nt_left = 2.5\n").find("fit before T"), std::string::npos);
}

TEST(ConfigParse, HExponents) {
    const auto cfg = parse("[local_error]\nh_exponents = [2, 4]\n");
    ASSERT_EQ(cfg.local_error.hs.size(), 3u);
    EXPECT_EQ(cfg.local_error.hs[0], 0.25);
    EXPECT_EQ(cfg.local_error.hs[2], 0.0625);
}

TEST(ConfigParse, Process) {
    const auto cfg = parse("[process]\nkind = \"edm\"\nchurn = \"none\"\nlambda = \"zero\"\n");
    ASSERT_TRUE(cfg.process);
    EXPECT_EQ(cfg.process->kind, ProcessKind::edm);
    EXPECT_EQ(cfg.process->churn, ChurnKind::none);
    EXPECT_EQ(cfg.process->resolved_lambda(), LambdaChoice::zero);
}

TEST(ConfigParse, CopiesShareTheDocument) {
    ExperimentConfig copy;
    {
        const auto cfg = parse(std::string(kSample) + "\n[check]\nmax_cov_gap = 0.1\n");
        copy = cfg;
    }
    ASSERT_TRUE(copy.check);
    EXPECT_EQ(copy.check->require<double>("max_cov_gap"), 0.1);
}

TEST(ConfigParse, LoadMissingFile) {
    EXPECT_THROW(load_experiment("/nonexistent/ddram.toml"), ConfigError);
}

TEST(Commands, CommandMismatchIsConfigError) {
    const auto cfg = parse(kSample);
    RunOptions opt;
    std::ostringstream log;
    opt.log = &log;
    EXPECT_THROW(run_command("validate", cfg, opt), ConfigError);
}

TEST(Commands, IncompatibleScheduleIsConfigError) {
    std::string text = kSample;
    text.replace(text.find("kind = \"uniform\""), 16, "kind = \"log_sigma\"");
    const auto cfg = parse(text);
    RunOptions opt;
    std::ostringstream log;
    opt.log = &log;
    EXPECT_THROW(run_command("sample", cfg, opt), ConfigError);
}

TEST(Commands, SampleWritesHeaderedOutputs) {
    const auto cfg = parse(kSample);
    RunOptions opt;
    opt.out_dir = scratch("sample");
    opt.threads = 1;
    std::ostringstream log;
    opt.log = &log;
    const auto res = run_command("sample", cfg, opt);
    EXPECT_TRUE(res.all_pass());
    const auto m = read_samples(opt.out_dir / "samples.ddrm");
    EXPECT_EQ(m.rows(), 50);
    EXPECT_EQ(m.cols(), 2);
    std::ifstream csv(opt.out_dir / "metrics.csv");
    std::string first;
    std::getline(csv, first);
    EXPECT_EQ(first, "# ddram " + std::string(kVersion) + " command=sample config=" + cfg.doc->hash_hex() + " seed=11");

    // same seed reproduces the binary exactly, a new seed does not
    RunOptions again = opt;
    again.out_dir = scratch("sample_again");
    run_command("sample", cfg, again);
    EXPECT_EQ(read_samples(again.out_dir / "samples.ddrm"), m);
    again.seed = 12;
    run_command("sample", cfg, again);
    EXPECT_NE(read_samples(again.out_dir / "samples.ddrm"), m);
}

TEST(Commands, SampleMatchesSamplerDirectly) {
    const auto cfg = parse(kSample);
    RunOptions opt;
    opt.out_dir = scratch("sample_direct");
    std::ostringstream log;
    opt.log = &log;
    run_command("sample", cfg, opt);
    const auto m = read_samples(opt.out_dir / "samples.ddrm");
    SamplingProblem p;
    p.dim = 2;
    p.score = ScoreField::exact(*cfg.target);
    SamplerOptions so;
    so.kind = SamplerKind::eed_exact;
    const Sampler s(p, uniform_schedule(4.0, 20, 0.01), so);
    for (int i : {0, 17, 49}) EXPECT_EQ(Vector(m.row(i).transpose()), s.run(11, i).x);
}

TEST(Commands, FailedCheckIsReported) {
    const auto cfg = parse(std::string(kSample) + "\n[check]\nmax_mean_gap = 1e-12\n");
    RunOptions opt;
    opt.out_dir = scratch("sample_check");
    std::ostringstream log;
    opt.log = &log;
    const auto res = run_command("sample", cfg, opt);
    ASSERT_EQ(res.checks.size(), 1u);
    EXPECT_FALSE(res.all_pass());
    EXPECT_NE(log.str().find("FAIL mean gap"), std::string::npos);
}
