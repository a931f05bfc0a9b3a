#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "scae/cli.hpp"

using namespace scae;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "scae");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Outcome o;
  o.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// One small toy dataset and a briefly trained model shared by every test.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("scae_cli_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    const Outcome g = run_cli({"generate-toy", "--out", data(), "--train-count", "200",
                               "--test-count", "60", "--seed", "3"});
    ASSERT_EQ(g.code, 0) << g.err;
    const Outcome t = run_cli({"train", "--data", data(), "--out", models(), "--epochs", "3"});
    ASSERT_EQ(t.code, 0) << t.err;
    train_output_ = t.out;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string data() { return (root_ / "data").string(); }
  static std::string models() { return (root_ / "models").string(); }
  static std::string fresh(const std::string& name) {
    const fs::path p = root_ / name;
    fs::remove_all(p);
    return p.string();
  }

  static std::vector<std::string> attack(const std::string& out, std::vector<std::string> extra) {
    std::vector<std::string> a = {"attack", "--data", data(), "--model", models(), "--out", out,
                                  "--no-timing"};
    if (std::find(extra.begin(), extra.end(), "--n") == extra.end()) {
      a.insert(a.end(), {"--n", "4"});
    }
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  }

  static inline fs::path root_;
  static inline std::string train_output_;
};

}  // namespace

TEST_F(Cli, GenerateToyWritesIdxFiles) {
  for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                        "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"}) {
    EXPECT_TRUE(fs::exists(fs::path(data()) / f)) << f;
  }
  const Dataset d = load_idx_dir(data(), "test");
  EXPECT_EQ(d.size(), 60u);
  EXPECT_EQ(d.images[0].height, 28u);
}

TEST_F(Cli, TrainWritesModelsAndReportsAccuracy) {
  EXPECT_TRUE(fs::exists(fs::path(models()) / "encoder.bin"));
  EXPECT_TRUE(fs::exists(fs::path(models()) / "classifier_prior.bin"));
  EXPECT_TRUE(fs::exists(fs::path(models()) / "classifier_posterior.bin"));
  EXPECT_TRUE(std::regex_search(train_output_, std::regex(R"(prior classifier test accuracy: [01]\.\d{4}\n)")))
      << train_output_;
  EXPECT_TRUE(std::regex_search(train_output_, std::regex(R"(posterior classifier test accuracy: [01]\.\d{4}\n)")));
}

TEST_F(Cli, TrainIsDeterministic) {
  const std::string again = fresh("models_again");
  const Outcome t = run_cli({"train", "--data", data(), "--out", again, "--epochs", "3"});
  ASSERT_EQ(t.code, 0) << t.err;
  for (const char* f : {"encoder.bin", "classifier_prior.bin", "classifier_posterior.bin"}) {
    EXPECT_EQ(slurp(fs::path(models()) / f), slurp(fs::path(again) / f)) << f;
  }
}

TEST_F(Cli, MissingDataPathIsNamed) {
  const Outcome o = run_cli({"train", "--data", "/nonexistent/scae_data"});
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("/nonexistent/scae_data"), std::string::npos) << o.err;
}

TEST_F(Cli, PrintsEffectiveDefaults) {
  const std::string out = fresh("defaults");
  Outcome g = run_cli(attack(out, {"--algorithm", "gdu"}));
  ASSERT_EQ(g.code, 0) << g.err;
  EXPECT_NE(g.out.find("alpha=0.05 n_iter=100"), std::string::npos) << g.out;
  Outcome p = run_cli(attack(out, {"--algorithm", "psc"}));
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_NE(p.out.find("alpha=0.5 n_iter=200"), std::string::npos) << p.out;
  Outcome o = run_cli(attack(out, {"--algorithm", "opt", "--outer-iters", "1", "--inner-iters", "3"}));
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("alpha=100 alpha_lower=0 alpha_upper=inf outer_iters=1 inner_iters=3"),
            std::string::npos)
      << o.out;
  for (const char* f : {"report_gdu_prior.json", "report_psc_prior.json", "report_opt_prior.json"}) {
    EXPECT_TRUE(fs::exists(fs::path(out) / f)) << f;
  }
}

TEST_F(Cli, ReportJsonIsConsistent) {
  const std::string out = fresh("consistent");
  ASSERT_EQ(run_cli(attack(out, {"--mode", "posterior"})).code, 0);
  const auto j = nlohmann::json::parse(slurp(fs::path(out) / "report_gdu_posterior.json"));
  EXPECT_EQ(j.at("config").at("mode"), "posterior");
  EXPECT_EQ(j.at("config").at("algorithm"), "gdu");
  EXPECT_EQ(j.at("config").at("mask"), true);
  EXPECT_EQ(j.at("config").at("n"), 4);
  EXPECT_EQ(j.at("runtime_seconds"), 0.0);
  std::size_t succ = 0;
  for (const auto& s : j.at("per_sample")) succ += s.at("success").get<bool>();
  EXPECT_EQ(j.at("successes"), succ);
}

TEST_F(Cli, ConfigFileFillsButFlagsWin) {
  const std::string out = fresh("config");
  const fs::path cfg = fs::path(out + "_cfg.json");
  write_text(cfg, R"({"algorithm": "psc", "alpha": 0.3, "n": 2, "iters": 7, "mask": false})");
  const Outcome o = run_cli(attack(out, {"--config", cfg.string(), "--alpha", "0.25"}));
  ASSERT_EQ(o.code, 0) << o.err;
  // --n 4 on the command line beats n = 2; --alpha beats alpha.
  EXPECT_NE(o.out.find("algorithm=psc mode=prior mask=off alpha=0.25 n_iter=7 n=4"),
            std::string::npos)
      << o.out;
  const auto j = nlohmann::json::parse(slurp(fs::path(out) / "report_psc_prior.json"));
  EXPECT_DOUBLE_EQ(j.at("config").at("alpha").get<double>(), 0.25);
  EXPECT_EQ(j.at("config").at("iterations"), 7);
  fs::remove(cfg);
}

TEST_F(Cli, DeterministicAcrossRunsAndThreads) {
  const std::string a = fresh("det_a");
  const std::string b = fresh("det_b");
  ASSERT_EQ(run_cli(attack(a, {"--algorithm", "opt", "--outer-iters", "2", "--inner-iters", "10"})).code, 0);
  ASSERT_EQ(run_cli(attack(b, {"--algorithm", "opt", "--outer-iters", "2", "--inner-iters", "10",
                               "--threads", "3"}))
                .code,
            0);
  EXPECT_EQ(slurp(fs::path(a) / "report_opt_prior.json"), slurp(fs::path(b) / "report_opt_prior.json"));
}

TEST_F(Cli, DumpImagesWritesTriples) {
  const std::string out = fresh("dump");
  ASSERT_EQ(run_cli(attack(out, {"--n", "2", "--dump-images"})).code, 0);
  for (int i = 0; i < 2; ++i) {
    for (const char* kind : {"original", "adversarial", "perturbation"}) {
      const fs::path p = fs::path(out) / "images" /
                         ("sample_" + std::to_string(i) + "_" + kind + ".pgm");
      ASSERT_TRUE(fs::exists(p)) << p;
      const Image x = read_pgm(p.string());
      EXPECT_EQ(x.height, 28u);
      EXPECT_EQ(x.width, 28u);
    }
  }
}

TEST_F(Cli, ReportTable) {
  const std::string out = fresh("table");
  ASSERT_EQ(run_cli(attack(out, {})).code, 0);
  ASSERT_EQ(run_cli(attack(out, {"--algorithm", "psc"})).code, 0);
  const Outcome r = run_cli({"report", (fs::path(out) / "report_gdu_prior.json").string(),
                             (fs::path(out) / "report_psc_prior.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("success rate"), std::string::npos);
  EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(prior\s+gdu\s+[01]\.\d{4}\s+(\d+\.\d{4}|-)\s+(\d+\.\d{4}|-)\n)")))
      << r.out;
  EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(prior\s+psc\s+[01]\.\d{4})"))) << r.out;
}

TEST_F(Cli, ReportErrors) {
  EXPECT_EQ(run_cli({"report"}).code, 2);
  const fs::path bad = fs::path(fresh("bad")) += ".json";
  write_text(bad, "{ not json");
  const Outcome o = run_cli({"report", bad.string()});
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find(bad.string()), std::string::npos) << o.err;
  write_text(bad, R"({"config": {}})");
  EXPECT_EQ(run_cli({"report", bad.string()}).code, 2);
  fs::remove(bad);
}

TEST_F(Cli, UsageErrorsExitTwo) {
  const std::string out = fresh("usage");
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({"train"}).code, 2);  // --data required
  EXPECT_EQ(run_cli({"train", "--data", "/nonexistent/scae"}).code, 2);
  EXPECT_EQ(run_cli({"attack", "--data", "/nonexistent/scae", "--model", models()}).code, 2);
  EXPECT_EQ(run_cli({"attack", "--data", data(), "--model", "/nonexistent/scae"}).code, 2);
  EXPECT_EQ(run_cli(attack(out, {"--algorithm", "fgsm"})).code, 2);
  EXPECT_EQ(run_cli(attack(out, {"--mode", "both"})).code, 2);
  EXPECT_EQ(run_cli(attack(out, {"--mask", "maybe"})).code, 2);
  EXPECT_EQ(run_cli(attack(out, {"--alpha", "-1"})).code, 2);
  EXPECT_EQ(run_cli(attack(out, {"--iters", "0"})).code, 2);
  EXPECT_EQ(run_cli(attack(out, {"--n", "0"})).code, 2);
  EXPECT_EQ(run_cli(attack(out, {"--bogus"})).code, 2);
  EXPECT_EQ(run_cli(attack(out, {"--config", "/nonexistent/cfg.json"})).code, 2);
  EXPECT_EQ(run_cli({"generate-toy"}).code, 2);
}

TEST_F(Cli, ClassifierModeMismatchIsUsageError) {
  const std::string out = fresh("mismatch");
  const Outcome o = run_cli(attack(
      out, {"--mode", "posterior", "--classifier",
            (fs::path(models()) / "classifier_prior.bin").string()}));
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("prior"), std::string::npos) << o.err;
}

TEST_F(Cli, CorruptModelIsRuntimeError) {
  const std::string dir = fresh("corrupt");
  fs::create_directories(dir);
  write_text(fs::path(dir) / "encoder.bin", "garbage");
  fs::copy_file(fs::path(models()) / "classifier_prior.bin", fs::path(dir) / "classifier_prior.bin");
  const Outcome o = run_cli({"attack", "--data", data(), "--model", dir, "--n", "2"});
  EXPECT_EQ(o.code, 1);
  EXPECT_FALSE(o.err.empty());
}

TEST_F(Cli, HelpExitsZero) {
  const Outcome o = run_cli({"--help"});
  EXPECT_EQ(o.code, 0);
  EXPECT_NE(o.out.find("attack"), std::string::npos);
}
