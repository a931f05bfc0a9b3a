#pragma once

// Command-line driver: train / attack / report (+ generate-toy for a
// self-contained IDX dataset). Exit codes: 0 ok, 1 runtime failure,
// 2 usage or validation error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "scae/attack.hpp"
#include "scae/classifier.hpp"
#include "scae/encoder.hpp"
#include "scae/harness.hpp"
#include "scae/toy_data.hpp"

namespace scae::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Raised for bad arguments discovered after parsing (missing paths, invalid
// overrides); maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

inline std::string encoder_file(const std::string& dir) { return (fs::path(dir) / "encoder.bin").string(); }
inline std::string classifier_file(const std::string& dir, PresenceMode mode) {
  return (fs::path(dir) / (std::string("classifier_") + mode_name(mode) + ".bin")).string();
}

inline void require_path(const std::string& what, const std::string& path) {
  if (path.empty()) throw UsageError(what + " is required");
  if (!fs::exists(path)) throw UsageError(what + " '" + path + "' does not exist");
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("malformed JSON in '" + path + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out = "models";
  std::uint64_t seed = 42;
  std::size_t epochs = TrainConfig{}.epochs;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  require_path("--data", a.data);
  const Dataset train_set = normalized(load_idx_dir(a.data, "train"));
  const Dataset test_set = normalized(load_idx_dir(a.data, "test"));
  int K = 0;
  for (int l : train_set.labels) K = std::max(K, l + 1);
  if (train_set.size() == 0) throw std::runtime_error("training split is empty");

  TrainConfig tc;
  tc.seed = a.seed;
  tc.epochs = a.epochs;
  out << "train: " << train_set.size() << " train / " << test_set.size() << " test images, K="
      << K << ", epochs=" << tc.epochs << ", lr=" << tc.learning_rate << ", seed=" << tc.seed
      << "\n";
  const Image& first = train_set.images.front();
  const EncoderParams params =
      train(tc, to_labeled(train_set), static_cast<std::uint32_t>(K),
            static_cast<std::uint32_t>(first.height), static_cast<std::uint32_t>(first.width));
  fs::create_directories(a.out);
  save_encoder(encoder_file(a.out), params);
  const Encoder enc(params);
  for (PresenceMode mode : {PresenceMode::kPrior, PresenceMode::kPosterior}) {
    const ClassifierModel clf = fit_classifier(presences(enc, train_set, mode), train_set.labels,
                                               static_cast<std::size_t>(K), mode, a.seed);
    save_classifier(classifier_file(a.out, mode), clf);
    out << std::fixed << std::setprecision(4) << mode_name(mode)
        << " classifier test accuracy: " << accuracy(enc, clf, test_set) << "\n"
        << std::defaultfloat;
  }
  out << "wrote " << encoder_file(a.out) << ", " << classifier_file(a.out, PresenceMode::kPrior)
      << ", " << classifier_file(a.out, PresenceMode::kPosterior) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct AttackArgs {
  std::string data;
  std::string model;
  std::string classifier;
  std::string out = "results";
  std::string config;
  std::string algorithm = "gdu";
  std::string mode = "prior";
  std::string mask = "on";
  std::optional<double> alpha;
  std::optional<std::size_t> iters;
  std::optional<std::size_t> outer_iters;
  std::optional<std::size_t> inner_iters;
  std::size_t n = 100;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool dump_images = false;
  bool no_timing = false;
  // Which options were given on the command line (these beat --config).
  std::vector<std::string> given;

  bool flag_given(const std::string& name) const {
    return std::find(given.begin(), given.end(), name) != given.end();
  }
};

// Fills options absent from the command line from the JSON config file.
inline void merge_config(AttackArgs& a, const nlohmann::json& j) {
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key) && !a.flag_given(key)) j.at(key).get_to(field);
  };
  auto take_opt = [&](const char* key, auto& field) {
    if (j.contains(key) && !a.flag_given(key)) field = j.at(key).get<typename std::decay_t<decltype(field)>::value_type>();
  };
  take("data", a.data);
  take("model", a.model);
  take("classifier", a.classifier);
  take("out", a.out);
  take("algorithm", a.algorithm);
  take("mode", a.mode);
  if (j.contains("mask") && !a.flag_given("mask")) {
    a.mask = j["mask"].is_boolean() ? (j["mask"].get<bool>() ? "on" : "off") : j["mask"].get<std::string>();
  }
  take_opt("alpha", a.alpha);
  take_opt("iters", a.iters);
  take_opt("outer-iters", a.outer_iters);
  take_opt("inner-iters", a.inner_iters);
  take("n", a.n);
  take("seed", a.seed);
  take("threads", a.threads);
  take("dump-images", a.dump_images);
}

// Effective attack configuration: algorithm defaults, then overrides.
inline AttackConfig effective_attack_config(const AttackArgs& a) {
  AttackConfig c;
  try {
    c = AttackConfig::defaults(parse_algorithm(a.algorithm));
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (a.mask != "on" && a.mask != "off") throw UsageError("--mask must be 'on' or 'off'");
  c.mask = a.mask == "on";
  if (a.alpha) c.alpha = *a.alpha;
  if (a.iters) c.iterations = *a.iters;
  if (a.outer_iters) c.outer_iterations = *a.outer_iters;
  if (a.inner_iters) c.inner_iterations = *a.inner_iters;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
  return c;
}

inline void print_effective(std::ostream& out, const AttackConfig& c, const AttackArgs& a) {
  out << "algorithm=" << algorithm_name(c.algorithm) << " mode=" << a.mode
      << " mask=" << (c.mask ? "on" : "off") << " alpha=" << c.alpha;
  if (c.algorithm == Algorithm::kOpt) {
    out << " alpha_lower=" << c.alpha_lower << " alpha_upper="
        << (std::isinf(c.alpha_upper) ? std::string("inf") : std::to_string(c.alpha_upper))
        << " outer_iters=" << c.outer_iterations << " inner_iters=" << c.inner_iterations
        << " adam_lr=" << c.adam.learning_rate;
  } else {
    out << " n_iter=" << c.iterations;
  }
  out << " n=" << a.n << " seed=" << a.seed << "\n";
}

inline Image magnitude_image(const Image& x, std::span<const double> p) {
  std::vector<double> px(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) px[i] = std::abs(p[i]);
  return Image(x.height, x.width, std::move(px));
}

inline int cmd_attack(AttackArgs a, std::ostream& out) {
  if (!a.config.empty()) merge_config(a, read_json_file(a.config));
  const AttackConfig ac = effective_attack_config(a);
  PresenceMode mode;
  try {
    mode = parse_mode(a.mode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (a.n < 1) throw UsageError("--n must be >= 1");
  require_path("--data", a.data);
  require_path("--model", a.model);
  std::string model_path = fs::is_directory(a.model) ? encoder_file(a.model) : a.model;
  std::string clf_path = a.classifier.empty() && fs::is_directory(a.model)
                             ? classifier_file(a.model, mode)
                             : a.classifier;
  if (!clf_path.empty() && fs::is_directory(clf_path)) clf_path = classifier_file(clf_path, mode);
  require_path("--model", model_path);
  require_path("--classifier", clf_path);
  print_effective(out, ac, a);

  const Encoder enc(load_encoder(model_path));
  const ClassifierModel clf = load_classifier(clf_path);
  if (clf.mode != mode) {
    throw UsageError(std::string("classifier '") + clf_path + "' was fitted in " +
                     mode_name(clf.mode) + " mode, not " + mode_name(mode));
  }
  const Dataset test_set = normalized(load_idx_dir(a.data, "test"));

  ExperimentConfig ec;
  ec.attack = ac;
  ec.n = a.n;
  ec.seed = a.seed;
  ec.threads = a.threads;
  ec.measure_time = !a.no_timing;
  ExperimentReport rep = run_experiment(test_set, enc, clf, ec);
  rep.config["data"] = a.data;
  rep.config["model"] = model_path;
  rep.config["classifier"] = clf_path;

  fs::create_directories(a.out);
  const std::string report_path =
      (fs::path(a.out) / (std::string("report_") + algorithm_name(ac.algorithm) + "_" +
                          mode_name(mode) + ".json"))
          .string();
  {
    std::ofstream os(report_path, std::ios::binary);
    os << report_json_string(rep);
    if (!os) throw std::runtime_error("cannot write '" + report_path + "'");
  }
  if (rep.samples.size() < a.n) {
    out << "note: only " << rep.samples.size() << " of " << a.n
        << " requested samples are classified correctly\n";
  }
  if (a.dump_images) {
    const fs::path dir = fs::path(a.out) / "images";
    fs::create_directories(dir);
    for (std::size_t i = 0; i < rep.samples.size(); ++i) {
      const SampleRecord& s = rep.samples[i];
      const Image& x = test_set.images[s.dataset_index];
      const std::string stem = (dir / ("sample_" + std::to_string(i))).string();
      export_image(x, stem + "_original.pgm");
      export_image(Image(x.height, x.width, s.result.adversarial), stem + "_adversarial.pgm");
      export_image(magnitude_image(x, s.result.perturbation), stem + "_perturbation.pgm");
    }
  }
  out << std::fixed << std::setprecision(4) << "success_rate=" << rep.success_rate
      << " mean_l2=" << rep.mean_l2 << " std_l2=" << rep.std_l2 << std::defaultfloat
      << " (" << rep.successes << "/" << rep.samples.size() << ")\nwrote " << report_path
      << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline std::string fmt4(double v) {
  if (!std::isfinite(v)) return "-";
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v;
  return s.str();
}

inline int cmd_report(const std::vector<std::string>& files, std::ostream& out) {
  if (files.empty()) throw UsageError("report needs at least one report JSON file");
  std::vector<ReportSummary> rows;
  for (const std::string& f : files) {
    const nlohmann::json j = read_json_file(f);
    try {
      rows.push_back(summarize_report(j));
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("malformed report '" + f + "': " + e.what());
    }
  }
  out << std::left << std::setw(12) << "classifier" << std::setw(11) << "algorithm"
      << std::right << std::setw(14) << "success rate" << std::setw(10) << "mean L2"
      << std::setw(10) << "std L2" << "\n";
  for (const ReportSummary& r : rows) {
    out << std::left << std::setw(12) << r.mode << std::setw(11) << r.algorithm << std::right
        << std::setw(14) << fmt4(r.success_rate) << std::setw(10) << fmt4(r.mean_l2)
        << std::setw(10) << fmt4(r.std_l2) << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ToyArgs {
  std::string out;
  std::uint64_t seed = 42;
  std::size_t train_count = 1000;
  std::size_t test_count = 200;
};

inline int cmd_generate_toy(const ToyArgs& a, std::ostream& out) {
  if (a.out.empty()) throw UsageError("--out is required");
  auto to_dataset = [](const std::vector<ToySample>& samples, const char* split) {
    Dataset d;
    d.split = split;
    for (const ToySample& s : samples) {
      d.images.emplace_back(28, 28, s.pixels);
      d.labels.push_back(s.label);
    }
    return d;
  };
  write_idx_dir(a.out, to_dataset(make_toy_dataset(a.train_count, a.seed), "train"));
  write_idx_dir(a.out, to_dataset(make_toy_dataset(a.test_count, mix_seed(a.seed, 1)), "test"));
  out << "wrote " << a.train_count << " train / " << a.test_count << " test toy images to "
      << a.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Evasion attacks on capsule-presence encoders"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train the encoder and fit both classifiers");
  train_cmd->add_option("--data", ta.data, "directory with IDX train/t10k files")->required();
  train_cmd->add_option("--out", ta.out, "output directory for model files")->capture_default_str();
  train_cmd->add_option("--seed", ta.seed)->capture_default_str();
  train_cmd->add_option("--epochs", ta.epochs)->capture_default_str();

  AttackArgs aa;
  auto* attack_cmd = app.add_subcommand("attack", "attack correctly classified test samples");
  attack_cmd->add_option("--data", aa.data, "directory with IDX files");
  attack_cmd->add_option("--model", aa.model, "encoder file or model directory");
  attack_cmd->add_option("--classifier", aa.classifier, "classifier file or directory");
  attack_cmd->add_option("--out", aa.out, "output directory")->capture_default_str();
  attack_cmd->add_option("--config", aa.config, "JSON config; command-line flags win");
  attack_cmd->add_option("--algorithm", aa.algorithm, "gdu | psc | opt")->capture_default_str();
  attack_cmd->add_option("--mode", aa.mode, "prior | posterior")->capture_default_str();
  attack_cmd->add_option("--mask", aa.mask, "on | off")->capture_default_str();
  attack_cmd->add_option("--alpha", aa.alpha, "step size (gdu/psc) or initial alpha (opt)");
  attack_cmd->add_option("--iters", aa.iters, "iterations for gdu/psc");
  attack_cmd->add_option("--outer-iters", aa.outer_iters, "opt outer rounds");
  attack_cmd->add_option("--inner-iters", aa.inner_iters, "opt inner steps");
  attack_cmd->add_option("--n", aa.n, "samples to attack")->capture_default_str();
  attack_cmd->add_option("--seed", aa.seed)->capture_default_str();
  attack_cmd->add_option("--threads", aa.threads, "worker threads (0 = all cores)")
      ->capture_default_str();
  attack_cmd->add_flag("--dump-images", aa.dump_images, "write PGM triples per sample");
  attack_cmd->add_flag("--no-timing", aa.no_timing, "write runtime_seconds as 0");

  std::vector<std::string> report_files;
  auto* report_cmd = app.add_subcommand("report", "tabulate report JSON files");
  report_cmd->add_option("reports", report_files, "report JSON files");

  ToyArgs ya;
  auto* toy_cmd = app.add_subcommand("generate-toy", "write the synthetic glyph dataset as IDX");
  toy_cmd->add_option("--out", ya.out)->required();
  toy_cmd->add_option("--seed", ya.seed)->capture_default_str();
  toy_cmd->add_option("--train-count", ya.train_count)->capture_default_str();
  toy_cmd->add_option("--test-count", ya.test_count)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(ta, out);
    if (*attack_cmd) {
      for (const char* name : {"data", "model", "classifier", "out", "algorithm", "mode", "mask",
                               "alpha", "iters", "outer-iters", "inner-iters", "n", "seed",
                               "threads", "dump-images"}) {
        if (attack_cmd->count(std::string("--") + name) > 0) aa.given.emplace_back(name);
      }
      if (aa.threads == 0) aa.threads = std::max(1u, std::thread::hardware_concurrency());
      return cmd_attack(aa, out);
    }
    if (*report_cmd) return cmd_report(report_files, out);
    if (*toy_cmd) return cmd_generate_toy(ya, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace scae::cli
