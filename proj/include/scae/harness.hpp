#pragma once

// Dataset plumbing and batch experiments: IDX ingestion, min-max
// normalization, selection of correctly classified samples, parallel attack
// runs and the JSON report.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "scae/attack.hpp"
#include "scae/classifier.hpp"
#include "scae/encoder.hpp"
#include "scae/image.hpp"
#include "scae/util.hpp"

namespace scae {

struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  std::string split = "test";

  std::size_t size() const { return images.size(); }
};

class IdxMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class IdxTruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};
class IdxCountMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace idx_detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off,
                          const std::string& path) {
  if (off + 4 > b.size()) throw IdxTruncatedError("'" + path + "': truncated header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline void put_be32(std::ostream& os, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) os.put(static_cast<char>((v >> s) & 0xff));
}

}  // namespace idx_detail

inline std::vector<Image> read_idx_images(const std::string& path) {
  const auto b = idx_detail::read_file(path);
  const std::uint32_t magic = idx_detail::be32(b, 0, path);
  if (magic != kIdxImageMagic) {
    std::ostringstream msg;
    msg << "'" << path << "': bad IDX image magic 0x" << std::hex << magic;
    throw IdxMagicError(msg.str());
  }
  const std::size_t n = idx_detail::be32(b, 4, path);
  const std::size_t rows = idx_detail::be32(b, 8, path);
  const std::size_t cols = idx_detail::be32(b, 12, path);
  const std::size_t need = 16 + n * rows * cols;
  if (b.size() < need) {
    throw IdxTruncatedError("'" + path + "': payload has " + std::to_string(b.size() - 16) +
                            " bytes, header promises " + std::to_string(need - 16));
  }
  std::vector<Image> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> px(rows * cols);
    const unsigned char* src = b.data() + 16 + i * rows * cols;
    for (std::size_t j = 0; j < px.size(); ++j) px[j] = src[j] / 255.0;
    out.emplace_back(rows, cols, std::move(px));
  }
  return out;
}

inline std::vector<int> read_idx_labels(const std::string& path) {
  const auto b = idx_detail::read_file(path);
  const std::uint32_t magic = idx_detail::be32(b, 0, path);
  if (magic != kIdxLabelMagic) {
    std::ostringstream msg;
    msg << "'" << path << "': bad IDX label magic 0x" << std::hex << magic;
    throw IdxMagicError(msg.str());
  }
  const std::size_t n = idx_detail::be32(b, 4, path);
  if (b.size() < 8 + n) {
    throw IdxTruncatedError("'" + path + "': " + std::to_string(b.size() - 8) +
                            " label bytes, header promises " + std::to_string(n));
  }
  return {b.begin() + 8, b.begin() + 8 + static_cast<std::ptrdiff_t>(n)};
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        std::string split = "test") {
  Dataset d;
  d.images = read_idx_images(images_path);
  d.labels = read_idx_labels(labels_path);
  d.split = std::move(split);
  if (d.images.size() != d.labels.size()) {
    throw IdxCountMismatchError("'" + images_path + "' has " + std::to_string(d.images.size()) +
                                " images but '" + labels_path + "' has " +
                                std::to_string(d.labels.size()) + " labels");
  }
  return d;
}

// [0,1] -> byte, round half up.
inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
}

// Pixels are quantized with to_byte.
inline void write_idx(const std::string& images_path, const std::string& labels_path,
                      const Dataset& d) {
  if (d.images.size() != d.labels.size()) throw std::invalid_argument("write_idx: size mismatch");
  std::ofstream im(images_path, std::ios::binary);
  std::ofstream lb(labels_path, std::ios::binary);
  if (!im || !lb) throw std::runtime_error("cannot write IDX files");
  const std::size_t rows = d.images.empty() ? 0 : d.images[0].height;
  const std::size_t cols = d.images.empty() ? 0 : d.images[0].width;
  idx_detail::put_be32(im, kIdxImageMagic);
  idx_detail::put_be32(im, static_cast<std::uint32_t>(d.images.size()));
  idx_detail::put_be32(im, static_cast<std::uint32_t>(rows));
  idx_detail::put_be32(im, static_cast<std::uint32_t>(cols));
  for (const Image& x : d.images) {
    if (x.height != rows || x.width != cols) throw std::invalid_argument("write_idx: ragged images");
    for (double v : x.pixels) im.put(static_cast<char>(to_byte(v)));
  }
  idx_detail::put_be32(lb, kIdxLabelMagic);
  idx_detail::put_be32(lb, static_cast<std::uint32_t>(d.labels.size()));
  for (int l : d.labels) lb.put(static_cast<char>(l));
  if (!im || !lb) throw std::runtime_error("write failed for IDX files");
}

// MNIST file names inside a data directory.
inline Dataset load_idx_dir(const std::string& dir, const std::string& split) {
  namespace fs = std::filesystem;
  const std::string prefix = split == "train" ? "train" : "t10k";
  return load_idx((fs::path(dir) / (prefix + "-images-idx3-ubyte")).string(),
                  (fs::path(dir) / (prefix + "-labels-idx1-ubyte")).string(), split);
}

inline void write_idx_dir(const std::string& dir, const Dataset& d) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string prefix = d.split == "train" ? "train" : "t10k";
  write_idx((fs::path(dir) / (prefix + "-images-idx3-ubyte")).string(),
            (fs::path(dir) / (prefix + "-labels-idx1-ubyte")).string(), d);
}

// A constant image has no range; it maps to black.
inline Image minmax_normalize(const Image& x) {
  if (x.pixels.empty()) throw std::invalid_argument("minmax_normalize: empty image");
  const auto [lo, hi] = std::minmax_element(x.pixels.begin(), x.pixels.end());
  const double a = *lo;
  const double range = *hi - *lo;
  std::vector<double> px(x.size(), 0.0);
  if (range > 0) {
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = (x.pixels[i] - a) / range;
  }
  return Image(x.height, x.width, std::move(px));
}

inline Dataset normalized(Dataset d) {
  for (Image& x : d.images) x = minmax_normalize(x);
  return d;
}

inline LabeledImages to_labeled(const Dataset& d) {
  LabeledImages out;
  out.images.reserve(d.size());
  for (const Image& x : d.images) out.images.push_back(x.pixels);
  out.labels = d.labels;
  return out;
}

inline Matrix presences(const Encoder& encoder, const Dataset& d, PresenceMode mode) {
  Matrix out;
  out.reserve(d.size());
  for (const Image& x : d.images) out.push_back(encoder.presence(x.pixels, mode));
  return out;
}

inline double accuracy(const Encoder& encoder, const ClassifierModel& classifier,
                       const Dataset& d) {
  if (d.size() == 0) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    hit += classify(classifier, encoder.presence(d.images[i].pixels, classifier.mode)) ==
           d.labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

struct Selection {
  std::vector<std::size_t> indices;  // into the dataset, in selection order
  std::size_t requested = 0;
  std::size_t shortfall() const { return requested - indices.size(); }
};

// Walks a seeded shuffle of the dataset, keeping samples the classifier gets
// right, until n are found.
inline Selection select_correct(const Dataset& d, const Encoder& encoder,
                                const ClassifierModel& classifier, std::size_t n,
                                std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("select_correct: n must be >= 1");
  std::vector<std::size_t> order(d.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  shuffle(order, rng);
  Selection s;
  s.requested = n;
  for (std::size_t i : order) {
    if (s.indices.size() == n) break;
    if (classify(classifier, encoder.presence(d.images[i].pixels, classifier.mode)) ==
        d.labels[i]) {
      s.indices.push_back(i);
    }
  }
  if (s.indices.empty()) {
    throw std::runtime_error("select_correct: no correctly classified samples in the dataset");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Experiments.

struct ExperimentConfig {
  AttackConfig attack;
  std::size_t n = 100;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool measure_time = true;  // false writes runtime_seconds = 0
};

struct SampleRecord {
  std::size_t dataset_index = 0;
  int label = 0;
  std::uint64_t seed = 0;
  AttackResult result;
};

struct ExperimentReport {
  nlohmann::json config;
  std::vector<SampleRecord> samples;
  std::size_t requested = 0;
  std::size_t successes = 0;
  double success_rate = 0.0;
  // Over successful samples only; NaN when there are none.
  double mean_l2 = std::numeric_limits<double>::quiet_NaN();
  double std_l2 = std::numeric_limits<double>::quiet_NaN();
  double runtime_seconds = 0.0;
};

struct L2Stats {
  std::size_t count = 0;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();  // population
};

inline L2Stats l2_stats(std::span<const double> values) {
  L2Stats s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(values.size()));
  return s;
}

inline nlohmann::json to_json(const AttackConfig& c) {
  nlohmann::json j;
  j["algorithm"] = algorithm_name(c.algorithm);
  j["alpha"] = c.alpha;
  j["mask"] = c.mask;
  j["arctanh_epsilon"] = c.arctanh_epsilon;
  if (c.algorithm == Algorithm::kOpt) {
    j["alpha_lower"] = c.alpha_lower;
    j["alpha_upper"] = std::isinf(c.alpha_upper) ? nlohmann::json("inf") : nlohmann::json(c.alpha_upper);
    j["outer_iterations"] = c.outer_iterations;
    j["inner_iterations"] = c.inner_iterations;
    j["adam"] = {{"learning_rate", c.adam.learning_rate},
                 {"beta1", c.adam.beta1},
                 {"beta2", c.adam.beta2},
                 {"epsilon", c.adam.epsilon}};
  } else {
    j["iterations"] = c.iterations;
  }
  return j;
}

// Inverse of to_json; absent keys keep the algorithm's defaults.
inline AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig c = AttackConfig::defaults(parse_algorithm(j.value("algorithm", std::string("gdu"))));
  c.alpha = j.value("alpha", c.alpha);
  c.mask = j.value("mask", c.mask);
  c.arctanh_epsilon = j.value("arctanh_epsilon", c.arctanh_epsilon);
  c.alpha_lower = j.value("alpha_lower", c.alpha_lower);
  if (j.contains("alpha_upper")) {
    const auto& u = j["alpha_upper"];
    c.alpha_upper = u.is_string() ? std::numeric_limits<double>::infinity() : u.get<double>();
  }
  c.iterations = j.value("iterations", c.iterations);
  c.outer_iterations = j.value("outer_iterations", c.outer_iterations);
  c.inner_iterations = j.value("inner_iterations", c.inner_iterations);
  if (j.contains("adam")) {
    const auto& a = j["adam"];
    c.adam.learning_rate = a.value("learning_rate", c.adam.learning_rate);
    c.adam.beta1 = a.value("beta1", c.adam.beta1);
    c.adam.beta2 = a.value("beta2", c.adam.beta2);
    c.adam.epsilon = a.value("epsilon", c.adam.epsilon);
  }
  return c;
}

// Attacks every selected sample. Sample i runs with seed mix_seed(seed, i) and
// results are stored by position, so the report does not depend on threads.
inline ExperimentReport run_experiment(const Dataset& d, const Encoder& encoder,
                                       const ClassifierModel& classifier,
                                       const ExperimentConfig& config) {
  config.attack.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const Selection sel = select_correct(d, encoder, classifier, config.n, config.seed);

  ExperimentReport rep;
  rep.requested = config.n;
  rep.samples.resize(sel.indices.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < sel.indices.size(); i = next++) {
      try {
        SampleRecord& rec = rep.samples[i];
        rec.dataset_index = sel.indices[i];
        rec.label = d.labels[rec.dataset_index];
        rec.seed = mix_seed(config.seed, i);
        AttackConfig ac = config.attack;
        ac.seed = rec.seed;
        const Image& x = d.images[rec.dataset_index];
        const AttackTarget t = make_target(encoder, classifier, x.pixels);
        rec.result = run_attack(t, x, ac);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = sel.indices.size();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(config.threads, sel.indices.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);

  std::vector<double> l2s;
  for (const SampleRecord& s : rep.samples) {
    if (s.result.success) l2s.push_back(s.result.l2);
  }
  const L2Stats st = l2_stats(l2s);
  rep.successes = st.count;
  rep.success_rate = rep.samples.empty() ? 0.0
                                         : static_cast<double>(st.count) /
                                               static_cast<double>(rep.samples.size());
  rep.mean_l2 = st.mean;
  rep.std_l2 = st.std;

  rep.config = to_json(config.attack);
  rep.config["mode"] = mode_name(classifier.mode);
  rep.config["n"] = config.n;
  rep.config["seed"] = config.seed;
  rep.config["selected"] = sel.indices.size();
  rep.config["shortfall"] = sel.shortfall();
  rep.config["l2_basis"] = "successes";
  if (config.measure_time) {
    rep.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return rep;
}

inline nlohmann::json nan_to_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const ExperimentReport& r) {
  nlohmann::json j;
  j["config"] = r.config;
  j["per_sample"] = nlohmann::json::array();
  for (const SampleRecord& s : r.samples) {
    const AttackResult& a = s.result;
    nlohmann::json e = {{"index", s.dataset_index},
                        {"label", s.label},
                        {"seed", s.seed},
                        {"success", a.success},
                        {"l2", a.l2},
                        {"iterations", a.iterations},
                        {"best_iteration", a.best_iteration},
                        {"original_label", a.original_label},
                        {"adversarial_label", a.adversarial_label}};
    if (!a.alpha_trace.empty()) e["final_alpha"] = a.final_alpha;
    j["per_sample"].push_back(std::move(e));
  }
  j["successes"] = r.successes;
  j["success_rate"] = r.success_rate;
  j["mean_l2"] = nan_to_null(r.mean_l2);
  j["std_l2"] = nan_to_null(r.std_l2);
  j["l2_basis"] = "successes";
  j["runtime_seconds"] = r.runtime_seconds;
  return j;
}

inline std::string report_json_string(const ExperimentReport& r) { return to_json(r).dump(2) + "\n"; }

// Summary row read back from a report file.
struct ReportSummary {
  std::string algorithm;
  std::string mode;
  double success_rate = 0.0;
  double mean_l2 = std::numeric_limits<double>::quiet_NaN();
  double std_l2 = std::numeric_limits<double>::quiet_NaN();
};

inline ReportSummary summarize_report(const nlohmann::json& j) {
  ReportSummary s;
  const auto& c = j.at("config");
  s.algorithm = c.at("algorithm").get<std::string>();
  s.mode = c.at("mode").get<std::string>();
  s.success_rate = j.at("success_rate").get<double>();
  if (!j.at("mean_l2").is_null()) s.mean_l2 = j.at("mean_l2").get<double>();
  if (!j.at("std_l2").is_null()) s.std_l2 = j.at("std_l2").get<double>();
  return s;
}

// ---------------------------------------------------------------------------
// PGM (P5, maxval 255).


inline void export_image(const Image& x, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  os << "P5\n" << x.width << " " << x.height << "\n255\n";
  for (double v : x.pixels) os.put(static_cast<char>(to_byte(v)));
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

inline Image read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval == 0 || maxval > 255) {
    throw FormatError("'" + path + "': not an 8-bit P5 PGM");
  }
  is.get();  // single whitespace after maxval
  std::vector<double> px(w * h);
  for (double& v : px) {
    const int c = is.get();
    if (c == EOF) throw FormatError("'" + path + "': truncated PGM payload");
    v = static_cast<double>(c) / static_cast<double>(maxval);
  }
  return Image(h, w, std::move(px));
}

}  // namespace scae
