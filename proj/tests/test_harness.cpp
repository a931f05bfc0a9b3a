#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "scae/harness.hpp"

using namespace scae;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("scae_harness_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream os(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t r, std::uint32_t c,
                                      const std::vector<unsigned char>& payload,
                                      std::uint32_t magic = 0x803) {
  std::vector<unsigned char> b;
  for (std::uint32_t v : {magic, n, r, c}) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
  }
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

std::vector<unsigned char> idx_labels(std::uint32_t n, const std::vector<unsigned char>& payload,
                                      std::uint32_t magic = 0x801) {
  std::vector<unsigned char> b;
  for (std::uint32_t v : {magic, n}) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
  }
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

// Random 4-capsule encoder on 6x6 blobs; labels come from the classifier
// itself except every seventh sample, which is deliberately mislabelled.
struct World {
  Encoder encoder;
  ClassifierModel classifier;
  Dataset data;

  explicit World(PresenceMode mode, std::size_t count = 40)
      : encoder([] {
          Rng rng(17);
          EncoderParams p = init_params(4, 3, 6, 6, 8, rng);
          for (double& v : p.w1.data) v *= 4.0;
          return p;
        }()) {
    classifier.mode = mode;
    for (std::size_t i = 0; i < 4; ++i) {
      classifier.kmeans.centroids.push_back(encoder.presence(blob(500 + i).pixels, mode));
    }
    classifier.permutation.label_of_cluster = {2, 0, 3, 1};
    for (std::size_t i = 0; i < count; ++i) {
      Image x = blob(i);
      int label = classify(classifier, encoder.presence(x.pixels, mode));
      if (i % 7 == 3) label = (label + 1) % 4;
      data.images.push_back(std::move(x));
      data.labels.push_back(label);
    }
  }

  static Image blob(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.2, 1.0);
    std::vector<double> px(36, 0.0);
    for (std::size_t r = 1; r < 5; ++r) {
      for (std::size_t c = 1; c < 5; ++c) {
        if (u(rng) > 0.45) px[r * 6 + c] = u(rng);
      }
    }
    return Image(6, 6, px);
  }
};

ExperimentConfig quick(Algorithm a, std::size_t n = 20) {
  ExperimentConfig c;
  c.attack = AttackConfig::defaults(a);
  c.attack.outer_iterations = 2;
  c.attack.inner_iterations = 20;
  c.n = n;
  c.seed = 7;
  c.measure_time = false;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(Idx, ReadsImagesAndLabels) {
  TempDir dir;
  write_bytes(dir.file("img"), idx_images(2, 2, 3, {0, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 6}));
  write_bytes(dir.file("lbl"), idx_labels(2, {7, 3}));
  const Dataset d = load_idx(dir.file("img"), dir.file("lbl"), "train");
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.split, "train");
  EXPECT_EQ(d.images[0].height, 2u);
  EXPECT_EQ(d.images[0].width, 3u);
  EXPECT_EQ(d.images[0].pixels[0], 0.0);
  EXPECT_EQ(d.images[0].pixels[1], 1.0);
  EXPECT_DOUBLE_EQ(d.images[0].pixels[2], 0.2);
  EXPECT_DOUBLE_EQ(d.images[1].pixels[5], 6.0 / 255.0);
  EXPECT_EQ(d.labels, (std::vector<int>{7, 3}));
}

TEST(Idx, BadMagic) {
  TempDir dir;
  write_bytes(dir.file("img"), idx_images(1, 1, 1, {0}, 0x801));
  write_bytes(dir.file("lbl"), idx_labels(1, {0}, 0x803));
  EXPECT_THROW(read_idx_images(dir.file("img")), IdxMagicError);
  EXPECT_THROW(read_idx_labels(dir.file("lbl")), IdxMagicError);
  try {
    read_idx_images(dir.file("img"));
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(dir.file("img")), std::string::npos);
  }
}

TEST(Idx, Truncated) {
  TempDir dir;
  write_bytes(dir.file("img"), idx_images(2, 2, 2, {1, 2, 3, 4, 5}));
  EXPECT_THROW(read_idx_images(dir.file("img")), IdxTruncatedError);
  write_bytes(dir.file("short"), {0, 0, 8});
  EXPECT_THROW(read_idx_images(dir.file("short")), IdxTruncatedError);
  write_bytes(dir.file("lbl"), idx_labels(3, {1, 2}));
  EXPECT_THROW(read_idx_labels(dir.file("lbl")), IdxTruncatedError);
}

TEST(Idx, CountMismatch) {
  TempDir dir;
  write_bytes(dir.file("img"), idx_images(2, 1, 1, {1, 2}));
  write_bytes(dir.file("lbl"), idx_labels(3, {1, 2, 3}));
  EXPECT_THROW(load_idx(dir.file("img"), dir.file("lbl")), IdxCountMismatchError);
}

TEST(Idx, MissingFile) {
  EXPECT_THROW(read_idx_images("/nonexistent/scae/file"), std::runtime_error);
}

TEST(Idx, WriteIsByteExactAndRoundTrips) {
  TempDir dir;
  Dataset d;
  d.images = {Image(1, 3, {0.0, 0.5, 1.0}), Image(1, 3, {0.2, 2.0, -1.0})};
  d.labels = {4, 9};
  d.split = "train";
  write_idx_dir(dir.path().string(), d);
  const auto img = read_bytes(dir.file("train-images-idx3-ubyte"));
  // 0.5 * 255 = 127.5 rounds half up to 128; out-of-range values clamp.
  EXPECT_EQ(img, idx_images(2, 1, 3, {0, 128, 255, 51, 255, 0}));
  EXPECT_EQ(read_bytes(dir.file("train-labels-idx1-ubyte")), idx_labels(2, {4, 9}));
  const Dataset back = load_idx_dir(dir.path().string(), "train");
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_DOUBLE_EQ(back.images[1].pixels[0], 0.2);

  d.split = "test";
  write_idx_dir(dir.path().string(), d);
  EXPECT_TRUE(fs::exists(dir.file("t10k-images-idx3-ubyte")));
  EXPECT_TRUE(fs::exists(dir.file("t10k-labels-idx1-ubyte")));
}

// ---------------------------------------------------------------------------

TEST(Normalize, MinMax) {
  const Image x = minmax_normalize(Image(1, 4, {0.2, 0.4, 0.6, 0.2}));
  EXPECT_DOUBLE_EQ(x.pixels[0], 0.0);
  EXPECT_DOUBLE_EQ(x.pixels[1], 0.5);
  EXPECT_DOUBLE_EQ(x.pixels[2], 1.0);
  const Image c = minmax_normalize(Image(1, 3, {0.7, 0.7, 0.7}));
  EXPECT_EQ(c.pixels, (std::vector<double>{0, 0, 0}));
  EXPECT_THROW(minmax_normalize(Image()), std::invalid_argument);
}

TEST(Normalize, RangeIsUnitInterval) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> px(20);
    for (double& v : px) v = u(rng);
    const Image x = minmax_normalize(Image(4, 5, px));
    EXPECT_EQ(*std::min_element(x.pixels.begin(), x.pixels.end()), 0.0);
    EXPECT_DOUBLE_EQ(*std::max_element(x.pixels.begin(), x.pixels.end()), 1.0);
  }
}

// ---------------------------------------------------------------------------

TEST(Selection, KeepsOnlyCorrectAndIsSeeded) {
  const World w(PresenceMode::kPrior);
  const Selection s = select_correct(w.data, w.encoder, w.classifier, 10, 5);
  EXPECT_EQ(s.indices.size(), 10u);
  EXPECT_EQ(s.shortfall(), 0u);
  for (std::size_t i : s.indices) {
    EXPECT_NE(i % 7, 3u);
    EXPECT_EQ(classify(w.classifier, w.encoder.presence(w.data.images[i].pixels, PresenceMode::kPrior)),
              w.data.labels[i]);
  }
  std::vector<std::size_t> sorted = s.indices;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
  EXPECT_EQ(select_correct(w.data, w.encoder, w.classifier, 10, 5).indices, s.indices);
  EXPECT_NE(select_correct(w.data, w.encoder, w.classifier, 10, 6).indices, s.indices);
}

TEST(Selection, ShortfallWhenTooFewCorrect) {
  const World w(PresenceMode::kPrior, 14);  // two mislabelled
  const Selection s = select_correct(w.data, w.encoder, w.classifier, 100, 1);
  EXPECT_EQ(s.indices.size(), 12u);
  EXPECT_EQ(s.shortfall(), 88u);
}

TEST(Selection, Errors) {
  World w(PresenceMode::kPrior, 7);
  EXPECT_THROW(select_correct(w.data, w.encoder, w.classifier, 0, 1), std::invalid_argument);
  for (int& l : w.data.labels) l = (l + 1) % 4;
  EXPECT_THROW(select_correct(w.data, w.encoder, w.classifier, 5, 1), std::runtime_error);
}

TEST(Accuracy, CountsMatches) {
  const World w(PresenceMode::kPosterior, 28);  // four mislabelled
  EXPECT_DOUBLE_EQ(accuracy(w.encoder, w.classifier, w.data), 24.0 / 28.0);
  const Matrix p = presences(w.encoder, w.data, PresenceMode::kPosterior);
  ASSERT_EQ(p.size(), 28u);
  EXPECT_EQ(p[3], w.encoder.presence(w.data.images[3].pixels, PresenceMode::kPosterior));
}

// ---------------------------------------------------------------------------

TEST(Stats, PopulationMeanAndStd) {
  const std::vector<double> v = {1.0, 2.0, 3.0, 4.0};
  const L2Stats s = l2_stats(v);
  EXPECT_EQ(s.count, 4u);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.std, std::sqrt(1.25));
  const L2Stats e = l2_stats(std::span<const double>{});
  EXPECT_EQ(e.count, 0u);
  EXPECT_TRUE(std::isnan(e.mean));
  EXPECT_TRUE(std::isnan(e.std));
  const std::vector<double> one = {0.7};
  EXPECT_EQ(l2_stats(one).std, 0.0);
}

TEST(ConfigJson, RoundTripsEveryAlgorithm) {
  for (auto a : {Algorithm::kGdu, Algorithm::kPsc, Algorithm::kOpt}) {
    AttackConfig c = AttackConfig::defaults(a);
    c.alpha *= 3;
    c.mask = false;
    c.iterations = 17;
    c.outer_iterations = 4;
    c.inner_iterations = 33;
    const nlohmann::json j = to_json(c);
    EXPECT_EQ(j.at("algorithm"), algorithm_name(a));
    const AttackConfig back = attack_config_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(back.algorithm, a);
    EXPECT_DOUBLE_EQ(back.alpha, c.alpha);
    EXPECT_EQ(back.mask, false);
    if (a == Algorithm::kOpt) {
      EXPECT_TRUE(std::isinf(back.alpha_upper));
      EXPECT_EQ(back.outer_iterations, 4u);
      EXPECT_EQ(back.inner_iterations, 33u);
      EXPECT_DOUBLE_EQ(back.adam.beta2, 0.999);
    } else {
      EXPECT_EQ(back.iterations, 17u);
    }
  }
}

// ---------------------------------------------------------------------------

TEST(Experiment, RatiosAndStatsAreRecomputable) {
  for (auto mode : {PresenceMode::kPrior, PresenceMode::kPosterior}) {
    const World w(mode);
    for (auto a : {Algorithm::kGdu, Algorithm::kPsc, Algorithm::kOpt}) {
      const ExperimentReport r = run_experiment(w.data, w.encoder, w.classifier, quick(a));
      ASSERT_EQ(r.samples.size(), 20u);
      const nlohmann::json j = nlohmann::json::parse(report_json_string(r));
      std::size_t succ = 0;
      double sum = 0;
      std::vector<double> l2;
      for (const auto& s : j.at("per_sample")) {
        EXPECT_EQ(s.at("label"), s.at("original_label"));
        if (s.at("success").get<bool>()) {
          ++succ;
          l2.push_back(s.at("l2").get<double>());
          sum += l2.back();
          EXPECT_NE(s.at("adversarial_label"), s.at("original_label"));
        } else {
          EXPECT_EQ(s.at("l2").get<double>(), 0.0);
        }
      }
      EXPECT_EQ(j.at("successes").get<std::size_t>(), succ);
      EXPECT_NEAR(j.at("success_rate").get<double>(), static_cast<double>(succ) / 20.0, 1e-12);
      if (succ > 0) {
        const double mean = sum / static_cast<double>(succ);
        double ss = 0;
        for (double v : l2) ss += (v - mean) * (v - mean);
        EXPECT_NEAR(j.at("mean_l2").get<double>(), mean, 1e-12);
        EXPECT_NEAR(j.at("std_l2").get<double>(), std::sqrt(ss / static_cast<double>(succ)), 1e-12);
      } else {
        EXPECT_TRUE(j.at("mean_l2").is_null());
      }
      EXPECT_EQ(j.at("config").at("mode"), mode_name(mode));
      EXPECT_EQ(j.at("config").at("algorithm"), algorithm_name(a));
      EXPECT_EQ(j.at("l2_basis"), "successes");
      EXPECT_EQ(j.at("runtime_seconds").get<double>(), 0.0);
      const ReportSummary sum_row = summarize_report(j);
      EXPECT_EQ(sum_row.algorithm, algorithm_name(a));
      EXPECT_DOUBLE_EQ(sum_row.success_rate, r.success_rate);
    }
  }
}

TEST(Experiment, ThreadCountDoesNotChangeReport) {
  const World w(PresenceMode::kPrior);
  for (auto a : {Algorithm::kGdu, Algorithm::kOpt}) {
    ExperimentConfig c = quick(a);
    const std::string serial = report_json_string(run_experiment(w.data, w.encoder, w.classifier, c));
    c.threads = 4;
    const std::string parallel =
        report_json_string(run_experiment(w.data, w.encoder, w.classifier, c));
    EXPECT_EQ(serial, parallel) << algorithm_name(a);
    c.threads = 1;
    EXPECT_EQ(serial, report_json_string(run_experiment(w.data, w.encoder, w.classifier, c)));
  }
}

TEST(Experiment, ShortfallIsReported) {
  const World w(PresenceMode::kPrior, 14);
  ExperimentConfig c = quick(Algorithm::kGdu, 50);
  const ExperimentReport r = run_experiment(w.data, w.encoder, w.classifier, c);
  EXPECT_EQ(r.samples.size(), 12u);
  EXPECT_EQ(r.config.at("shortfall"), 38);
  EXPECT_EQ(r.config.at("selected"), 12);
  EXPECT_NEAR(r.success_rate, static_cast<double>(r.successes) / 12.0, 1e-12);
}

TEST(Experiment, PerSampleSeedsAreMixed) {
  const World w(PresenceMode::kPrior);
  const ExperimentReport r = run_experiment(w.data, w.encoder, w.classifier, quick(Algorithm::kOpt, 5));
  for (std::size_t i = 0; i < r.samples.size(); ++i) EXPECT_EQ(r.samples[i].seed, mix_seed(7, i));
}

TEST(Experiment, InvalidConfigThrows) {
  const World w(PresenceMode::kPrior);
  ExperimentConfig c = quick(Algorithm::kGdu);
  c.attack.alpha = -1;
  EXPECT_THROW(run_experiment(w.data, w.encoder, w.classifier, c), std::invalid_argument);
}

// ---------------------------------------------------------------------------

TEST(Pgm, ByteQuantization) {
  EXPECT_EQ(to_byte(0.5), 128);
  EXPECT_EQ(to_byte(0.0), 0);
  EXPECT_EQ(to_byte(1.0), 255);
  EXPECT_EQ(to_byte(-0.3), 0);
  EXPECT_EQ(to_byte(1.7), 255);
}

TEST(Pgm, ExportAndReadBack) {
  TempDir dir;
  const Image x(2, 3, {0.0, 0.5, 1.0, 0.25, 0.75, 0.1});
  export_image(x, dir.file("a.pgm"));
  const auto bytes = read_bytes(dir.file("a.pgm"));
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())), header);
  EXPECT_EQ(bytes[header.size() + 1], 128);
  const Image back = read_pgm(dir.file("a.pgm"));
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.width, 3u);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back.pixels[i], x.pixels[i], 0.5 / 255.0 + 1e-12);
}

TEST(Pgm, RejectsOtherFormats) {
  TempDir dir;
  write_bytes(dir.file("p2"), {'P', '2', '\n', '1', ' ', '1', '\n', '2', '5', '5', '\n', '0'});
  EXPECT_THROW(read_pgm(dir.file("p2")), FormatError);
  write_bytes(dir.file("trunc"), {'P', '5', '\n', '2', ' ', '2', '\n', '2', '5', '5', '\n', 0});
  EXPECT_THROW(read_pgm(dir.file("trunc")), FormatError);
}
