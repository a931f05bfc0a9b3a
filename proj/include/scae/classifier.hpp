#pragma once

// Unsupervised downstream classifier: k-means over presence vectors, then an
// optimal cluster -> label permutation found by the Hungarian method.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "scae/encoder.hpp"
#include "scae/util.hpp"

namespace scae {

using Matrix = std::vector<std::vector<double>>;

struct KMeansModel {
  Matrix centroids;  // k x K
  std::uint64_t seed = 0;

  std::size_t k() const { return centroids.size(); }
  std::size_t dim() const { return centroids.empty() ? 0 : centroids.front().size(); }

  friend bool operator==(const KMeansModel&, const KMeansModel&) = default;
};

namespace kmeans_detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace kmeans_detail

// Nearest centroid; ties go to the lowest index.
inline std::size_t assign(const KMeansModel& model, std::span<const double> point) {
  if (point.size() != model.dim()) {
    throw ShapeError("assign: point has dimension " + std::to_string(point.size()) +
                     ", centroids have " + std::to_string(model.dim()));
  }
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < model.k(); ++c) {
    const double d = kmeans_detail::sq_dist(point, model.centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

inline double within_cluster_ss(const Matrix& points, const Matrix& centroids,
                                const std::vector<std::size_t>& labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    s += kmeans_detail::sq_dist(points[i], centroids[labels[i]]);
  }
  return s;
}

// Lloyd's algorithm with k-means++ seeding. Stops at an assignment fixpoint or
// after `max_iter` iterations. If `wcss_trace` is given it receives the
// within-cluster sum of squares after every update step.
inline KMeansModel kmeans_fit(const Matrix& points, std::size_t k, std::uint64_t seed,
                              std::vector<double>* wcss_trace = nullptr,
                              std::size_t max_iter = 300) {
  if (k < 1) throw std::invalid_argument("kmeans_fit: k must be >= 1");
  if (points.empty()) throw std::invalid_argument("kmeans_fit: no points");
  const std::size_t dim = points.front().size();
  for (const auto& p : points) {
    if (p.size() != dim) throw ShapeError("kmeans_fit: ragged points");
  }
  {
    std::set<std::vector<double>> distinct(points.begin(), points.end());
    if (distinct.size() < k) {
      throw std::invalid_argument("kmeans_fit: " + std::to_string(distinct.size()) +
                                  " distinct points, need at least k=" + std::to_string(k));
    }
  }

  Rng rng(seed);
  const std::size_t n = points.size();
  KMeansModel model;
  model.seed = seed;

  // k-means++ seeding.
  model.centroids.push_back(points[uniform_index(rng, n)]);
  std::vector<double> d2(n);
  while (model.centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : model.centroids) best = std::min(best, kmeans_detail::sq_dist(points[i], c));
      d2[i] = best;
      total += best;
    }
    const double target = uniform01(rng) * total;
    double acc = 0.0;
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (d2[i] <= 0) continue;
      acc += d2[i];
      pick = i;
      if (acc > target) break;
    }
    model.centroids.push_back(points[pick]);
  }

  std::vector<std::size_t> labels(n, 0);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    bool changed = iter == 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = assign(model, points[i]);
      if (a != labels[i]) {
        labels[i] = a;
        changed = true;
      }
    }
    if (!changed) break;

    // Empty clusters take the point farthest from its current centroid.
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t l : labels) ++counts[l];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[labels[i]] <= 1) continue;
        const double d = kmeans_detail::sq_dist(points[i], model.centroids[labels[i]]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      --counts[labels[far]];
      labels[far] = c;
      counts[c] = 1;
    }

    Matrix sums(k, std::vector<double>(dim, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < dim; ++j) sums[labels[i]][j] += points[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t j = 0; j < dim; ++j) {
        model.centroids[c][j] = sums[c][j] / static_cast<double>(counts[c]);
      }
    }
    if (wcss_trace) wcss_trace->push_back(within_cluster_ss(points, model.centroids, labels));
  }
  return model;
}

// ---------------------------------------------------------------------------

struct Assignment {
  std::vector<std::size_t> column_of_row;
  double cost = 0.0;
};

// Minimum-cost perfect assignment on a square matrix (Kuhn-Munkres with
// potentials, O(n^3)).
inline Assignment hungarian(const Matrix& cost) {
  const std::size_t n = cost.size();
  for (const auto& row : cost) {
    if (row.size() != n) throw ShapeError("hungarian: cost matrix must be square");
    for (double v : row) {
      if (!std::isfinite(v)) throw std::invalid_argument("hungarian: non-finite cost");
    }
  }
  Assignment out;
  if (n == 0) return out;

  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based; column 0 is a sentinel.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> row_of_col(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    row_of_col[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = row_of_col[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[row_of_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (row_of_col[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      row_of_col[j0] = row_of_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  out.column_of_row.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) out.column_of_row[row_of_col[j] - 1] = j - 1;
  for (std::size_t i = 0; i < n; ++i) out.cost += cost[i][out.column_of_row[i]];
  return out;
}

// cluster index -> class label, bijective.
struct LabelPermutation {
  std::vector<std::uint32_t> label_of_cluster;

  friend bool operator==(const LabelPermutation&, const LabelPermutation&) = default;
};

inline std::vector<std::vector<std::size_t>> confusion_counts(
    std::span<const std::size_t> clusters, std::span<const int> labels, std::size_t k) {
  if (clusters.size() != labels.size()) {
    throw std::invalid_argument("fit_permutation: cluster and label lists differ in length");
  }
  std::vector<std::vector<std::size_t>> counts(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    if (clusters[i] >= k || labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw std::invalid_argument("fit_permutation: value out of range 0.." +
                                  std::to_string(k - 1));
    }
    ++counts[clusters[i]][static_cast<std::size_t>(labels[i])];
  }
  return counts;
}

// Maximizes agreement between clusters and labels by running the Hungarian
// method on max(N) - N.
inline LabelPermutation fit_permutation(std::span<const std::size_t> clusters,
                                        std::span<const int> labels, std::size_t k) {
  const auto counts = confusion_counts(clusters, labels, k);
  std::size_t top = 0;
  for (const auto& row : counts) top = std::max(top, *std::max_element(row.begin(), row.end()));
  Matrix cost(k, std::vector<double>(k));
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t l = 0; l < k; ++l) {
      cost[c][l] = static_cast<double>(top - counts[c][l]);
    }
  }
  const Assignment a = hungarian(cost);
  LabelPermutation perm;
  for (std::size_t c = 0; c < k; ++c) perm.label_of_cluster.push_back(static_cast<std::uint32_t>(a.column_of_row[c]));
  return perm;
}

inline std::size_t agreement(std::span<const std::size_t> clusters, std::span<const int> labels,
                             const LabelPermutation& perm) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    if (static_cast<int>(perm.label_of_cluster[clusters[i]]) == labels[i]) ++hits;
  }
  return hits;
}

struct ClassifierModel {
  KMeansModel kmeans;
  LabelPermutation permutation;
  PresenceMode mode = PresenceMode::kPrior;

  friend bool operator==(const ClassifierModel&, const ClassifierModel&) = default;
};

inline int classify(const ClassifierModel& model, std::span<const double> presence) {
  return static_cast<int>(model.permutation.label_of_cluster[assign(model.kmeans, presence)]);
}

// Fits k-means on the presence vectors and matches clusters to labels.
inline ClassifierModel fit_classifier(const Matrix& presences, std::span<const int> labels,
                                      std::size_t k, PresenceMode mode, std::uint64_t seed) {
  ClassifierModel model;
  model.mode = mode;
  model.kmeans = kmeans_fit(presences, k, seed);
  std::vector<std::size_t> clusters;
  clusters.reserve(presences.size());
  for (const auto& p : presences) clusters.push_back(assign(model.kmeans, p));
  model.permutation = fit_permutation(clusters, labels, k);
  return model;
}

// ---------------------------------------------------------------------------
// Classifier file: "CCLS", u32 version, u8 mode, u32 k, u32 K, k*K f64
// centroids (row-major), k u32 permutation entries. Little-endian.

inline constexpr std::uint32_t kClassifierFormatVersion = 1;

inline void save_classifier(std::ostream& os, const ClassifierModel& m) {
  io::put_magic(os, "CCLS");
  io::put_u32(os, kClassifierFormatVersion);
  io::put_u8(os, static_cast<std::uint8_t>(m.mode));
  io::put_u32(os, static_cast<std::uint32_t>(m.kmeans.k()));
  io::put_u32(os, static_cast<std::uint32_t>(m.kmeans.dim()));
  for (const auto& row : m.kmeans.centroids) {
    for (double v : row) io::put_f64(os, v);
  }
  for (std::uint32_t l : m.permutation.label_of_cluster) io::put_u32(os, l);
}

inline ClassifierModel load_classifier(std::istream& is) {
  io::expect_magic(is, "CCLS");
  const std::uint32_t version = io::get_u32(is);
  if (version != kClassifierFormatVersion) {
    throw FormatError("unsupported classifier format version " + std::to_string(version));
  }
  ClassifierModel m;
  const std::uint8_t mode = io::get_u8(is);
  if (mode > 1) throw FormatError("bad classifier mode byte " + std::to_string(mode));
  m.mode = static_cast<PresenceMode>(mode);
  const std::uint32_t k = io::get_u32(is);
  const std::uint32_t dim = io::get_u32(is);
  if (k == 0 || k > 4096 || dim > 4096) throw FormatError("implausible classifier dimensions");
  m.kmeans.centroids.assign(k, std::vector<double>(dim));
  for (auto& row : m.kmeans.centroids) {
    for (double& v : row) v = io::get_f64(is);
  }
  std::vector<char> seen(k, 0);
  for (std::uint32_t c = 0; c < k; ++c) {
    const std::uint32_t l = io::get_u32(is);
    if (l >= k || seen[l]) throw FormatError("classifier permutation is not a bijection");
    seen[l] = 1;
    m.permutation.label_of_cluster.push_back(l);
  }
  return m;
}

inline void save_classifier(const std::string& path, const ClassifierModel& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  save_classifier(os, m);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline ClassifierModel load_classifier(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return load_classifier(is);
}

}  // namespace scae
