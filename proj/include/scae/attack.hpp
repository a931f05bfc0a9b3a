#pragma once

// Evasion attack on capsule-presence encoders.
//
// The attack lowers the summed presence of the capsules that the clean image
// activates (those above the mean presence) until the downstream classifier
// changes its label. Three perturbation generators are provided:
//
//   gdu_attack  iterated signed-gradient steps with [0,1] clipping
//   psc_attack  darkens the most salient pixel pair per iteration
//   opt_attack  Adam on ||p||_2 + alpha * f in tanh space, with a binary
//               search over alpha across outer rounds
//
// All three optionally confine the perturbation with a 3x3 neighbourhood
// mean mask so that the black background stays untouched.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "scae/classifier.hpp"
#include "scae/encoder.hpp"
#include "scae/image.hpp"
#include "scae/tensor.hpp"
#include "scae/util.hpp"

namespace scae {

enum class Algorithm : std::uint8_t { kGdu, kPsc, kOpt };

inline const char* algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::kGdu: return "gdu";
    case Algorithm::kPsc: return "psc";
    case Algorithm::kOpt: return "opt";
  }
  return "?";
}

inline Algorithm parse_algorithm(const std::string& s) {
  if (s == "gdu") return Algorithm::kGdu;
  if (s == "psc") return Algorithm::kPsc;
  if (s == "opt") return Algorithm::kOpt;
  throw std::invalid_argument("unknown algorithm '" + s + "' (expected gdu, psc or opt)");
}

struct AdamSettings {
  double learning_rate = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AttackConfig {
  Algorithm algorithm = Algorithm::kGdu;
  double alpha = 0.05;
  // Binary-search bracket for opt; upper = +inf means unbounded.
  double alpha_lower = 0.0;
  double alpha_upper = std::numeric_limits<double>::infinity();
  std::size_t iterations = 100;        // gdu, psc
  std::size_t outer_iterations = 9;    // opt
  std::size_t inner_iterations = 300;  // opt
  bool mask = true;
  double arctanh_epsilon = 0.999999;
  AdamSettings adam;
  std::uint64_t seed = 0;

  static AttackConfig defaults(Algorithm a) {
    AttackConfig c;
    c.algorithm = a;
    switch (a) {
      case Algorithm::kGdu:
        c.alpha = 0.05;
        c.iterations = 100;
        break;
      case Algorithm::kPsc:
        c.alpha = 0.5;
        c.iterations = 200;
        break;
      case Algorithm::kOpt:
        c.alpha = 100.0;
        break;
    }
    return c;
  }

  void validate() const {
    if (!(alpha > 0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be > 0");
    if (iterations < 1 || outer_iterations < 1 || inner_iterations < 1) {
      throw std::invalid_argument("iteration counts must be >= 1");
    }
    if (!(arctanh_epsilon > 0 && arctanh_epsilon < 1)) {
      throw std::invalid_argument("arctanh epsilon must lie in (0,1)");
    }
    if (algorithm == Algorithm::kOpt) {
      if (!(alpha_lower >= 0) || !(alpha_lower <= alpha) || !(alpha <= alpha_upper)) {
        throw std::invalid_argument("opt requires alpha_lower <= alpha <= alpha_upper");
      }
      if (!(adam.learning_rate > 0) || !(adam.beta1 >= 0 && adam.beta1 < 1) ||
          !(adam.beta2 >= 0 && adam.beta2 < 1) || !(adam.epsilon >= 0)) {
        throw std::invalid_argument("invalid Adam settings");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Capsule subset and target function.

// Indices whose presence is strictly above the mean. All-equal presences
// would give an empty set; the arg-max (lowest index on ties) is used then.
inline std::vector<std::size_t> capsule_subset(std::span<const double> presence) {
  if (presence.empty()) throw std::invalid_argument("capsule_subset: empty presence");
  double mean = 0.0;
  for (double v : presence) mean += v;
  mean /= static_cast<double>(presence.size());
  std::vector<std::size_t> s;
  for (std::size_t i = 0; i < presence.size(); ++i) {
    if (presence[i] > mean) s.push_back(i);
  }
  if (s.empty()) {
    s.push_back(static_cast<std::size_t>(
        std::max_element(presence.begin(), presence.end()) - presence.begin()));
  }
  return s;
}

struct AttackTarget {
  const Encoder* encoder = nullptr;
  const ClassifierModel* classifier = nullptr;
  PresenceMode mode = PresenceMode::kPrior;
  int original_label = 0;
  std::vector<std::size_t> subset;
  std::vector<double> in_weights;   // indicator of subset
  std::vector<double> out_weights;  // indicator of complement

  int predict(std::span<const double> x) const {
    return classify(*classifier, encoder->presence(x, mode));
  }
  bool misclassified(std::span<const double> x) const { return predict(x) != original_label; }
};

// The presence mode follows the classifier under attack.
inline AttackTarget make_target(const Encoder& encoder, const ClassifierModel& classifier,
                                std::span<const double> x) {
  if (classifier.kmeans.dim() != encoder.K()) {
    throw ShapeError("classifier dimension does not match encoder capsule count");
  }
  AttackTarget t;
  t.encoder = &encoder;
  t.classifier = &classifier;
  t.mode = classifier.mode;
  const std::vector<double> presence = encoder.presence(x, t.mode);
  t.original_label = classify(classifier, presence);
  t.subset = capsule_subset(presence);
  t.in_weights.assign(presence.size(), 0.0);
  for (std::size_t i : t.subset) t.in_weights[i] = 1.0;
  t.out_weights.resize(presence.size());
  for (std::size_t i = 0; i < presence.size(); ++i) t.out_weights[i] = 1.0 - t.in_weights[i];
  return t;
}

// f(x_adv) = sum of presences over the subset.
inline double target_f(const AttackTarget& t, std::span<const double> x_adv,
                       std::vector<double>* grad = nullptr) {
  return t.encoder->weighted_presence(x_adv, t.in_weights, t.mode, grad);
}

// ---------------------------------------------------------------------------
// Mask: mean over the 3x3 neighbourhood, zero outside the image.

inline std::vector<double> compute_mask(const Image& x) {
  if (x.height < 1 || x.width < 1) throw std::invalid_argument("compute_mask: empty image");
  const auto H = static_cast<std::ptrdiff_t>(x.height);
  const auto W = static_cast<std::ptrdiff_t>(x.width);
  std::vector<double> m(x.size(), 0.0);
  for (std::ptrdiff_t r = 0; r < H; ++r) {
    for (std::ptrdiff_t c = 0; c < W; ++c) {
      double s = 0.0;
      for (std::ptrdiff_t dr = -1; dr <= 1; ++dr) {
        for (std::ptrdiff_t dc = -1; dc <= 1; ++dc) {
          const std::ptrdiff_t rr = r + dr;
          const std::ptrdiff_t cc = c + dc;
          if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
          s += x.pixels[static_cast<std::size_t>(rr * W + cc)];
        }
      }
      m[static_cast<std::size_t>(r * W + c)] = s / 9.0;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Results.

struct PscStep {
  std::size_t first = 0;
  std::size_t second = 0;
  double first_value = 0;   // value after the decrement
  double second_value = 0;
  bool first_removed = false;
  bool second_removed = false;
  std::size_t domain_size = 0;  // |domain| after removals
};

struct AlphaRound {
  double alpha = 0;
  double lower = 0;
  double upper = 0;
  bool success = false;
};

struct AttackResult {
  std::vector<double> perturbation;
  std::vector<double> adversarial;
  bool success = false;
  double l2 = 0.0;
  std::size_t iterations = 0;
  long best_iteration = -1;
  int original_label = 0;
  int adversarial_label = 0;
  std::size_t clip_events = 0;

  std::vector<double> gdu_step_linf;  // per iterate
  std::vector<PscStep> psc_trace;
  std::vector<std::size_t> psc_initial_domain;
  std::vector<AlphaRound> alpha_trace;  // state entering each outer round
  double final_alpha = 0, final_lower = 0, final_upper = 0;
};

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

namespace attack_detail {

inline void finish(AttackResult& r, std::span<const double> x,
                   const std::optional<std::vector<double>>& best, const AttackTarget& t) {
  r.original_label = t.original_label;
  if (best) {
    r.success = true;
    r.adversarial = *best;
    r.perturbation.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) r.perturbation[i] = r.adversarial[i] - x[i];
    r.adversarial_label = t.predict(r.adversarial);
  } else {
    r.success = false;
    r.adversarial.assign(x.begin(), x.end());
    r.perturbation.assign(x.size(), 0.0);
    r.adversarial_label = t.original_label;
    r.best_iteration = -1;
  }
  r.l2 = l2_norm(r.perturbation);
}

}  // namespace attack_detail

// ---------------------------------------------------------------------------
// Gradient direction update.

inline AttackResult gdu_attack(const AttackTarget& t, const Image& x, const AttackConfig& config) {
  AttackResult r;
  const std::size_t n = x.size();
  const std::vector<double> mask =
      config.mask ? compute_mask(x) : std::vector<double>(n, 1.0);
  std::vector<double> cur = x.pixels;
  std::vector<double> next(n);
  std::vector<double> grad;
  std::optional<std::vector<double>> best;
  double best_l2 = std::numeric_limits<double>::infinity();

  for (std::size_t it = 0; it < config.iterations; ++it) {
    target_f(t, cur, &grad);
    double linf = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double step = config.alpha * detail::sign(grad[i]) * mask[i];
      const double raw = cur[i] - step;
      if (raw < 0.0 || raw > 1.0) ++r.clip_events;
      next[i] = std::clamp(raw, 0.0, 1.0);
      linf = std::max(linf, std::abs(next[i] - cur[i]));
    }
    r.gdu_step_linf.push_back(linf);
    cur.swap(next);
    ++r.iterations;
    if (t.misclassified(cur)) {
      const double d = l2_distance(cur, x.pixels);
      if (d < best_l2) {
        best_l2 = d;
        best = cur;
        r.best_iteration = static_cast<long>(it + 1);
      }
    }
  }
  attack_detail::finish(r, x.pixels, best, t);
  return r;
}

// ---------------------------------------------------------------------------
// Pixel saliency to capsules.

struct Saliency {
  double in = 0.0;   // delta_1: effect on subset capsules
  double out = 0.0;  // delta_2: effect on the other capsules
};

inline Saliency pixel_pair_saliency(std::span<const double> g_in, std::span<const double> g_out,
                                    std::size_t p, std::size_t q) {
  return {g_in[p] + g_in[q], g_out[p] + g_out[q]};
}

inline double pair_score(const Saliency& s) {
  return (s.in > 0 && s.out < 0) ? -s.in * s.out : 0.0;
}

// Exhaustive search over unordered pairs of `domain` (ascending order gives
// lexicographic tie-breaking). Returns nothing when no pair scores above 0.
inline std::optional<std::pair<std::size_t, std::size_t>> select_pixel_pair(
    std::span<const double> g_in, std::span<const double> g_out,
    std::span<const std::size_t> domain) {
  if (domain.size() < 2) return std::nullopt;
  std::vector<std::size_t> sorted(domain.begin(), domain.end());
  std::sort(sorted.begin(), sorted.end());
  std::optional<std::pair<std::size_t, std::size_t>> best;
  double best_score = 0.0;
  for (std::size_t a = 0; a < sorted.size(); ++a) {
    const std::size_t p = sorted[a];
    for (std::size_t b = a + 1; b < sorted.size(); ++b) {
      const std::size_t q = sorted[b];
      const double score = pair_score(pixel_pair_saliency(g_in, g_out, p, q));
      if (score > best_score) {
        best_score = score;
        best = std::make_pair(p, q);
      }
    }
  }
  return best;
}

inline AttackResult psc_attack(const AttackTarget& t, const Image& x, const AttackConfig& config) {
  AttackResult r;
  const std::size_t n = x.size();
  const std::vector<double> mask =
      config.mask ? compute_mask(x) : std::vector<double>(n, 1.0);
  std::vector<double> cur = x.pixels;
  std::vector<std::size_t> domain;
  for (std::size_t i = 0; i < n; ++i) {
    if (cur[i] > 0) domain.push_back(i);
  }
  r.psc_initial_domain = domain;
  std::optional<std::vector<double>> best;
  std::vector<double> g_in;
  std::vector<double> g_out;

  for (std::size_t it = 0; it < config.iterations && !domain.empty(); ++it) {
    t.encoder->weighted_presence(cur, t.in_weights, t.mode, &g_in);
    t.encoder->weighted_presence(cur, t.out_weights, t.mode, &g_out);
    for (std::size_t i = 0; i < n; ++i) {
      g_in[i] *= mask[i];
      g_out[i] *= mask[i];
    }
    const auto pair = select_pixel_pair(g_in, g_out, domain);
    if (!pair) break;
    ++r.iterations;

    PscStep step;
    step.first = pair->first;
    step.second = pair->second;
    for (std::size_t idx : {pair->first, pair->second}) {
      cur[idx] = std::max(cur[idx] - config.alpha, 0.0);
    }
    step.first_value = cur[pair->first];
    step.second_value = cur[pair->second];
    step.first_removed = cur[pair->first] == 0.0;
    step.second_removed = cur[pair->second] == 0.0;
    std::erase_if(domain, [&](std::size_t i) {
      return (i == pair->first && step.first_removed) || (i == pair->second && step.second_removed);
    });
    step.domain_size = domain.size();
    r.psc_trace.push_back(step);

    if (t.misclassified(cur)) {
      best = cur;
      r.best_iteration = static_cast<long>(it + 1);
      break;
    }
  }
  attack_detail::finish(r, x.pixels, best, t);
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer-based attack.

// w = arctanh((2x - 1) * eps)
inline std::vector<double> to_w_space(std::span<const double> x, double eps) {
  if (!(eps > 0 && eps < 1)) throw DomainError("to_w_space: eps must lie in (0,1)");
  std::vector<double> w(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = (2.0 * x[i] - 1.0) * eps;
    if (!(std::abs(v) < 1.0)) throw DomainError("to_w_space: pixel outside [0,1]");
    w[i] = std::atanh(v);
  }
  return w;
}

// x_adv = (tanh(w + p') + 1) / 2
inline std::vector<double> from_w_space(std::span<const double> w, std::span<const double> p) {
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = 0.5 * (std::tanh(w[i] + p[i]) + 1.0);
  return out;
}

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
};

// Adam with bias correction.
inline void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad,
                      const AdamSettings& s) {
  if (params.size() != grad.size()) throw ShapeError("adam: params/grad size mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    state.m[i] = s.beta1 * state.m[i] + (1.0 - s.beta1) * g;
    state.v[i] = s.beta2 * state.v[i] + (1.0 - s.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    const double denom = std::sqrt(vhat) + s.epsilon;
    if (denom > 0) params[i] -= s.learning_rate * mhat / denom;
  }
}

struct AlphaBracket {
  double alpha;
  double lower;
  double upper;
};

// Success tightens the upper bound, failure raises the lower bound. The next
// alpha is the midpoint, or alpha * 10 while the upper bound is unbounded.
inline AlphaBracket update_alpha(double alpha, double lower, double upper, bool succeeded) {
  if (succeeded) {
    upper = alpha;
  } else {
    lower = alpha;
  }
  if (std::isinf(upper)) {
    alpha *= 10.0;
  } else {
    alpha = (upper + lower) / 2.0;
  }
  return {alpha, lower, upper};
}

// Differentiable loss ||x_adv - x||_2 + alpha * sum_{i in S} E(x_adv)_i in
// terms of p', with x_adv = x + m * (from_w_space(w, p') - x).
class OptObjective {
 public:
  OptObjective(const EncoderParams& params, PresenceMode mode) {
    Graph& g = graph_;
    const Var p = g.input("p");
    const Var w = g.input("w");
    const Var x = g.input("x");
    const Var m = g.input("m");
    const Var weights = g.input("weights");
    const Var alpha = g.input("alpha");
    const Var y = g.mul(g.scalar(0.5), g.add(g.tanh(g.add(w, p)), g.scalar(1.0)));
    const Var x_adv = g.add(x, g.mul(m, g.sub(y, x)));
    EncoderVars enc = build_encoder(g, x_adv, params, 0, false);
    const Var presence = mode == PresenceMode::kPrior ? enc.prior : enc.reduced;
    const Var f = g.sum(g.mul(presence, weights));
    loss_ = g.add(g.l2_norm(g.sub(x_adv, x)), g.mul(alpha, f));
  }

  std::vector<double> gradient(Bindings& b) const {
    static const std::string kP = "p";
    Tensor unused;
    return std::move(
        graph_.value_and_gradients(loss_, std::span<const std::string>(&kP, 1), b, unused)
            .front()
            .data);
  }

 private:
  Graph graph_;
  Var loss_;
};

inline std::vector<double> masked_combine(std::span<const double> x, std::span<const double> m,
                                          std::span<const double> y) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + m[i] * (y[i] - x[i]);
  return out;
}

inline AttackResult opt_attack(const AttackTarget& t, const Image& x, const AttackConfig& config) {
  AttackResult r;
  const std::size_t n = x.size();
  const std::vector<double> mask =
      config.mask ? compute_mask(x) : std::vector<double>(n, 1.0);
  const std::vector<double> w = to_w_space(x.pixels, config.arctanh_epsilon);
  const OptObjective objective(t.encoder->params(), t.mode);

  Bindings b;
  b.emplace("w", Tensor::vector(w));
  b.emplace("x", Tensor::vector(x.pixels));
  b.emplace("m", Tensor::vector(mask));
  b.emplace("weights", Tensor::vector(t.in_weights));
  b.emplace("alpha", Tensor::scalar(config.alpha));
  b.emplace("p", Tensor::vector(std::vector<double>(n, 0.0)));
  Tensor& p_bound = b.at("p");
  Tensor& alpha_bound = b.at("alpha");

  Rng rng(config.seed);
  double alpha = config.alpha;
  double lower = config.alpha_lower;
  double upper = config.alpha_upper;
  std::optional<std::vector<double>> best;
  double best_l2 = std::numeric_limits<double>::infinity();
  std::size_t global_step = 0;

  for (std::size_t outer = 0; outer < config.outer_iterations; ++outer) {
    r.alpha_trace.push_back({alpha, lower, upper, false});
    alpha_bound.data[0] = alpha;
    AdamState adam;
    std::vector<double>& p = p_bound.data;
    for (double& v : p) v = uniform01(rng);
    bool round_success = false;
    for (std::size_t inner = 0; inner < config.inner_iterations; ++inner) {
      const std::vector<double> grad = objective.gradient(b);
      adam_step(adam, p, grad, config.adam);
      ++global_step;
      const std::vector<double> x_adv = masked_combine(x.pixels, mask, from_w_space(w, p));
      if (t.misclassified(x_adv)) {
        round_success = true;
        const double d = l2_distance(x_adv, x.pixels);
        if (d < best_l2) {
          best_l2 = d;
          best = x_adv;
          r.best_iteration = static_cast<long>(global_step);
        }
      }
    }
    r.alpha_trace.back().success = round_success;
    const AlphaBracket next = update_alpha(alpha, lower, upper, round_success);
    alpha = next.alpha;
    lower = next.lower;
    upper = next.upper;
  }
  r.iterations = global_step;
  r.final_alpha = alpha;
  r.final_lower = lower;
  r.final_upper = upper;
  attack_detail::finish(r, x.pixels, best, t);
  return r;
}

inline AttackResult run_attack(const AttackTarget& t, const Image& x, const AttackConfig& config) {
  switch (config.algorithm) {
    case Algorithm::kGdu: return gdu_attack(t, x, config);
    case Algorithm::kPsc: return psc_attack(t, x, config);
    case Algorithm::kOpt: return opt_attack(t, x, config);
  }
  throw std::invalid_argument("unknown algorithm");
}

}  // namespace scae
