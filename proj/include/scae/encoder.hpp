#pragma once

// Surrogate capsule encoder.
//
// Pixels -> hidden (relu) -> two heads:
//   prior:     K presences, sigmoid, one per object capsule
//   posterior: K x M non-negative presences (softplus), one row per object
//              capsule and one column per part capsule
//
// Trained supervised so that each capsule fires for exactly one class, which
// is the property the attack relies on.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "scae/tensor.hpp"
#include "scae/util.hpp"

namespace scae {

enum class PresenceMode : std::uint8_t { kPrior = 0, kPosterior = 1 };

inline const char* mode_name(PresenceMode mode) {
  return mode == PresenceMode::kPrior ? "prior" : "posterior";
}

inline PresenceMode parse_mode(const std::string& s) {
  if (s == "prior") return PresenceMode::kPrior;
  if (s == "posterior" || s == "posterior-reduced") return PresenceMode::kPosterior;
  throw std::invalid_argument("unknown presence mode '" + s + "'");
}

struct EncoderParams {
  std::uint32_t K = 10;
  std::uint32_t M = 24;
  std::uint32_t H = 28;
  std::uint32_t W = 28;
  Tensor w1;       // [H*W, hidden]
  Tensor b1;       // [hidden]
  Tensor w_prior;  // [hidden, K]
  Tensor b_prior;  // [K]
  Tensor w_post;   // [hidden, K*M]
  Tensor b_post;   // [K*M]

  std::size_t pixels() const { return static_cast<std::size_t>(H) * W; }
  std::size_t hidden() const { return b1.size(); }

  static constexpr const char* kNames[6] = {"w1",     "b1",      "w_prior",
                                            "b_prior", "w_post", "b_post"};

  std::vector<Tensor*> tensors() { return {&w1, &b1, &w_prior, &b_prior, &w_post, &b_post}; }
  std::vector<const Tensor*> tensors() const {
    return {&w1, &b1, &w_prior, &b_prior, &w_post, &b_post};
  }

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

inline EncoderParams zero_params(std::uint32_t K, std::uint32_t M, std::uint32_t H,
                                 std::uint32_t W, std::size_t hidden = 64) {
  EncoderParams p;
  p.K = K;
  p.M = M;
  p.H = H;
  p.W = W;
  const std::size_t d = p.pixels();
  p.w1 = Tensor::zeros({d, hidden});
  p.b1 = Tensor::zeros({hidden});
  p.w_prior = Tensor::zeros({hidden, K});
  p.b_prior = Tensor::zeros({K});
  p.w_post = Tensor::zeros({hidden, static_cast<std::size_t>(K) * M});
  p.b_post = Tensor::zeros({static_cast<std::size_t>(K) * M});
  return p;
}

// Glorot-uniform weights, zero biases.
inline EncoderParams init_params(std::uint32_t K, std::uint32_t M, std::uint32_t H,
                                 std::uint32_t W, std::size_t hidden, Rng& rng) {
  EncoderParams p = zero_params(K, M, H, W, hidden);
  for (Tensor* t : {&p.w1, &p.w_prior, &p.w_post}) {
    const double limit = std::sqrt(6.0 / static_cast<double>(t->shape[0] + t->shape[1]));
    for (double& v : t->data) v = uniform(rng, -limit, limit);
  }
  return p;
}

struct CapsuleOutput {
  std::vector<double> prior;  // [K]
  Tensor posterior;           // [K, M]
};

struct EncoderVars {
  Var prior_logits;
  Var prior;
  Var posterior;  // [K,M] or [B,K,M]
  Var reduced;    // [K] or [B,K]
};

// Appends the encoder to `graph` on top of `x`. `batch` == 0 means a single
// flat image of shape [H*W]; otherwise x is [batch, H*W]. Parameters become
// named parameter leaves when `trainable`, constants otherwise.
inline EncoderVars build_encoder(Graph& graph, Var x, const EncoderParams& params,
                                 std::size_t batch, bool trainable) {
  auto leaf = [&](int i, const Tensor& t) {
    return trainable ? graph.parameter(EncoderParams::kNames[i]) : graph.constant(t);
  };
  const Var w1 = leaf(0, params.w1);
  const Var b1 = leaf(1, params.b1);
  const Var wp = leaf(2, params.w_prior);
  const Var bp = leaf(3, params.b_prior);
  const Var wq = leaf(4, params.w_post);
  const Var bq = leaf(5, params.b_post);

  auto affine = [&](Var in, Var w, Var b) {
    const Var prod = graph.matmul(in, w);
    return batch == 0 ? graph.add(prod, b) : graph.add_bias(prod, b);
  };
  EncoderVars v;
  const Var h = graph.relu(affine(x, w1, b1));
  v.prior_logits = affine(h, wp, bp);
  v.prior = graph.sigmoid(v.prior_logits);
  const Var post_flat = graph.softplus(affine(h, wq, bq));
  const std::size_t K = params.K;
  const std::size_t M = params.M;
  v.posterior = batch == 0 ? graph.reshape(post_flat, {K, M})
                           : graph.reshape(post_flat, {batch, K, M});
  v.reduced = graph.row_sum(v.posterior);
  return v;
}

inline void check_image_size(const EncoderParams& params, std::size_t n) {
  if (n != params.pixels()) {
    throw ShapeError("image has " + std::to_string(n) + " pixels, encoder expects " +
                     std::to_string(params.pixels()));
  }
}

// Reusable single-image encoder. Immutable after construction, so one instance
// can serve many threads.
class Encoder {
 public:
  explicit Encoder(EncoderParams params) : params_(std::move(params)) {
    x_ = graph_.input("x");
    vars_ = build_encoder(graph_, x_, params_, 0, false);
    // Scalar objective sum_i weights_i * presence_i for each mode.
    weights_ = graph_.input("weights");
    objective_[0] = graph_.sum(graph_.mul(vars_.prior, weights_));
    objective_[1] = graph_.sum(graph_.mul(vars_.reduced, weights_));
  }

  const EncoderParams& params() const { return params_; }
  std::size_t K() const { return params_.K; }

  CapsuleOutput encode(std::span<const double> x) const {
    check_image_size(params_, x.size());
    Bindings b{{"x", Tensor::vector({x.begin(), x.end()})}};
    CapsuleOutput out;
    out.prior = graph_.evaluate(vars_.prior, b).data;
    out.posterior = graph_.evaluate(vars_.posterior, b);
    return out;
  }

  std::vector<double> presence(std::span<const double> x, PresenceMode mode) const {
    check_image_size(params_, x.size());
    Bindings b{{"x", Tensor::vector({x.begin(), x.end()})}};
    return graph_.evaluate(mode == PresenceMode::kPrior ? vars_.prior : vars_.reduced, b).data;
  }

  // Value and x-gradient of sum_i weights_i * presence_i.
  double weighted_presence(std::span<const double> x, std::span<const double> weights,
                           PresenceMode mode, std::vector<double>* grad) const {
    check_image_size(params_, x.size());
    Bindings b{{"x", Tensor::vector({x.begin(), x.end()})},
               {"weights", Tensor::vector({weights.begin(), weights.end()})}};
    const Var root = objective_[static_cast<int>(mode)];
    if (grad == nullptr) return graph_.evaluate(root, b).item();
    static const std::string kX = "x";
    Tensor value;
    auto g = graph_.value_and_gradients(root, std::span<const std::string>(&kX, 1), b, value);
    *grad = std::move(g.front().data);
    return value.item();
  }

 private:
  EncoderParams params_;
  Graph graph_;
  Var x_;
  Var weights_;
  EncoderVars vars_;
  Var objective_[2];
};

inline CapsuleOutput encode(const EncoderParams& params, std::span<const double> x) {
  return Encoder(params).encode(x);
}

// Prior vector, or the posterior summed over part capsules.
inline std::vector<double> reduce_presence(const CapsuleOutput& out, PresenceMode mode) {
  if (mode == PresenceMode::kPrior) return out.prior;
  const std::size_t K = out.posterior.shape.at(0);
  const std::size_t M = out.posterior.shape.at(1);
  std::vector<double> r(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t m = 0; m < M; ++m) r[k] += out.posterior.data[k * M + m];
  }
  return r;
}

inline std::vector<double> presence_for(const EncoderParams& params, std::span<const double> x,
                                        PresenceMode mode) {
  return reduce_presence(encode(params, x), mode);
}

// ---------------------------------------------------------------------------
// Model file: "CENC", u32 version, K, M, H, W, then six tensors as
// (u32 rank, u32 dims..., f64 payload). Little-endian throughout.

inline constexpr std::uint32_t kEncoderFormatVersion = 1;

inline void write_tensor(std::ostream& os, const Tensor& t) {
  io::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape) io::put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : t.data) io::put_f64(os, v);
}

inline Tensor read_tensor(std::istream& is) {
  const std::uint32_t rank = io::get_u32(is);
  if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = io::get_u32(is);
  const std::size_t n = shape_size(shape);
  if (n > (std::size_t{1} << 28)) throw FormatError("implausible tensor size");
  std::vector<double> data(n);
  for (double& v : data) v = io::get_f64(is);
  return Tensor(std::move(shape), std::move(data));
}

inline void save_encoder(std::ostream& os, const EncoderParams& p) {
  io::put_magic(os, "CENC");
  io::put_u32(os, kEncoderFormatVersion);
  for (std::uint32_t v : {p.K, p.M, p.H, p.W}) io::put_u32(os, v);
  for (const Tensor* t : p.tensors()) write_tensor(os, *t);
}

inline EncoderParams load_encoder(std::istream& is) {
  io::expect_magic(is, "CENC");
  const std::uint32_t version = io::get_u32(is);
  if (version != kEncoderFormatVersion) {
    throw FormatError("unsupported encoder format version " + std::to_string(version));
  }
  EncoderParams p;
  p.K = io::get_u32(is);
  p.M = io::get_u32(is);
  p.H = io::get_u32(is);
  p.W = io::get_u32(is);
  for (Tensor* t : p.tensors()) *t = read_tensor(is);
  const std::size_t hidden = p.b1.size();
  const std::size_t km = static_cast<std::size_t>(p.K) * p.M;
  if (p.w1.shape != Shape{p.pixels(), hidden} || p.w_prior.shape != Shape{hidden, p.K} ||
      p.b_prior.shape != Shape{p.K} || p.w_post.shape != Shape{hidden, km} ||
      p.b_post.shape != Shape{km}) {
    throw FormatError("encoder tensor shapes inconsistent with header");
  }
  return p;
}

inline void save_encoder(const std::string& path, const EncoderParams& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  save_encoder(os, p);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline EncoderParams load_encoder(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return load_encoder(is);
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
  double learning_rate = 3e-5;
  double momentum = 0.9;
  double epsilon = 1e-6;
  double rho = 0.9;  // squared-gradient decay
  std::uint64_t decay_steps = 10000;
  double decay_rate = 0.96;
  std::size_t batch_size = 100;
  std::size_t epochs = 300;
  std::uint64_t seed = 42;
  std::size_t hidden = 64;
  std::uint32_t part_capsules = 24;
  double posterior_weight = 3.0;
  double weight_decay = 0.0;  // L2 penalty on weight matrices (not biases)

  void validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("learning rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  }
};

// Staircase decay.
inline double effective_learning_rate(const TrainConfig& config, std::uint64_t step) {
  return config.learning_rate *
         std::pow(config.decay_rate, static_cast<double>(step / config.decay_steps));
}

struct RmsPropState {
  std::vector<double> accumulator;
  std::vector<double> buffer;
};

// RMSProp with momentum:
//   a <- rho*a + (1-rho)*g^2,  b <- momentum*b + lr*g/sqrt(a+eps),  x <- x - b
inline void rmsprop_step(RmsPropState& state, std::span<double> params,
                         std::span<const double> grads, const TrainConfig& config,
                         std::uint64_t step) {
  if (params.size() != grads.size()) throw ShapeError("rmsprop: params/grads size mismatch");
  if (state.accumulator.empty()) {
    state.accumulator.assign(params.size(), 0.0);
    state.buffer.assign(params.size(), 0.0);
  }
  if (state.accumulator.size() != params.size()) throw ShapeError("rmsprop: state size mismatch");
  const double lr = effective_learning_rate(config, step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    double& a = state.accumulator[i];
    double& b = state.buffer[i];
    a = config.rho * a + (1.0 - config.rho) * g * g;
    const double denom = std::sqrt(a + config.epsilon);
    b = config.momentum * b + (denom > 0 ? lr * g / denom : 0.0);
    params[i] -= b;
  }
}

struct LabeledImages {
  std::vector<std::vector<double>> images;
  std::vector<int> labels;
};

// Per-capsule binary cross-entropy against one-hot targets on the prior head,
// plus a squared tie of posterior row sums to K * prior (scaled by 1/K^2).
inline EncoderParams train(const TrainConfig& config, const LabeledImages& data,
                           std::uint32_t K, std::uint32_t H, std::uint32_t W,
                           std::vector<double>* loss_trace = nullptr) {
  config.validate();
  if (data.images.empty()) throw std::invalid_argument("train: empty dataset");
  if (data.images.size() != data.labels.size()) {
    throw std::invalid_argument("train: images/labels length mismatch");
  }
  for (int l : data.labels) {
    if (l < 0 || static_cast<std::uint32_t>(l) >= K) {
      throw std::invalid_argument("train: label " + std::to_string(l) + " outside 0.." +
                                  std::to_string(K - 1));
    }
  }
  const std::size_t D = static_cast<std::size_t>(H) * W;
  for (const auto& img : data.images) {
    if (img.size() != D) throw ShapeError("train: image size mismatch");
  }

  Rng rng(config.seed);
  EncoderParams params = init_params(K, config.part_capsules, H, W, config.hidden, rng);

  struct BatchGraph {
    Graph graph;
    Var loss;
  };
  auto build = [&](std::size_t B) {
    BatchGraph bg;
    Graph& g = bg.graph;
    const Var x = g.input("x");
    const Var y = g.input("y");
    EncoderVars v = build_encoder(g, x, params, B, true);
    // softplus(z) - y*z == BCE(sigmoid(z), y)
    const Var bce = g.mean(g.sub(g.softplus(v.prior_logits), g.mul(y, v.prior_logits)));
    const Var scaled = g.mul(g.scalar(1.0 / K), v.reduced);
    const Var diff = g.sub(scaled, v.prior);
    const Var tie = g.mean(g.mul(diff, diff));
    bg.loss = g.add(bce, g.mul(g.scalar(config.posterior_weight), tie));
    return bg;
  };
  std::map<std::size_t, BatchGraph> graphs;

  const std::vector<std::string> names(std::begin(EncoderParams::kNames),
                                       std::end(EncoderParams::kNames));
  std::vector<RmsPropState> states(names.size());
  std::vector<std::size_t> order(data.images.size());
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle(order, rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t B = std::min(config.batch_size, order.size() - start);
      auto it = graphs.find(B);
      if (it == graphs.end()) it = graphs.emplace(B, build(B)).first;
      const BatchGraph& bg = it->second;

      std::vector<double> xb(B * D);
      std::vector<double> yb(B * K, 0.0);
      for (std::size_t r = 0; r < B; ++r) {
        const std::size_t idx = order[start + r];
        std::copy(data.images[idx].begin(), data.images[idx].end(), xb.begin() + r * D);
        yb[r * K + static_cast<std::size_t>(data.labels[idx])] = 1.0;
      }
      Bindings b;
      b.emplace("x", Tensor({B, D}, std::move(xb)));
      b.emplace("y", Tensor({B, K}, std::move(yb)));
      const auto ptrs = params.tensors();
      for (std::size_t i = 0; i < names.size(); ++i) b.emplace(names[i], *ptrs[i]);

      Tensor loss;
      auto grads = bg.graph.value_and_gradients(bg.loss, names, b, loss);
      for (std::size_t i = 0; i < names.size(); ++i) {
        if (config.weight_decay > 0 && ptrs[i]->rank() == 2) {
          for (std::size_t j = 0; j < grads[i].size(); ++j) {
            grads[i].data[j] += config.weight_decay * ptrs[i]->data[j];
          }
        }
        rmsprop_step(states[i], ptrs[i]->data, grads[i].data, config, step);
      }
      ++step;
      epoch_loss += loss.item();
      ++batches;
    }
    if (loss_trace) loss_trace->push_back(epoch_loss / static_cast<double>(batches));
  }
  return params;
}

}  // namespace scae
