#pragma once

// Dense 64-bit tensors and a small reverse-mode autodiff graph.
//
// A Graph is an append-only list of nodes. Operands always refer to earlier
// nodes, so insertion order is a topological order and the graph is acyclic
// by construction. Leaves are either named inputs, named parameters, or
// constants captured at build time. Evaluation never mutates the graph.
//
// Broadcasting is limited to scalar (one element) against tensor. Everything
// else needs an exact shape match, with two explicit exceptions: matmul and
// add_bias (row-wise bias over a matrix).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace scae {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class BindingError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() : shape{}, data(1, 0.0) {}

  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_size(shape) != data.size()) {
      throw ShapeError("tensor shape " + shape_string(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    }
  }

  static Tensor zeros(Shape s) {
    const std::size_t n = shape_size(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return data.size() == 1; }
  double item() const { return data.at(0); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

using Bindings = std::map<std::string, Tensor, std::less<>>;

enum class Op : std::uint8_t {
  kInput,
  kParameter,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kMatMul,
  kAddBias,
  kSigmoid,
  kTanh,
  kArctanh,
  kRelu,
  kSoftplus,
  kSum,
  kMean,
  kRowSum,
  kReshape,
  kClip01,
  kSign,
  kL2Norm,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kParameter: return "parameter";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kMatMul: return "matmul";
    case Op::kAddBias: return "add_bias";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kArctanh: return "arctanh";
    case Op::kRelu: return "relu";
    case Op::kSoftplus: return "softplus";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kRowSum: return "row_sum";
    case Op::kReshape: return "reshape";
    case Op::kClip01: return "clip01";
    case Op::kSign: return "sign";
    case Op::kL2Norm: return "l2_norm";
  }
  return "?";
}

// Handle to a node inside one Graph.
struct Var {
  std::uint32_t id = 0;
};

namespace detail {

inline double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline double softplus(double v) {
  return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

inline double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

// c[n,m] += a[n,k] * b[k,m]
inline void matmul_acc(const double* a, const double* b, double* c, std::size_t n,
                       std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * m;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[n,k] += g[n,m] * b[k,m]^T
inline void matmul_acc_bt(const double* g, const double* b, double* c, std::size_t n,
                          std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* grow = g + i * m;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * m;
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// c[k,m] += a[n,k]^T * g[n,m]
inline void matmul_acc_at(const double* a, const double* g, double* c, std::size_t n,
                          std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

class Graph {
 public:
  Var input(std::string name) { return leaf(Op::kInput, std::move(name)); }
  Var parameter(std::string name) { return leaf(Op::kParameter, std::move(name)); }
  Var constant(Tensor value) {
    Node n;
    n.op = Op::kConstant;
    n.value = std::move(value);
    return push(std::move(n));
  }
  Var scalar(double v) { return constant(Tensor::scalar(v)); }

  Var add(Var a, Var b) { return binary(Op::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary(Op::kSub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::kMul, a, b); }
  // [n,k]x[k,m] -> [n,m], [k]x[k,m] -> [m], [n,k]x[k] -> [n].
  Var matmul(Var a, Var b) { return binary(Op::kMatMul, a, b); }
  // [n,m] + [m] broadcast over rows.
  Var add_bias(Var a, Var bias) { return binary(Op::kAddBias, a, bias); }

  Var sigmoid(Var a) { return unary(Op::kSigmoid, a); }
  Var tanh(Var a) { return unary(Op::kTanh, a); }
  Var arctanh(Var a) { return unary(Op::kArctanh, a); }
  Var relu(Var a) { return unary(Op::kRelu, a); }
  Var softplus(Var a) { return unary(Op::kSoftplus, a); }
  Var sum(Var a) { return unary(Op::kSum, a); }
  Var mean(Var a) { return unary(Op::kMean, a); }
  // Sums the last axis away.
  Var row_sum(Var a) { return unary(Op::kRowSum, a); }
  Var reshape(Var a, Shape shape) {
    Var v = unary(Op::kReshape, a);
    nodes_[v.id].target_shape = std::move(shape);
    return v;
  }
  Var clip01(Var a) { return unary(Op::kClip01, a); }
  Var sign(Var a) { return unary(Op::kSign, a); }
  Var l2_norm(Var a) { return unary(Op::kL2Norm, a); }

  std::size_t size() const { return nodes_.size(); }
  Op op(Var v) const { return nodes_.at(v.id).op; }

  bool has_leaf(std::string_view name) const { return find_leaf(name).has_value(); }

  Tensor evaluate(Var root, const Bindings& bindings) const {
    Evaluation ev = forward(root, bindings);
    return *ev.value[root.id];
  }

  // d(root)/d(wrt) for a scalar root.
  Tensor gradient(Var root, std::string_view wrt, const Bindings& bindings) const {
    std::vector<std::string> names{std::string(wrt)};
    return std::move(gradients(root, names, bindings).front());
  }

  std::vector<Tensor> gradients(Var root, std::span<const std::string> wrt,
                                const Bindings& bindings) const {
    Tensor unused;
    return value_and_gradients(root, wrt, bindings, unused);
  }

  // Forward and backward in one pass; `value` receives the root's value.
  std::vector<Tensor> value_and_gradients(Var root, std::span<const std::string> wrt,
                                          const Bindings& bindings, Tensor& value) const {
    std::vector<std::uint32_t> leaves;
    leaves.reserve(wrt.size());
    for (const auto& name : wrt) {
      auto id = find_leaf(name);
      if (!id) throw BindingError("no leaf named '" + name + "' in graph");
      leaves.push_back(*id);
    }
    Evaluation ev = forward(root, bindings);
    const Tensor& out = *ev.value[root.id];
    if (!out.is_scalar()) {
      throw ShapeError("gradient requires a scalar root; node #" +
                       std::to_string(root.id) + " has shape " + shape_string(out.shape));
    }
    value = out;
    backward(root, ev);

    std::vector<Tensor> result;
    result.reserve(leaves.size());
    for (std::uint32_t id : leaves) {
      if (id >= ev.value.size() || ev.value[id] == nullptr) {
        // Leaf not reachable from root: zero gradient, shape from binding.
        const Tensor* bound = lookup(id, bindings);
        result.push_back(Tensor::zeros(bound->shape));
      } else if (ev.grad[id].empty()) {
        result.push_back(Tensor::zeros(ev.value[id]->shape));
      } else {
        result.emplace_back(ev.value[id]->shape, std::move(ev.grad[id]));
      }
    }
    return result;
  }

 private:
  struct Node {
    Op op = Op::kConstant;
    std::uint32_t a = 0;
    std::uint32_t b = 0;
    std::string name;
    Tensor value;
    Shape target_shape;
  };

  struct Evaluation {
    std::vector<const Tensor*> value;
    std::vector<Tensor> owned;
    std::vector<std::vector<double>> grad;
    std::vector<char> live;
  };

  std::vector<Node> nodes_;

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }
  Var leaf(Op op, std::string name) {
    if (find_leaf(name)) throw BindingError("duplicate leaf name '" + name + "'");
    Node n;
    n.op = op;
    n.name = std::move(name);
    return push(std::move(n));
  }
  void check(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this graph");
  }
  Var unary(Op op, Var a) {
    check(a);
    Node n;
    n.op = op;
    n.a = a.id;
    return push(std::move(n));
  }
  Var binary(Op op, Var a, Var b) {
    check(a);
    check(b);
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    return push(std::move(n));
  }

  static bool is_leaf(Op op) {
    return op == Op::kInput || op == Op::kParameter || op == Op::kConstant;
  }
  static bool is_binary(Op op) {
    return op == Op::kAdd || op == Op::kSub || op == Op::kMul || op == Op::kMatMul ||
           op == Op::kAddBias;
  }

  std::optional<std::uint32_t> find_leaf(std::string_view name) const {
    for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if ((n.op == Op::kInput || n.op == Op::kParameter) && n.name == name) return i;
    }
    return std::nullopt;
  }

  const Tensor* lookup(std::uint32_t id, const Bindings& bindings) const {
    const Node& n = nodes_[id];
    auto it = bindings.find(n.name);
    if (it == bindings.end()) {
      throw BindingError("unbound leaf '" + n.name + "' (node #" + std::to_string(id) + ")");
    }
    return &it->second;
  }

  [[noreturn]] void shape_fail(std::uint32_t id, const std::string& what) const {
    throw ShapeError("node #" + std::to_string(id) + " (" + op_name(nodes_[id].op) +
                     "): " + what);
  }

  Evaluation forward(Var root, const Bindings& bindings) const {
    check(root);
    Evaluation ev;
    ev.value.assign(root.id + 1, nullptr);
    ev.live.assign(root.id + 1, 0);
    ev.live[root.id] = 1;
    for (std::uint32_t i = root.id + 1; i-- > 0;) {
      if (!ev.live[i]) continue;
      const Node& n = nodes_[i];
      if (is_leaf(n.op)) continue;
      ev.live[n.a] = 1;
      if (is_binary(n.op)) ev.live[n.b] = 1;
    }
    // Reserve so pointers into `owned` stay valid.
    ev.owned.reserve(root.id + 1);
    for (std::uint32_t i = 0; i <= root.id; ++i) {
      if (!ev.live[i]) continue;
      const Node& n = nodes_[i];
      switch (n.op) {
        case Op::kInput:
        case Op::kParameter:
          ev.value[i] = lookup(i, bindings);
          break;
        case Op::kConstant:
          ev.value[i] = &n.value;
          break;
        default:
          ev.owned.push_back(compute(i, ev));
          ev.value[i] = &ev.owned.back();
      }
    }
    return ev;
  }

  Tensor compute(std::uint32_t id, const Evaluation& ev) const {
    const Node& n = nodes_[id];
    const Tensor& a = *ev.value[n.a];
    auto map = [&](auto fn) {
      Tensor out = a;
      for (double& v : out.data) v = fn(v);
      return out;
    };
    switch (n.op) {
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul: {
        const Tensor& b = *ev.value[n.b];
        return elementwise(id, a, b);
      }
      case Op::kMatMul: {
        const Tensor& b = *ev.value[n.b];
        return matmul_forward(id, a, b);
      }
      case Op::kAddBias: {
        const Tensor& b = *ev.value[n.b];
        if (a.rank() != 2 || b.rank() != 1 || a.shape[1] != b.shape[0]) {
          shape_fail(id, "cannot add bias " + shape_string(b.shape) + " to " +
                             shape_string(a.shape));
        }
        Tensor out = a;
        const std::size_t cols = b.shape[0];
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i % cols];
        return out;
      }
      case Op::kSigmoid: return map(detail::sigmoid);
      case Op::kTanh: return map([](double v) { return std::tanh(v); });
      case Op::kArctanh: {
        for (double v : a.data) {
          if (!(std::abs(v) < 1.0)) {
            throw DomainError("node #" + std::to_string(id) +
                              " (arctanh): operand outside (-1,1): " + std::to_string(v));
          }
        }
        return map([](double v) { return std::atanh(v); });
      }
      case Op::kRelu: return map([](double v) { return v > 0 ? v : 0.0; });
      case Op::kSoftplus: return map(detail::softplus);
      case Op::kSum: {
        double s = 0.0;
        for (double v : a.data) s += v;
        return Tensor::scalar(s);
      }
      case Op::kMean: {
        double s = 0.0;
        for (double v : a.data) s += v;
        return Tensor::scalar(s / static_cast<double>(a.size()));
      }
      case Op::kRowSum: {
        if (a.rank() == 0) shape_fail(id, "row_sum of a rank-0 tensor");
        const std::size_t cols = a.shape.back();
        Shape s(a.shape.begin(), a.shape.end() - 1);
        Tensor out = Tensor::zeros(s);
        for (std::size_t r = 0; r < out.size(); ++r) {
          double acc = 0.0;
          for (std::size_t c = 0; c < cols; ++c) acc += a.data[r * cols + c];
          out.data[r] = acc;
        }
        return out;
      }
      case Op::kReshape: {
        if (shape_size(n.target_shape) != a.size()) {
          shape_fail(id, "cannot reshape " + shape_string(a.shape) + " to " +
                             shape_string(n.target_shape));
        }
        return Tensor(n.target_shape, a.data);
      }
      case Op::kClip01: return map([](double v) { return std::clamp(v, 0.0, 1.0); });
      case Op::kSign: return map(detail::sign);
      case Op::kL2Norm: {
        double s = 0.0;
        for (double v : a.data) s += v * v;
        return Tensor::scalar(std::sqrt(s));
      }
      default: break;
    }
    shape_fail(id, "unexpected op");
  }

  Tensor elementwise(std::uint32_t id, const Tensor& a, const Tensor& b) const {
    const Op op = nodes_[id].op;
    auto f = [op](double x, double y) {
      switch (op) {
        case Op::kAdd: return x + y;
        case Op::kSub: return x - y;
        default: return x * y;
      }
    };
    if (a.shape == b.shape) {
      Tensor out = a;
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
      return out;
    }
    if (a.is_scalar()) {
      Tensor out = b;
      const double s = a.data[0];
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = f(s, b.data[i]);
      return out;
    }
    if (b.is_scalar()) {
      Tensor out = a;
      const double s = b.data[0];
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = f(a.data[i], s);
      return out;
    }
    shape_fail(id, "shape mismatch " + shape_string(a.shape) + " vs " + shape_string(b.shape));
  }

  struct MatDims {
    std::size_t n, k, m;
  };

  MatDims mat_dims(std::uint32_t id, const Tensor& a, const Tensor& b) const {
    if (a.rank() == 2 && b.rank() == 2 && a.shape[1] == b.shape[0]) {
      return {a.shape[0], a.shape[1], b.shape[1]};
    }
    if (a.rank() == 1 && b.rank() == 2 && a.shape[0] == b.shape[0]) {
      return {1, a.shape[0], b.shape[1]};
    }
    if (a.rank() == 2 && b.rank() == 1 && a.shape[1] == b.shape[0]) {
      return {a.shape[0], a.shape[1], 1};
    }
    shape_fail(id, "cannot multiply " + shape_string(a.shape) + " by " + shape_string(b.shape));
  }

  Tensor matmul_forward(std::uint32_t id, const Tensor& a, const Tensor& b) const {
    const MatDims d = mat_dims(id, a, b);
    Shape s;
    if (a.rank() == 2) s.push_back(d.n);
    if (b.rank() == 2) s.push_back(d.m);
    Tensor out = Tensor::zeros(s);
    detail::matmul_acc(a.data.data(), b.data.data(), out.data.data(), d.n, d.k, d.m);
    return out;
  }

  static void accumulate(std::vector<double>& dst, std::size_t n) {
    if (dst.empty()) dst.assign(n, 0.0);
  }

  // Adds `g` (shaped like the node output) into the operand gradient,
  // reducing over the broadcast when the operand is a scalar.
  static void add_broadcast(std::vector<double>& dst, const Tensor& operand,
                            std::span<const double> g, double factor) {
    accumulate(dst, operand.size());
    if (operand.size() == g.size()) {
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += factor * g[i];
    } else {
      double s = 0.0;
      for (double v : g) s += v;
      dst[0] += factor * s;
    }
  }

  static void add_broadcast_product(std::vector<double>& dst, const Tensor& operand,
                                    std::span<const double> g, const Tensor& other) {
    accumulate(dst, operand.size());
    auto other_at = [&](std::size_t i) {
      return other.size() == g.size() ? other.data[i] : other.data[0];
    };
    if (operand.size() == g.size()) {
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * other_at(i);
    } else {
      double s = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * other_at(i);
      dst[0] += s;
    }
  }

  void backward(Var root, Evaluation& ev) const {
    ev.grad.assign(root.id + 1, {});
    ev.grad[root.id].assign(1, 1.0);
    for (std::uint32_t i = root.id + 1; i-- > 0;) {
      if (!ev.live[i] || ev.grad[i].empty()) continue;
      const Node& n = nodes_[i];
      if (is_leaf(n.op)) continue;
      const std::vector<double>& g = ev.grad[i];
      const Tensor& out = *ev.value[i];
      const Tensor& a = *ev.value[n.a];
      std::vector<double>& ga = ev.grad[n.a];
      auto chain = [&](auto local) {
        accumulate(ga, a.size());
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * local(k);
      };
      switch (n.op) {
        case Op::kAdd:
          add_broadcast(ga, a, g, 1.0);
          add_broadcast(ev.grad[n.b], *ev.value[n.b], g, 1.0);
          break;
        case Op::kSub:
          add_broadcast(ga, a, g, 1.0);
          add_broadcast(ev.grad[n.b], *ev.value[n.b], g, -1.0);
          break;
        case Op::kMul: {
          const Tensor& b = *ev.value[n.b];
          add_broadcast_product(ga, a, g, b);
          add_broadcast_product(ev.grad[n.b], b, g, a);
          break;
        }
        case Op::kMatMul: {
          const Tensor& b = *ev.value[n.b];
          const MatDims d = mat_dims(i, a, b);
          accumulate(ga, a.size());
          detail::matmul_acc_bt(g.data(), b.data.data(), ga.data(), d.n, d.k, d.m);
          std::vector<double>& gb = ev.grad[n.b];
          accumulate(gb, b.size());
          detail::matmul_acc_at(a.data.data(), g.data(), gb.data(), d.n, d.k, d.m);
          break;
        }
        case Op::kAddBias: {
          const Tensor& b = *ev.value[n.b];
          add_broadcast(ga, a, g, 1.0);
          std::vector<double>& gb = ev.grad[n.b];
          accumulate(gb, b.size());
          const std::size_t cols = b.size();
          for (std::size_t k = 0; k < g.size(); ++k) gb[k % cols] += g[k];
          break;
        }
        case Op::kSigmoid:
          chain([&](std::size_t k) { return out.data[k] * (1.0 - out.data[k]); });
          break;
        case Op::kTanh:
          chain([&](std::size_t k) { return 1.0 - out.data[k] * out.data[k]; });
          break;
        case Op::kArctanh:
          chain([&](std::size_t k) { return 1.0 / (1.0 - a.data[k] * a.data[k]); });
          break;
        case Op::kRelu:
          chain([&](std::size_t k) { return a.data[k] > 0 ? 1.0 : 0.0; });
          break;
        case Op::kSoftplus:
          chain([&](std::size_t k) { return detail::sigmoid(a.data[k]); });
          break;
        case Op::kSum: {
          accumulate(ga, a.size());
          for (double& v : ga) v += g[0];
          break;
        }
        case Op::kMean: {
          accumulate(ga, a.size());
          const double s = g[0] / static_cast<double>(a.size());
          for (double& v : ga) v += s;
          break;
        }
        case Op::kRowSum: {
          accumulate(ga, a.size());
          const std::size_t cols = a.shape.back();
          for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += g[k / cols];
          break;
        }
        case Op::kReshape:
          accumulate(ga, a.size());
          for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
          break;
        case Op::kClip01:
          chain([&](std::size_t k) {
            return (a.data[k] > 0.0 && a.data[k] < 1.0) ? 1.0 : 0.0;
          });
          break;
        case Op::kSign:
          accumulate(ga, a.size());
          break;
        case Op::kL2Norm: {
          accumulate(ga, a.size());
          const double norm = out.data[0];
          if (norm > 0) {
            for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += g[0] * a.data[k] / norm;
          }
          break;
        }
        default: break;
      }
    }
  }
};

// Max over components of |analytic - numeric| / max(|analytic|, |numeric|, 1e-6),
// with central differences of the given step.
inline double check_gradient(const Graph& graph, Var root, std::string_view wrt,
                             const Bindings& bindings, double step) {
  if (!(step > 0)) throw std::invalid_argument("check_gradient: step must be positive");
  const Tensor analytic = graph.gradient(root, wrt, bindings);
  Bindings probe = bindings;
  auto it = probe.find(wrt);
  if (it == probe.end()) throw BindingError("unbound leaf '" + std::string(wrt) + "'");
  Tensor& x = it->second;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data[i];
    x.data[i] = orig + step;
    const double up = graph.evaluate(root, probe).item();
    x.data[i] = orig - step;
    const double down = graph.evaluate(root, probe).item();
    x.data[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double diff = std::abs(analytic.data[i] - numeric);
    const double scale = std::max({std::abs(analytic.data[i]), std::abs(numeric), 1e-6});
    worst = std::max(worst, diff / scale);
  }
  return worst;
}

}  // namespace scae
