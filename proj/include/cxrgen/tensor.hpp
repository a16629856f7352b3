#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations produce new nodes;
// when any input requires a gradient the result remembers its inputs and a
// local gradient rule, so the graph is whatever the forward pass built.
// Leaves (parameters) accumulate gradients across backward() calls until
// zero_grad() is called.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace cxrgen {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Thread-local switch; while disabled, ops record no history (inference).
inline bool& grad_recording_flag() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_recording_flag()) { grad_recording_flag() = false; }
  ~NoGradGuard() { grad_recording_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  struct Node;
  using NodePtr = std::shared_ptr<Node>;
  using GradRule = std::function<void(Node&)>;

  struct Node {
    Shape shape;
    std::vector<double> data;
    // Allocated on first use by backward(); same length as data.
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<NodePtr> inputs;
    // Pushes this node's grad into the grads of its inputs. Empty for leaves.
    GradRule grad_rule;

    std::vector<double>& grad_buffer() {
      if (grad.empty()) grad.assign(data.size(), 0.0);
      return grad;
    }
  };

  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    check_extents(shape);
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    check_extents(shape);
    if (values.size() != shape_numel(shape)) {
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values for shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    Shape shape{values.size()};
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // Intended for parameter leaves (optimizer updates, initialization).
  std::span<double> mutable_data() { return node_->data; }
  double at(std::size_t i) const { return node_->data.at(i); }
  double item() const {
    if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool is_leaf() const { return !node_->grad_rule; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  // Fresh leaf with copied values and no history.
  Tensor detach(bool requires_grad = false) const {
    return Tensor(shape(), node_->data, requires_grad);
  }

  const NodePtr& node() const { return node_; }

  // Builds an op result. History is recorded only when an input needs grads.
  static Tensor make_result(Shape shape, std::vector<double> data,
                            std::initializer_list<const Tensor*> inputs, GradRule rule) {
    Tensor out(std::move(shape), std::move(data));
    bool needs_grad = false;
    if (grad_recording_flag()) {
      for (const Tensor* in : inputs) needs_grad = needs_grad || in->requires_grad();
    }
    if (needs_grad) {
      out.node_->requires_grad = true;
      for (const Tensor* in : inputs) out.node_->inputs.push_back(in->node_);
      out.node_->grad_rule = std::move(rule);
    }
    return out;
  }

  static Tensor make_result(Shape shape, std::vector<double> data,
                            const std::vector<Tensor>& inputs, GradRule rule) {
    Tensor out(std::move(shape), std::move(data));
    bool needs_grad = grad_recording_flag() && std::any_of(inputs.begin(), inputs.end(),
                                                           [](const Tensor& t) { return t.requires_grad(); });
    if (needs_grad) {
      out.node_->requires_grad = true;
      for (const auto& in : inputs) out.node_->inputs.push_back(in.node_);
      out.node_->grad_rule = std::move(rule);
    }
    return out;
  }

 private:
  static void check_extents(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor: shape must have at least one extent");
    for (auto d : shape) {
      if (d == 0) throw std::invalid_argument("tensor: zero extent in shape " + shape_str(shape));
    }
  }

  NodePtr node_;
};

// Topologically ordered view of the nodes reachable from a root; inputs come
// before the nodes that consume them. Only gradient-carrying nodes appear.
struct Graph {
  std::vector<Tensor::NodePtr> nodes;
};

inline Graph build_graph(const Tensor& root) {
  Graph graph;
  if (!root.defined() || !root.requires_grad()) return graph;
  std::unordered_set<const Tensor::Node*> visited;
  // Iterative post-order DFS; recursion depth would track sequence length.
  std::vector<std::pair<Tensor::NodePtr, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const auto& in = node->inputs[next++];
      if (in->requires_grad && visited.insert(in.get()).second) stack.emplace_back(in, 0);
    } else {
      graph.nodes.push_back(node);
      stack.pop_back();
    }
  }
  return graph;
}

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// Intermediate gradients are reset on entry, so two calls without zero_grad()
// leave exactly twice the gradient on each leaf.
inline void backward(const Graph& graph, const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  for (const auto& node : graph.nodes) {
    if (node->grad_rule) std::fill(node->grad.begin(), node->grad.end(), 0.0);
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = graph.nodes.rbegin(); it != graph.nodes.rend(); ++it) {
    Tensor::Node& node = **it;
    if (node.grad_rule && !node.grad.empty()) node.grad_rule(node);
  }
}

inline void backward(const Tensor& loss) {
  if (loss.defined() && loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  backward(build_graph(loss), loss);
}

inline void zero_grad(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double>* grad_target(Tensor::Node& self, std::size_t k) {
  auto& in = *self.inputs[k];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

// Elementwise binary op with scalar-to-tensor broadcast only.
inline Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (a.size() == 1) return b.shape();
  if (b.size() == 1) return a.shape();
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()) + " (only scalar broadcast supported)");
}

template <typename Fwd, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  Shape shape = broadcast_shape(a, b, name);
  const std::size_t n = shape_numel(shape);
  const bool a_scalar = a.size() == 1 && n != 1;
  const bool b_scalar = b.size() == 1 && n != 1;
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[a_scalar ? 0 : i], bd[b_scalar ? 0 : i]);
  return Tensor::make_result(std::move(shape), std::move(out), {&a, &b},
                             [=](Tensor::Node& self) {
                               const auto& av = self.inputs[0]->data;
                               const auto& bv = self.inputs[1]->data;
                               const auto& g = self.grad;
                               if (auto* ga = grad_target(self, 0)) {
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                   double x = av[a_scalar ? 0 : i], y = bv[b_scalar ? 0 : i];
                                   (*ga)[a_scalar ? 0 : i] += g[i] * da(x, y);
                                 }
                               }
                               if (auto* gb = grad_target(self, 1)) {
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                   double x = av[a_scalar ? 0 : i], y = bv[b_scalar ? 0 : i];
                                   (*gb)[b_scalar ? 0 : i] += g[i] * db(x, y);
                                 }
                               }
                             });
}

// Unary op whose derivative is expressed through input x and output y.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  return Tensor::make_result(a.shape(), std::move(out), {&a}, [=](Tensor::Node& self) {
    auto* ga = grad_target(self, 0);
    if (!ga) return;
    const auto& x = self.inputs[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      (*ga)[i] += self.grad[i] * deriv(x[i], self.data[i]);
    }
  });
}

inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& a, double factor) {
  return detail::unary(
      a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(a, detail::sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// Natural log with inputs clamped from below at `floor`; the clamped region
// has zero gradient.
inline Tensor log(const Tensor& a, double floor = 0.0) {
  return detail::unary(
      a, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

enum class ElementwiseOp { sigmoid, tanh, relu, add, mul };

inline Tensor elementwise(ElementwiseOp op, std::span<const Tensor> args) {
  const std::size_t arity = (op == ElementwiseOp::add || op == ElementwiseOp::mul) ? 2 : 1;
  if (args.size() != arity) {
    throw std::invalid_argument("elementwise: expected " + std::to_string(arity) + " arguments, got " +
                                std::to_string(args.size()));
  }
  switch (op) {
    case ElementwiseOp::sigmoid: return sigmoid(args[0]);
    case ElementwiseOp::tanh: return tanh(args[0]);
    case ElementwiseOp::relu: return relu(args[0]);
    case ElementwiseOp::add: return add(args[0], args[1]);
    case ElementwiseOp::mul: return mul(args[0], args[1]);
  }
  throw std::invalid_argument("elementwise: unknown op");
}

inline Tensor elementwise(ElementwiseOp op, std::initializer_list<Tensor> args) {
  return elementwise(op, std::span<const Tensor>(args.begin(), args.size()));
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result(Shape{1}, {s}, {&a}, [](Tensor::Node& self) {
    if (auto* ga = detail::grad_target(self, 0)) {
      for (auto& g : *ga) g += self.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {&a}, [](Tensor::Node& self) {
    if (auto* ga = detail::grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    }
  });
}

// a: [m x k]; b: [k x n] or [k]. Result [m x n] or [m].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || (b.rank() != 1 && b.rank() != 2) || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.rank() == 2 ? b.dim(1) : 1;
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = ad[i * k + l];
      const double* brow = bd.data() + l * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  Shape shape = b.rank() == 2 ? Shape{m, n} : Shape{m};
  return Tensor::make_result(std::move(shape), std::move(out), {&a, &b}, [m, k, n](Tensor::Node& self) {
    const auto& av = self.inputs[0]->data;
    const auto& bv = self.inputs[1]->data;
    const auto& g = self.grad;
    if (auto* ga = detail::grad_target(self, 0)) {
      // dA = dY * B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[l * n + j];
          (*ga)[i * k + l] += acc;
        }
      }
    }
    if (auto* gb = detail::grad_target(self, 1)) {
      // dB = A^T * dY
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
          const double aval = av[i * k + l];
          for (std::size_t j = 0; j < n; ++j) (*gb)[l * n + j] += aval * g[i * n + j];
        }
      }
    }
  });
}

namespace detail {

// Range of output indices o for which o*stride - pad + offset lies in [0, extent).
inline std::pair<long, long> valid_output_range(long extent, long out_extent, long stride, long pad,
                                                long offset) {
  long lo = 0;
  if (pad - offset > 0) lo = (pad - offset + stride - 1) / stride;
  long hi = (extent - 1 + pad - offset);
  hi = hi < 0 ? -1 : hi / stride;
  hi = std::min(hi, out_extent - 1);
  return {lo, hi};
}

}  // namespace detail

// Cross-correlation of input [c_in x h x w] with kernels [c_out x c_in x k x k]
// under zero padding.
inline Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride = 1,
                     std::size_t padding = 0) {
  if (input.rank() != 3 || kernels.rank() != 4 || kernels.dim(1) != input.dim(0) ||
      kernels.dim(2) != kernels.dim(3)) {
    throw std::invalid_argument("conv2d: incompatible shapes input " + shape_str(input.shape()) +
                                " kernels " + shape_str(kernels.shape()));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const long cin = static_cast<long>(input.dim(0)), h = static_cast<long>(input.dim(1)),
             w = static_cast<long>(input.dim(2));
  const long cout = static_cast<long>(kernels.dim(0)), k = static_cast<long>(kernels.dim(2));
  const long s = static_cast<long>(stride), p = static_cast<long>(padding);
  if (k > h + 2 * p || k > w + 2 * p) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(k) + "x" + std::to_string(k) +
                                " larger than padded input " + shape_str(input.shape()) +
                                " with padding " + std::to_string(p));
  }
  const long oh = (h + 2 * p - k) / s + 1, ow = (w + 2 * p - k) / s + 1;

  // Visits every (output, input, weight) triple; f(out_idx, in_idx, w_idx).
  auto for_each_tap = [=](auto&& f) {
    for (long co = 0; co < cout; ++co) {
      for (long ci = 0; ci < cin; ++ci) {
        for (long ky = 0; ky < k; ++ky) {
          auto [oy_lo, oy_hi] = detail::valid_output_range(h, oh, s, p, ky);
          for (long kx = 0; kx < k; ++kx) {
            auto [ox_lo, ox_hi] = detail::valid_output_range(w, ow, s, p, kx);
            const long widx = ((co * cin + ci) * k + ky) * k + kx;
            for (long oy = oy_lo; oy <= oy_hi; ++oy) {
              const long iy = oy * s - p + ky;
              const long out_row = (co * oh + oy) * ow;
              const long in_row = (ci * h + iy) * w;
              for (long ox = ox_lo; ox <= ox_hi; ++ox) {
                f(out_row + ox, in_row + ox * s - p + kx, widx);
              }
            }
          }
        }
      }
    }
  };

  auto in = input.data();
  auto ker = kernels.data();
  std::vector<double> out(static_cast<std::size_t>(cout * oh * ow), 0.0);
  for_each_tap([&](long o, long i, long wi) { out[o] += ker[wi] * in[i]; });

  Shape shape{static_cast<std::size_t>(cout), static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)};
  return Tensor::make_result(std::move(shape), std::move(out), {&input, &kernels},
                             [for_each_tap](Tensor::Node& self) {
                               const auto& x = self.inputs[0]->data;
                               const auto& kv = self.inputs[1]->data;
                               const auto& g = self.grad;
                               auto* gx = detail::grad_target(self, 0);
                               auto* gk = detail::grad_target(self, 1);
                               if (gx) for_each_tap([&](long o, long i, long wi) { (*gx)[i] += kv[wi] * g[o]; });
                               if (gk) for_each_tap([&](long o, long i, long wi) { (*gk)[wi] += x[i] * g[o]; });
                             });
}

// Non-overlapping average pooling over [c x h x w]; trailing rows/cols that do
// not fill a window are dropped.
inline Tensor avg_pool2d(const Tensor& input, std::size_t window) {
  if (input.rank() != 3 || window == 0 || input.dim(1) < window || input.dim(2) < window) {
    throw std::invalid_argument("avg_pool2d: cannot pool " + shape_str(input.shape()) + " with window " +
                                std::to_string(window));
  }
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t oh = h / window, ow = w / window;
  const double inv = 1.0 / static_cast<double>(window * window);
  auto x = input.data();
  std::vector<double> out(c * oh * ow, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx)
            acc += x[(ch * h + oy * window + dy) * w + ox * window + dx];
        out[(ch * oh + oy) * ow + ox] = acc * inv;
      }
  return Tensor::make_result(Shape{c, oh, ow}, std::move(out), {&input}, [=](Tensor::Node& self) {
    auto* gx = detail::grad_target(self, 0);
    if (!gx) return;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double g = self.grad[(ch * oh + oy) * ow + ox] * inv;
          for (std::size_t dy = 0; dy < window; ++dy)
            for (std::size_t dx = 0; dx < window; ++dx) (*gx)[(ch * h + oy * window + dy) * w + ox * window + dx] += g;
        }
  });
}

// Numerically stable softmax over a flat vector (max-subtraction).
inline Tensor softmax(const Tensor& x) {
  if (x.rank() != 1) throw std::invalid_argument("softmax: expected a vector, got " + shape_str(x.shape()));
  auto v = x.data();
  for (double e : v) {
    if (!std::isfinite(e)) throw std::invalid_argument("softmax: non-finite input");
  }
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    z += out[i];
  }
  for (auto& o : out) o /= z;
  return Tensor::make_result(x.shape(), std::move(out), {&x}, [](Tensor::Node& self) {
    auto* gx = detail::grad_target(self, 0);
    if (!gx) return;
    const auto& y = self.data;
    double dot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += self.grad[i] * y[i];
    for (std::size_t i = 0; i < y.size(); ++i) (*gx)[i] += y[i] * (self.grad[i] - dot);
  });
}

// Concatenation along axis 0; trailing extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t lead = 0;
  std::vector<double> out;
  for (const auto& t : parts) {
    Shape t_tail(t.shape().begin() + 1, t.shape().end());
    if (t_tail != tail) {
      throw std::invalid_argument("concat: trailing shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                                  shape_str(t.shape()));
    }
    lead += t.dim(0);
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return Tensor::make_result(std::move(shape), std::move(out), parts, [](Tensor::Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t n = self.inputs[k]->data.size();
      if (auto* g = detail::grad_target(self, k)) {
        for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

// Rows [begin, end) along axis 0.
inline Tensor slice(const Tensor& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.dim(0)) {
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                                ") outside " + shape_str(x.shape()));
  }
  const std::size_t stride = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> out(x.data().begin() + static_cast<long>(begin * stride),
                          x.data().begin() + static_cast<long>(end * stride));
  return Tensor::make_result(std::move(shape), std::move(out), {&x}, [begin, stride](Tensor::Node& self) {
    if (auto* g = detail::grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[begin * stride + i] += self.grad[i];
    }
  });
}

// Column j of a [r x c] matrix, i.e. M * onehot(j).
inline Tensor column(const Tensor& m, std::size_t j) {
  if (m.rank() != 2 || j >= m.dim(1)) {
    throw std::invalid_argument("column: index " + std::to_string(j) + " outside " + shape_str(m.shape()));
  }
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = m.data()[r * cols + j];
  return Tensor::make_result(Shape{rows}, std::move(out), {&m}, [j, cols](Tensor::Node& self) {
    if (auto* g = detail::grad_target(self, 0)) {
      for (std::size_t r = 0; r < self.grad.size(); ++r) (*g)[r * cols + j] += self.grad[r];
    }
  });
}

inline Tensor pick(const Tensor& x, std::size_t i) {
  if (i >= x.size()) {
    throw std::invalid_argument("pick: index " + std::to_string(i) + " outside " + shape_str(x.shape()));
  }
  return Tensor::make_result(Shape{1}, {x.data()[i]}, {&x}, [i](Tensor::Node& self) {
    if (auto* g = detail::grad_target(self, 0)) (*g)[i] += self.grad[0];
  });
}

// Mean over axis 1 of a [r x c] matrix, accumulated left to right.
inline Tensor row_mean(const Tensor& m) {
  if (m.rank() != 2) throw std::invalid_argument("row_mean: expected matrix, got " + shape_str(m.shape()));
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += m.data()[r * cols + c];
    out[r] = acc / static_cast<double>(cols);
  }
  return Tensor::make_result(Shape{rows}, std::move(out), {&m}, [rows, cols](Tensor::Node& self) {
    if (auto* g = detail::grad_target(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double gr = self.grad[r] / static_cast<double>(cols);
        for (std::size_t c = 0; c < cols; ++c) (*g)[r * cols + c] += gr;
      }
    }
  });
}

// Per-channel affine normalization with externally supplied statistics:
// y = gamma * (x - mean) / sqrt(var + eps) + beta, channel = axis 0.
inline Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           std::span<const double> mean, std::span<const double> var, double eps) {
  const std::size_t c = x.dim(0);
  if (gamma.size() != c || beta.size() != c || mean.size() != c || var.size() != c) {
    throw std::invalid_argument("channel_norm: parameter count does not match channels of " +
                                shape_str(x.shape()));
  }
  const std::size_t per = x.size() / c;
  std::vector<double> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
  std::vector<double> mu(mean.begin(), mean.end());
  auto xd = x.data();
  std::vector<double> out(x.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double a = gamma.data()[ch] * inv_std[ch];
    const double b = beta.data()[ch] - a * mu[ch];
    for (std::size_t i = 0; i < per; ++i) out[ch * per + i] = a * xd[ch * per + i] + b;
  }
  return Tensor::make_result(x.shape(), std::move(out), {&x, &gamma, &beta},
                             [c, per, inv_std, mu](Tensor::Node& self) {
                               const auto& xv = self.inputs[0]->data;
                               const auto& gv = self.inputs[1]->data;
                               auto* gx = detail::grad_target(self, 0);
                               auto* gg = detail::grad_target(self, 1);
                               auto* gb = detail::grad_target(self, 2);
                               for (std::size_t ch = 0; ch < c; ++ch) {
                                 double sg = 0.0, sgx = 0.0;
                                 for (std::size_t i = 0; i < per; ++i) {
                                   const double g = self.grad[ch * per + i];
                                   sg += g;
                                   sgx += g * (xv[ch * per + i] - mu[ch]) * inv_std[ch];
                                   if (gx) (*gx)[ch * per + i] += g * gv[ch] * inv_std[ch];
                                 }
                                 if (gg) (*gg)[ch] += sgx;
                                 if (gb) (*gb)[ch] += sg;
                               }
                             });
}

}  // namespace cxrgen
