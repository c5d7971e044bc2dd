#include "structie/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "structie/error.hpp"

namespace structie {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(std::span<const double>)> backward_fn;
  std::string name;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

ConstMap view(std::span<const double> data, Shape shape) {
  return ConstMap(data.data(), static_cast<Eigen::Index>(shape.rows),
                  static_cast<Eigen::Index>(shape.cols));
}

MutMap mut_view(std::span<double> data, Shape shape) {
  return MutMap(data.data(), static_cast<Eigen::Index>(shape.rows),
                static_cast<Eigen::Index>(shape.cols));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename F>
Tensor unary(const Tensor& a, F&& fwd_and_deriv) {
  const auto in = a.data();
  std::vector<double> out(in.size());
  std::vector<double> deriv(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    auto [y, dy] = fwd_and_deriv(in[i]);
    out[i] = y;
    deriv[i] = dy;
  }
  return make_result(a.shape(), std::move(out), {a}, [a, deriv = std::move(deriv)](std::span<const double> g) {
    if (!a.requires_grad()) return;
    auto ga = a.grad_accumulator();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv[i];
  });
}

}  // namespace

std::string to_string(const Shape& shape) {
  return "[" + std::to_string(shape.rows) + "x" + std::to_string(shape.cols) + "]";
}

// ---------------------------------------------------------------------------
// Tensor handle

namespace {
std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> values) {
  if (values.size() != shape.size()) {
    throw ShapeError("tensor data of length " + std::to_string(values.size()) +
                     " does not match shape " + to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->value = std::move(values);
  return node;
}
}  // namespace

Tensor Tensor::zeros(Shape shape) { return constant(shape, std::vector<double>(shape.size(), 0.0)); }

Tensor Tensor::full(Shape shape, double value) {
  return constant(shape, std::vector<double>(shape.size(), value));
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  return Tensor(new_node(shape, std::move(values)));
}

Tensor Tensor::scalar(double value) { return constant({1, 1}, {value}); }

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return constant({1, n}, std::move(values));
}

Tensor Tensor::variable(Shape shape, std::vector<double> values) {
  auto node = new_node(shape, std::move(values));
  node->requires_grad = true;
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(std::string name, Shape shape, std::vector<double> values) {
  auto node = new_node(shape, std::move(values));
  node->requires_grad = true;
  node->name = std::move(name);
  return Tensor(std::move(node));
}

Shape Tensor::shape() const { return node_ ? node_->shape : Shape{}; }

std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::at(std::size_t r, std::size_t c) const {
  if (r >= rows() || c >= cols()) throw ShapeError("index out of range for " + to_string(shape()));
  return node_->value[r * node_->shape.cols + c];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar " + to_string(shape()));
  return node_->value[0];
}

std::vector<double> Tensor::to_vector() const { return node_->value; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_ && node_->leaf; }

const std::string& Tensor::name() const { return node_->name; }

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value.size() && !node_->value.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() { return node_->grad; }

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

void Tensor::clear_grad() {
  node_->grad.clear();
  node_->grad.shrink_to_fit();
}

std::span<double> Tensor::grad_accumulator() const { return node_->ensure_grad(); }

Tensor Tensor::detach() const { return constant(shape(), node_->value); }

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   std::function<void(std::span<const double>)> fn) {
  auto node = new_node(shape, std::move(value));
  if (!g_grad_enabled) return Tensor(std::move(node));
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return Tensor(std::move(node));
  node->requires_grad = true;
  node->leaf = false;
  node->parents.reserve(inputs.size());
  for (auto& in : inputs) {
    if (in.requires_grad()) node->parents.push_back(in.node_);
  }
  node->backward_fn = std::move(fn);
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node_.get(), 0);
  visited.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* node : order) {
    if (!node->leaf) node->grad.assign(node->value.size(), 0.0);
  }
  loss.node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn) node->backward_fn(node->grad);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) shape_fail("matmul", a.shape(), b.shape());
  const Shape out_shape{a.rows(), b.cols()};
  std::vector<double> out(out_shape.size());
  mut_view(out, out_shape).noalias() = view(a.data(), a.shape()) * view(b.data(), b.shape());
  return make_result(out_shape, std::move(out), {a, b}, [a, b, out_shape](std::span<const double> g) {
    const auto gm = view(g, out_shape);
    if (a.requires_grad()) {
      mut_view(a.grad_accumulator(), a.shape()).noalias() += gm * view(b.data(), b.shape()).transpose();
    }
    if (b.requires_grad()) {
      mut_view(b.grad_accumulator(), b.shape()).noalias() += view(a.data(), a.shape()).transpose() * gm;
    }
  });
}

Tensor transpose(const Tensor& a) {
  const Shape out_shape{a.cols(), a.rows()};
  std::vector<double> out(out_shape.size());
  mut_view(out, out_shape) = view(a.data(), a.shape()).transpose();
  return make_result(out_shape, std::move(out), {a}, [a, out_shape](std::span<const double> g) {
    mut_view(a.grad_accumulator(), a.shape()) += view(g, out_shape).transpose();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto gt = t->grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    if (a.requires_grad()) {
      auto ga = a.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    const auto x = a.data();
    const auto y = b.data();
    if (a.requires_grad()) {
      auto ga = a.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return std::pair{x * factor, factor}; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(a, [value](double x) { return std::pair{x + value, 1.0}; });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) shape_fail("add_row", a.shape(), row.shape());
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto b = row.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b[j];
  return make_result(a.shape(), std::move(out), {a, row}, [a, row, r, c](std::span<const double> g) {
    if (a.requires_grad()) {
      auto ga = a.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (row.requires_grad()) {
      auto gb = row.grad_accumulator();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
    }
  });
}

Tensor mul_col(const Tensor& a, const Tensor& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) shape_fail("mul_col", a.shape(), col.shape());
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  const auto x = a.data();
  const auto s = col.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * s[i];
  return make_result(a.shape(), std::move(out), {a, col}, [a, col, r, c](std::span<const double> g) {
    const auto x = a.data();
    const auto s = col.data();
    if (a.requires_grad()) {
      auto ga = a.grad_accumulator();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i * c + j] * s[i];
    }
    if (col.requires_grad()) {
      auto gs = col.grad_accumulator();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gs[i] += g[i * c + j] * x[i * c + j];
    }
  });
}

Tensor outer_add(const Tensor& col, const Tensor& row) {
  if (col.cols() != 1 || row.rows() != 1) shape_fail("outer_add", col.shape(), row.shape());
  const std::size_t r = col.rows();
  const std::size_t c = row.cols();
  std::vector<double> out(r * c);
  const auto u = col.data();
  const auto v = row.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = u[i] + v[j];
  return make_result({r, c}, std::move(out), {col, row}, [col, row, r, c](std::span<const double> g) {
    if (col.requires_grad()) {
      auto gu = col.grad_accumulator();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gu[i] += g[i * c + j];
    }
    if (row.requires_grad()) {
      auto gv = row.grad_accumulator();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double x : a.data()) total += x;
  return make_result({1, 1}, {total}, {a}, [a](std::span<const double> g) {
    auto ga = a.grad_accumulator();
    for (double& x : ga) x += g[0];
  });
}

Tensor row_sum(const Tensor& a) {
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  const auto x = a.data();
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += x[i * c + j];
  return make_result({r, 1}, std::move(out), {a}, [a, r, c](std::span<const double> g) {
    auto ga = a.grad_accumulator();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i];
  });
}

Tensor mean_rows(const Tensor& a) {
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  if (r == 0) throw ShapeError("mean_rows of empty tensor");
  const auto x = a.data();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x[i * c + j];
  for (double& v : out) v /= static_cast<double>(r);
  return make_result({1, c}, std::move(out), {a}, [a, r, c](std::span<const double> g) {
    auto ga = a.grad_accumulator();
    const double inv = 1.0 / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j] * inv;
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

Tensor sigmoid(const Tensor& a) {
  return unary(a, [](double x) {
    const double s = stable_sigmoid(x);
    return std::pair{s, s * (1.0 - s)};
  });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) {
    const double t = std::tanh(x);
    return std::pair{t, 1.0 - t * t};
  });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) {
    const double e = std::exp(x);
    return std::pair{e, e};
  });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) {
    const double c = std::max(x, 1e-300);
    return std::pair{std::log(c), 1.0 / c};
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double kAlpha = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double kBeta = 0.044715;
  return unary(a, [](double x) {
    const double inner = kAlpha * (x + kBeta * x * x * x);
    const double t = std::tanh(inner);
    const double y = 0.5 * x * (1.0 + t);
    const double d_inner = kAlpha * (1.0 + 3.0 * kBeta * x * x);
    const double dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    return std::pair{y, dy};
  });
}

Tensor softmax_rows(const Tensor& a) {
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data() + i * c;
    double* dst = out.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (dst[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) dst[j] /= z;
  }
  std::vector<double> saved = out;
  return make_result(a.shape(), std::move(out), {a}, [a, r, c, p = std::move(saved)](std::span<const double> g) {
    auto ga = a.grad_accumulator();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * p[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += p[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  const auto x = a.data();
  std::vector<double> out(x.size());
  std::vector<double> probs(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = row[j] - lz;
      probs[i * c + j] = std::exp(out[i * c + j]);
    }
  }
  return make_result(a.shape(), std::move(out), {a}, [a, r, c, p = std::move(probs)](std::span<const double> g) {
    auto ga = a.grad_accumulator();
    for (std::size_t i = 0; i < r; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) total += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i * c + j] - p[i * c + j] * total;
    }
  });
}

// ---------------------------------------------------------------------------
// Structural operations

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) shape_fail("concat_cols", parts.front().shape(), p.shape());
    c += p.cols();
  }
  std::vector<double> out(r * c);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto x = p.data();
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(x.data() + i * pc, pc, out.data() + i * c + offset);
    offset += pc;
  }
  return make_result({r, c}, std::move(out), parts, [parts, r, c](std::span<const double> g) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t pc = p.cols();
      if (p.requires_grad()) {
        auto gp = p.grad_accumulator();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * c + offset + j];
      }
      offset += pc;
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) shape_fail("concat_rows", parts.front().shape(), p.shape());
    r += p.rows();
  }
  std::vector<double> out;
  out.reserve(r * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result({r, c}, std::move(out), parts, [parts](std::span<const double> g) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t n = p.size();
      if (p.requires_grad()) {
        auto gp = p.grad_accumulator();
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  if (start + count > a.rows()) {
    throw ShapeError("slice_rows [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                     to_string(a.shape()));
  }
  const std::size_t c = a.cols();
  const auto x = a.data();
  std::vector<double> out(x.begin() + static_cast<std::ptrdiff_t>(start * c),
                          x.begin() + static_cast<std::ptrdiff_t>((start + count) * c));
  return make_result({count, c}, std::move(out), {a}, [a, start, c](std::span<const double> g) {
    auto ga = a.grad_accumulator();
    for (std::size_t i = 0; i < g.size(); ++i) ga[start * c + i] += g[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  if (start + count > a.cols()) {
    throw ShapeError("slice_cols [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                     to_string(a.shape()));
  }
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  const auto x = a.data();
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(x.data() + i * c + start, count, out.data() + i * count);
  return make_result({r, count}, std::move(out), {a}, [a, start, r, c, count](std::span<const double> g) {
    auto ga = a.grad_accumulator();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) ga[i * c + start + j] += g[i * count + j];
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  const std::size_t c = table.cols();
  const auto x = table.data();
  std::vector<double> out(ids.size() * c);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= table.rows()) throw ShapeError("gather_rows: id " + std::to_string(ids[k]) + " out of range");
    std::copy_n(x.data() + ids[k] * c, c, out.data() + k * c);
  }
  std::vector<std::size_t> saved(ids.begin(), ids.end());
  return make_result({ids.size(), c}, std::move(out), {table},
                     [table, c, idx = std::move(saved)](std::span<const double> g) {
                       auto gt = table.grad_accumulator();
                       for (std::size_t k = 0; k < idx.size(); ++k)
                         for (std::size_t j = 0; j < c; ++j) gt[idx[k] * c + j] += g[k * c + j];
                     });
}

Tensor pick(const Tensor& a, std::span<const Index2> positions) {
  const std::size_t c = a.cols();
  std::vector<std::size_t> flat(positions.size());
  std::vector<double> out(positions.size());
  for (std::size_t k = 0; k < positions.size(); ++k) {
    if (positions[k].row >= a.rows() || positions[k].col >= c) {
      throw ShapeError("pick: position out of range for " + to_string(a.shape()));
    }
    flat[k] = positions[k].row * c + positions[k].col;
    out[k] = a.data()[flat[k]];
  }
  return make_result({1, positions.size()}, std::move(out), {a}, [a, flat = std::move(flat)](std::span<const double> g) {
    auto ga = a.grad_accumulator();
    for (std::size_t k = 0; k < flat.size(); ++k) ga[flat[k]] += g[k];
  });
}

Tensor scatter_add(const Tensor& base, std::span<const Index2> positions, const Tensor& values) {
  if (values.size() != positions.size()) {
    throw ShapeError("scatter_add: " + std::to_string(positions.size()) + " positions for values " +
                     to_string(values.shape()));
  }
  const std::size_t c = base.cols();
  std::vector<double> out(base.data().begin(), base.data().end());
  std::vector<std::size_t> flat(positions.size());
  for (std::size_t k = 0; k < positions.size(); ++k) {
    if (positions[k].row >= base.rows() || positions[k].col >= c) {
      throw ShapeError("scatter_add: position out of range for " + to_string(base.shape()));
    }
    flat[k] = positions[k].row * c + positions[k].col;
    out[flat[k]] += values.data()[k];
  }
  return make_result(base.shape(), std::move(out), {base, values},
                     [base, values, flat = std::move(flat)](std::span<const double> g) {
                       if (base.requires_grad()) {
                         auto gb = base.grad_accumulator();
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                       }
                       if (values.requires_grad()) {
                         auto gv = values.grad_accumulator();
                         for (std::size_t k = 0; k < flat.size(); ++k) gv[k] += g[flat[k]];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Model-level primitives

Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  const std::size_t n = x.rows();
  const std::size_t d_in = x.cols();
  if (d_in == 0 || kernel.rows() % d_in != 0 || (kernel.rows() / d_in) % 2 == 0) {
    shape_fail("conv1d", x.shape(), kernel.shape());
  }
  const std::size_t width = kernel.rows() / d_in;
  const std::size_t d_out = kernel.cols();
  if (bias.rows() != 1 || bias.cols() != d_out) shape_fail("conv1d bias", kernel.shape(), bias.shape());
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(width / 2);

  // im2col: row i holds x[i - pad .. i + pad] with zero padding.
  const Shape cols_shape{n, width * d_in};
  std::vector<double> cols(cols_shape.size(), 0.0);
  const auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < width; ++t) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(t) - pad;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
      std::copy_n(xv.data() + static_cast<std::size_t>(src) * d_in, d_in, cols.data() + i * width * d_in + t * d_in);
    }
  }
  const Shape out_shape{n, d_out};
  std::vector<double> out(out_shape.size());
  auto om = mut_view(out, out_shape);
  om.noalias() = view(cols, cols_shape) * view(kernel.data(), kernel.shape());
  om.rowwise() += view(bias.data(), bias.shape()).row(0);
  return make_result(out_shape, std::move(out), {x, kernel, bias},
                     [x, kernel, bias, cols = std::move(cols), cols_shape, out_shape, n, d_in, width,
                      pad](std::span<const double> g) {
                       const auto gm = view(g, out_shape);
                       if (kernel.requires_grad()) {
                         mut_view(kernel.grad_accumulator(), kernel.shape()).noalias() +=
                             view(cols, cols_shape).transpose() * gm;
                       }
                       if (bias.requires_grad()) {
                         mut_view(bias.grad_accumulator(), bias.shape()).row(0) += gm.colwise().sum();
                       }
                       if (x.requires_grad()) {
                         RowMat gcols = gm * view(kernel.data(), kernel.shape()).transpose();
                         auto gx = x.grad_accumulator();
                         for (std::size_t i = 0; i < n; ++i) {
                           for (std::size_t t = 0; t < width; ++t) {
                             const std::ptrdiff_t src =
                                 static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(t) - pad;
                             if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
                             for (std::size_t j = 0; j < d_in; ++j) {
                               gx[static_cast<std::size_t>(src) * d_in + j] +=
                                   gcols(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t * d_in + j));
                             }
                           }
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  if (gain.rows() != 1 || gain.cols() != c) shape_fail("layer_norm gain", x.shape(), gain.shape());
  if (bias.rows() != 1 || bias.cols() != c) shape_fail("layer_norm bias", x.shape(), bias.shape());
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(r);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < r; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xv[i * c + j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xv[i * c + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xv[i * c + j] - mean) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [x, gain, bias, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         std::span<const double> g) {
                       const auto gv = gain.data();
                       if (gain.requires_grad() || bias.requires_grad()) {
                         for (std::size_t i = 0; i < r; ++i) {
                           for (std::size_t j = 0; j < c; ++j) {
                             if (gain.requires_grad()) gain.grad_accumulator()[j] += g[i * c + j] * xhat[i * c + j];
                             if (bias.requires_grad()) bias.grad_accumulator()[j] += g[i * c + j];
                           }
                         }
                       }
                       if (!x.requires_grad()) return;
                       auto gx = x.grad_accumulator();
                       const double inv_c = 1.0 / static_cast<double>(c);
                       for (std::size_t i = 0; i < r; ++i) {
                         double sum_dy = 0.0;
                         double sum_dy_xhat = 0.0;
                         for (std::size_t j = 0; j < c; ++j) {
                           const double dy = g[i * c + j] * gv[j];
                           sum_dy += dy;
                           sum_dy_xhat += dy * xhat[i * c + j];
                         }
                         for (std::size_t j = 0; j < c; ++j) {
                           const double dy = g[i * c + j] * gv[j];
                           gx[i * c + j] +=
                               inv_std[i] * (dy - inv_c * sum_dy - xhat[i * c + j] * inv_c * sum_dy_xhat);
                         }
                       }
                     });
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask) {
  if (q.cols() != k.cols()) shape_fail("attention q/k", q.shape(), k.shape());
  if (k.rows() != v.rows()) shape_fail("attention k/v", k.shape(), v.shape());
  const std::size_t t = q.rows();
  const std::size_t n = k.rows();
  if (mask.defined() && (mask.rows() != t || mask.cols() != n)) shape_fail("attention mask", q.shape(), mask.shape());
  const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));

  RowMat scores = (view(q.data(), q.shape()) * view(k.data(), k.shape()).transpose()) * s;
  if (mask.defined()) scores += view(mask.data(), mask.shape());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const double mx = scores.row(i).maxCoeff();
    scores.row(i) = (scores.row(i).array() - mx).exp();
    scores.row(i) /= scores.row(i).sum();
  }
  const Shape out_shape{t, v.cols()};
  std::vector<double> out(out_shape.size());
  mut_view(out, out_shape).noalias() = scores * view(v.data(), v.shape());
  return make_result(out_shape, std::move(out), {q, k, v},
                     [q, k, v, p = std::move(scores), s, out_shape](std::span<const double> g) {
                       const auto gm = view(g, out_shape);
                       if (v.requires_grad()) {
                         mut_view(v.grad_accumulator(), v.shape()).noalias() += p.transpose() * gm;
                       }
                       if (!q.requires_grad() && !k.requires_grad()) return;
                       RowMat dp = gm * view(v.data(), v.shape()).transpose();
                       Eigen::VectorXd dot = (dp.array() * p.array()).rowwise().sum();
                       RowMat ds = p.array() * (dp.colwise() - dot).array();
                       ds *= s;
                       if (q.requires_grad()) {
                         mut_view(q.grad_accumulator(), q.shape()).noalias() += ds * view(k.data(), k.shape());
                       }
                       if (k.requires_grad()) {
                         mut_view(k.grad_accumulator(), k.shape()).noalias() +=
                             ds.transpose() * view(q.data(), q.shape());
                       }
                     });
}

Tensor running_max(const Tensor& a) {
  if (a.rows() != 1) throw ShapeError("running_max expects a 1 x n row, got " + to_string(a.shape()));
  const std::size_t n = a.cols();
  const auto x = a.data();
  std::vector<double> out(n);
  std::vector<std::size_t> arg(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (j == 0 || x[j] > out[j - 1]) {
      out[j] = x[j];
      arg[j] = j;
    } else {
      out[j] = out[j - 1];
      arg[j] = arg[j - 1];
    }
  }
  return make_result(a.shape(), std::move(out), {a}, [a, arg = std::move(arg)](std::span<const double> g) {
    auto ga = a.grad_accumulator();
    for (std::size_t j = 0; j < g.size(); ++j) ga[arg[j]] += g[j];
  });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_same("cosine_similarity", a, b);
  constexpr double kEps = 1e-12;
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(r);
  std::vector<double> na(r);
  std::vector<double> nb(r);
  for (std::size_t i = 0; i < r; ++i) {
    double dot = 0.0;
    double xx = 0.0;
    double yy = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      dot += x[i * c + j] * y[i * c + j];
      xx += x[i * c + j] * x[i * c + j];
      yy += y[i * c + j] * y[i * c + j];
    }
    na[i] = std::max(std::sqrt(xx), kEps);
    nb[i] = std::max(std::sqrt(yy), kEps);
    out[i] = dot / (na[i] * nb[i]);
  }
  std::vector<double> cos = out;
  return make_result({r, 1}, std::move(out), {a, b},
                     [a, b, r, c, na = std::move(na), nb = std::move(nb), cos = std::move(cos)](
                         std::span<const double> g) {
                       const auto x = a.data();
                       const auto y = b.data();
                       for (std::size_t i = 0; i < r; ++i) {
                         if (a.requires_grad()) {
                           auto ga = a.grad_accumulator();
                           for (std::size_t j = 0; j < c; ++j) {
                             ga[i * c + j] += g[i] * (y[i * c + j] / (na[i] * nb[i]) -
                                                      cos[i] * x[i * c + j] / (na[i] * na[i]));
                           }
                         }
                         if (b.requires_grad()) {
                           auto gb = b.grad_accumulator();
                           for (std::size_t j = 0; j < c; ++j) {
                             gb[i * c + j] += g[i] * (x[i * c + j] / (na[i] * nb[i]) -
                                                      cos[i] * y[i * c + j] / (nb[i] * nb[i]));
                           }
                         }
                       }
                     });
}

Tensor frobenius_norm(const Tensor& a) {
  double ss = 0.0;
  for (double x : a.data()) ss += x * x;
  const double norm = std::sqrt(ss);
  return make_result({1, 1}, {norm}, {a}, [a, norm](std::span<const double> g) {
    if (norm == 0.0) return;
    auto ga = a.grad_accumulator();
    const auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[0] * x[i] / norm;
  });
}

}  // namespace structie
