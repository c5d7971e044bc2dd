#pragma once

// Dense 2-D tensors with reverse-mode differentiation.
//
// Every value is a rows x cols matrix of doubles (vectors are 1 x n or n x 1).
// Operations record a backward closure when at least one input requires a
// gradient and gradient recording is enabled on the calling thread.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace structie {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor row(std::vector<double> values);
  /// Leaf that accumulates gradients (used for inputs under test).
  static Tensor variable(Shape shape, std::vector<double> values);
  /// Named leaf that accumulates gradients and is updated by optimizers.
  static Tensor parameter(std::string name, Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  Shape shape() const;
  std::size_t rows() const { return shape().rows; }
  std::size_t cols() const { return shape().cols; }
  std::size_t size() const { return shape().size(); }

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double at(std::size_t r, std::size_t c) const;
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  bool is_leaf() const;
  const std::string& name() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  /// Allocates (if needed) and fills the gradient with zeros.
  void zero_grad();
  /// Releases the gradient buffer.
  void clear_grad();

  /// Gradient buffer for accumulation from a backward closure; allocated on demand.
  std::span<double> grad_accumulator() const;

  /// Copy of the value with no history.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(std::span<const double>)>);
  friend void backward(const Tensor&);
};

/// Builds the output of a differentiable operation.  `fn` receives the output
/// gradient and must accumulate into the inputs through grad_accumulator().
/// When no input needs a gradient (or recording is disabled) the closure is
/// dropped and the result is a constant.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   std::function<void(std::span<const double>)> fn);

/// Reverse sweep from a scalar.  Leaf gradients accumulate across calls;
/// intermediate gradients are reset at the start of every sweep.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct Index2 {
  std::size_t row;
  std::size_t col;
};

// Linear algebra and elementwise arithmetic.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
/// a (r x c) + row (1 x c) added to every row.
Tensor add_row(const Tensor& a, const Tensor& row);
/// a (r x c) with row i multiplied by col(i, 0).
Tensor mul_col(const Tensor& a, const Tensor& col);
/// out(i, j) = col(i, 0) + row(0, j).
Tensor outer_add(const Tensor& col, const Tensor& row);

// Reductions.
Tensor sum(const Tensor& a);
Tensor row_sum(const Tensor& a);
Tensor mean_rows(const Tensor& a);

// Pointwise nonlinearities.
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
/// Natural log; inputs are clamped below at 1e-300.
Tensor log(const Tensor& a);
Tensor gelu(const Tensor& a);

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);

// Structural operations.
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
/// Selected elements as a 1 x k row.
Tensor pick(const Tensor& a, std::span<const Index2> positions);
/// Copy of `base` with values(0, k) added at positions[k].
Tensor scatter_add(const Tensor& base, std::span<const Index2> positions, const Tensor& values);

// Model-level primitives.
/// Same-padded 1-D convolution over rows. kernel is (width * d_in) x d_out,
/// bias is 1 x d_out, width must be odd.
Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// softmax(q k^T / sqrt(d_k) + mask) v; `mask` is an optional additive constant.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& mask = Tensor());
/// Prefix maximum along a 1 x n row; the gradient flows to the leftmost argmax.
Tensor running_max(const Tensor& a);
/// Row-wise cosine similarity, r x 1.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
Tensor frobenius_norm(const Tensor& a);

}  // namespace structie
