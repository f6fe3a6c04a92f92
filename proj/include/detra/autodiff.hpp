#pragma once

// Minimal tape-based reverse-mode automatic differentiation over dense,
// row-major double matrices. Higher-rank volumes are flattened to
// (rows = product of leading axes) x (cols = feature width).

#include <Eigen/Dense>

#include <deque>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

namespace detra::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

/// Learnable tensor. `grad` accumulates across backward passes until zeroed.
struct Param {
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  /// Gradient after Tape::backward; zero-sized when no gradient reached the node.
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Differentiable input whose gradient is read back via Var::grad().
  Var leaf(Matrix value);
  /// Parameter input; backward accumulates into `param.grad`.
  Var param(Param& param);

  /// Creates a node. `backward` may be empty when no input requires grad.
  Var make(Matrix value, bool requires_grad, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 for a 1x1 loss and propagates to all inputs.
  /// Node gradients accumulate; call zero_grads() before a second backward.
  void backward(const Var& loss);
  void zero_grads();

  /// Adds `g` into the gradient of node `id` if it requires grad.
  void accumulate(int id, const Matrix& g);
  template <typename Derived>
  void accumulate_rows(int id, Index row, const Eigen::MatrixBase<Derived>& g);

  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const Matrix& value(int id) const { return nodes_[id].value; }
  const Matrix& grad(int id) const { return nodes_[id].grad; }
  Matrix& mutable_grad(int id);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
    Param* param = nullptr;
  };
  std::deque<Node> nodes_;
  std::unordered_map<Param*, int> param_ids_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline const Matrix& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

template <typename Derived>
void Tape::accumulate_rows(int id, Index row, const Eigen::MatrixBase<Derived>& g) {
  if (!nodes_[id].requires_grad) return;
  Matrix& grad = mutable_grad(id);
  grad.middleRows(row, g.rows()) += g;
}

// ---- elementwise and structural ops ----

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// a (r x c) + b (1 x c), broadcast over rows.
Var add_row(const Var& a, const Var& b);
/// a (r x c) * b (r x 1), broadcast over columns.
Var mul_col(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);
/// Elementwise product with a constant matrix.
Var mul_const(const Var& a, const Matrix& m);
Var add_const(const Var& a, const Matrix& m);

Var matmul(const Var& a, const Var& b);
/// x W + b with W (in x out) and b (1 x out).
Var linear(const Var& x, const Var& weight, const Var& bias);

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
/// Gradient passes only where lo < a < hi.
Var clamp(const Var& a, double lo, double hi);
/// log(1 + exp(a)), computed stably.
Var softplus(const Var& a);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

Var sum(const Var& a);
Var mean(const Var& a);
/// Column sums, 1 x c.
Var sum_rows(const Var& a);
/// Row sums, r x 1.
Var sum_cols(const Var& a);

Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& a, Index start, Index count);
/// out[i] = a[index[i]]; repeated indices accumulate in backward.
Var gather_rows(const Var& a, std::span<const int> index);
/// out[index[i]] += a[i], out has `out_rows` rows.
Var scatter_add_rows(const Var& a, std::span<const int> index, Index out_rows);
/// Replaces rows `index` of `base` with the rows of `rows`; other rows pass through.
Var set_rows(const Var& base, std::span<const int> index, const Var& rows);
/// Row-major reinterpretation.
Var reshape(const Var& a, Index rows, Index cols);
/// Identity in the forward pass, zero gradient in the backward pass.
Var stop_gradient(const Var& a);

// ---- fused ops ----

/// Per-query attention weights recorded by `attention` when requested.
struct AttentionTrace {
  /// weights[head][query] holds one weight per key in that query's key set.
  std::vector<std::vector<std::vector<double>>> weights;
};

/// Multi-head scaled dot-product attention where query i attends to the keys
/// listed in key_sets[i]. q: Mq x d, k and v: Mk x d, d divisible by heads.
/// A query with an empty key set outputs zeros.
Var attention(const Var& q, const Var& k, const Var& v,
              const std::vector<std::vector<int>>& key_sets, int heads,
              AttentionTrace* trace = nullptr);

/// 2D convolution with square kernel `ksize` (odd), zero padding ksize/2.
/// x: (H*W) x Cin, weight: (ksize*ksize*Cin) x Cout, bias: 1 x Cout.
/// Output: (Ho*Wo) x Cout with Ho = (H - 1) / stride + 1.
Var conv2d(const Var& x, int height, int width, const Var& weight, const Var& bias, int ksize,
           int stride);

/// Bilinear sampling of a (H*W) x C feature grid at M points (M x 2, meters),
/// zero padding outside. Differentiable in both features and points.
Var bilinear_sample(const Var& features, int height, int width, const Eigen::Vector2d& origin,
                    double cell_size, const Var& points);

}  // namespace detra::ag
