#include "detra/autodiff.hpp"

#include "detra/geometry.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace detra::ag {

Var Tape::constant(Matrix value) { return make(std::move(value), false, {}); }

Var Tape::leaf(Matrix value) { return make(std::move(value), true, {}); }

Var Tape::param(Param& param) {
  if (auto it = param_ids_.find(&param); it != param_ids_.end()) return Var(this, it->second);
  Var v = make(param.value, true, {});
  nodes_[v.id()].param = &param;
  param_ids_.emplace(&param, v.id());
  return v;
}

Var Tape::make(Matrix value, bool requires_grad, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix& Tape::mutable_grad(int id) {
  Node& node = nodes_[id];
  if (node.grad.size() == 0) node.grad.setZero(node.value.rows(), node.value.cols());
  return node.grad;
}

void Tape::accumulate(int id, const Matrix& g) {
  if (!nodes_[id].requires_grad) return;
  Node& node = nodes_[id];
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

void Tape::zero_grads() {
  for (Node& node : nodes_) node.grad.resize(0, 0);
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this || loss.rows() != 1 || loss.cols() != 1) {
    throw std::invalid_argument("backward expects a 1x1 loss on this tape");
  }
  if (!requires_grad(loss.id())) return;
  accumulate(loss.id(), Matrix::Ones(1, 1));
  for (int id = loss.id(); id >= 0; --id) {
    Node& node = nodes_[id];
    if (!node.requires_grad || node.grad.size() == 0) continue;
    if (node.backward) node.backward(*this, node.grad);
  }
  for (Node& node : nodes_) {
    if (node.param == nullptr || node.grad.size() == 0) continue;
    if (node.param->grad.rows() != node.value.rows() ||
        node.param->grad.cols() != node.value.cols()) {
      node.param->zero_grad();
    }
    node.param->grad += node.grad;
  }
}

namespace {

Tape& tape_of(const Var& a) { return *a.tape(); }

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

bool any_grad(std::initializer_list<const Var*> vars) {
  for (const Var* v : vars) {
    if (v->requires_grad()) return true;
  }
  return false;
}

// Elementwise unary op given the forward value and the local derivative as a
// function of (input, output).
template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  Tape& t = tape_of(a);
  Matrix out = a.value().unaryExpr(fwd);
  const int ia = a.id();
  return t.make(std::move(out), a.requires_grad(), [ia, deriv](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(ia);
    Matrix local(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) local.data()[i] = deriv(x.data()[i]);
    tp.accumulate(ia, g.cwiseProduct(local));
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).make(a.value() + b.value(), any_grad({&a, &b}),
                         [ia, ib](Tape& tp, const Matrix& g) {
                           tp.accumulate(ia, g);
                           tp.accumulate(ib, g);
                         });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).make(a.value() - b.value(), any_grad({&a, &b}),
                         [ia, ib](Tape& tp, const Matrix& g) {
                           tp.accumulate(ia, g);
                           if (tp.requires_grad(ib)) tp.accumulate(ib, -g);
                         });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).make(a.value().cwiseProduct(b.value()), any_grad({&a, &b}),
                         [ia, ib](Tape& tp, const Matrix& g) {
                           if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
                           if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
                         });
}

Var add_row(const Var& a, const Var& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value().rowwise() + b.value().row(0);
  return tape_of(a).make(std::move(out), any_grad({&a, &b}), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum());
  });
}

Var mul_col(const Var& a, const Var& b) {
  if (b.cols() != 1 || b.rows() != a.rows()) throw std::invalid_argument("mul_col: shape mismatch");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value().array().colwise() * b.value().col(0).array();
  return tape_of(a).make(std::move(out), any_grad({&a, &b}), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) {
      Matrix ga = g.array().colwise() * tp.value(ib).col(0).array();
      tp.accumulate(ia, ga);
    }
    if (tp.requires_grad(ib)) {
      Matrix gb = g.cwiseProduct(tp.value(ia)).rowwise().sum();
      tp.accumulate(ib, gb);
    }
  });
}

Var scale(const Var& a, double s) {
  const int ia = a.id();
  return tape_of(a).make(a.value() * s, a.requires_grad(),
                         [ia, s](Tape& tp, const Matrix& g) { tp.accumulate(ia, g * s); });
}

Var add_scalar(const Var& a, double s) {
  const int ia = a.id();
  Matrix out = a.value().array() + s;
  return tape_of(a).make(std::move(out), a.requires_grad(),
                         [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g); });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var mul_const(const Var& a, const Matrix& m) {
  if (m.rows() != a.rows() || m.cols() != a.cols()) {
    throw std::invalid_argument("mul_const: shape mismatch");
  }
  const int ia = a.id();
  return tape_of(a).make(a.value().cwiseProduct(m), a.requires_grad(),
                         [ia, m](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.cwiseProduct(m)); });
}

Var add_const(const Var& a, const Matrix& m) {
  if (m.rows() != a.rows() || m.cols() != a.cols()) {
    throw std::invalid_argument("add_const: shape mismatch");
  }
  const int ia = a.id();
  return tape_of(a).make(a.value() + m, a.requires_grad(),
                         [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g); });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value();
  return tape_of(a).make(std::move(out), any_grad({&a, &b}), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  if (x.cols() != weight.rows() || bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw std::invalid_argument("linear: shape mismatch");
  }
  const int ix = x.id(), iw = weight.id(), ib = bias.id();
  Matrix out = x.value() * weight.value();
  out.rowwise() += bias.value().row(0);
  return tape_of(x).make(std::move(out), any_grad({&x, &weight, &bias}),
                         [ix, iw, ib](Tape& tp, const Matrix& g) {
                           if (tp.requires_grad(ix)) tp.accumulate(ix, g * tp.value(iw).transpose());
                           if (tp.requires_grad(iw)) tp.accumulate(iw, tp.value(ix).transpose() * g);
                           if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum());
                         });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x) { return x > 0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  auto sig = [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return unary(a, sig, [sig](double x) {
    const double s = sig(x);
    return s * (1.0 - s);
  });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double x) {
                 const double t = std::tanh(x);
                 return 1.0 - t * t;
               });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var abs(const Var& a) {
  return unary(a, [](double x) { return std::abs(x); },
               [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var sqrt(const Var& a) {
  return unary(a, [](double x) { return std::sqrt(x); },
               [](double x) { return 0.5 / std::sqrt(x); });
}

Var sin(const Var& a) {
  return unary(a, [](double x) { return std::sin(x); }, [](double x) { return std::cos(x); });
}

Var cos(const Var& a) {
  return unary(a, [](double x) { return std::cos(x); }, [](double x) { return -std::sin(x); });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var softplus(const Var& a) {
  return unary(a,
               [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
               [](double x) {
                 if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                 const double e = std::exp(x);
                 return e / (1.0 + e);
               });
}

Var softmax_rows(const Var& a) {
  Matrix out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  const int ia = a.id();
  Matrix probs = out;
  return tape_of(a).make(std::move(out), a.requires_grad(),
                         [ia, probs](Tape& tp, const Matrix& g) {
                           Matrix ga(g.rows(), g.cols());
                           for (Index r = 0; r < g.rows(); ++r) {
                             const double dot = g.row(r).dot(probs.row(r));
                             ga.row(r) = probs.row(r).array() * (g.row(r).array() - dot);
                           }
                           tp.accumulate(ia, ga);
                         });
}

Var log_softmax_rows(const Var& a) {
  Matrix out = a.value();
  Matrix probs(out.rows(), out.cols());
  for (Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    const double lse = m + std::log((out.row(r).array() - m).exp().sum());
    out.row(r).array() -= lse;
    probs.row(r) = out.row(r).array().exp();
  }
  const int ia = a.id();
  return tape_of(a).make(std::move(out), a.requires_grad(),
                         [ia, probs](Tape& tp, const Matrix& g) {
                           Matrix ga(g.rows(), g.cols());
                           for (Index r = 0; r < g.rows(); ++r) {
                             ga.row(r) = g.row(r) - probs.row(r) * g.row(r).sum();
                           }
                           tp.accumulate(ia, ga);
                         });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index rows = x.rows(), cols = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != cols || beta.rows() != 1 || beta.cols() != cols) {
    throw std::invalid_argument("layer_norm_rows: shape mismatch");
  }
  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  const Matrix& xv = x.value();
  for (Index r = 0; r < rows; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape_of(x).make(
      std::move(out), any_grad({&x, &gamma, &beta}),
      [ix, ig, ib, xhat, inv_std](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(ig)) tp.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum());
        if (tp.requires_grad(ix)) {
          const auto& gam = tp.value(ig);
          Matrix gx(g.rows(), g.cols());
          const double n = static_cast<double>(g.cols());
          for (Index r = 0; r < g.rows(); ++r) {
            Eigen::RowVectorXd gh = g.row(r).cwiseProduct(gam.row(0));
            const double mean_gh = gh.mean();
            const double mean_ghx = gh.dot(xhat.row(r)) / n;
            gx.row(r) = inv_std(r) * (gh.array() - mean_gh - xhat.row(r).array() * mean_ghx);
          }
          tp.accumulate(ix, gx);
        }
      });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return tape_of(a).make(std::move(out), a.requires_grad(), [ia, r, c](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(std::max<Index>(a.value().size(), 1));
  return scale(sum(a), 1.0 / n);
}

Var sum_rows(const Var& a) {
  const int ia = a.id();
  const Index r = a.rows();
  return tape_of(a).make(a.value().colwise().sum(), a.requires_grad(),
                         [ia, r](Tape& tp, const Matrix& g) {
                           Matrix ga = g.replicate(r, 1);
                           tp.accumulate(ia, ga);
                         });
}

Var sum_cols(const Var& a) {
  const int ia = a.id();
  const Index c = a.cols();
  return tape_of(a).make(a.value().rowwise().sum(), a.requires_grad(),
                         [ia, c](Tape& tp, const Matrix& g) {
                           Matrix ga = g.replicate(1, c);
                           tp.accumulate(ia, ga);
                         });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Index rows = parts[0].rows();
  Index cols = 0;
  bool grad = false;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    grad = grad || p.requires_grad();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Index>> spans;
  Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    spans.emplace_back(p.id(), offset);
    offset += p.cols();
  }
  return tape_of(parts[0]).make(std::move(out), grad, [spans](Tape& tp, const Matrix& g) {
    for (const auto& [id, off] : spans) {
      if (!tp.requires_grad(id)) continue;
      tp.accumulate(id, g.middleCols(off, tp.value(id).cols()));
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Index cols = parts[0].cols();
  Index rows = 0;
  bool grad = false;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: col mismatch");
    rows += p.rows();
    grad = grad || p.requires_grad();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Index>> spans;
  Index offset = 0;
  for (const Var& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    spans.emplace_back(p.id(), offset);
    offset += p.rows();
  }
  return tape_of(parts[0]).make(std::move(out), grad, [spans](Tape& tp, const Matrix& g) {
    for (const auto& [id, off] : spans) {
      if (!tp.requires_grad(id)) continue;
      tp.accumulate(id, g.middleRows(off, tp.value(id).rows()));
    }
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || start + count > a.cols()) throw std::invalid_argument("slice_cols: out of range");
  const int ia = a.id();
  return tape_of(a).make(a.value().middleCols(start, count), a.requires_grad(),
                         [ia, start, count](Tape& tp, const Matrix& g) {
                           tp.mutable_grad(ia).middleCols(start, count) += g;
                         });
}

Var gather_rows(const Var& a, std::span<const int> index) {
  const Index cols = a.cols();
  Matrix out(static_cast<Index>(index.size()), cols);
  const Matrix& av = a.value();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= av.rows()) throw std::out_of_range("gather_rows: bad index");
    out.row(static_cast<Index>(i)) = av.row(index[i]);
  }
  const int ia = a.id();
  std::vector<int> idx(index.begin(), index.end());
  return tape_of(a).make(std::move(out), a.requires_grad(), [ia, idx](Tape& tp, const Matrix& g) {
    Matrix& ga = tp.mutable_grad(ia);
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Index>(i));
  });
}

Var scatter_add_rows(const Var& a, std::span<const int> index, Index out_rows) {
  if (static_cast<Index>(index.size()) != a.rows()) {
    throw std::invalid_argument("scatter_add_rows: index size mismatch");
  }
  Matrix out = Matrix::Zero(out_rows, a.cols());
  const Matrix& av = a.value();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= out_rows) throw std::out_of_range("scatter_add_rows: bad index");
    out.row(index[i]) += av.row(static_cast<Index>(i));
  }
  const int ia = a.id();
  std::vector<int> idx(index.begin(), index.end());
  return tape_of(a).make(std::move(out), a.requires_grad(), [ia, idx](Tape& tp, const Matrix& g) {
    Matrix ga(static_cast<Index>(idx.size()), g.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(static_cast<Index>(i)) = g.row(idx[i]);
    tp.accumulate(ia, ga);
  });
}

Var set_rows(const Var& base, std::span<const int> index, const Var& rows) {
  if (static_cast<Index>(index.size()) != rows.rows() || rows.cols() != base.cols()) {
    throw std::invalid_argument("set_rows: shape mismatch");
  }
  Matrix out = base.value();
  std::vector<char> replaced(static_cast<std::size_t>(base.rows()), 0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    out.row(index[i]) = rows.value().row(static_cast<Index>(i));
    replaced[static_cast<std::size_t>(index[i])] = 1;
  }
  const int ib = base.id(), ir = rows.id();
  std::vector<int> idx(index.begin(), index.end());
  return tape_of(base).make(std::move(out), any_grad({&base, &rows}),
                            [ib, ir, idx, replaced](Tape& tp, const Matrix& g) {
                              if (tp.requires_grad(ib)) {
                                Matrix& gb = tp.mutable_grad(ib);
                                for (std::size_t r = 0; r < replaced.size(); ++r) {
                                  if (!replaced[r]) gb.row(static_cast<Index>(r)) += g.row(static_cast<Index>(r));
                                }
                              }
                              if (tp.requires_grad(ir)) {
                                Matrix gr(static_cast<Index>(idx.size()), g.cols());
                                for (std::size_t i = 0; i < idx.size(); ++i) {
                                  gr.row(static_cast<Index>(i)) = g.row(idx[i]);
                                }
                                tp.accumulate(ir, gr);
                              }
                            });
}

Var reshape(const Var& a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) throw std::invalid_argument("reshape: size mismatch");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return tape_of(a).make(std::move(out), a.requires_grad(), [ia, r, c](Tape& tp, const Matrix& g) {
    Matrix ga = Eigen::Map<const Matrix>(g.data(), r, c);
    tp.accumulate(ia, ga);
  });
}

Var stop_gradient(const Var& a) { return tape_of(a).constant(a.value()); }

Var attention(const Var& q, const Var& k, const Var& v,
              const std::vector<std::vector<int>>& key_sets, int heads, AttentionTrace* trace) {
  const Index mq = q.rows();
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows() ||
      static_cast<Index>(key_sets.size()) != mq || heads <= 0 || d % heads != 0) {
    throw std::invalid_argument("attention: shape mismatch");
  }
  const Index dh = d / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

  // Flattened key lists: keys of query i are keys[offset[i] .. offset[i+1]).
  auto offset = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(mq) + 1, 0);
  for (Index i = 0; i < mq; ++i)
    (*offset)[i + 1] = (*offset)[i] + static_cast<Index>(key_sets[static_cast<std::size_t>(i)].size());
  const Index total_keys = offset->back();
  auto keys = std::make_shared<std::vector<int>>();
  keys->reserve(static_cast<std::size_t>(total_keys));
  for (const auto& ks : key_sets) {
    for (int key : ks) {
      if (key < 0 || key >= k.rows()) throw std::invalid_argument("attention: key index out of range");
      keys->push_back(key);
    }
  }

  const double* qp = q.value().data();
  const double* kp = k.value().data();
  const double* vp = v.value().data();
  Matrix out = Matrix::Zero(mq, d);
  double* op = out.data();
  // weights[h * total_keys + offset[i] + j]
  auto weights = std::make_shared<std::vector<double>>(static_cast<std::size_t>(heads * total_keys));
  for (int h = 0; h < heads; ++h) {
    const Index c0 = h * dh;
    double* wh = weights->data() + h * total_keys;
    for (Index i = 0; i < mq; ++i) {
      const Index begin = (*offset)[i], end = (*offset)[i + 1];
      if (begin == end) continue;
      const double* qi = qp + i * d + c0;
      double max_score = -std::numeric_limits<double>::infinity();
      for (Index j = begin; j < end; ++j) {
        const double* kj = kp + static_cast<Index>((*keys)[j]) * d + c0;
        double dot = 0.0;
        for (Index c = 0; c < dh; ++c) dot += qi[c] * kj[c];
        wh[j] = scale_factor * dot;
        max_score = std::max(max_score, wh[j]);
      }
      double total = 0.0;
      for (Index j = begin; j < end; ++j) {
        wh[j] = std::exp(wh[j] - max_score);
        total += wh[j];
      }
      double* oi = op + i * d + c0;
      for (Index j = begin; j < end; ++j) {
        wh[j] /= total;
        const double* vj = vp + static_cast<Index>((*keys)[j]) * d + c0;
        for (Index c = 0; c < dh; ++c) oi[c] += wh[j] * vj[c];
      }
    }
  }
  if (trace) {
    trace->weights.assign(static_cast<std::size_t>(heads), std::vector<std::vector<double>>(static_cast<std::size_t>(mq)));
    for (int h = 0; h < heads; ++h)
      for (Index i = 0; i < mq; ++i) {
        const double* wh = weights->data() + h * total_keys;
        trace->weights[h][i].assign(wh + (*offset)[i], wh + (*offset)[i + 1]);
      }
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return tape_of(q).make(
      std::move(out), any_grad({&q, &k, &v}),
      [iq, ik, iv, keys, offset, weights, heads, dh, d, total_keys, scale_factor](Tape& tp, const Matrix& g) {
        const Matrix& qv2 = tp.value(iq);
        const Matrix& kv2 = tp.value(ik);
        const Matrix& vv2 = tp.value(iv);
        Matrix gq = Matrix::Zero(qv2.rows(), qv2.cols());
        Matrix gk = Matrix::Zero(kv2.rows(), kv2.cols());
        Matrix gv = Matrix::Zero(vv2.rows(), vv2.cols());
        const double *qp2 = qv2.data(), *kp2 = kv2.data(), *vp2 = vv2.data(), *gp = g.data();
        double *gqp = gq.data(), *gkp = gk.data(), *gvp = gv.data();
        std::vector<double> dw;
        for (int h = 0; h < heads; ++h) {
          const Index c0 = h * dh;
          const double* wh = weights->data() + h * total_keys;
          for (Index i = 0; i < qv2.rows(); ++i) {
            const Index begin = (*offset)[i], end = (*offset)[i + 1];
            if (begin == end) continue;
            const double* gi = gp + i * d + c0;
            const double* qi = qp2 + i * d + c0;
            double* gqi = gqp + i * d + c0;
            dw.assign(static_cast<std::size_t>(end - begin), 0.0);
            double weighted = 0.0;
            for (Index j = begin; j < end; ++j) {
              const Index row = static_cast<Index>((*keys)[j]) * d + c0;
              const double* vj = vp2 + row;
              double* gvj = gvp + row;
              double dot = 0.0;
              for (Index c = 0; c < dh; ++c) {
                gvj[c] += wh[j] * gi[c];
                dot += gi[c] * vj[c];
              }
              dw[j - begin] = dot;
              weighted += wh[j] * dot;
            }
            for (Index j = begin; j < end; ++j) {
              const double ds = wh[j] * (dw[j - begin] - weighted) * scale_factor;
              const Index row = static_cast<Index>((*keys)[j]) * d + c0;
              const double* kj = kp2 + row;
              double* gkj = gkp + row;
              for (Index c = 0; c < dh; ++c) {
                gqi[c] += ds * kj[c];
                gkj[c] += ds * qi[c];
              }
            }
          }
        }
        tp.accumulate(iq, gq);
        tp.accumulate(ik, gk);
        tp.accumulate(iv, gv);
      });
}

namespace {

// Unfolds x (H*W x C) into patches ((Ho*Wo) x (k*k*C)).
Matrix im2col(const Matrix& x, int height, int width, int ksize, int stride, int out_h, int out_w) {
  const Index channels = x.cols();
  const int pad = ksize / 2;
  Matrix col = Matrix::Zero(static_cast<Index>(out_h) * out_w, ksize * ksize * channels);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const Index row = static_cast<Index>(oy) * out_w + ox;
      for (int ky = 0; ky < ksize; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < ksize; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= width) continue;
          col.row(row).segment((ky * ksize + kx) * channels, channels) =
              x.row(static_cast<Index>(iy) * width + ix);
        }
      }
    }
  }
  return col;
}

void col2im_add(const Matrix& col, int height, int width, int ksize, int stride, int out_h,
                int out_w, Matrix& gx) {
  const Index channels = gx.cols();
  const int pad = ksize / 2;
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const Index row = static_cast<Index>(oy) * out_w + ox;
      for (int ky = 0; ky < ksize; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < ksize; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= width) continue;
          gx.row(static_cast<Index>(iy) * width + ix) +=
              col.row(row).segment((ky * ksize + kx) * channels, channels);
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, int height, int width, const Var& weight, const Var& bias, int ksize,
           int stride) {
  const Index cin = x.cols();
  if (x.rows() != static_cast<Index>(height) * width || weight.rows() != ksize * ksize * cin ||
      bias.rows() != 1 || bias.cols() != weight.cols() || ksize % 2 == 0 || stride < 1) {
    throw std::invalid_argument("conv2d: shape mismatch");
  }
  const int out_h = (height - 1) / stride + 1;
  const int out_w = (width - 1) / stride + 1;
  Matrix col = im2col(x.value(), height, width, ksize, stride, out_h, out_w);
  Matrix out = col * weight.value();
  out.rowwise() += bias.value().row(0);
  const int ix = x.id(), iw = weight.id(), ib = bias.id();
  const bool need_col = weight.requires_grad();
  Matrix saved = need_col ? std::move(col) : Matrix();
  return tape_of(x).make(
      std::move(out), any_grad({&x, &weight, &bias}),
      [ix, iw, ib, saved = std::move(saved), height, width, ksize, stride, out_h, out_w](
          Tape& tp, const Matrix& g) {
        if (tp.requires_grad(iw)) tp.accumulate(iw, saved.transpose() * g);
        if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum());
        if (tp.requires_grad(ix)) {
          Matrix gcol = g * tp.value(iw).transpose();
          Matrix& gx = tp.mutable_grad(ix);
          col2im_add(gcol, height, width, ksize, stride, out_h, out_w, gx);
        }
      });
}

Var bilinear_sample(const Var& features, int height, int width, const Eigen::Vector2d& origin,
                    double cell_size, const Var& points) {
  if (features.rows() != static_cast<Index>(height) * width || points.cols() != 2) {
    throw std::invalid_argument("bilinear_sample: shape mismatch");
  }
  const Index m = points.rows();
  const Index c = features.cols();
  const Matrix& fv = features.value();
  const Matrix& pv = points.value();
  Matrix out = Matrix::Zero(m, c);
  struct Sample {
    BilinearTap taps[4];
    double a, b;
  };
  std::vector<Sample> samples(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) {
    Sample& s = samples[static_cast<std::size_t>(i)];
    Eigen::Vector2d frac;
    bilinear_taps(height, width, origin, cell_size, Eigen::Vector2d(pv(i, 0), pv(i, 1)), s.taps,
                  &frac);
    s.a = frac.x();
    s.b = frac.y();
    for (const auto& tap : s.taps) {
      if (tap.index >= 0) out.row(i) += tap.weight * fv.row(tap.index);
    }
  }
  const int ifeat = features.id(), ipts = points.id();
  return tape_of(features).make(
      std::move(out), any_grad({&features, &points}),
      [ifeat, ipts, samples, cell_size, c](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(ifeat)) {
          Matrix& gf = tp.mutable_grad(ifeat);
          for (std::size_t i = 0; i < samples.size(); ++i) {
            for (const auto& tap : samples[i].taps) {
              if (tap.index >= 0) gf.row(tap.index) += tap.weight * g.row(static_cast<Index>(i));
            }
          }
        }
        if (tp.requires_grad(ipts)) {
          const Matrix& fv2 = tp.value(ifeat);
          Matrix gp = Matrix::Zero(static_cast<Index>(samples.size()), 2);
          Eigen::RowVectorXd zero = Eigen::RowVectorXd::Zero(c);
          for (std::size_t i = 0; i < samples.size(); ++i) {
            const Sample& s = samples[i];
            auto tap_value = [&](int k) -> Eigen::RowVectorXd {
              return s.taps[k].index >= 0 ? Eigen::RowVectorXd(fv2.row(s.taps[k].index)) : zero;
            };
            // taps: 0=(r0,c0) 1=(r0,c0+1) 2=(r0+1,c0) 3=(r0+1,c0+1)
            const Eigen::RowVectorXd f00 = tap_value(0), f01 = tap_value(1), f10 = tap_value(2),
                                     f11 = tap_value(3);
            const Eigen::RowVectorXd du = (1 - s.b) * (f01 - f00) + s.b * (f11 - f10);
            const Eigen::RowVectorXd dv = (1 - s.a) * (f10 - f00) + s.a * (f11 - f01);
            gp(static_cast<Index>(i), 0) = g.row(static_cast<Index>(i)).dot(du) / cell_size;
            gp(static_cast<Index>(i), 1) = g.row(static_cast<Index>(i)).dot(dv) / cell_size;
          }
          tp.accumulate(ipts, gp);
        }
      });
}

}  // namespace detra::ag
