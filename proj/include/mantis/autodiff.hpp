#pragma once

#include "mantis/core.hpp"

#include <deque>
#include <functional>
#include <string>
#include <vector>

namespace mantis {

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  bool requires_grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool valid() const { return tape != nullptr; }
};

/// Reverse-mode tape over coarse matrix operations. Each node owns (or
/// borrows) its forward value; a node that depends on a gradient-carrying
/// input records a closure that receives the node's output gradient and
/// pushes it to the inputs.
///
/// With recording disabled every node is a constant, so the same operator
/// code doubles as the plain forward path.
class Tape {
 public:
  using Backward = std::function<void(const Matrix& out_grad)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var constant(Matrix value) { return push_node(std::move(value), nullptr, false); }
  // Borrowed constant; `value` must outlive the tape.
  Var constant_ref(const Matrix& value) { return push_node(Matrix(), &value, false); }
  Var variable(Matrix value) { return push_node(std::move(value), nullptr, recording_); }
  Var variable_ref(const Matrix& value) { return push_node(Matrix(), &value, recording_); }

  Var op(Matrix value, bool requires_grad, Backward backward) {
    const bool rg = recording_ && requires_grad;
    Var v = push_node(std::move(value), nullptr, rg);
    if (rg) nodes_[v.id].backward = std::move(backward);
    return v;
  }

  const Matrix& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.borrowed ? *n.borrowed : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }

  // Gradient buffer, zero-initialized on first access.
  Matrix& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      const Matrix& v = value(id);
      n.grad = Matrix::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }
  Matrix& grad(Var v) { return grad(v.id); }

  // Adds `g` into the gradient of `v` if it carries one.
  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    if (nodes_[v.id].requires_grad) grad(v.id) += g;
  }

  void backward(Var loss) {
    if (!recording_) throw InternalError("backward on a non-recording tape");
    const Matrix& v = value(loss.id);
    if (v.rows() != 1 || v.cols() != 1) throw InternalError("backward needs a scalar loss");
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id)(0, 0) += 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* borrowed = nullptr;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push_node(Matrix value, const Matrix* borrowed, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), borrowed, Matrix(), requires_grad, {}});
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  bool recording_;
};

inline const Matrix& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

// ---------------------------------------------------------------------------
// Operators. Row vectors (1 x d) broadcast over rows where noted.

namespace ops {

inline void expect_shape(const Var& v, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (v.rows() != rows || v.cols() != cols)
    throw InternalError(std::string(what) + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                        ", got " + std::to_string(v.rows()) + "x" + std::to_string(v.cols()));
}

inline Var add(Var a, Var b) {
  expect_shape(b, a.rows(), a.cols(), "add");
  Tape& t = *a.tape;
  return t.op(a.value() + b.value(), a.requires_grad() || b.requires_grad(), [&t, a, b](const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

// a (n x d) + row (1 x d) on every row.
inline Var add_row(Var a, Var row) {
  expect_shape(row, 1, a.cols(), "add_row");
  Tape& t = *a.tape;
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.op(std::move(out), a.requires_grad() || row.requires_grad(), [&t, a, row](const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(row, g.colwise().sum());
  });
}

inline Var mul(Var a, Var b) {
  expect_shape(b, a.rows(), a.cols(), "mul");
  Tape& t = *a.tape;
  Matrix out = a.value().cwiseProduct(b.value());
  return t.op(std::move(out), a.requires_grad() || b.requires_grad(), [&t, a, b](const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(b.value()));
    t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

// a (n x d) scaled columnwise by row (1 x d).
inline Var mul_row(Var a, Var row) {
  expect_shape(row, 1, a.cols(), "mul_row");
  Tape& t = *a.tape;
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return t.op(std::move(out), a.requires_grad() || row.requires_grad(), [&t, a, row](const Matrix& g) {
    if (a.requires_grad()) t.grad(a).array() += g.array().rowwise() * row.value().row(0).array();
    if (row.requires_grad()) t.grad(row) += g.cwiseProduct(a.value()).colwise().sum();
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.op(a.value() * s, a.requires_grad(), [&t, a, s](const Matrix& g) { t.accumulate(a, g * s); });
}

/// x W^T (+ b): x is n x in, W is out x in, b is 1 x out.
inline Var linear(Var x, Var w, const Var* b = nullptr) {
  if (x.cols() != w.cols()) throw InternalError("linear: input width does not match weight");
  if (b) expect_shape(*b, 1, w.rows(), "linear bias");
  Tape& t = *x.tape;
  Matrix out = x.value() * w.value().transpose();
  if (b) out.rowwise() += b->value().row(0);
  const bool rg = x.requires_grad() || w.requires_grad() || (b && b->requires_grad());
  Var bias = b ? *b : Var{};
  return t.op(std::move(out), rg, [&t, x, w, bias](const Matrix& g) {
    if (x.requires_grad()) t.grad(x).noalias() += g * w.value();
    if (w.requires_grad()) t.grad(w).noalias() += g.transpose() * x.value();
    if (bias.valid() && bias.requires_grad()) t.grad(bias) += g.colwise().sum();
  });
}
inline Var linear(Var x, Var w, Var b) { return linear(x, w, &b); }

inline Var silu(Var x) {
  Tape& t = *x.tape;
  Matrix out = x.value().unaryExpr([](double v) { return mantis::silu(v); });
  return t.op(std::move(out), x.requires_grad(), [&t, x](const Matrix& g) {
    t.grad(x) += g.cwiseProduct(x.value().unaryExpr([](double v) { return silu_grad(v); }));
  });
}

inline Var relu(Var x) {
  Tape& t = *x.tape;
  Matrix out = x.value().cwiseMax(0.0);
  return t.op(std::move(out), x.requires_grad(), [&t, x](const Matrix& g) {
    t.grad(x) += g.cwiseProduct(x.value().unaryExpr([](double v) { return v > 0 ? 1.0 : 0.0; }));
  });
}

/// Per-row layer normalization with affine gain/shift (1 x d each).
inline Var layer_norm(Var x, Var gain, Var shift, double eps = 1e-5) {
  const Eigen::Index n = x.rows(), d = x.cols();
  expect_shape(gain, 1, d, "layer_norm gain");
  expect_shape(shift, 1, d, "layer_norm shift");
  Tape& t = *x.tape;
  Matrix xhat(n, d);
  Vector inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = x.value().row(i);
    const double mean = row.mean();
    const double var = (row.array() - mean).square().mean();
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (row.array() - mean) * inv_std[i];
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + shift.value().row(0).array();
  const bool rg = x.requires_grad() || gain.requires_grad() || shift.requires_grad();
  return t.op(std::move(out), rg, [&t, x, gain, shift, xhat, inv_std](const Matrix& g) {
    if (gain.requires_grad()) t.grad(gain) += g.cwiseProduct(xhat).colwise().sum();
    if (shift.requires_grad()) t.grad(shift) += g.colwise().sum();
    if (x.requires_grad()) {
      const double d = static_cast<double>(x.cols());
      Matrix& gx = t.grad(x);
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const RowVector gh = g.row(i).cwiseProduct(gain.value().row(0));
        const double mean_gh = gh.sum() / d;
        const double mean_ghx = gh.dot(xhat.row(i)) / d;
        gx.row(i) += inv_std[i] * (gh.array() - mean_gh - xhat.row(i).array() * mean_ghx).matrix();
      }
    }
  });
}

/// Causal depthwise convolution along the sequence (rows):
/// out[t, c] = b[c] + sum_j w[c, j] * x[t - j, c], zero for t - j < 0.
inline Var causal_dwconv(Var x, Var w, Var b) {
  const Eigen::Index n = x.rows(), d = x.cols(), width = w.cols();
  expect_shape(w, d, width, "dwconv weight");
  expect_shape(b, 1, d, "dwconv bias");
  Tape& t = *x.tape;
  Matrix out(n, d);
  for (Eigen::Index s = 0; s < n; ++s) {
    for (Eigen::Index c = 0; c < d; ++c) {
      double acc = b.value()(0, c);
      for (Eigen::Index j = 0; j < width && j <= s; ++j) acc += w.value()(c, j) * x.value()(s - j, c);
      out(s, c) = acc;
    }
  }
  const bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
  return t.op(std::move(out), rg, [&t, x, w, b](const Matrix& g) {
    const Eigen::Index n = x.rows(), d = x.cols(), width = w.cols();
    if (b.requires_grad()) t.grad(b) += g.colwise().sum();
    Matrix* gx = x.requires_grad() ? &t.grad(x) : nullptr;
    Matrix* gw = w.requires_grad() ? &t.grad(w) : nullptr;
    for (Eigen::Index s = 0; s < n; ++s)
      for (Eigen::Index c = 0; c < d; ++c)
        for (Eigen::Index j = 0; j < width && j <= s; ++j) {
          if (gx) (*gx)(s - j, c) += g(s, c) * w.value()(c, j);
          if (gw) (*gw)(c, j) += g(s, c) * x.value()(s - j, c);
        }
  });
}

/// Rows of x picked by index: out[t] = x[index[t]].
inline Var gather_rows(Var x, std::vector<std::size_t> index) {
  Tape& t = *x.tape;
  Matrix out(static_cast<Eigen::Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= static_cast<std::size_t>(x.rows())) throw InternalError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.value().row(static_cast<Eigen::Index>(index[i]));
  }
  return t.op(std::move(out), x.requires_grad(), [&t, x, index](const Matrix& g) {
    Matrix& gx = t.grad(x);
    for (std::size_t i = 0; i < index.size(); ++i)
      gx.row(static_cast<Eigen::Index>(index[i])) += g.row(static_cast<Eigen::Index>(i));
  });
}

/// Column-wise max over rows -> 1 x d. Gradient routes to the first argmax.
inline Var col_max(Var x) {
  const Eigen::Index n = x.rows(), d = x.cols();
  if (n == 0) throw InternalError("col_max of an empty matrix");
  Tape& t = *x.tape;
  Matrix out(1, d);
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(d));
  for (Eigen::Index c = 0; c < d; ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < n; ++i)
      if (x.value()(i, c) > x.value()(best, c)) best = i;
    arg[static_cast<std::size_t>(c)] = best;
    out(0, c) = x.value()(best, c);
  }
  return t.op(std::move(out), x.requires_grad(), [&t, x, arg](const Matrix& g) {
    Matrix& gx = t.grad(x);
    for (std::size_t c = 0; c < arg.size(); ++c)
      gx(arg[c], static_cast<Eigen::Index>(c)) += g(0, static_cast<Eigen::Index>(c));
  });
}

/// Column-wise mean over rows -> 1 x d.
inline Var col_mean(Var x) {
  Tape& t = *x.tape;
  const double inv = 1.0 / static_cast<double>(x.rows());
  Matrix out = x.value().colwise().sum() * inv;
  return t.op(std::move(out), x.requires_grad(), [&t, x, inv](const Matrix& g) {
    t.grad(x).rowwise() += g.row(0) * inv;
  });
}

/// sum_k w_k * s_k over 1 x 1 scalars.
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.empty() || terms.size() != weights.size()) throw InternalError("weighted_sum: bad arguments");
  Tape& t = *terms.front().tape;
  double total = 0.0;
  bool rg = false;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    expect_shape(terms[k], 1, 1, "weighted_sum term");
    total += weights[k] * terms[k].scalar();
    rg = rg || (weights[k] != 0.0 && terms[k].requires_grad());
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return t.op(std::move(out), rg, [&t, terms, weights](const Matrix& g) {
    for (std::size_t k = 0; k < terms.size(); ++k)
      if (weights[k] != 0.0) t.accumulate(terms[k], g * weights[k]);
  });
}

}  // namespace ops

}  // namespace mantis
