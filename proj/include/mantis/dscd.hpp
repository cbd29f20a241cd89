#pragma once

#include "mantis/autodiff.hpp"
#include "mantis/core.hpp"

#include <cmath>
#include <cstddef>

namespace mantis {

inline constexpr double kLogFloor = 1e-12;
inline constexpr double kDegenerateNorm = 1e-12;

struct DscdWeights {
  double alpha = 100.0;
  double beta = 0.05;
  double tau = 1.0;
};

struct LossReport {
  double task = 0.0;
  double feat = 0.0;
  double pred = 0.0;
  double total = 0.0;
  DscdWeights weights;
};

inline LossReport total_loss(double task, double feat, double pred, double alpha, double beta, double tau = 1.0) {
  if (!std::isfinite(task) || !std::isfinite(feat) || !std::isfinite(pred))
    throw NumericError("loss components must be finite");
  return {task, feat, pred, task + alpha * feat + beta * pred, {alpha, beta, tau}};
}

// Counts zero-norm projected features seen by feature losses.
struct DegenerateCounter {
  std::size_t events = 0;
};

namespace detail {

inline RowVector softmax_row(const RowVector& logits, double tau) {
  RowVector s = logits / tau;
  s.array() -= s.maxCoeff();
  s = s.array().exp();
  return s / s.sum();
}

inline RowVector floored_log(const RowVector& p) {
  return p.unaryExpr([](double v) { return std::log(std::max(v, kLogFloor)); });
}

}  // namespace detail

inline RowVector softmax(const RowVector& logits, double tau = 1.0) {
  if (!(tau > 0.0)) throw ArgumentError("temperature must be positive");
  return detail::softmax_row(logits, tau);
}

/// 1/2 KL(p||q) + 1/2 KL(q||p) = 1/2 sum (p - q)(log p - log q), logs floored.
inline double symmetric_kl(const RowVector& p, const RowVector& q) {
  return 0.5 * ((p - q).array() * (detail::floored_log(p) - detail::floored_log(q)).array()).sum();
}

namespace ops {

/// ||a/|a| - b/|b|||^2 for 1 x k rows; 0 when either norm is below 1e-12.
inline Var normalized_sq_distance(Var a, Var b, DegenerateCounter* counter = nullptr) {
  Tape& t = *a.tape;
  expect_shape(b, a.rows(), a.cols(), "normalized_sq_distance rhs");
  const double na = a.value().norm(), nb = b.value().norm();
  Matrix out = Matrix::Zero(1, 1);
  if (na < kDegenerateNorm || nb < kDegenerateNorm) {
    if (counter) ++counter->events;
    return t.constant(std::move(out));
  }
  const RowVector u = a.value().row(0) / na, v = b.value().row(0) / nb;
  const double cos = u.dot(v);
  out(0, 0) = (u - v).squaredNorm();
  return t.op(std::move(out), a.requires_grad() || b.requires_grad(),
              [&t, a, b, u, v, cos, na, nb](const Matrix& g) {
                const double s = g(0, 0);
                t.accumulate(a, (-2.0 * s / na) * (v - cos * u));
                t.accumulate(b, (-2.0 * s / nb) * (u - cos * v));
              });
}

/// Symmetric KL between softmax(l1 / tau) and softmax(l2 / tau).
inline Var prediction_loss(Var l1, Var l2, double tau) {
  if (!(tau > 0.0)) throw ArgumentError("temperature must be positive");
  Tape& t = *l1.tape;
  expect_shape(l1, 1, l1.cols(), "prediction_loss logits");
  expect_shape(l2, 1, l1.cols(), "prediction_loss logits");
  if (!l1.value().allFinite() || !l2.value().allFinite()) throw NumericError("non-finite logits");
  const RowVector p = detail::softmax_row(l1.value().row(0), tau);
  const RowVector q = detail::softmax_row(l2.value().row(0), tau);
  Matrix out(1, 1);
  out(0, 0) = symmetric_kl(p, q);
  return t.op(std::move(out), l1.requires_grad() || l2.requires_grad(), [&t, l1, l2, p, q, tau](const Matrix& g) {
    const RowVector lp = detail::floored_log(p), lq = detail::floored_log(q);
    const Eigen::Index c = p.size();
    RowVector gp(c), gq(c);
    for (Eigen::Index i = 0; i < c; ++i) {
      const double diff = lp[i] - lq[i];
      const double inv_p = p[i] > kLogFloor ? 1.0 / p[i] : 0.0;
      const double inv_q = q[i] > kLogFloor ? 1.0 / q[i] : 0.0;
      gp[i] = 0.5 * (diff + (p[i] - q[i]) * inv_p);
      gq[i] = 0.5 * (-diff - (p[i] - q[i]) * inv_q);
    }
    // softmax Jacobian: dl_i = p_i (g_i - <p, g>) / tau
    const RowVector d1 = p.cwiseProduct((gp.array() - p.dot(gp)).matrix()) / tau;
    const RowVector d2 = q.cwiseProduct((gq.array() - q.dot(gq)).matrix()) / tau;
    t.accumulate(l1, g(0, 0) * d1);
    t.accumulate(l2, g(0, 0) * d2);
  });
}

/// Cross-entropy of a 1 x C logit row against a class index.
inline Var cross_entropy(Var logits, int label) {
  Tape& t = *logits.tape;
  expect_shape(logits, 1, logits.cols(), "cross_entropy logits");
  if (label < 0 || label >= logits.cols()) throw ArgumentError("label out of range for the classifier head");
  const RowVector p = detail::softmax_row(logits.value().row(0), 1.0);
  const RowVector& l = logits.value().row(0);
  const double m = l.maxCoeff();
  Matrix out(1, 1);
  out(0, 0) = -(l[label] - m - std::log((l.array() - m).exp().sum()));
  return t.op(std::move(out), logits.requires_grad(), [&t, logits, p, label](const Matrix& g) {
    RowVector d = p;
    d[label] -= 1.0;
    t.accumulate(logits, g(0, 0) * d);
  });
}

/// Feature consistency on final-layer token sequences through the shared
/// projection `head` (d_proj x d).
inline Var feature_loss(Var z1, Var z2, Var head, DegenerateCounter* counter = nullptr) {
  return normalized_sq_distance(linear(col_mean(z1), head), linear(col_mean(z2), head), counter);
}

}  // namespace ops

}  // namespace mantis
