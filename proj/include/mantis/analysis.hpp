#pragma once

#include "mantis/core.hpp"
#include "mantis/saa.hpp"
#include "mantis/ssm.hpp"

#include <Eigen/SVD>

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace mantis {

/// Block lower-triangular transfer operator. blocks[t][i] (i <= t) maps the
/// input at step i to the output at step t; blocks with i > t are absent.
struct TransferMatrix {
  std::size_t n = 0;
  std::vector<std::vector<Matrix>> blocks;

  const Matrix& at(std::size_t t, std::size_t i) const {
    if (i > t || t >= n) throw ArgumentError("transfer block outside the lower triangle");
    return blocks[t][i];
  }

  /// y_t = sum_{i <= t} W_{t,i} x_i, x stacked as n x d rows.
  Matrix apply(const Matrix& x) const {
    if (static_cast<std::size_t>(x.rows()) != n) throw ArgumentError("transfer apply: length mismatch");
    Matrix y = Matrix::Zero(x.rows(), n ? blocks[0][0].rows() : 0);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t i = 0; i <= t; ++i)
        y.row(static_cast<Eigen::Index>(t)).noalias() +=
            (blocks[t][i] * x.row(static_cast<Eigen::Index>(i)).transpose()).transpose();
    return y;
  }
};

/// W_{t,i} = C_t (prod_{j=i+1..t} A_hat_j) B_hat_i, product in time order,
/// empty product = identity. The state space is (channel, state) pairs, so
/// C_t is channels x (channels N), B_hat_i is (channels N) x channels, and
/// every transition is diagonal; everything is built densely on purpose.
inline TransferMatrix build_transfer_matrix(const std::vector<DiscreteStep>& steps) {
  TransferMatrix tm;
  tm.n = steps.size();
  if (steps.empty()) return tm;
  const Eigen::Index ch = steps.front().a_hat.rows(), N = steps.front().a_hat.cols(), S = ch * N;
  auto flat = [N](Eigen::Index c, Eigen::Index i) { return c * N + i; };

  std::vector<Matrix> c_op(tm.n), b_op(tm.n);
  std::vector<Vector> a_diag(tm.n);
  for (std::size_t t = 0; t < tm.n; ++t) {
    const DiscreteStep& s = steps[t];
    if (s.a_hat.rows() != ch || s.a_hat.cols() != N || s.b_hat.rows() != ch || s.b_hat.cols() != N ||
        s.c.size() != N)
      throw ArgumentError("build_transfer_matrix: inconsistent operator shapes at step " + std::to_string(t));
    c_op[t] = Matrix::Zero(ch, S);
    b_op[t] = Matrix::Zero(S, ch);
    a_diag[t].resize(S);
    for (Eigen::Index c = 0; c < ch; ++c)
      for (Eigen::Index i = 0; i < N; ++i) {
        c_op[t](c, flat(c, i)) = s.c[i];
        b_op[t](flat(c, i), c) = s.b_hat(c, i);
        a_diag[t][flat(c, i)] = s.a_hat(c, i);
      }
  }

  tm.blocks.resize(tm.n);
  for (std::size_t t = 0; t < tm.n; ++t) {
    tm.blocks[t].resize(t + 1);
    for (std::size_t i = 0; i <= t; ++i) {
      Vector prod = Vector::Ones(S);
      for (std::size_t j = i + 1; j <= t; ++j) prod = prod.cwiseProduct(a_diag[j]);
      tm.blocks[t][i] = c_op[t] * (prod.asDiagonal() * b_op[i]);
    }
  }
  return tm;
}

/// Count of singular values above rel_tol * sigma_max.
inline std::size_t numerical_rank(const Matrix& m, double rel_tol = 1e-10) {
  if (m.size() == 0) return 0;
  const Eigen::MatrixXd dense = m;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(dense);
  const Vector& s = svd.singularValues();
  if (s.size() == 0 || s[0] == 0.0) return 0;
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s[i] > rel_tol * s[0]) ++rank;
  return rank;
}

inline std::size_t support_size(const Vector& u) {
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < u.size(); ++i)
    if (u[i] != 0.0) ++k;
  return k;
}

/// U diag(u) V, the m x m operator-space perturbation of one step.
inline Matrix operator_perturbation(const Matrix& mod_u_mat, const Vector& u, const Matrix& mod_v_mat) {
  return mod_u_mat * u.asDiagonal() * mod_v_mat;
}

struct KernelPerturbation {
  std::vector<std::vector<Matrix>> delta_w;  // delta_w[t][i], i <= t
  std::vector<Matrix> delta_ops;             // per step, when controls were supplied
  std::vector<std::size_t> ranks;
  std::vector<std::size_t> supports;
  double max_abs_delta_w = 0.0;
};

/// Delta W_{t,i} = W_{t,i} - W0_{t,i}; with controls and U, V also the
/// per-step operator perturbation and its numerical rank.
inline KernelPerturbation kernel_perturbation(const TransferMatrix& frozen, const TransferMatrix& controlled,
                                              const std::vector<Vector>* controls = nullptr,
                                              const Matrix* mod_u_mat = nullptr, const Matrix* mod_v_mat = nullptr) {
  if (frozen.n != controlled.n) throw ArgumentError("kernel_perturbation: length mismatch");
  KernelPerturbation out;
  out.delta_w.resize(frozen.n);
  for (std::size_t t = 0; t < frozen.n; ++t) {
    out.delta_w[t].resize(t + 1);
    for (std::size_t i = 0; i <= t; ++i) {
      const Matrix& a = controlled.blocks[t][i];
      const Matrix& b = frozen.blocks[t][i];
      if (a.rows() != b.rows() || a.cols() != b.cols()) throw ArgumentError("kernel_perturbation: block shape mismatch");
      out.delta_w[t][i] = a - b;
      out.max_abs_delta_w = std::max(out.max_abs_delta_w, out.delta_w[t][i].cwiseAbs().maxCoeff());
    }
  }
  if (controls && mod_u_mat && mod_v_mat) {
    for (const Vector& u : *controls) {
      out.delta_ops.push_back(operator_perturbation(*mod_u_mat, u, *mod_v_mat));
      out.ranks.push_back(numerical_rank(out.delta_ops.back()));
      out.supports.push_back(support_size(u));
    }
  }
  return out;
}

struct DeviationReport {
  std::vector<double> deviation;  // ||h_t - h0_t||_2, t = 1..n
  std::vector<double> bound;
  double rho = 0.0;
  double eps_a = 0.0;
  double eps_b = 0.0;
  double h_max = 0.0;
  double x_max = 0.0;
  bool precondition_met = false;
  bool pass = false;
  std::size_t violations = 0;
};

namespace detail {

inline double frobenius(const Matrix& h) { return h.norm(); }

// Operator 2-norm of x -> (B_hat[c, :] x_c)_c: the largest row norm.
inline double input_map_norm(const Matrix& b_hat) { return b_hat.rowwise().norm().maxCoeff(); }

}  // namespace detail

/// Checks ||dh_t|| <= rho^t ||dh_0|| + (1 - rho^t)/(1 - rho) (eps_A H + eps_B X)
/// with dh_0 = 0 and every constant measured from the two runs. Comparisons
/// allow a 1e-12 relative slack for rounding.
inline DeviationReport deviation_bound_check(const Matrix& x, const std::vector<DiscreteStep>& frozen,
                                             const std::vector<DiscreteStep>& adapted) {
  if (frozen.size() != adapted.size() || static_cast<std::size_t>(x.rows()) != frozen.size())
    throw ArgumentError("deviation_bound_check: length mismatch");
  DeviationReport rep;
  const ScanResult s0 = selective_scan(x, frozen);
  const ScanResult s1 = selective_scan(x, adapted);
  for (std::size_t t = 0; t < frozen.size(); ++t) {
    rep.rho = std::max(rep.rho, frozen[t].a_hat.cwiseAbs().maxCoeff());
    rep.eps_a = std::max(rep.eps_a, (adapted[t].a_hat - frozen[t].a_hat).cwiseAbs().maxCoeff());
    rep.eps_b = std::max(rep.eps_b, detail::input_map_norm(adapted[t].b_hat - frozen[t].b_hat));
    rep.h_max = std::max(rep.h_max, detail::frobenius(s1.h[t]));
    rep.x_max = std::max(rep.x_max, x.row(static_cast<Eigen::Index>(t)).norm());
  }
  rep.precondition_met = rep.rho < 1.0;
  const double drive = rep.eps_a * rep.h_max + rep.eps_b * rep.x_max;
  for (std::size_t t = 0; t < frozen.size(); ++t) {
    const double dev = detail::frobenius(s1.h[t] - s0.h[t]);
    const double steps = static_cast<double>(t + 1);
    const double b = rep.precondition_met ? (1.0 - std::pow(rep.rho, steps)) / (1.0 - rep.rho) * drive
                                          : std::numeric_limits<double>::infinity();
    rep.deviation.push_back(dev);
    rep.bound.push_back(b);
    if (rep.precondition_met && dev > b * (1.0 + 1e-12) + 1e-300) ++rep.violations;
  }
  rep.pass = rep.precondition_met && rep.violations == 0;
  return rep;
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

inline LinearFit fit_line(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw ArgumentError("fit_line needs at least two points");
  const double k = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) mx += xs[i], my += ys[i];
  mx /= k;
  my /= k;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = ys[i] - (f.intercept + f.slope * xs[i]);
    ss_res += r * r;
  }
  f.r2 = syy > 0 ? 1.0 - ss_res / syy : 1.0;
  return f;
}

struct ComplexityTable {
  std::vector<std::size_t> lengths;
  std::vector<double> seconds;
  LinearFit fit;
};

/// Times `forward(n)` for each length (best of `repeats`) and fits a line.
/// Repeats sweep all lengths in turn, so a slow stretch of machine time
/// lands on every length instead of one. One untimed sweep warms caches and
/// the allocator first.
inline ComplexityTable complexity_probe(const std::function<void(std::size_t)>& forward,
                                        const std::vector<std::size_t>& lengths, int repeats = 3) {
  for (std::size_t i = 1; i < lengths.size(); ++i)
    if (lengths[i] <= lengths[i - 1]) throw ArgumentError("complexity lengths must be strictly increasing");
  ComplexityTable out;
  out.lengths = lengths;
  out.seconds.assign(lengths.size(), std::numeric_limits<double>::infinity());
  for (std::size_t n : lengths) forward(n);
  for (int r = 0; r < std::max(1, repeats); ++r) {
    for (std::size_t i = 0; i < lengths.size(); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      forward(lengths[i]);
      const auto t1 = std::chrono::steady_clock::now();
      out.seconds[i] = std::min(out.seconds[i], std::chrono::duration<double>(t1 - t0).count());
    }
  }
  std::vector<double> xs(lengths.begin(), lengths.end());
  if (lengths.size() >= 2) out.fit = fit_line(xs, out.seconds);
  return out;
}

}  // namespace mantis
