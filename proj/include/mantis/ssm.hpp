#pragma once

#include "mantis/core.hpp"

#include <vector>

namespace mantis {

// (e^z - 1) / z. Near the removable singularity the two-term series is
// exact to double precision (the next term is z^2 / 6 < 2e-17).
inline double expm1_ratio(double z) {
  if (std::abs(z) < 1e-8) return 1.0 + 0.5 * z;
  return std::expm1(z) / z;
}

// Derivative of expm1_ratio, given e^z and the ratio itself.
inline double expm1_ratio_grad(double z, double exp_z, double ratio) {
  if (std::abs(z) < 1e-3) return 0.5 + z / 3.0 + z * z / 8.0;
  return (exp_z - ratio) / z;
}

struct ZohResult {
  Vector a_hat;
  Vector b_hat;
};

/// Zero-order hold for a diagonal system: A_hat = exp(a dt),
/// B_hat = (exp(a dt) - 1) / a * B, evaluated as dt * expm1(z)/z * B.
inline ZohResult zoh_discretize(const Vector& a, const Vector& b, double dt) {
  if (!(dt > 0.0)) throw ArgumentError("zoh_discretize: step must be positive");
  if (a.size() != b.size()) throw ArgumentError("zoh_discretize: size mismatch");
  ZohResult out{Vector(a.size()), Vector(a.size())};
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double z = a[i] * dt;
    out.a_hat[i] = std::exp(z);
    out.b_hat[i] = dt * expm1_ratio(z) * b[i];
  }
  return out;
}

/// Discretized operators for one step. Transition and input maps are stored
/// per (channel, state) because Delta differs per channel; the readout is
/// shared by all channels.
struct DiscreteStep {
  Matrix a_hat;  // channels x N
  Matrix b_hat;  // channels x N
  Vector c;      // N
};

struct ScanResult {
  Matrix y;                // n x channels
  std::vector<Matrix> h;   // h[t] is channels x N after step t
};

/// Sequential scan, h_0 = 0:
///   h_t[c, i] = a_hat_t[c, i] h_{t-1}[c, i] + b_hat_t[c, i] x_t[c]
///   y_t[c]    = sum_i c_t[i] h_t[c, i]
inline ScanResult selective_scan(const Matrix& x, const std::vector<DiscreteStep>& steps) {
  const Eigen::Index n = x.rows(), channels = x.cols();
  if (static_cast<std::size_t>(n) != steps.size()) throw ArgumentError("selective_scan: length mismatch");
  ScanResult out;
  out.y.resize(n, channels);
  out.h.reserve(steps.size());
  if (n == 0) return out;
  const Eigen::Index state = steps.front().a_hat.cols();
  Matrix h = Matrix::Zero(channels, state);
  for (Eigen::Index t = 0; t < n; ++t) {
    const DiscreteStep& s = steps[static_cast<std::size_t>(t)];
    if (s.a_hat.rows() != channels || s.a_hat.cols() != state || s.b_hat.rows() != channels ||
        s.b_hat.cols() != state || s.c.size() != state)
      throw ArgumentError("selective_scan: operator shape mismatch at step " + std::to_string(t));
    for (Eigen::Index c = 0; c < channels; ++c) {
      double y = 0.0;
      for (Eigen::Index i = 0; i < state; ++i) {
        h(c, i) = s.a_hat(c, i) * h(c, i) + s.b_hat(c, i) * x(t, c);
        y += s.c[i] * h(c, i);
      }
      out.y(t, c) = y;
    }
    out.h.push_back(h);
  }
  return out;
}

}  // namespace mantis
