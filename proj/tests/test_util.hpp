#pragma once

// Hand-rolled generators shared by the property tests.

#include "mantis/autodiff.hpp"
#include "mantis/core.hpp"
#include "mantis/geometry.hpp"
#include "mantis/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace mantis::testing {

inline PointCloud random_cloud(Rng& rng, std::size_t m, double spread = 1.0) {
  PointCloud c;
  for (std::size_t i = 0; i < m; ++i) c.points.emplace_back(spread * rng.normal(), spread * rng.normal(), spread * rng.normal());
  return c;
}

// Points on a small integer lattice, so distance ties are common.
inline PointCloud lattice_cloud(Rng& rng, std::size_t m, int side = 4) {
  PointCloud c;
  for (std::size_t i = 0; i < m; ++i)
    c.points.emplace_back(static_cast<double>(rng.below(side)), static_cast<double>(rng.below(side)),
                          static_cast<double>(rng.below(side)));
  return c;
}

inline Vector random_vector(Rng& rng, Eigen::Index n, double sd = 1.0) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = sd * rng.normal();
  return v;
}

// A random diagonal selective system: transitions in (0, rho_max], arbitrary
// input maps and readouts.
inline std::vector<DiscreteStep> random_system(Rng& rng, std::size_t n, Eigen::Index ch, Eigen::Index state,
                                               double rho_max = 0.99) {
  std::vector<DiscreteStep> steps(n);
  for (auto& s : steps) {
    s.a_hat.resize(ch, state);
    for (Eigen::Index i = 0; i < s.a_hat.size(); ++i) s.a_hat.data()[i] = rng.uniform(0.0, rho_max);
    s.b_hat = rng.normal_matrix(ch, state, 1.0);
    s.c = random_vector(rng, state);
  }
  return steps;
}

// Largest relative error between tape gradients and central differences of
// a scalar function of several matrix inputs. Inputs are perturbed in place
// and restored.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double max_gradient_error(std::vector<Matrix>& inputs, const ScalarFn& f, double h = 1e-6,
                                 double floor = 1e-6) {
  std::vector<Matrix> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (auto& m : inputs) vars.push_back(tape.variable_ref(m));
    Var out = f(tape, vars);
    tape.backward(out);
    for (auto& v : vars) analytic.push_back(tape.has_grad(v.id) ? tape.grad(v) : Matrix::Zero(v.rows(), v.cols()));
  }
  auto eval = [&] {
    Tape tape(false);
    std::vector<Var> vars;
    for (auto& m : inputs) vars.push_back(tape.constant_ref(m));
    return f(tape, vars).scalar();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      double& x = inputs[k].data()[i];
      const double x0 = x;
      x = x0 + h;
      const double fp = eval();
      x = x0 - h;
      const double fm = eval();
      x = x0;
      const double fd = (fp - fm) / (2 * h);
      const double a = analytic[k].data()[i];
      worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor}));
    }
  return worst;
}

}  // namespace mantis::testing
