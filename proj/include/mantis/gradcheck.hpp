#pragma once

#include "mantis/model.hpp"

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

namespace mantis {

namespace detail {

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6e", v);
  return buf;
}

}  // namespace detail

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor: below |g| = 1e-5 the check is effectively absolute at
  // 1e-9, which sits above the central-difference round-off at step 1e-5.
  double floor = 1e-5;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t excluded = 0;
  std::size_t failures = 0;
  double max_rel = 0.0;
  std::string worst;
  std::vector<std::string> failed;  // first few failing coordinates

  bool pass() const { return failures == 0 && checked > 0; }
};

/// Every non-smooth branch decision in a forward pass: the soft-threshold
/// active sets of all steps and the MaxPool winners of the order-aware
/// pooling. A finite-difference stencil that changes this signature
/// straddles a kink and is not compared.
inline std::vector<long> kink_signature(const Model& model, ParamStore& store, const PreparedSample& s) {
  Tape tape(false);
  ParamBinder bind(tape, store);
  std::vector<std::vector<StepTrace>> traces;
  std::vector<Matrix> pre_pool;
  ForwardOptions opt;
  opt.traces = &traces;
  opt.pre_pool = &pre_pool;
  model.forward(bind, s, opt);
  std::vector<long> sig;
  for (const auto& block : traces)
    for (const auto& st : block)
      for (Eigen::Index i = 0; i < st.q.size() && i < st.lambda.size(); ++i)
        sig.push_back(std::abs(st.q[i]) > st.lambda[i] ? 1 : 0);
  for (const auto& m : pre_pool)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      Eigen::Index r = 0;
      m.col(c).maxCoeff(&r);
      sig.push_back(static_cast<long>(r));
    }
  return sig;
}

/// Analytic gradients of the full per-sample objective against central
/// differences, for every coordinate of every trainable tensor.
inline GradCheckReport gradient_check(Model& model, const PreparedSample& s, const DscdWeights& w,
                                      const GradCheckOptions& opt = {}) {
  ParamStore& store = model.store();
  store.zero_grad();
  model.loss(s, w, 1.0);
  const auto sig0 = kink_signature(model, store, s);
  GradCheckReport rep;
  for (auto& p : store) {
    if (!p.trainable) continue;
    const Matrix analytic = p.grad;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& x = p.value.data()[i];
      const double x0 = x;
      x = x0 + opt.step;
      const double fp = model.loss(s, w, 0.0).total;
      const auto sig_p = kink_signature(model, store, s);
      x = x0 - opt.step;
      const double fm = model.loss(s, w, 0.0).total;
      const auto sig_m = kink_signature(model, store, s);
      x = x0;
      if (sig_p != sig0 || sig_m != sig0) {
        ++rep.excluded;
        continue;
      }
      const double fd = (fp - fm) / (2.0 * opt.step);
      const double a = analytic.data()[i];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), opt.floor});
      ++rep.checked;
      if (rel > rep.max_rel) {
        rep.max_rel = rel;
        rep.worst = p.name + "[" + std::to_string(i) + "]";
      }
      if (rel > opt.tolerance) {
        ++rep.failures;
        if (rep.failed.size() < 10)
          rep.failed.push_back(p.name + "[" + std::to_string(i) + "] analytic=" + detail::sci(a) +
                               " fd=" + detail::sci(fd));
      }
    }
  }
  store.zero_grad();
  return rep;
}

}  // namespace mantis
