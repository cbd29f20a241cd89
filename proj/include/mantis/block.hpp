#pragma once

#include "mantis/autodiff.hpp"
#include "mantis/core.hpp"
#include "mantis/params.hpp"
#include "mantis/saa.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace mantis {

struct BlockConfig {
  std::size_t d = 96;
  std::size_t state = 16;
  std::size_t conv_width = 4;
  std::size_t dt_rank = 0;  // 0 = ceil(d / 16)

  std::size_t rank() const { return dt_rank ? dt_rank : (d + 15) / 16; }
};

/// Adds one frozen block's tensors under `prefix`.
inline void add_block_params(ParamStore& store, const std::string& prefix, const BlockConfig& cfg, Rng& rng) {
  const auto d = static_cast<Eigen::Index>(cfg.d);
  const auto N = static_cast<Eigen::Index>(cfg.state);
  const auto R = static_cast<Eigen::Index>(cfg.rank());
  const auto w = static_cast<Eigen::Index>(cfg.conv_width);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));

  store.add(prefix + "ln_g", Matrix::Ones(1, d), false);
  store.add(prefix + "ln_b", Matrix::Zero(1, d), false);
  store.add(prefix + "w_in", rng.normal_matrix(d, d, sd), false);
  store.add(prefix + "conv_w", rng.normal_matrix(d, w, 1.0 / std::sqrt(static_cast<double>(w))), false);
  store.add(prefix + "conv_b", Matrix::Zero(1, d), false);
  store.add(prefix + "w_gate", rng.normal_matrix(d, d, sd), false);
  store.add(prefix + "b_gate", Matrix::Zero(1, d), false);
  store.add(prefix + "w_out", rng.normal_matrix(d, d, sd), false);
  store.add(prefix + "w_b", rng.normal_matrix(N, d, sd), false);
  store.add(prefix + "w_c", rng.normal_matrix(N, d, sd), false);
  store.add(prefix + "w_dt_down", rng.normal_matrix(R, d, sd), false);
  store.add(prefix + "w_dt_up", rng.normal_matrix(d, R, 1.0 / std::sqrt(static_cast<double>(R))), false);

  // Step sizes log-uniform in [1e-3, 1e-1], stored through inverse softplus.
  Matrix b_dt(1, d);
  for (Eigen::Index c = 0; c < d; ++c) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    b_dt(0, c) = dt + std::log(-std::expm1(-dt));
  }
  store.add(prefix + "b_dt", std::move(b_dt), false);

  Matrix log_a(d, N);
  for (Eigen::Index c = 0; c < d; ++c)
    for (Eigen::Index i = 0; i < N; ++i) log_a(c, i) = std::log(static_cast<double>(i + 1));
  store.add(prefix + "log_a", std::move(log_a), false);
}

inline ops::SsmVars bind_ssm(ParamBinder& bind, const std::string& prefix) {
  return {bind(prefix + "w_b"),       bind(prefix + "w_c"),  bind(prefix + "w_dt_down"),
          bind(prefix + "w_dt_up"),   bind(prefix + "b_dt"), bind(prefix + "log_a")};
}

inline ops::AdapterVars bind_adapter(ParamBinder& bind, const std::string& prefix) {
  ops::AdapterVars vars{};
  for (std::size_t s = 0; s < kSlotCount; ++s)
    if (auto v = bind.optional(prefix + kSlotNames[s])) vars[s] = *v;
  return vars;
}

struct BlockOptions {
  const SaaConfig* saa = nullptr;  // null = plain selective SSM
  std::string adapter_prefix;      // defaults to `<block prefix>saa.`
  bool force_zero_control = false;
  std::vector<StepTrace>* trace = nullptr;
  Var* scan_input = nullptr;       // receives X (post conv + SiLU) when set
};

/// Z_out = W_out SSM(X) + SiLU(W_gate Z_in + b_gate),
/// X = SiLU(DWConv(W_in LayerNorm(Z_in))).
inline Var block_forward(ParamBinder& bind, const std::string& prefix, Var z_in, Var e,
                         const BlockOptions& opt = {}) {
  Var ln = ops::layer_norm(z_in, bind(prefix + "ln_g"), bind(prefix + "ln_b"));
  Var z_tilde = ops::linear(ln, bind(prefix + "w_in"));
  Var x = ops::silu(ops::causal_dwconv(z_tilde, bind(prefix + "conv_w"), bind(prefix + "conv_b")));
  if (opt.scan_input) *opt.scan_input = x;

  const ops::SsmVars ssm = bind_ssm(bind, prefix);
  SaaConfig plain;
  plain.d = static_cast<std::size_t>(x.cols());
  plain.state = static_cast<std::size_t>(ssm.log_a.cols());
  Var y;
  if (opt.saa) {
    const ops::AdapterVars adapter =
        bind_adapter(bind, opt.adapter_prefix.empty() ? prefix + "saa." : opt.adapter_prefix);
    y = ops::saa_scan(x, e, ssm, &adapter, *opt.saa, opt.force_zero_control, opt.trace);
  } else {
    y = ops::saa_scan(x, e, ssm, nullptr, plain, false, opt.trace);
  }
  Var gate = ops::silu(ops::linear(z_in, bind(prefix + "w_gate"), bind(prefix + "b_gate")));
  return ops::add(ops::linear(y, bind(prefix + "w_out")), gate);
}

}  // namespace mantis
