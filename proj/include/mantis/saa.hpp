#pragma once

#include "mantis/autodiff.hpp"
#include "mantis/core.hpp"
#include "mantis/params.hpp"
#include "mantis/ssm.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace mantis {

enum class ControllerKind { soft, hard, sigmoid, tanh, dense };
enum class FusionKind { add, concat, gated, xattn, concat_mlp };

inline ControllerKind parse_controller(const std::string& s) {
  if (s == "soft") return ControllerKind::soft;
  if (s == "hard") return ControllerKind::hard;
  if (s == "sigmoid") return ControllerKind::sigmoid;
  if (s == "tanh") return ControllerKind::tanh;
  if (s == "dense") return ControllerKind::dense;
  throw ConfigError("unknown controller '" + s + "' (soft, hard, sigmoid, tanh, dense)");
}

inline std::string to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::soft: return "soft";
    case ControllerKind::hard: return "hard";
    case ControllerKind::sigmoid: return "sigmoid";
    case ControllerKind::tanh: return "tanh";
    case ControllerKind::dense: return "dense";
  }
  return "?";
}

inline FusionKind parse_fusion(const std::string& s) {
  if (s == "add") return FusionKind::add;
  if (s == "concat") return FusionKind::concat;
  if (s == "gated") return FusionKind::gated;
  if (s == "xattn") return FusionKind::xattn;
  if (s == "concat_mlp") return FusionKind::concat_mlp;
  throw ConfigError("unknown fusion '" + s + "' (add, concat, gated, xattn, concat_mlp)");
}

inline std::string to_string(FusionKind k) {
  switch (k) {
    case FusionKind::add: return "add";
    case FusionKind::concat: return "concat";
    case FusionKind::gated: return "gated";
    case FusionKind::xattn: return "xattn";
    case FusionKind::concat_mlp: return "concat_mlp";
  }
  return "?";
}

// Which operator partitions receive the low-rank perturbation.
struct OperatorMask {
  bool a = true;
  bool b = true;
  bool c = true;
  bool delta = true;

  // Comma-separated subset of {A, B, C, Delta}.
  static OperatorMask parse(const std::string& s) {
    OperatorMask m{false, false, false, false};
    std::stringstream ss(s);
    std::string item;
    bool any = false;
    while (std::getline(ss, item, ',')) {
      if (item == "A") m.a = true;
      else if (item == "B") m.b = true;
      else if (item == "C") m.c = true;
      else if (item == "Delta") m.delta = true;
      else throw ConfigError("unknown modulated operator '" + item + "' (A, B, C, Delta)");
      any = true;
    }
    if (!any) throw ConfigError("modulated operator set is empty");
    return m;
  }

  std::string name() const {
    std::string s;
    auto add = [&](bool on, const char* n) {
      if (!on) return;
      if (!s.empty()) s += ",";
      s += n;
    };
    add(a, "A");
    add(b, "B");
    add(c, "C");
    add(delta, "Delta");
    return s;
  }

  bool operator==(const OperatorMask&) const = default;
};

struct SaaConfig {
  std::size_t d = 96;      // token width (controller input and order-aware vector)
  std::size_t state = 16;  // N; the pooled hidden vector has d_h = N entries
  std::size_t d_phi = 64;
  std::size_t r = 8;
  ControllerKind controller = ControllerKind::soft;
  FusionKind fusion = FusionKind::concat_mlp;
  OperatorMask modulate;

  std::size_t d_h() const { return state; }
  // Stacked operator vector (log|a| || B || C || Delta pre-activation).
  std::size_t m() const { return 3 * state + 1; }
  // Width of the fused control feature handed to the controller.
  std::size_t control_width() const { return fusion == FusionKind::concat ? 3 * d_phi : d_phi; }
};

// ---------------------------------------------------------------------------
// Tensor layout

enum Slot : std::size_t { wx, wh, we, wf, bf, wg, bg, wq, wk, wv, wo, bo, wd1, wdrv, wgt, mod_u, mod_v, kSlotCount };

inline constexpr std::array<const char*, kSlotCount> kSlotNames = {
    "wx", "wh", "we", "wf", "bf", "wg", "bg", "wq", "wk", "wv", "wo", "bo", "wd1", "wdrv", "wgt", "u", "v"};

struct TensorSpec {
  Slot slot;
  Eigen::Index rows;
  Eigen::Index cols;
};

inline std::vector<TensorSpec> adapter_layout(const SaaConfig& cfg) {
  const auto d = static_cast<Eigen::Index>(cfg.d);
  const auto dh = static_cast<Eigen::Index>(cfg.d_h());
  const auto dp = static_cast<Eigen::Index>(cfg.d_phi);
  const auto r = static_cast<Eigen::Index>(cfg.r);
  const auto m = static_cast<Eigen::Index>(cfg.m());
  const auto dc = static_cast<Eigen::Index>(cfg.control_width());

  std::vector<TensorSpec> specs{{wx, dp, d}, {wh, dp, dh}, {we, dp, d}};
  switch (cfg.fusion) {
    case FusionKind::concat_mlp:
      specs.push_back({wf, dp, 3 * dp});
      specs.push_back({bf, 1, dp});
      break;
    case FusionKind::add:
      specs.push_back({bf, 1, dp});
      break;
    case FusionKind::concat:
      break;
    case FusionKind::gated:
      specs.push_back({wf, dp, 3 * dp});
      specs.push_back({bf, 1, dp});
      specs.push_back({wg, dp, 3 * dp});
      specs.push_back({bg, 1, dp});
      break;
    case FusionKind::xattn:
      specs.push_back({wq, dp, dp});
      specs.push_back({wk, dp, dp});
      specs.push_back({wv, dp, dp});
      specs.push_back({wo, dp, dp});
      specs.push_back({bo, 1, dp});
      break;
  }
  if (cfg.controller == ControllerKind::dense) {
    specs.push_back({wd1, dc, dc});
    specs.push_back({wdrv, r, dc});
  } else {
    specs.push_back({wdrv, r, dc});
    specs.push_back({wgt, r, dc});
  }
  specs.push_back({mod_u, m, r});
  specs.push_back({mod_v, r, m});
  return specs;
}

/// Trainable-parameter tally of one adapter as laid out above.
inline std::size_t count_parameters(const SaaConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : adapter_layout(cfg)) n += static_cast<std::size_t>(s.rows * s.cols);
  return n;
}

// Closed form for the default (concat + MLP fusion, gated soft threshold) adapter.
inline std::size_t saa_parameter_formula(std::size_t d, std::size_t d_h, std::size_t d_phi, std::size_t r,
                                         std::size_t m) {
  return 2 * d_phi * d + d_phi * d_h + 3 * d_phi * d_phi + d_phi + 2 * r * d_phi + 2 * m * r;
}

/// Adds one adapter's tensors as `<prefix><slot name>`. The modulation matrix
/// U starts at zero so the adapted model equals the frozen one at step 0;
/// the driving projection is scaled so roughly half the controls start
/// outside the dead zone and U receives gradient immediately.
inline void add_adapter_params(ParamStore& store, const std::string& prefix, const SaaConfig& cfg, Rng& rng,
                               bool trainable = true) {
  for (const auto& s : adapter_layout(cfg)) {
    Matrix value;
    const double fan_in = static_cast<double>(s.cols);
    switch (s.slot) {
      case bf:
      case bg:
      case bo:
      case mod_u:
        value = Matrix::Zero(s.rows, s.cols);
        break;
      case wdrv:
        value = rng.normal_matrix(s.rows, s.cols, 2.0 / std::sqrt(fan_in));
        break;
      default:
        value = rng.normal_matrix(s.rows, s.cols, 1.0 / std::sqrt(fan_in));
        break;
    }
    store.add(prefix + kSlotNames[s.slot], std::move(value), trainable);
  }
}

/// Borrowed views of one adapter's tensors; absent slots are null.
struct AdapterRefs {
  std::array<const Matrix*, kSlotCount> t{};

  const Matrix& operator[](Slot s) const {
    if (!t[s]) throw InternalError(std::string("adapter tensor '") + kSlotNames[s] + "' is missing");
    return *t[s];
  }
  bool has(Slot s) const { return t[s] != nullptr; }

  static AdapterRefs from_store(const ParamStore& store, const std::string& prefix) {
    AdapterRefs refs;
    for (std::size_t s = 0; s < kSlotCount; ++s) {
      const std::string name = prefix + kSlotNames[s];
      if (store.contains(name)) refs.t[s] = &store.at(name).value;
    }
    return refs;
  }
};

// Gradient sinks, null where the tensor carries no gradient.
struct AdapterGrads {
  std::array<Matrix*, kSlotCount> t{};
};

// Frozen selective-SSM projections of one block.
struct SsmRefs {
  const Matrix* w_b = nullptr;        // N x d
  const Matrix* w_c = nullptr;        // N x d
  const Matrix* w_dt_down = nullptr;  // R x d
  const Matrix* w_dt_up = nullptr;    // d x R
  const Matrix* b_dt = nullptr;       // 1 x d
  const Matrix* log_a = nullptr;      // d x N, A = -exp(log_a)
};

// ---------------------------------------------------------------------------
// Controller pieces

/// Proximal map of sum_i lambda_i |v_i|: sign(q) max(|q| - lambda, 0).
inline Vector soft_threshold(const Vector& q, const Vector& lambda) {
  if (q.size() != lambda.size()) throw InternalError("soft_threshold: size mismatch");
  Vector u(q.size());
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (!(lambda[i] > 0.0))
      throw InternalError("soft_threshold: threshold must be positive, got " + std::to_string(lambda[i]));
    const double mag = std::abs(q[i]) - lambda[i];
    u[i] = mag > 0.0 ? std::copysign(mag, q[i]) : 0.0;
  }
  return u;
}

/// theta + U diag(u) V theta.
inline Vector modulate_operators(const Vector& theta, const Vector& u, const Matrix& mod_u_mat,
                                 const Matrix& mod_v_mat) {
  if (mod_u_mat.rows() != theta.size() || mod_v_mat.cols() != theta.size() || mod_u_mat.cols() != u.size() ||
      mod_v_mat.rows() != u.size())
    throw InternalError("modulate_operators: shape mismatch");
  return theta + mod_u_mat * u.cwiseProduct(mod_v_mat * theta);
}

namespace detail {

inline Vector row_as_vector(const Matrix& m) { return m.row(0).transpose(); }

struct FusionCache {
  Vector p;        // concatenated projections
  Vector pre;      // main pre-activation
  Vector gate;     // gated: gate pre-activation
  Matrix parts;    // xattn: d_phi x 3 (x, h, e)
  Vector query;
  Matrix keys, values;
  Vector attn;
  Vector ctx;
};

inline Vector fusion_forward(const SaaConfig& cfg, const AdapterRefs& a, const Vector& px, const Vector& ph,
                             const Vector& pe, FusionCache& c) {
  const Eigen::Index dp = static_cast<Eigen::Index>(cfg.d_phi);
  switch (cfg.fusion) {
    case FusionKind::concat_mlp: {
      c.p.resize(3 * dp);
      c.p << px, ph, pe;
      c.pre = a[wf] * c.p + row_as_vector(a[bf]);
      return c.pre.unaryExpr([](double v) { return silu(v); });
    }
    case FusionKind::add: {
      c.pre = px + ph + pe + row_as_vector(a[bf]);
      return c.pre.unaryExpr([](double v) { return silu(v); });
    }
    case FusionKind::concat: {
      c.p.resize(3 * dp);
      c.p << px, ph, pe;
      return c.p;
    }
    case FusionKind::gated: {
      c.p.resize(3 * dp);
      c.p << px, ph, pe;
      c.pre = a[wf] * c.p + row_as_vector(a[bf]);
      c.gate = a[wg] * c.p + row_as_vector(a[bg]);
      Vector out(dp);
      for (Eigen::Index i = 0; i < dp; ++i) out[i] = silu(c.pre[i]) * sigmoid(c.gate[i]);
      return out;
    }
    case FusionKind::xattn: {
      c.parts.resize(dp, 3);
      c.parts.col(0) = px;
      c.parts.col(1) = ph;
      c.parts.col(2) = pe;
      c.query = a[wq] * px;
      c.keys = a[wk] * c.parts;
      c.values = a[wv] * c.parts;
      const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dp));
      Vector scores = (c.keys.transpose() * c.query) * inv_sqrt;
      scores.array() -= scores.maxCoeff();
      c.attn = scores.array().exp();
      c.attn /= c.attn.sum();
      c.ctx = c.values * c.attn;
      c.pre = a[wo] * c.ctx + row_as_vector(a[bo]);
      return c.pre.unaryExpr([](double v) { return silu(v); });
    }
  }
  throw InternalError("unhandled fusion kind");
}

// Accumulates weight gradients; returns (dpx, dph, dpe).
inline std::array<Vector, 3> fusion_backward(const SaaConfig& cfg, const AdapterRefs& a, AdapterGrads& g,
                                             const FusionCache& c, const Vector& dphi) {
  const Eigen::Index dp = static_cast<Eigen::Index>(cfg.d_phi);
  auto split = [dp](const Vector& dp_all) {
    return std::array<Vector, 3>{dp_all.segment(0, dp), dp_all.segment(dp, dp), dp_all.segment(2 * dp, dp)};
  };
  switch (cfg.fusion) {
    case FusionKind::concat_mlp: {
      Vector dpre = dphi.cwiseProduct(c.pre.unaryExpr([](double v) { return silu_grad(v); }));
      if (g.t[wf]) g.t[wf]->noalias() += dpre * c.p.transpose();
      if (g.t[bf]) g.t[bf]->row(0) += dpre.transpose();
      return split(a[wf].transpose() * dpre);
    }
    case FusionKind::add: {
      Vector dpre = dphi.cwiseProduct(c.pre.unaryExpr([](double v) { return silu_grad(v); }));
      if (g.t[bf]) g.t[bf]->row(0) += dpre.transpose();
      return {dpre, dpre, dpre};
    }
    case FusionKind::concat:
      return split(dphi);
    case FusionKind::gated: {
      Vector dpre(dp), dgate(dp);
      for (Eigen::Index i = 0; i < dp; ++i) {
        const double s = sigmoid(c.gate[i]);
        dpre[i] = dphi[i] * s * silu_grad(c.pre[i]);
        dgate[i] = dphi[i] * silu(c.pre[i]) * s * (1.0 - s);
      }
      if (g.t[wf]) g.t[wf]->noalias() += dpre * c.p.transpose();
      if (g.t[bf]) g.t[bf]->row(0) += dpre.transpose();
      if (g.t[wg]) g.t[wg]->noalias() += dgate * c.p.transpose();
      if (g.t[bg]) g.t[bg]->row(0) += dgate.transpose();
      return split(a[wf].transpose() * dpre + a[wg].transpose() * dgate);
    }
    case FusionKind::xattn: {
      const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dp));
      Vector dpre = dphi.cwiseProduct(c.pre.unaryExpr([](double v) { return silu_grad(v); }));
      if (g.t[wo]) g.t[wo]->noalias() += dpre * c.ctx.transpose();
      if (g.t[bo]) g.t[bo]->row(0) += dpre.transpose();
      const Vector dctx = a[wo].transpose() * dpre;
      const Vector dattn = c.values.transpose() * dctx;  // 3
      const Matrix dvalues = dctx * c.attn.transpose();  // dp x 3
      const double mix = c.attn.dot(dattn);
      Vector dscores(3);
      for (Eigen::Index j = 0; j < 3; ++j) dscores[j] = c.attn[j] * (dattn[j] - mix) * inv_sqrt;
      const Vector dquery = c.keys * dscores;
      const Matrix dkeys = c.query * dscores.transpose();  // dp x 3
      if (g.t[wv]) g.t[wv]->noalias() += dvalues * c.parts.transpose();
      if (g.t[wk]) g.t[wk]->noalias() += dkeys * c.parts.transpose();
      if (g.t[wq]) g.t[wq]->noalias() += dquery * c.parts.col(0).transpose();
      Matrix dparts = a[wv].transpose() * dvalues + a[wk].transpose() * dkeys;
      dparts.col(0) += a[wq].transpose() * dquery;
      return {dparts.col(0), dparts.col(1), dparts.col(2)};
    }
  }
  throw InternalError("unhandled fusion kind");
}

struct ControllerCache {
  Vector q;       // driving signal (soft/hard/sigmoid/tanh)
  Vector gate;    // W_gt phi
  Vector lambda;  // soft/hard thresholds
  Vector hidden_pre;  // dense
  Vector hidden;
};

inline Vector controller_forward(const SaaConfig& cfg, const AdapterRefs& a, const Vector& phi,
                                 ControllerCache& c) {
  switch (cfg.controller) {
    case ControllerKind::soft:
    case ControllerKind::hard: {
      c.q = a[wdrv] * phi;
      c.gate = a[wgt] * phi;
      // -log sigmoid(g) = softplus(-g). For g > ~745 the exact value is below
      // the smallest subnormal and softplus returns 0; round up to keep it positive.
      c.lambda = c.gate.unaryExpr(
          [](double v) { return std::max(softplus(-v), std::numeric_limits<double>::denorm_min()); });
      if (cfg.controller == ControllerKind::soft) return soft_threshold(c.q, c.lambda);
      Vector u(c.q.size());
      for (Eigen::Index i = 0; i < u.size(); ++i) u[i] = std::abs(c.q[i]) > c.lambda[i] ? c.q[i] : 0.0;
      return u;
    }
    case ControllerKind::sigmoid: {
      c.q = a[wdrv] * phi;
      c.gate = a[wgt] * phi;
      return c.q.cwiseProduct(c.gate.unaryExpr([](double v) { return sigmoid(v); }));
    }
    case ControllerKind::tanh: {
      c.q = a[wdrv] * phi;
      c.gate = a[wgt] * phi;
      return c.q.cwiseProduct(c.gate.unaryExpr([](double v) { return std::tanh(v); }));
    }
    case ControllerKind::dense: {
      c.hidden_pre = a[wd1] * phi;
      c.hidden = c.hidden_pre.unaryExpr([](double v) { return silu(v); });
      c.q = a[wdrv] * c.hidden;
      return c.q;
    }
  }
  throw InternalError("unhandled controller kind");
}

// Returns d loss / d phi. The soft threshold uses the dead-zone side at the
// kink (derivative 0). The hard threshold trains through a straight-through
// surrogate: identity in q, soft-threshold slope in lambda.
inline Vector controller_backward(const SaaConfig& cfg, const AdapterRefs& a, AdapterGrads& g,
                                  const ControllerCache& c, const Vector& phi, const Vector& du) {
  const Eigen::Index r = du.size();
  switch (cfg.controller) {
    case ControllerKind::soft:
    case ControllerKind::hard: {
      Vector dq(r), dgate(r);
      for (Eigen::Index i = 0; i < r; ++i) {
        const bool active = std::abs(c.q[i]) > c.lambda[i];
        const double sign = c.q[i] > 0 ? 1.0 : -1.0;
        if (cfg.controller == ControllerKind::soft)
          dq[i] = active ? du[i] : 0.0;
        else
          dq[i] = du[i];
        const double dlambda = active ? -sign * du[i] : 0.0;
        // d softplus(-g) / dg = -sigmoid(-g)
        dgate[i] = -dlambda * sigmoid(-c.gate[i]);
      }
      if (g.t[wdrv]) g.t[wdrv]->noalias() += dq * phi.transpose();
      if (g.t[wgt]) g.t[wgt]->noalias() += dgate * phi.transpose();
      return a[wdrv].transpose() * dq + a[wgt].transpose() * dgate;
    }
    case ControllerKind::sigmoid: {
      Vector dq(r), dgate(r);
      for (Eigen::Index i = 0; i < r; ++i) {
        const double s = sigmoid(c.gate[i]);
        dq[i] = du[i] * s;
        dgate[i] = du[i] * c.q[i] * s * (1.0 - s);
      }
      if (g.t[wdrv]) g.t[wdrv]->noalias() += dq * phi.transpose();
      if (g.t[wgt]) g.t[wgt]->noalias() += dgate * phi.transpose();
      return a[wdrv].transpose() * dq + a[wgt].transpose() * dgate;
    }
    case ControllerKind::tanh: {
      Vector dq(r), dgate(r);
      for (Eigen::Index i = 0; i < r; ++i) {
        const double th = std::tanh(c.gate[i]);
        dq[i] = du[i] * th;
        dgate[i] = du[i] * c.q[i] * (1.0 - th * th);
      }
      if (g.t[wdrv]) g.t[wdrv]->noalias() += dq * phi.transpose();
      if (g.t[wgt]) g.t[wgt]->noalias() += dgate * phi.transpose();
      return a[wdrv].transpose() * dq + a[wgt].transpose() * dgate;
    }
    case ControllerKind::dense: {
      if (g.t[wdrv]) g.t[wdrv]->noalias() += du * c.hidden.transpose();
      const Vector dhidden = a[wdrv].transpose() * du;
      const Vector dpre = dhidden.cwiseProduct(c.hidden_pre.unaryExpr([](double v) { return silu_grad(v); }));
      if (g.t[wd1]) g.t[wd1]->noalias() += dpre * phi.transpose();
      return a[wd1].transpose() * dpre;
    }
  }
  throw InternalError("unhandled controller kind");
}

}  // namespace detail

/// Pooled previous state fed to the controller: the channel mean m of h,
/// softly normalized as m / sqrt(1 + mean(m^2)). Near zero this is the
/// plain mean; for large states it stays within sqrt(N) in norm, which cuts
/// the h -> control -> B_hat -> h loop that otherwise grows quadratically.
inline Vector pool_state(const Matrix& h) {
  const Vector m = h.colwise().mean().transpose();
  return m / std::sqrt(1.0 + m.squaredNorm() / static_cast<double>(m.size()));
}

/// d loss / d h for pool_state, given d loss / d output; spread over rows.
inline Matrix pool_state_backward(const Matrix& h, const Vector& dout) {
  const Vector m = h.colwise().mean().transpose();
  const double n = static_cast<double>(m.size());
  const double sc = 1.0 / std::sqrt(1.0 + m.squaredNorm() / n);
  const Vector dm = sc * dout - (sc * sc * sc / n) * m.dot(dout) * m;
  Matrix dh(h.rows(), h.cols());
  dh.rowwise() = dm.transpose() / static_cast<double>(h.rows());
  return dh;
}

/// phi_t = Phi(W_x x_t || W_h hbar || W_e e); `h_prev_pooled` is
/// pool_state of the previous hidden state.
inline Vector control_feature(const Vector& x_t, const Vector& h_prev_pooled, const Vector& e,
                              const AdapterRefs& a, const SaaConfig& cfg) {
  detail::FusionCache cache;
  return detail::fusion_forward(cfg, a, a[wx] * x_t, a[wh] * h_prev_pooled, a[we] * e, cache);
}

// Everything the analysis side wants to know about one step.
struct StepTrace {
  DiscreteStep controlled;
  DiscreteStep frozen;
  Vector u;
  Vector q;
  Vector lambda;
  Vector theta;
  Vector delta;  // masked perturbation added to theta's partitions
};

/// Frozen operator generation for one token: B_t, C_t, and the per-channel
/// Delta pre-activation.
struct FrozenOperators {
  Vector b;  // N
  Vector c;  // N
  Vector s;  // channels
};

inline FrozenOperators frozen_operators(const SsmRefs& ssm, const Vector& x_t) {
  FrozenOperators f;
  f.b = (*ssm.w_b) * x_t;
  f.c = (*ssm.w_c) * x_t;
  f.s = (*ssm.w_dt_up) * ((*ssm.w_dt_down) * x_t) + ssm.b_dt->row(0).transpose();
  return f;
}

/// Discretization of the (possibly perturbed) operators of one step:
/// log|a| += delta_a, B += delta_B, C += delta_C, Delta = softplus(s + delta_Delta).
inline DiscreteStep discretize_step(const Matrix& log_a, const FrozenOperators& f, const Vector* delta,
                                    std::size_t state) {
  const Eigen::Index ch = log_a.rows(), N = static_cast<Eigen::Index>(state);
  DiscreteStep out{Matrix(ch, N), Matrix(ch, N), f.c};
  Vector b = f.b;
  double d_delta = 0.0;
  Vector d_a = Vector::Zero(N);
  if (delta) {
    d_a = delta->segment(0, N);
    b += delta->segment(N, N);
    out.c += delta->segment(2 * N, N);
    d_delta = (*delta)[3 * N];
  }
  for (Eigen::Index c = 0; c < ch; ++c) {
    const double dt = softplus(f.s[c] + d_delta);
    for (Eigen::Index i = 0; i < N; ++i) {
      const double a = -std::exp(log_a(c, i) + d_a[i]);
      const double z = a * dt;
      out.a_hat(c, i) = std::exp(z);
      out.b_hat(c, i) = dt * expm1_ratio(z) * b[i];
    }
  }
  return out;
}

/// One controlled scan over a sequence: per step, control feature -> control
/// signal -> low-rank operator perturbation -> ZOH -> state update.
/// Caches every intermediate so `backward` can run exact BPTT.
class SaaScan {
 public:
  SaaScan(const SsmRefs& ssm, const AdapterRefs* adapter, const SaaConfig& cfg, bool force_zero_control = false)
      : ssm_(ssm), adapter_(adapter), cfg_(cfg), force_zero_(force_zero_control) {
    const Matrix& log_a = *ssm_.log_a;
    if (static_cast<std::size_t>(log_a.cols()) != cfg_.state)
      throw InternalError("SaaScan: state size does not match log_a");
    mean_log_a_ = log_a.colwise().mean().transpose();
  }

  Matrix forward(const Matrix& x, const Vector& e, std::vector<StepTrace>* trace = nullptr) {
    const Eigen::Index n = x.rows(), ch = x.cols(), N = static_cast<Eigen::Index>(cfg_.state);
    const Matrix& log_a = *ssm_.log_a;
    if (log_a.rows() != ch) throw InternalError("SaaScan: channel count does not match log_a");
    x_ = x;
    e_ = e;
    steps_.assign(static_cast<std::size_t>(n), Step{});
    Matrix y(n, ch);
    if (adapter_) pe_ = (*adapter_)[we] * e;

    for (Eigen::Index t = 0; t < n; ++t) {
      Step& s = steps_[static_cast<std::size_t>(t)];
      const Vector xt = x.row(t).transpose();
      s.frozen = frozen_operators(ssm_, xt);
      s.delta = Vector::Zero(static_cast<Eigen::Index>(cfg_.m()));

      if (adapter_) {
        const AdapterRefs& a = *adapter_;
        s.theta.resize(static_cast<Eigen::Index>(cfg_.m()));
        s.theta << mean_log_a_, s.frozen.b, s.frozen.c, s.frozen.s.mean();
        s.hbar = t > 0 ? pool_state(steps_[static_cast<std::size_t>(t - 1)].h) : Vector(Vector::Zero(N));
        if (force_zero_) {
          s.u = Vector::Zero(static_cast<Eigen::Index>(cfg_.r));
        } else {
          const Vector px = a[wx] * xt;
          const Vector ph = a[wh] * s.hbar;
          s.phi = detail::fusion_forward(cfg_, a, px, ph, pe_, s.fusion);
          s.u = detail::controller_forward(cfg_, a, s.phi, s.ctrl);
        }
        s.v = a[mod_v] * s.theta;
        s.w = s.u.cwiseProduct(s.v);
        s.delta = a[mod_u] * s.w;
        apply_mask(s.delta);
      }

      // Controlled operators and ZOH.
      s.b = s.frozen.b + s.delta.segment(N, N);
      s.c = s.frozen.c + s.delta.segment(2 * N, N);
      s.s = s.frozen.s.array() + s.delta[3 * N];
      s.dt.resize(ch);
      s.a_cont.resize(ch, N);
      s.a_hat.resize(ch, N);
      s.ratio.resize(ch, N);
      s.h.resize(ch, N);
      const Matrix* hprev = t > 0 ? &steps_[static_cast<std::size_t>(t - 1)].h : nullptr;
      for (Eigen::Index c = 0; c < ch; ++c) {
        const double dt = softplus(s.s[c]);
        s.dt[c] = dt;
        double acc = 0.0;
        for (Eigen::Index i = 0; i < N; ++i) {
          const double a = -std::exp(log_a(c, i) + s.delta[i]);
          const double z = a * dt;
          const double ah = std::exp(z);
          const double ratio = expm1_ratio(z);
          s.a_cont(c, i) = a;
          s.a_hat(c, i) = ah;
          s.ratio(c, i) = ratio;
          const double hp = hprev ? (*hprev)(c, i) : 0.0;
          const double h = ah * hp + dt * ratio * s.b[i] * x(t, c);
          s.h(c, i) = h;
          acc += s.c[i] * h;
        }
        y(t, c) = acc;
      }
      if (!s.h.allFinite() || !y.row(t).allFinite())
        throw NumericError("selective scan produced a non-finite state at step " + std::to_string(t));

      if (trace) trace->push_back(make_trace(s));
    }
    return y;
  }

  // dx must be n x channels (accumulated into); de is accumulated when non-null.
  void backward(const Matrix& dy, Matrix& dx, Vector* de, AdapterGrads* grads) const {
    const Eigen::Index n = x_.rows(), ch = x_.cols(), N = static_cast<Eigen::Index>(cfg_.state);
    const Matrix& wb = *ssm_.w_b;
    const Matrix& wc = *ssm_.w_c;
    const Matrix& wdown = *ssm_.w_dt_down;
    const Matrix& wup = *ssm_.w_dt_up;
    AdapterGrads no_grads;
    AdapterGrads& g = grads ? *grads : no_grads;

    Matrix dh = Matrix::Zero(ch, N);
    Matrix dh_prev(ch, N);
    Vector dpe_sum = adapter_ ? Vector::Zero(static_cast<Eigen::Index>(cfg_.d_phi)) : Vector();
    Vector d_bt(N), d_dt(ch), d_loga(N);

    for (Eigen::Index t = n; t-- > 0;) {
      const Step& s = steps_[static_cast<std::size_t>(t)];
      const Matrix* hprev = t > 0 ? &steps_[static_cast<std::size_t>(t - 1)].h : nullptr;

      // y_t = h_t c_t
      Vector d_ct = s.h.transpose() * dy.row(t).transpose();
      dh.noalias() += dy.row(t).transpose() * s.c.transpose();

      d_bt.setZero();
      d_dt.setZero();
      d_loga.setZero();
      for (Eigen::Index c = 0; c < ch; ++c) {
        const double dt = s.dt[c];
        const double xtc = x_(t, c);
        double dx_acc = 0.0;
        for (Eigen::Index i = 0; i < N; ++i) {
          const double gh = dh(c, i);
          const double hp = hprev ? (*hprev)(c, i) : 0.0;
          const double ah = s.a_hat(c, i);
          const double ratio = s.ratio(c, i);
          const double a = s.a_cont(c, i);
          const double bhat = dt * ratio * s.b[i];
          dx_acc += gh * bhat;
          dh_prev(c, i) = gh * ah;
          const double d_ahat = gh * hp;
          const double d_bhat = gh * xtc;
          d_bt[i] += d_bhat * dt * ratio;
          const double d_ratio = d_bhat * dt * s.b[i];
          d_dt[c] += d_bhat * ratio * s.b[i];
          const double z = a * dt;
          const double dz = d_ahat * ah + d_ratio * expm1_ratio_grad(z, ah, ratio);
          d_dt[c] += dz * a;
          // a = -exp(log|a|): da / dlog|a| = a
          d_loga[i] += dz * dt * a;
        }
        dx(t, c) += dx_acc;
      }
      Vector d_s(ch);
      for (Eigen::Index c = 0; c < ch; ++c) d_s[c] = d_dt[c] * sigmoid(s.s[c]);

      // Frozen-operator gradients: B = B0 + dB, C = C0 + dC, s = s0 + dDelta.
      Vector d_b0 = d_bt;
      Vector d_c0 = d_ct;
      Vector d_s0 = d_s;

      if (adapter_) {
        const AdapterRefs& a = *adapter_;
        Vector d_delta(static_cast<Eigen::Index>(cfg_.m()));
        d_delta << d_loga, d_bt, d_ct, d_s.sum();
        apply_mask(d_delta);
        if (g.t[mod_u]) g.t[mod_u]->noalias() += d_delta * s.w.transpose();
        const Vector dw = a[mod_u].transpose() * d_delta;
        const Vector du = dw.cwiseProduct(s.v);
        const Vector dv = dw.cwiseProduct(s.u);
        if (g.t[mod_v]) g.t[mod_v]->noalias() += dv * s.theta.transpose();
        const Vector dtheta = a[mod_v].transpose() * dv;
        d_b0 += dtheta.segment(N, N);
        d_c0 += dtheta.segment(2 * N, N);
        d_s0.array() += dtheta[3 * N] / static_cast<double>(ch);

        if (!force_zero_) {
          const Vector dphi = detail::controller_backward(cfg_, a, g, s.ctrl, s.phi, du);
          const auto [dpx, dph, dpe] = detail::fusion_backward(cfg_, a, g, s.fusion, dphi);
          const Vector xt = x_.row(t).transpose();
          if (g.t[wx]) g.t[wx]->noalias() += dpx * xt.transpose();
          dx.row(t) += (a[wx].transpose() * dpx).transpose();
          if (g.t[wh]) g.t[wh]->noalias() += dph * s.hbar.transpose();
          if (hprev) dh_prev += pool_state_backward(*hprev, a[wh].transpose() * dph);
          dpe_sum += dpe;
        }
      }

      dx.row(t) += (wb.transpose() * d_b0 + wc.transpose() * d_c0 + wdown.transpose() * (wup.transpose() * d_s0))
                       .transpose();
      dh.swap(dh_prev);
    }

    if (adapter_ && !force_zero_) {
      if (g.t[we]) g.t[we]->noalias() += dpe_sum * e_.transpose();
      if (de) *de += (*adapter_)[we].transpose() * dpe_sum;
    }
  }

 private:
  struct Step {
    FrozenOperators frozen;
    Vector theta, hbar, phi, u, v, w, delta;
    detail::FusionCache fusion;
    detail::ControllerCache ctrl;
    Vector b, c, s, dt;
    Matrix a_cont, a_hat, ratio, h;
  };

  void apply_mask(Vector& delta) const {
    const Eigen::Index N = static_cast<Eigen::Index>(cfg_.state);
    if (!cfg_.modulate.a) delta.segment(0, N).setZero();
    if (!cfg_.modulate.b) delta.segment(N, N).setZero();
    if (!cfg_.modulate.c) delta.segment(2 * N, N).setZero();
    if (!cfg_.modulate.delta) delta[3 * N] = 0.0;
  }

  StepTrace make_trace(const Step& s) const {
    StepTrace tr;
    const Eigen::Index ch = s.a_hat.rows(), N = s.a_hat.cols();
    tr.controlled.a_hat = s.a_hat;
    tr.controlled.b_hat.resize(ch, N);
    for (Eigen::Index c = 0; c < ch; ++c)
      for (Eigen::Index i = 0; i < N; ++i) tr.controlled.b_hat(c, i) = s.dt[c] * s.ratio(c, i) * s.b[i];
    tr.controlled.c = s.c;
    tr.frozen = discretize_step(*ssm_.log_a, s.frozen, nullptr, cfg_.state);
    tr.u = s.u;
    tr.q = s.ctrl.q;
    tr.lambda = s.ctrl.lambda;
    tr.theta = s.theta;
    tr.delta = s.delta;
    return tr;
  }

  SsmRefs ssm_;
  const AdapterRefs* adapter_;
  SaaConfig cfg_;
  bool force_zero_;
  Vector mean_log_a_;
  Matrix x_;
  Vector e_;
  Vector pe_;
  std::vector<Step> steps_;
};

struct SaaStepResult {
  DiscreteStep step;  // controlled and discretized
  Vector phi;
  Vector u;
  Vector theta;
  Vector theta_tilde;
};

/// One adapter step in isolation: control feature, control signal, operator
/// modulation, and ZOH. `h_prev` is the channels x N hidden state.
inline SaaStepResult saa_step(const Vector& x_t, const Matrix& h_prev, const Vector& e, const SsmRefs& ssm,
                              const AdapterRefs& a, const SaaConfig& cfg) {
  const Eigen::Index N = static_cast<Eigen::Index>(cfg.state);
  SaaStepResult out;
  const FrozenOperators f = frozen_operators(ssm, x_t);
  out.theta.resize(static_cast<Eigen::Index>(cfg.m()));
  out.theta << ssm.log_a->colwise().mean().transpose(), f.b, f.c, f.s.mean();
  const Vector hbar = pool_state(h_prev);
  out.phi = control_feature(x_t, hbar, e, a, cfg);
  detail::ControllerCache cache;
  out.u = detail::controller_forward(cfg, a, out.phi, cache);
  Vector delta = a[mod_u] * out.u.cwiseProduct(a[mod_v] * out.theta);
  if (!cfg.modulate.a) delta.segment(0, N).setZero();
  if (!cfg.modulate.b) delta.segment(N, N).setZero();
  if (!cfg.modulate.c) delta.segment(2 * N, N).setZero();
  if (!cfg.modulate.delta) delta[3 * N] = 0.0;
  out.theta_tilde = out.theta + delta;
  out.step = discretize_step(*ssm.log_a, f, &delta, cfg.state);
  return out;
}

namespace ops {

// Adapter tensors bound to a tape; invalid Vars mark absent slots.
using AdapterVars = std::array<Var, kSlotCount>;

struct SsmVars {
  Var w_b, w_c, w_dt_down, w_dt_up, b_dt, log_a;
};

/// Tape wrapper around SaaScan. x is n x d, e is 1 x d. The frozen SSM
/// tensors never receive gradient.
inline Var saa_scan(Var x, Var e, const SsmVars& ssm, const AdapterVars* adapter, const SaaConfig& cfg,
                    bool force_zero_control = false, std::vector<StepTrace>* trace = nullptr) {
  Tape& t = *x.tape;
  SsmRefs refs{&ssm.w_b.value(), &ssm.w_c.value(), &ssm.w_dt_down.value(),
               &ssm.w_dt_up.value(), &ssm.b_dt.value(), &ssm.log_a.value()};
  auto adapter_refs = std::make_shared<AdapterRefs>();
  bool adapter_grad = false;
  if (adapter) {
    for (std::size_t s = 0; s < kSlotCount; ++s) {
      const Var& v = (*adapter)[s];
      if (!v.valid()) continue;
      adapter_refs->t[s] = &v.value();
      adapter_grad = adapter_grad || v.requires_grad();
    }
  }
  auto kernel = std::make_shared<SaaScan>(refs, adapter ? adapter_refs.get() : nullptr, cfg, force_zero_control);
  Matrix y = kernel->forward(x.value(), e.value().row(0).transpose(), trace);
  const bool rg = x.requires_grad() || (adapter && (adapter_grad || e.requires_grad()));
  AdapterVars avars{};
  if (adapter) avars = *adapter;
  return t.op(std::move(y), rg, [&t, x, e, avars, kernel, adapter_refs](const Matrix& g) {
    Matrix dx = Matrix::Zero(x.rows(), x.cols());
    Vector de = Vector::Zero(e.cols());
    AdapterGrads grads;
    for (std::size_t s = 0; s < kSlotCount; ++s)
      if (avars[s].valid() && avars[s].requires_grad()) grads.t[s] = &t.grad(avars[s]);
    kernel->backward(g, dx, &de, &grads);
    t.accumulate(x, dx);
    t.accumulate(e, de.transpose());
  });
}

}  // namespace ops

}  // namespace mantis
