#pragma once

#include "mantis/autodiff.hpp"
#include "mantis/core.hpp"
#include "mantis/params.hpp"
#include "mantis/serialization.hpp"

#include <string>
#include <vector>

namespace mantis {

struct TokenizerConfig {
  std::size_t d = 96;
  std::size_t d_mid = 0;  // 0 = d / 2
  std::size_t d_o = 32;

  std::size_t mid() const { return d_mid ? d_mid : std::max<std::size_t>(1, d / 2); }
};

/// Point encoder (frozen) plus the order-modulation and cross-branch tensors
/// (trainable when `trainable_extras`).
inline void add_tokenizer_params(ParamStore& store, const TokenizerConfig& cfg, Rng& rng, bool trainable_extras) {
  const auto d = static_cast<Eigen::Index>(cfg.d);
  const auto dm = static_cast<Eigen::Index>(cfg.mid());
  const auto d_o = static_cast<Eigen::Index>(cfg.d_o);
  // He init keeps the ReLU layer's activations at unit scale.
  store.add("tok.w1", rng.normal_matrix(dm, 3, std::sqrt(2.0 / 3.0)), false);
  store.add("tok.b1", Matrix::Zero(1, dm), false);
  store.add("tok.w2", rng.normal_matrix(d, dm, std::sqrt(2.0 / static_cast<double>(dm))), false);
  store.add("tok.b2", Matrix::Zero(1, d), false);

  store.add("order.o1", rng.normal_matrix(1, d_o, 1.0), trainable_extras);
  store.add("order.o2", rng.normal_matrix(1, d_o, 1.0), trainable_extras);
  store.add("order.g", rng.normal_matrix(d, d, 1.0 / std::sqrt(static_cast<double>(d))), trainable_extras);
  store.add("order.phi_w", rng.normal_matrix(d, d_o, 1.0 / std::sqrt(static_cast<double>(d_o))),
            trainable_extras);
  store.add("order.phi_b", Matrix::Zero(1, d), trainable_extras);
  store.add("fuse.gamma", Matrix::Zero(1, d), trainable_extras);
}

struct EncoderWeights {
  const Matrix& w1;  // d_mid x 3
  const Matrix& b1;  // 1 x d_mid
  const Matrix& w2;  // d x d_mid
  const Matrix& b2;  // 1 x d
};

inline EncoderWeights encoder_weights(const ParamStore& store) {
  return {store.at("tok.w1").value, store.at("tok.b1").value, store.at("tok.w2").value, store.at("tok.b2").value};
}

/// token_t = max_k ( W2 ReLU(W1 p_k + b1) + b2 ) over the K points of patch t.
inline Matrix encode_patches(const PatchSet& patches, const EncoderWeights& w) {
  if (w.w1.cols() != 3 || w.b1.cols() != w.w1.rows() || w.w2.cols() != w.w1.rows() || w.b2.cols() != w.w2.rows())
    throw ConfigError("point encoder weight shapes are inconsistent");
  const std::size_t n = patches.size();
  const Eigen::Index d = w.w2.rows();
  Matrix tokens(static_cast<Eigen::Index>(n), d);
  for (std::size_t t = 0; t < n; ++t) {
    const auto& hood = patches.neighborhoods[t];
    if (hood.empty()) throw ConfigError("empty neighborhood");
    Matrix pts(static_cast<Eigen::Index>(hood.size()), 3);
    for (std::size_t k = 0; k < hood.size(); ++k) pts.row(static_cast<Eigen::Index>(k)) = hood[k].transpose();
    Matrix h = (pts * w.w1.transpose()).rowwise() + w.b1.row(0);
    h = h.cwiseMax(0.0);
    Matrix f = (h * w.w2.transpose()).rowwise() + w.b2.row(0);
    tokens.row(static_cast<Eigen::Index>(t)) = f.colwise().maxCoeff();
  }
  return tokens;
}

/// e = MaxPool_n( E + G(E) ⊙ phi(o) ), pooled over tokens.
/// `pre_pool`, when set, receives the matrix before pooling.
inline Var order_aware_global(Var tokens, Var order, Var g, Var phi_w, Var phi_b, Var* pre_pool = nullptr) {
  Var phi = ops::linear(order, phi_w, phi_b);
  Var modulated = ops::add(tokens, ops::mul_row(ops::linear(tokens, g), phi));
  if (pre_pool) *pre_pool = modulated;
  return ops::col_max(modulated);
}

/// For each position in `to`, the position of the same patch in `from`.
inline std::vector<std::size_t> align_index(const std::vector<std::size_t>& to, const std::vector<std::size_t>& from) {
  if (to.size() != from.size()) throw InternalError("branches disagree on the patch count");
  std::vector<std::size_t> where(from.size(), from.size());
  for (std::size_t s = 0; s < from.size(); ++s) {
    if (from[s] >= from.size() || where[from[s]] != from.size())
      throw InternalError("branch order is not a permutation");
    where[from[s]] = s;
  }
  std::vector<std::size_t> idx(to.size());
  for (std::size_t t = 0; t < to.size(); ++t) {
    if (to[t] >= where.size() || where[to[t]] == from.size())
      throw InternalError("branches disagree on the patch index set");
    idx[t] = where[to[t]];
  }
  return idx;
}

/// Z0^(k) = E^(k) + gamma ⊙ align(E^(other)) for both branches.
inline std::pair<Var, Var> fuse_branches(Var e1, Var e2, const std::vector<std::size_t>& order1,
                                         const std::vector<std::size_t>& order2, Var gamma) {
  Var z1 = ops::add(e1, ops::mul_row(ops::gather_rows(e2, align_index(order1, order2)), gamma));
  Var z2 = ops::add(e2, ops::mul_row(ops::gather_rows(e1, align_index(order2, order1)), gamma));
  return {z1, z2};
}

}  // namespace mantis
