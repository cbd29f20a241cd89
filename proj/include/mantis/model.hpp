#pragma once

#include "mantis/autodiff.hpp"
#include "mantis/block.hpp"
#include "mantis/core.hpp"
#include "mantis/dscd.hpp"
#include "mantis/geometry.hpp"
#include "mantis/params.hpp"
#include "mantis/saa.hpp"
#include "mantis/serialization.hpp"
#include "mantis/tokenizer.hpp"

#include <optional>
#include <string>
#include <vector>

namespace mantis {

enum class TuningMode { mantis, linear_probe, frozen };

inline TuningMode parse_tuning_mode(const std::string& s) {
  if (s == "mantis") return TuningMode::mantis;
  if (s == "linear_probe") return TuningMode::linear_probe;
  if (s == "frozen") return TuningMode::frozen;
  throw ConfigError("unknown tuning mode '" + s + "' (mantis, linear_probe, frozen)");
}

inline std::string to_string(TuningMode m) {
  switch (m) {
    case TuningMode::mantis: return "mantis";
    case TuningMode::linear_probe: return "linear_probe";
    case TuningMode::frozen: return "frozen";
  }
  return "?";
}

struct ModelConfig {
  std::size_t d = 96;
  std::size_t n = 32;       // key points per cloud
  std::size_t k = 16;       // patch size
  std::size_t blocks = 4;
  std::size_t state = 16;   // N
  std::size_t conv_width = 4;
  std::size_t d_o = 32;
  std::size_t d_proj = 128;
  std::size_t classes = 8;
  unsigned bits = 10;
  CurveKind curve1 = CurveKind::hilbert();
  CurveKind curve2 = CurveKind::trans_hilbert();
  std::uint64_t backbone_seed = 1234;  // the "pre-trained" weights are a seeded draw

  SaaConfig saa_config(const SaaConfig& base) const {
    SaaConfig s = base;
    s.d = d;
    s.state = state;
    return s;
  }

  void validate() const {
    if (d < 2) throw ConfigError("model.d must be at least 2");
    if (n < 1 || k < 1 || blocks < 1 || state < 1) throw ConfigError("model sizes must be positive");
    if (conv_width < 1) throw ConfigError("model.conv_width must be positive");
    if (classes < 2) throw ConfigError("model.classes must be at least 2");
    if (bits < 1 || bits > 21) throw ConfigError("model.bits must be in [1, 21]");
  }
};

// Which parts of the method are switched on (the component ablation grid).
struct Components {
  bool saa = true;
  bool feat = true;
  bool pred = true;
};

/// Both serializations of one cloud, tokenized by the frozen point encoder.
struct PreparedSample {
  Matrix tokens1, tokens2;
  std::vector<std::size_t> order1, order2;
  int label = -1;
};

struct ForwardOutput {
  Var z1, z2;            // final-layer sequences
  Var logits1, logits2;  // 1 x classes
  Var pooled1, pooled2;  // 1 x d
};

struct ForwardOptions {
  bool force_zero_control = false;
  std::vector<std::vector<StepTrace>>* traces = nullptr;  // [branch * blocks + block]
  std::vector<Var>* scan_inputs = nullptr;
  std::vector<Matrix>* pre_pool = nullptr;  // order-aware matrices before MaxPool, per branch
};

struct SampleLoss {
  double task = 0.0;
  double feat = 0.0;
  double pred = 0.0;
  double total = 0.0;
  Matrix logits;  // averaged, 1 x classes
};

class Model {
 public:
  Model(const ModelConfig& cfg, const SaaConfig& saa, const Components& comp, std::uint64_t adapter_seed)
      : cfg_(cfg), saa_(cfg.saa_config(saa)), comp_(comp) {
    cfg_.validate();
    Rng backbone(cfg_.backbone_seed);
    Rng extras(derive_seed(adapter_seed, 11));
    // Order and fusion tensors are new (not part of the frozen backbone) but
    // drawn from the backbone stream so every mode sees the same values.
    TokenizerConfig tc{cfg_.d, 0, cfg_.d_o};
    add_tokenizer_params(store_, tc, backbone, false);
    BlockConfig bc{cfg_.d, cfg_.state, cfg_.conv_width, 0};
    for (std::size_t l = 0; l < cfg_.blocks; ++l) add_block_params(store_, block_prefix(l), bc, backbone);
    for (std::size_t l = 0; l < cfg_.blocks && comp_.saa; ++l) {
      Rng r(derive_seed(adapter_seed, 100 + l));
      add_adapter_params(store_, block_prefix(l) + "saa.", saa_, r, false);
    }
    const auto d = static_cast<Eigen::Index>(cfg_.d);
    store_.add("norm_f.g", Matrix::Ones(1, d), false);
    store_.add("norm_f.b", Matrix::Zero(1, d), false);
    store_.add("proj.w", extras.normal_matrix(static_cast<Eigen::Index>(cfg_.d_proj), d,
                                              1.0 / std::sqrt(static_cast<double>(cfg_.d))),
               false);
    store_.add("head.w", Matrix::Zero(static_cast<Eigen::Index>(cfg_.classes), d), false);
    store_.add("head.b", Matrix::Zero(1, static_cast<Eigen::Index>(cfg_.classes)), false);
  }

  static std::string block_prefix(std::size_t l) { return "blocks." + std::to_string(l) + "."; }

  const ModelConfig& config() const { return cfg_; }
  const SaaConfig& saa() const { return saa_; }
  const Components& components() const { return comp_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }

  /// Marks the trainable set for a tuning mode; everything else is frozen.
  void set_mode(TuningMode mode) {
    mode_ = mode;
    store_.freeze_all();
    if (mode == TuningMode::frozen) return;
    store_.set_trainable("head.w", true);
    store_.set_trainable("head.b", true);
    if (mode == TuningMode::linear_probe) return;
    store_.set_trainable("fuse.gamma", true);
    if (comp_.feat) store_.set_trainable("proj.w", true);
    if (comp_.saa) {
      for (const char* name : {"order.o1", "order.o2", "order.g", "order.phi_w", "order.phi_b"})
        store_.set_trainable(name, true);
      for (auto& p : store_)
        if (p.name.find(".saa.") != std::string::npos) ParamStore::set_trainable(p, true);
    }
  }
  TuningMode mode() const { return mode_; }

  /// Only the head trains, so pooled features can be computed once.
  bool head_only() const { return mode_ != TuningMode::mantis; }

  std::size_t adapter_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : store_)
      if (p.name.find(".saa.") != std::string::npos) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  PreparedSample prepare(const PointCloud& raw) const {
    const PointCloud cloud = normalize(raw);
    if (cfg_.n > cloud.size())
      throw ArgumentError("cloud has " + std::to_string(cloud.size()) + " points, fewer than model.n");
    const KeyPoints centers = farthest_point_sample(cloud, cfg_.n, SeedRule::farthest_from_centroid);
    const PatchSet patches = knn_patches(cloud, centers, cfg_.k);
    const SerializedPatchSet s1 = serialize_patches(patches, cfg_.curve1, cfg_.bits);
    const SerializedPatchSet s2 = serialize_patches(patches, cfg_.curve2, cfg_.bits);
    const EncoderWeights w = encoder_weights(store_);
    PreparedSample out;
    out.tokens1 = encode_patches(s1.patches, w);
    out.tokens2 = encode_patches(s2.patches, w);
    out.order1 = s1.order;
    out.order2 = s2.order;
    out.label = raw.label.value_or(-1);
    return out;
  }

  ForwardOutput forward(ParamBinder& bind, const PreparedSample& s, const ForwardOptions& opt = {}) const {
    Tape& t = bind.tape();
    Var e1 = t.constant_ref(s.tokens1);
    Var e2 = t.constant_ref(s.tokens2);
    Var g = bind("order.g"), pw = bind("order.phi_w"), pb = bind("order.phi_b");
    Var pre1, pre2;
    Var o1 = order_aware_global(e1, bind("order.o1"), g, pw, pb, &pre1);
    Var o2 = order_aware_global(e2, bind("order.o2"), g, pw, pb, &pre2);
    if (opt.pre_pool) *opt.pre_pool = {pre1.value(), pre2.value()};
    auto [z1, z2] = fuse_branches(e1, e2, s.order1, s.order2, bind("fuse.gamma"));

    if (opt.traces) opt.traces->assign(2 * cfg_.blocks, {});
    std::array<Var*, 2> z{&z1, &z2};
    std::array<Var, 2> e{o1, o2};
    for (std::size_t br = 0; br < 2; ++br) {
      for (std::size_t l = 0; l < cfg_.blocks; ++l) {
        BlockOptions bo;
        bo.saa = comp_.saa ? &saa_ : nullptr;
        bo.force_zero_control = opt.force_zero_control;
        bo.trace = opt.traces ? &(*opt.traces)[br * cfg_.blocks + l] : nullptr;
        Var scan_in;
        if (opt.scan_inputs) bo.scan_input = &scan_in;
        try {
          *z[br] = block_forward(bind, block_prefix(l), *z[br], e[br], bo);
        } catch (const NumericError& err) {
          throw NumericError("branch " + std::to_string(br + 1) + ", block " + std::to_string(l) + ": " + err.what());
        }
        if (opt.scan_inputs) opt.scan_inputs->push_back(scan_in);
      }
    }
    // Final frozen normalization, shared by both branches.
    Var ng = bind("norm_f.g"), nb = bind("norm_f.b");
    ForwardOutput out;
    out.z1 = z1 = ops::layer_norm(z1, ng, nb);
    out.z2 = z2 = ops::layer_norm(z2, ng, nb);
    out.pooled1 = ops::col_mean(z1);
    out.pooled2 = ops::col_mean(z2);
    Var hw = bind("head.w"), hb = bind("head.b");
    out.logits1 = ops::linear(out.pooled1, hw, hb);
    out.logits2 = ops::linear(out.pooled2, hw, hb);
    return out;
  }

  /// Full objective for one sample. With `scale` != 0 and a recording tape,
  /// backpropagates scale * total and adds into the store's accumulators.
  SampleLoss loss(const PreparedSample& s, const DscdWeights& w, double scale, DegenerateCounter* counter = nullptr) {
    Tape tape(scale != 0.0);
    ParamBinder bind(tape, store_);
    const ForwardOutput f = forward(bind, s);
    return finish_loss(bind, f, s.label, w, scale, counter);
  }

  /// Head-only objective on cached pooled features (linear probing).
  SampleLoss head_loss(const Matrix& pooled1, const Matrix& pooled2, int label, const DscdWeights& w, double scale) {
    Tape tape(scale != 0.0);
    ParamBinder bind(tape, store_);
    Var hw = bind("head.w"), hb = bind("head.b");
    ForwardOutput f;
    f.pooled1 = tape.constant_ref(pooled1);
    f.pooled2 = tape.constant_ref(pooled2);
    f.logits1 = ops::linear(f.pooled1, hw, hb);
    f.logits2 = ops::linear(f.pooled2, hw, hb);
    return finish_loss(bind, f, label, w, scale, nullptr);
  }

  SampleLoss finish_loss(ParamBinder& bind, const ForwardOutput& f, int label, const DscdWeights& w, double scale,
                         DegenerateCounter* counter) {
    Tape& tape = bind.tape();
    Var avg = ops::scale(ops::add(f.logits1, f.logits2), 0.5);
    Var task = ops::cross_entropy(avg, label);
    std::vector<Var> terms{task};
    std::vector<double> weights{1.0};
    SampleLoss out;
    out.task = task.scalar();
    // Cached-feature paths carry no sequences, so the feature term is skipped there.
    if (comp_.feat && f.z1.valid()) {
      Var feat = ops::feature_loss(f.z1, f.z2, bind("proj.w"), counter);
      out.feat = feat.scalar();
      terms.push_back(feat);
      weights.push_back(w.alpha);
    }
    if (comp_.pred) {
      Var pred = ops::prediction_loss(f.logits1, f.logits2, w.tau);
      out.pred = pred.scalar();
      terms.push_back(pred);
      weights.push_back(w.beta);
    }
    Var total = ops::weighted_sum(terms, weights);
    out.total = total.scalar();
    out.logits = avg.value();
    if (scale != 0.0 && tape.recording()) {
      Var scaled = ops::scale(total, scale);
      tape.backward(scaled);
      bind.accumulate_grads();
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  SaaConfig saa_;
  Components comp_;
  ParamStore store_;
  TuningMode mode_ = TuningMode::frozen;
};

struct Discrepancy {
  double feat = 0.0;
  double pred = 0.0;
};

/// Mean cross-serialization feature and prediction discrepancy, no gradient.
inline Discrepancy discrepancy_metrics(Model& model, const std::vector<PreparedSample>& eval, double tau = 1.0) {
  if (eval.empty()) throw ArgumentError("discrepancy_metrics: empty evaluation set");
  Discrepancy d;
  for (const auto& s : eval) {
    Tape tape(false);
    ParamBinder bind(tape, model.store());
    const ForwardOutput f = model.forward(bind, s);
    d.feat += ops::feature_loss(f.z1, f.z2, bind("proj.w")).scalar();
    d.pred += ops::prediction_loss(f.logits1, f.logits2, tau).scalar();
  }
  d.feat /= static_cast<double>(eval.size());
  d.pred /= static_cast<double>(eval.size());
  return d;
}

}  // namespace mantis
