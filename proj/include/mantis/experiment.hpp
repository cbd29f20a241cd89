#pragma once

#include "mantis/analysis.hpp"
#include "mantis/checkpoint.hpp"
#include "mantis/config.hpp"
#include "mantis/dataset.hpp"
#include "mantis/model.hpp"
#include "mantis/train.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace mantis {

struct PreparedData {
  std::vector<PreparedSample> train;
  std::vector<PreparedSample> test;
};

inline PreparedData prepare_data(const Model& model, const Dataset& ds) {
  PreparedData out;
  out.train.reserve(ds.train.size());
  out.test.reserve(ds.test.size());
  for (const auto& c : ds.train) out.train.push_back(model.prepare(c));
  for (const auto& c : ds.test) out.test.push_back(model.prepare(c));
  return out;
}

inline json metrics_record(const EpochMetrics& m) {
  json j{{"epoch", m.epoch},         {"lr", m.lr},
         {"loss_task", m.task},      {"loss_feat", m.feat},
         {"loss_pred", m.pred},      {"loss_total", m.total},
         {"train_acc", m.train_acc}, {"test_acc", m.test_acc},
         {"degenerate_events", m.degenerate}};
  if (m.discrepancy) {
    j["feat_disc"] = m.discrepancy->feat;
    j["pred_disc"] = m.discrepancy->pred;
  }
  return j;
}

struct RunSpec {
  std::uint64_t seed = 0;
  TuningMode mode = TuningMode::mantis;
  Components components;
  std::string out_dir;     // empty = no files
  std::string resume;      // checkpoint to resume from
  std::size_t stop_after = 0;  // stop after this many epochs in this call (0 = run to the end)
  std::string tag;         // free-form label copied into records
};

struct RunResult {
  std::vector<EpochMetrics> history;
  double test_acc = 0.0;
  std::optional<Discrepancy> discrepancy;
  std::size_t trainable = 0;
  std::size_t adapter_params = 0;
  double seconds = 0.0;
};

/// Trains one model. Writes metrics.jsonl, curves.csv and last.ckpt when
/// `spec.out_dir` is set; per-epoch records carry no timings so identical
/// configs give identical files.
inline RunResult train_run(const ExperimentConfig& cfg, const RunSpec& spec, const PreparedData& data,
                           std::function<void(const EpochMetrics&)> on_epoch = {}) {
  Model model(cfg.model, cfg.saa, spec.components, spec.seed);
  TrainConfig tc = cfg.train;
  tc.seed = spec.seed;
  tc.mode = spec.mode;
  Trainer trainer(model, tc, data.train, data.test);
  if (!spec.resume.empty()) {
    const CheckpointExtras ex = load_checkpoint(spec.resume, model.store(), &trainer.optimizer());
    trainer.set_epoch(ex.epoch);
  }

  const std::string hash = config_hash(cfg);
  std::ofstream jsonl, csv;
  if (!spec.out_dir.empty()) {
    std::filesystem::create_directories(spec.out_dir);
    const bool append = !spec.resume.empty();
    const auto flags = append ? std::ios::app : std::ios::trunc;
    jsonl.open(spec.out_dir + "/metrics.jsonl", flags);
    csv.open(spec.out_dir + "/curves.csv", flags);
    if (!append) csv << "seed,mode,epoch,lr,loss_task,loss_feat,loss_pred,loss_total,train_acc,test_acc,feat_disc,pred_disc\n";
    csv << std::setprecision(17);
  }

  RunResult res;
  res.trainable = model.store().trainable_count();
  res.adapter_params = model.adapter_parameter_count();
  const auto start = std::chrono::steady_clock::now();
  std::size_t ran = 0;
  while (!trainer.done() && (spec.stop_after == 0 || ran < spec.stop_after)) {
    EpochMetrics m = trainer.run_epoch();
    ++ran;
    if (jsonl.is_open()) {
      json rec = metrics_record(m);
      rec["config_hash"] = hash;
      rec["seed"] = spec.seed;
      rec["mode"] = to_string(spec.mode);
      if (!spec.tag.empty()) rec["tag"] = spec.tag;
      jsonl << rec.dump() << "\n";
      csv << spec.seed << "," << to_string(spec.mode) << "," << m.epoch << "," << m.lr << "," << m.task << ","
          << m.feat << "," << m.pred << "," << m.total << "," << m.train_acc << "," << m.test_acc << ","
          << (m.discrepancy ? std::to_string(m.discrepancy->feat) : "") << ","
          << (m.discrepancy ? std::to_string(m.discrepancy->pred) : "") << "\n";
    }
    if (on_epoch) on_epoch(m);
    res.history.push_back(m);
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!res.history.empty()) {
    res.test_acc = res.history.back().test_acc;
    res.discrepancy = res.history.back().discrepancy;
  }
  if (!spec.out_dir.empty()) {
    CheckpointExtras ex;
    ex.epoch = trainer.epoch();
    ex.meta = {{"config_hash", hash}, {"seed", spec.seed}, {"mode", to_string(spec.mode)}};
    save_checkpoint(spec.out_dir + "/last.ckpt", model.store(), &trainer.optimizer(), ex);
  }
  return res;
}

inline void write_json(const std::string& path, const json& j) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

/// run.mode = train: the configured tuning mode for every seed.
inline json run_experiment(const ExperimentConfig& cfg, std::function<void(const std::string&)> log = {}) {
  const Dataset ds = generate_dataset(cfg.data);
  PreparedData data;
  {
    Model probe(cfg.model, cfg.saa, cfg.run.components, 0);
    data = prepare_data(probe, ds);
  }
  json summary{{"config_hash", config_hash(cfg)}, {"mode", to_string(cfg.train.mode)}, {"runs", json::array()}};
  double acc = 0.0;
  for (std::uint64_t seed : cfg.seed_list()) {
    RunSpec spec;
    spec.seed = seed;
    spec.mode = cfg.train.mode;
    spec.components = cfg.run.components;
    spec.out_dir = cfg.run.out_dir + "/seed_" + std::to_string(seed);
    spec.resume = cfg.run.checkpoint;
    const RunResult r = train_run(cfg, spec, data, [&](const EpochMetrics& m) {
      if (log)
        log("seed " + std::to_string(seed) + " epoch " + std::to_string(m.epoch) + " loss " +
            std::to_string(m.total) + " test_acc " + std::to_string(m.test_acc));
    });
    json run{{"seed", seed}, {"test_acc", r.test_acc}, {"trainable_params", r.trainable},
             {"adapter_params", r.adapter_params}, {"epochs", r.history.size()}};
    if (r.discrepancy) run["feat_disc"] = r.discrepancy->feat, run["pred_disc"] = r.discrepancy->pred;
    summary["runs"].push_back(run);
    acc += r.test_acc;
  }
  summary["mean_test_acc"] = acc / static_cast<double>(cfg.seed_list().size());
  write_json(cfg.run.out_dir + "/summary.json", summary);
  write_json(cfg.run.out_dir + "/config.json", to_json(cfg));
  return summary;
}

/// run.mode = eval: test accuracy and discrepancies, optionally from a checkpoint.
inline json run_eval(const ExperimentConfig& cfg) {
  const Dataset ds = generate_dataset(cfg.data);
  Model model(cfg.model, cfg.saa, cfg.run.components, cfg.train.seed);
  if (!cfg.run.checkpoint.empty()) load_checkpoint(cfg.run.checkpoint, model.store(), nullptr);
  const PreparedData data = prepare_data(model, ds);
  TrainConfig tc = cfg.train;
  tc.mode = TuningMode::frozen;
  Trainer trainer(model, tc, data.train, data.test);
  const double acc = trainer.evaluate(data.test);
  const Discrepancy d = discrepancy_metrics(model, data.test, cfg.train.dscd.tau);
  json out{{"config_hash", config_hash(cfg)},
           {"checkpoint", cfg.run.checkpoint},
           {"test_acc", acc},
           {"test_size", data.test.size()},
           {"classes", cfg.model.classes},
           {"chance", 1.0 / static_cast<double>(cfg.model.classes)},
           {"feat_disc", d.feat},
           {"pred_disc", d.pred}};
  write_json(cfg.run.out_dir + "/eval.json", out);
  return out;
}

// ---------------------------------------------------------------------------
// Analysis

namespace detail {

inline std::vector<DiscreteStep> channel_subset(const std::vector<StepTrace>& trace, bool controlled,
                                                Eigen::Index channels) {
  std::vector<DiscreteStep> out;
  for (const auto& t : trace) {
    const DiscreteStep& s = controlled ? t.controlled : t.frozen;
    const Eigen::Index c = std::min(channels, s.a_hat.rows());
    out.push_back({s.a_hat.topRows(c), s.b_hat.topRows(c), s.c});
  }
  return out;
}

inline std::vector<DiscreteStep> steps_of(const std::vector<StepTrace>& trace, bool controlled) {
  std::vector<DiscreteStep> out;
  for (const auto& t : trace) out.push_back(controlled ? t.controlled : t.frozen);
  return out;
}

}  // namespace detail

/// run.mode = analyze: kernel, rank, deviation and parameter reports on real
/// model traces. Without a checkpoint the modulation matrices are drawn at a
/// small scale so the perturbation is not identically zero.
inline json run_analyze(const ExperimentConfig& cfg) {
  const Dataset ds = generate_dataset(cfg.data);
  Components comp = cfg.run.components;
  comp.saa = true;
  Model model(cfg.model, cfg.saa, comp, cfg.train.seed);
  if (!cfg.run.checkpoint.empty()) {
    load_checkpoint(cfg.run.checkpoint, model.store(), nullptr);
  } else {
    Rng rng(derive_seed(cfg.train.seed, 0xA7A1));
    for (auto& p : model.store())
      if (p.name.size() > 6 && p.name.compare(p.name.size() - 6, 6, ".saa.u") == 0)
        p.value = rng.normal_matrix(p.value.rows(), p.value.cols(), 0.05);
  }
  json report{{"config_hash", config_hash(cfg)}, {"samples", json::array()}};

  const SaaConfig& sc = model.saa();
  report["parameters"] = {{"per_module_count", count_parameters(sc)},
                          {"per_module_formula", saa_parameter_formula(sc.d, sc.d_h(), sc.d_phi, sc.r, sc.m())},
                          {"default_variant", sc.controller == ControllerKind::soft &&
                                                  sc.fusion == FusionKind::concat_mlp},
                          {"modules", cfg.model.blocks},
                          {"adapter_total", model.adapter_parameter_count()},
                          {"d", sc.d},
                          {"d_h", sc.d_h()},
                          {"d_phi", sc.d_phi},
                          {"r", sc.r},
                          {"m", sc.m()}};

  double worst_kernel = 0.0;
  std::size_t rank_violations = 0, deviation_violations = 0, steps_checked = 0;
  const std::size_t samples = std::min(cfg.run.analyze_samples, ds.test.size());
  for (std::size_t si = 0; si < samples; ++si) {
    const PreparedSample s = model.prepare(ds.test[si]);
    Tape tape(false);
    ParamBinder bind(tape, model.store());
    std::vector<std::vector<StepTrace>> traces;
    std::vector<Var> scan_inputs;
    ForwardOptions opt;
    opt.traces = &traces;
    opt.scan_inputs = &scan_inputs;
    model.forward(bind, s, opt);

    json blocks = json::array();
    for (std::size_t b = 0; b < traces.size(); ++b) {
      const auto& trace = traces[b];
      const Matrix& x = scan_inputs[b].value();
      const auto ch = static_cast<Eigen::Index>(std::min<std::size_t>(cfg.run.analyze_channels, x.cols()));
      const Matrix xs = x.leftCols(ch);

      const auto ctl = detail::channel_subset(trace, true, ch);
      const auto frz = detail::channel_subset(trace, false, ch);
      const TransferMatrix w_ctl = build_transfer_matrix(ctl);
      const TransferMatrix w_frz = build_transfer_matrix(frz);
      const double kernel_err = (selective_scan(xs, ctl).y - w_ctl.apply(xs)).cwiseAbs().maxCoeff();
      worst_kernel = std::max(worst_kernel, kernel_err);

      const std::size_t l = b % cfg.model.blocks;
      const std::string pre = Model::block_prefix(l) + "saa.";
      std::vector<Vector> controls;
      for (const auto& t : trace) controls.push_back(t.u);
      const KernelPerturbation kp = kernel_perturbation(w_frz, w_ctl, &controls, &model.store().at(pre + "u").value,
                                                        &model.store().at(pre + "v").value);
      std::size_t max_rank = 0, max_support = 0;
      for (std::size_t t = 0; t < kp.ranks.size(); ++t) {
        if (kp.ranks[t] > kp.supports[t] || kp.supports[t] > sc.r) ++rank_violations;
        max_rank = std::max(max_rank, kp.ranks[t]);
        max_support = std::max(max_support, kp.supports[t]);
        ++steps_checked;
      }

      const DeviationReport dev =
          deviation_bound_check(x, detail::steps_of(trace, false), detail::steps_of(trace, true));
      deviation_violations += dev.violations;
      double max_dev = 0.0;
      for (double v : dev.deviation) max_dev = std::max(max_dev, v);

      blocks.push_back({{"branch", b / cfg.model.blocks + 1},
                        {"block", l},
                        {"kernel_scan_max_abs_err", kernel_err},
                        {"kernel_channels", ch},
                        {"max_abs_delta_w", kp.max_abs_delta_w},
                        {"max_rank", max_rank},
                        {"max_support", max_support},
                        {"rho", dev.rho},
                        {"eps_a", dev.eps_a},
                        {"eps_b", dev.eps_b},
                        {"h_max", dev.h_max},
                        {"x_max", dev.x_max},
                        {"max_deviation", max_dev},
                        {"final_bound", dev.bound.empty() ? 0.0 : dev.bound.back()},
                        {"precondition_met", dev.precondition_met},
                        {"deviation_violations", dev.violations}});
    }
    report["samples"].push_back({{"index", si}, {"blocks", blocks}});
  }
  report["summary"] = {{"kernel_scan_max_abs_err", worst_kernel},
                       {"kernel_scan_pass", worst_kernel <= 1e-9},
                       {"rank_steps_checked", steps_checked},
                       {"rank_violations", rank_violations},
                       {"deviation_violations", deviation_violations},
                       {"parameter_formula_match",
                        count_parameters(sc) == saa_parameter_formula(sc.d, sc.d_h(), sc.d_phi, sc.r, sc.m())}};
  write_json(cfg.run.out_dir + "/analysis.json", report);
  return report;
}

// ---------------------------------------------------------------------------
// Complexity

/// Forward time of the block stack on random n x d token sequences, with
/// and without adapters.
inline json run_complexity(const ExperimentConfig& cfg) {
  Components on = cfg.run.components, off = cfg.run.components;
  on.saa = true;
  off.saa = false;
  Model with(cfg.model, cfg.saa, on, cfg.train.seed);
  Model without(cfg.model, cfg.saa, off, cfg.train.seed);
  // Nonzero modulation so the adapted path does its full work.
  Rng init(derive_seed(cfg.train.seed, 0xC0));
  for (auto& p : with.store())
    if (p.name.find(".saa.u") != std::string::npos) p.value = init.normal_matrix(p.value.rows(), p.value.cols(), 0.05);

  auto probe = [&](Model& model) {
    return complexity_probe(
        [&](std::size_t n) {
          Rng rng(derive_seed(cfg.train.seed, n));
          const Matrix tokens = rng.normal_matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cfg.model.d), 1.0);
          const Matrix e = rng.normal_matrix(1, static_cast<Eigen::Index>(cfg.model.d), 1.0);
          Tape tape(false);
          ParamBinder bind(tape, model.store());
          Var z = tape.constant_ref(tokens);
          Var ev = tape.constant_ref(e);
          BlockOptions bo;
          bo.saa = model.components().saa ? &model.saa() : nullptr;
          for (std::size_t l = 0; l < cfg.model.blocks; ++l) z = block_forward(bind, Model::block_prefix(l), z, ev, bo);
        },
        cfg.run.complexity_lengths, cfg.run.complexity_repeats);
  };
  const ComplexityTable t_on = probe(with);
  const ComplexityTable t_off = probe(without);
  json rows = json::array();
  for (std::size_t i = 0; i < t_on.lengths.size(); ++i)
    rows.push_back({{"n", t_on.lengths[i]}, {"saa_on_s", t_on.seconds[i]}, {"saa_off_s", t_off.seconds[i]}});
  json out{{"config_hash", config_hash(cfg)},
           {"rows", rows},
           {"saa_on", {{"slope", t_on.fit.slope}, {"intercept", t_on.fit.intercept}, {"r2", t_on.fit.r2}}},
           {"saa_off", {{"slope", t_off.fit.slope}, {"intercept", t_off.fit.intercept}, {"r2", t_off.fit.r2}}},
           {"slope_ratio", t_off.fit.slope > 0 ? t_on.fit.slope / t_off.fit.slope : 0.0}};
  write_json(cfg.run.out_dir + "/complexity.json", out);
  return out;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string label;
  ExperimentConfig cfg;
  TuningMode mode = TuningMode::mantis;
  Components components;
};

inline std::vector<AblationRow> ablation_rows(const ExperimentConfig& base, const std::string& axis) {
  std::vector<AblationRow> rows;
  auto row = [&](std::string label) {
    AblationRow r{std::move(label), base, base.train.mode == TuningMode::linear_probe ? TuningMode::mantis
                                                                                      : base.train.mode,
                  base.run.components};
    if (r.mode == TuningMode::frozen) r.mode = TuningMode::mantis;
    return r;
  };
  if (axis == "curves") {
    const std::vector<std::pair<std::string, std::string>> pairs{{"hilbert", "trans-hilbert"},
                                                                 {"z", "trans-z"},
                                                                 {"hilbert", "z"},
                                                                 {"trans-hilbert", "trans-z"},
                                                                 {"random:1", "random:2"}};
    for (const auto& [a, b] : pairs) {
      AblationRow r = row(a + "+" + b);
      r.cfg.model.curve1 = CurveKind::parse(a);
      r.cfg.model.curve2 = CurveKind::parse(b);
      rows.push_back(r);
    }
  } else if (axis == "r") {
    for (std::size_t r_val : {8, 16, 32, 64}) {
      AblationRow r = row("r=" + std::to_string(r_val));
      r.cfg.saa.r = r_val;
      rows.push_back(r);
    }
  } else if (axis == "controller") {
    for (const char* c : {"dense", "sigmoid", "tanh", "hard", "soft"}) {
      AblationRow r = row(c);
      r.cfg.saa.controller = parse_controller(c);
      rows.push_back(r);
    }
  } else if (axis == "fusion") {
    for (const char* f : {"add", "concat", "gated", "xattn", "concat_mlp"}) {
      AblationRow r = row(f);
      r.cfg.saa.fusion = parse_fusion(f);
      rows.push_back(r);
    }
  } else if (axis == "modulate") {
    for (const char* m : {"A", "B,C", "Delta", "A,B,C", "A,B,C,Delta"}) {
      AblationRow r = row(m);
      r.cfg.saa.modulate = OperatorMask::parse(m);
      rows.push_back(r);
    }
  } else if (axis == "components") {
    struct Spec {
      const char* label;
      TuningMode mode;
      Components comp;
    };
    const std::vector<Spec> grid{{"frozen", TuningMode::frozen, {false, false, false}},
                                 {"linear_probe", TuningMode::linear_probe, {false, false, false}},
                                 {"saa", TuningMode::mantis, {true, false, false}},
                                 {"saa+feat", TuningMode::mantis, {true, true, false}},
                                 {"saa+pred", TuningMode::mantis, {true, false, true}},
                                 {"feat+pred", TuningMode::mantis, {false, true, true}},
                                 {"saa+feat+pred", TuningMode::mantis, {true, true, true}}};
    for (const auto& g : grid) rows.push_back({g.label, base, g.mode, g.comp});
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "'");
  }
  return rows;
}

/// One run per axis value (and seed); everything else shared.
inline json run_ablation(const ExperimentConfig& cfg, const std::string& axis,
                         std::function<void(const std::string&)> log = {}) {
  const Dataset ds = generate_dataset(cfg.data);
  const auto rows = ablation_rows(cfg, axis);
  json table{{"axis", axis}, {"config_hash", config_hash(cfg)}, {"rows", json::array()}};
  std::filesystem::create_directories(cfg.run.out_dir);
  std::ofstream csv(cfg.run.out_dir + "/ablation_" + axis + ".csv");
  csv << "value,mode,saa,feat,pred,mean_test_acc,per_module_params,adapter_params,trainable_params\n";
  for (const auto& row : rows) {
    Model probe(row.cfg.model, row.cfg.saa, row.components, 0);
    const PreparedData data = prepare_data(probe, ds);
    double acc = 0.0;
    std::size_t adapter = 0, trainable = 0;
    json accs = json::array();
    for (std::uint64_t seed : cfg.seed_list()) {
      RunSpec spec;
      spec.seed = seed;
      spec.mode = row.mode;
      spec.components = row.components;
      spec.tag = row.label;
      const RunResult r = train_run(row.cfg, spec, data);
      acc += r.test_acc;
      accs.push_back(r.test_acc);
      adapter = r.adapter_params;
      trainable = r.trainable;
      if (log) log(axis + " " + row.label + " seed " + std::to_string(seed) + " test_acc " + std::to_string(r.test_acc));
    }
    acc /= static_cast<double>(cfg.seed_list().size());
    const std::size_t per_module = row.components.saa ? count_parameters(probe.saa()) : 0;
    table["rows"].push_back({{"value", row.label},
                             {"mode", to_string(row.mode)},
                             {"components", {{"saa", row.components.saa}, {"feat", row.components.feat}, {"pred", row.components.pred}}},
                             {"test_acc", accs},
                             {"mean_test_acc", acc},
                             {"per_module_params", per_module},
                             {"adapter_params", adapter},
                             {"trainable_params", trainable}});
    csv << row.label << "," << to_string(row.mode) << "," << row.components.saa << "," << row.components.feat << ","
        << row.components.pred << "," << acc << "," << per_module << "," << adapter << "," << trainable << "\n";
  }
  write_json(cfg.run.out_dir + "/ablation_" + axis + ".json", table);
  return table;
}

}  // namespace mantis
