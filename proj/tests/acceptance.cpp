// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails. Tolerances are fixed constants below.

#include "mantis/experiment.hpp"
#include "mantis/gradcheck.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#ifndef MANTIS_DESK_CONFIG
#define MANTIS_DESK_CONFIG "configs/desk.json"
#endif

namespace {

using namespace mantis;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<DiscreteStep> random_system(Rng& rng, std::size_t n, Eigen::Index ch, Eigen::Index state) {
  std::vector<DiscreteStep> steps(n);
  for (auto& s : steps) {
    s.a_hat.resize(ch, state);
    for (Eigen::Index i = 0; i < s.a_hat.size(); ++i) s.a_hat.data()[i] = rng.uniform(0.0, 0.999);
    s.b_hat = rng.normal_matrix(ch, state, 1.0);
    s.c = rng.normal_matrix(state, 1, 1.0);
  }
  return steps;
}

// A single block's frozen and adapter tensors, for scan-level checks.
struct BlockRig {
  ParamStore store;
  SaaConfig cfg;
  BlockRig(std::uint64_t seed, std::size_t d, std::size_t state, std::size_t r) {
    cfg.d = d;
    cfg.state = state;
    cfg.d_phi = 8;
    cfg.r = r;
    Rng rng(seed);
    add_block_params(store, "b.", {d, state, 4, 0}, rng);
    add_adapter_params(store, "b.saa.", cfg, rng, true);
  }
  SsmRefs ssm() const {
    return {&store.at("b.w_b").value,     &store.at("b.w_c").value,  &store.at("b.w_dt_down").value,
            &store.at("b.w_dt_up").value, &store.at("b.b_dt").value, &store.at("b.log_a").value};
  }
};

// 1. Scan and explicit transfer operator agree.
Outcome kernel_scan() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(16);
    const auto ch = static_cast<Eigen::Index>(1 + rng.below(8)), N = static_cast<Eigen::Index>(1 + rng.below(8));
    const auto steps = random_system(rng, n, ch, N);
    const Matrix x = rng.normal_matrix(static_cast<Eigen::Index>(n), ch, 1.0);
    worst = std::max(worst, (selective_scan(x, steps).y - build_transfer_matrix(steps).apply(x)).cwiseAbs().maxCoeff());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst <= 1e-9 && secs < 10.0,
          "max |scan - W x| = " + fmt("%.3e", worst) + " (tol 1e-9), " + fmt("%.2f", secs) + " s (limit 10 s)"};
}

// 2. Zero-initialized modulation leaves the frozen model untouched.
Outcome zero_control() {
  ModelConfig mc;
  mc.d = 32;
  mc.state = 8;
  mc.blocks = 4;
  SaaConfig sc;
  sc.d_phi = 16;
  sc.r = 8;
  Components on, off;
  off.saa = false;
  Model adapted(mc, sc, on, 5), frozen(mc, sc, off, 5);
  Rng rng(102);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = static_cast<Eigen::Index>(1 + rng.below(40));
    const Matrix tokens = rng.normal_matrix(n, 32, 1.0), e = rng.normal_matrix(1, 32, 1.0);
    auto run = [&](Model& m) {
      Tape tape(false);
      ParamBinder bind(tape, m.store());
      Var z = tape.constant_ref(tokens), ev = tape.constant_ref(e);
      BlockOptions bo;
      bo.saa = m.components().saa ? &m.saa() : nullptr;
      for (std::size_t l = 0; l < mc.blocks; ++l) z = block_forward(bind, Model::block_prefix(l), z, ev, bo);
      return Matrix(z.value());
    };
    worst = std::max(worst, (run(adapted) - run(frozen)).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-12, "max |adapted - frozen| = " + fmt("%.3e", worst) + " over 100 inputs (tol 1e-12)"};
}

// 3. The soft threshold solves the scalar proximal problem.
Outcome proximal() {
  Rng rng(103);
  std::size_t grid_losses = 0, subgrad_failures = 0;
  auto objective = [](double q, double lambda, double v) { return 0.5 * (v - q) * (v - q) + lambda * std::abs(v); };
  for (int trial = 0; trial < 1000; ++trial) {
    const double q = rng.normal(0.0, 2.0);
    double lambda = rng.uniform(0.0, 3.0);
    if (lambda == 0.0) lambda = 3.0;
    const double u = soft_threshold(Vector::Constant(1, q), Vector::Constant(1, lambda))[0];
    const double fu = objective(q, lambda, u);
    const double hi = std::abs(q) + 1.0;
    for (double v = -hi; v <= hi; v += 1e-4)
      if (fu > objective(q, lambda, v) + 1e-14) {
        ++grid_losses;
        break;
      }
    // 0 in (u - q) + lambda * subdifferential(|u|).
    const bool ok = u == 0.0 ? std::abs(q) <= lambda
                             : std::abs(q) > lambda && std::signbit(u) == std::signbit(q) &&
                                   std::abs((u - q) + lambda * (u > 0 ? 1.0 : -1.0)) <=
                                       2 * std::numeric_limits<double>::epsilon() * std::max(std::abs(q), lambda);
    subgrad_failures += !ok;
  }
  return {grid_losses == 0 && subgrad_failures == 0,
          std::to_string(grid_losses) + " grid losses, " + std::to_string(subgrad_failures) +
              " subgradient failures over 1000 (q, lambda)"};
}

// 4. ZOH closed form and the small-rate limit.
Outcome zoh() {
  Vector a(1), b(1);
  a << -1.0;
  b << 2.0;
  const ZohResult r = zoh_discretize(a, b, std::log(2.0));
  const double e_a = std::abs(r.a_hat[0] - 0.5), e_b = std::abs(r.b_hat[0] - 0.5 * 2.0);
  double e_lim = 0.0;
  for (double a0 : {-1e-9, -3e-10, -1e-12, 0.0, -7e-9}) {
    for (double dt : {1e-3, 0.1, 1.0}) {
      Vector av(1), bv(1);
      av << a0;
      bv << 1.3;
      const ZohResult z = zoh_discretize(av, bv, dt);
      const long double zz = static_cast<long double>(a0) * dt;
      // Series of (e^z - 1)/z, exact to long double precision for |z| < 1e-8.
      const long double ratio = 1.0L + zz / 2.0L + zz * zz / 6.0L;
      e_lim = std::max(e_lim, std::abs(z.b_hat[0] - static_cast<double>(dt * ratio * 1.3L)));
    }
  }
  return {e_a <= 1e-12 && e_b <= 1e-12 && e_lim <= 1e-9,
          "|A_hat - 0.5| = " + fmt("%.1e", e_a) + ", |B_hat - 0.5B| = " + fmt("%.1e", e_b) + " (tol 1e-12); limit err " +
              fmt("%.1e", e_lim) + " (tol 1e-9)"};
}

// 5. Each step's operator perturbation has rank <= support <= r.
Outcome rank_bound() {
  Rng rng(105);
  std::size_t violations = 0, steps = 0, active = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t r = 1 + rng.below(8);
    BlockRig rig(500 + static_cast<std::uint64_t>(trial), 6, 4, r);
    Param& u = rig.store.at("b.saa.u");
    u.value = rng.normal_matrix(u.value.rows(), u.value.cols(), 0.05);
    const AdapterRefs a = AdapterRefs::from_store(rig.store, "b.saa.");
    SaaScan scan(rig.ssm(), &a, rig.cfg);
    std::vector<StepTrace> trace;
    scan.forward(rng.normal_matrix(8, 6, 2.0), rng.normal_matrix(6, 1, 1.0), &trace);
    for (const auto& t : trace) {
      const Matrix delta = operator_perturbation(u.value, t.u, rig.store.at("b.saa.v").value);
      const std::size_t rank = numerical_rank(delta), k = support_size(t.u);
      violations += !(rank <= k && k <= r);
      active += k > 0;
      ++steps;
    }
  }
  return {violations == 0 && active > 0,
          std::to_string(violations) + " violations over " + std::to_string(steps) + " steps (" + std::to_string(active) +
              " with active control), threshold 1e-10 sigma_max"};
}

// 6. Deviation bound on contractive systems under small modulations.
Outcome deviation_bound() {
  Rng rng(106);
  std::size_t violations = 0, checked = 0, precondition = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index ch = 1 + static_cast<Eigen::Index>(rng.below(6));
    const std::size_t N = 1 + rng.below(6), n = 2 + rng.below(30), r = 1 + rng.below(4);
    const auto m = static_cast<Eigen::Index>(3 * N + 1);
    Matrix log_a(ch, static_cast<Eigen::Index>(N));
    for (Eigen::Index i = 0; i < log_a.size(); ++i) log_a.data()[i] = rng.uniform(std::log(0.5), std::log(3.0));
    const Matrix mod_u = rng.normal_matrix(m, static_cast<Eigen::Index>(r), 0.05);
    const Matrix mod_v = rng.normal_matrix(static_cast<Eigen::Index>(r), m, 1.0 / std::sqrt(static_cast<double>(m)));
    std::vector<DiscreteStep> frozen, adapted;
    for (std::size_t t = 0; t < n; ++t) {
      FrozenOperators f;
      f.b = rng.normal_matrix(static_cast<Eigen::Index>(N), 1, 1.0);
      f.c = rng.normal_matrix(static_cast<Eigen::Index>(N), 1, 1.0);
      f.s.resize(ch);
      // exp(log_a) dt >= 0.5 * 0.25 keeps every frozen A_hat below 0.9.
      for (Eigen::Index c = 0; c < ch; ++c) f.s[c] = std::log(std::expm1(rng.uniform(0.25, 1.0)));
      Vector theta(m);
      theta << log_a.colwise().mean().transpose(), f.b, f.c, f.s.mean();
      const Vector u = rng.normal_matrix(static_cast<Eigen::Index>(r), 1, 0.2);
      const Vector delta = mod_u * u.cwiseProduct(mod_v * theta);
      frozen.push_back(discretize_step(log_a, f, nullptr, N));
      adapted.push_back(discretize_step(log_a, f, &delta, N));
    }
    const DeviationReport rep = deviation_bound_check(rng.normal_matrix(static_cast<Eigen::Index>(n), ch, 1.0), frozen, adapted);
    precondition += rep.precondition_met && rep.rho <= 0.9;
    violations += rep.violations;
    checked += rep.deviation.size();
  }
  return {violations == 0 && precondition == 100,
          std::to_string(violations) + " violations over " + std::to_string(checked) + " steps; " +
              std::to_string(precondition) + "/100 systems with rho <= 0.9"};
}

// 7. Analytic against central-difference gradients on a 2-block desk model.
Outcome gradient_check_2block(const ExperimentConfig& desk) {
  ExperimentConfig c = desk;
  c.model.blocks = 2;
  c.data.samples_per_class = 8;
  Model model(c.model, c.saa, c.run.components, 1);
  model.set_mode(TuningMode::mantis);
  // A mid-training state: with the initial zero head and zero U most
  // gradients vanish identically, which would make the check vacuous.
  Rng rng(107);
  for (auto& p : model.store())
    if (p.name.rfind("head.", 0) == 0 || p.name.find(".saa.u") != std::string::npos)
      p.value = rng.normal_matrix(p.value.rows(), p.value.cols(), 0.1);
  const Dataset ds = generate_dataset(c.data);
  const PreparedSample s = model.prepare(ds.train.front());
  const GradCheckReport rep = gradient_check(model, s, c.train.dscd, GradCheckOptions{1e-5, 1e-4, 1e-5});
  std::string detail = std::to_string(rep.checked) + " coordinates checked, " + std::to_string(rep.excluded) +
                       " kink-adjacent excluded, " + std::to_string(rep.failures) + " failures, max rel err " +
                       fmt("%.2e", rep.max_rel) + " (tol 1e-4, step 1e-5)";
  if (!rep.failed.empty()) detail += "; first: " + rep.failed.front();
  return {rep.pass(), detail};
}

// 8. Per-module parameter count against the closed-form count.
Outcome parameter_accounting(const ExperimentConfig& desk) {
  std::vector<SaaConfig> configs;
  const std::size_t grid[][4] = {{384, 16, 64, 8}, {96, 16, 64, 8}, {32, 8, 16, 8}, {384, 16, 32, 4}, {7, 3, 5, 2}};
  for (const auto& g : grid) {
    SaaConfig s;
    s.d = g[0];
    s.state = g[1];
    s.d_phi = g[2];
    s.r = g[3];
    configs.push_back(s);
  }
  for (const auto& row : ablation_rows(desk, "r")) configs.push_back(row.cfg.model.saa_config(row.cfg.saa));
  std::size_t mismatches = 0;
  for (const auto& s : configs) mismatches += count_parameters(s) != saa_parameter_formula(s.d, s.d_h(), s.d_phi, s.r, s.m());
  const std::size_t ref = count_parameters(configs.front());
  return {mismatches == 0 && ref == 64336 && configs.front().m() == 49,
          std::to_string(mismatches) + " mismatches over " + std::to_string(configs.size()) +
              " configs; reference count " + std::to_string(ref) + " (expected 64336, m=49)"};
}

// 9. Curve bijection, curve adjacency, and FPS against brute force.
Outcome serialization() {
  std::size_t bad_roundtrip = 0, bad_adjacent = 0, bad_fps = 0;
  std::set<std::uint64_t> codes;
  for (std::uint32_t x = 0; x < 8; ++x)
    for (std::uint32_t y = 0; y < 8; ++y)
      for (std::uint32_t z = 0; z < 8; ++z) {
        const GridPoint p{x, y, z};
        const std::uint64_t code = hilbert_encode_3d(p, 3);
        codes.insert(code);
        bad_roundtrip += hilbert_decode_3d(code, 3) != p;
      }
  for (std::uint64_t code = 0; code + 1 < 512; ++code) {
    const GridPoint a = hilbert_decode_3d(code, 3), b = hilbert_decode_3d(code + 1, 3);
    long dist = 0;
    for (int k = 0; k < 3; ++k) dist += std::labs(static_cast<long>(a[k]) - static_cast<long>(b[k]));
    bad_adjacent += dist != 1;
  }
  Rng rng(109);
  for (int trial = 0; trial < 100; ++trial) {
    PointCloud c;
    const std::size_t m = 2 + rng.below(63), n = 1 + rng.below(m);
    for (std::size_t i = 0; i < m; ++i) c.points.emplace_back(rng.normal(), rng.normal(), rng.normal());
    Vec3 mean = Vec3::Zero();
    for (const auto& p : c.points) mean += p;
    mean /= static_cast<double>(m);
    std::size_t first = 0;
    for (std::size_t i = 1; i < m; ++i)
      if ((c.points[i] - mean).squaredNorm() > (c.points[first] - mean).squaredNorm()) first = i;
    std::vector<std::size_t> chosen{first};
    while (chosen.size() < n) {
      std::size_t best = 0;
      double best_d = -1.0;
      for (std::size_t i = 0; i < m; ++i) {
        double d = std::numeric_limits<double>::infinity();
        for (std::size_t j : chosen) d = std::min(d, (c.points[i] - c.points[j]).squaredNorm());
        if (d > best_d) best_d = d, best = i;
      }
      chosen.push_back(best);
    }
    bad_fps += farthest_point_sample(c, n).indices != chosen;
  }
  return {bad_roundtrip == 0 && codes.size() == 512 && bad_adjacent == 0 && bad_fps == 0,
          std::to_string(codes.size()) + " distinct codes, " + std::to_string(bad_roundtrip) + " round-trip errors, " +
              std::to_string(bad_adjacent) + " non-adjacent steps, " + std::to_string(bad_fps) + "/100 FPS mismatches"};
}

// 10. Consistency losses: identity, non-negativity, and a hand example.
Outcome dscd_sanity() {
  Rng rng(110);
  double worst_identity = 0.0, min_kl = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix z = rng.normal_matrix(16, 32, 1.0), head = rng.normal_matrix(32, 32, 0.2), l = rng.normal_matrix(1, 8, 3.0);
    Tape t(false);
    worst_identity = std::max(worst_identity, ops::feature_loss(t.constant_ref(z), t.constant_ref(z), t.constant_ref(head)).scalar());
    worst_identity = std::max(worst_identity, ops::prediction_loss(t.constant_ref(l), t.constant_ref(l), 1.0).scalar());
  }
  for (int trial = 0; trial < 1000; ++trial) {
    const RowVector p = softmax(rng.normal_matrix(1, 8, 4.0).row(0)), q = softmax(rng.normal_matrix(1, 8, 4.0).row(0));
    min_kl = std::min(min_kl, symmetric_kl(p, q));
  }
  Matrix a(1, 2), b(1, 2);
  a << std::log(0.9), std::log(0.1);
  b << std::log(0.1), std::log(0.9);
  Tape t(false);
  const double hand = ops::prediction_loss(t.constant_ref(a), t.constant_ref(b), 1.0).scalar();
  const double err = std::abs(hand - 0.8 * std::log(9.0));
  return {worst_identity <= 1e-9 && min_kl >= 0.0 && err <= 1e-6,
          "identical-branch max " + fmt("%.1e", worst_identity) + " (tol 1e-9), min sym KL " + fmt("%.3e", min_kl) +
              ", hand example err " + fmt("%.1e", err) + " (tol 1e-6)"};
}

struct DeskRuns {
  double lp_mean = 0.0, mantis_mean = 0.0, seconds = 0.0;
  std::vector<double> lp, mantis;
  double disc_on = 0.0, disc_off = 0.0;
  std::vector<double> on, off;
};

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string list(const std::vector<double>& v, const char* f) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "/" : "") + fmt(f, v[i]);
  return s;
}

// 11. Adapter tuning against linear probing at desk scale.
Outcome desk_adaptation(const ExperimentConfig& desk, DeskRuns& runs, const std::string& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = generate_dataset(desk.data);
  Model probe(desk.model, desk.saa, desk.run.components, 0);
  const PreparedData data = prepare_data(probe, ds);
  for (std::uint64_t seed : desk.seed_list()) {
    RunSpec spec;
    spec.seed = seed;
    spec.mode = TuningMode::linear_probe;
    spec.out_dir = out + "/linear_probe/seed_" + std::to_string(seed);
    runs.lp.push_back(train_run(desk, spec, data).test_acc);
    spec.mode = TuningMode::mantis;
    spec.components = {true, true, true};
    spec.out_dir = out + "/mantis/seed_" + std::to_string(seed);
    const RunResult r = train_run(desk, spec, data);
    runs.mantis.push_back(r.test_acc);
    runs.on.push_back(r.discrepancy ? r.discrepancy->feat : std::nan(""));
  }
  runs.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  runs.lp_mean = mean(runs.lp);
  runs.mantis_mean = mean(runs.mantis);
  const double gap = 100.0 * (runs.mantis_mean - runs.lp_mean);
  const bool ok = gap >= 10.0 && desk.train.epochs <= 200 && runs.seconds < 600.0 && desk.seed_list().size() >= 3;
  return {ok, "linear probe " + list(runs.lp, "%.3f") + " (mean " + fmt("%.3f", runs.lp_mean) + "), adapted " +
                  list(runs.mantis, "%.3f") + " (mean " + fmt("%.3f", runs.mantis_mean) + "), gap " + fmt("%+.1f", gap) +
                  " pp (need >= +10), " + std::to_string(desk.train.epochs) + " epochs, " +
                  fmt("%.0f", runs.seconds) + " s (limit 600 s)"};
}

// 12. Consistency training lowers the cross-serialization feature gap.
Outcome discrepancy_reduction(const ExperimentConfig& desk, DeskRuns& runs, const std::string& out) {
  const Dataset ds = generate_dataset(desk.data);
  Model probe(desk.model, desk.saa, desk.run.components, 0);
  const PreparedData data = prepare_data(probe, ds);
  for (std::uint64_t seed : desk.seed_list()) {
    RunSpec spec;
    spec.seed = seed;
    spec.mode = TuningMode::mantis;
    spec.components = {true, false, false};
    spec.out_dir = out + "/dscd_off/seed_" + std::to_string(seed);
    const RunResult r = train_run(desk, spec, data);
    runs.off.push_back(r.discrepancy ? r.discrepancy->feat : std::nan(""));
  }
  runs.disc_on = mean(runs.on);
  runs.disc_off = mean(runs.off);
  const double reduction = runs.disc_off > 0 ? 1.0 - runs.disc_on / runs.disc_off : 0.0;
  return {std::isfinite(reduction) && reduction >= 0.2,
          "feature discrepancy at epoch " + std::to_string(desk.train.epochs) + ": with consistency " +
              list(runs.on, "%.4f") + " (mean " + fmt("%.4f", runs.disc_on) + "), without " + list(runs.off, "%.4f") +
              " (mean " + fmt("%.4f", runs.disc_off) + "), reduction " + fmt("%.1f", 100 * reduction) + "% (need >= 20%)"};
}

// 13. Forward time is linear in the sequence length; adapters add a bounded slope.
Outcome linear_complexity(const ExperimentConfig& desk, const std::string& out) {
  ExperimentConfig c = desk;
  c.run.complexity_lengths = {64, 128, 256, 512, 1024};
  c.run.complexity_repeats = 20;
  c.run.out_dir = out;
  const json r = run_complexity(c);
  const double r2_on = r.at("saa_on").at("r2"), r2_off = r.at("saa_off").at("r2"), ratio = r.at("slope_ratio");
  return {r2_on >= 0.98 && r2_off >= 0.98 && ratio < 2.0 && ratio > 0.0,
          "R^2 with adapters " + fmt("%.4f", r2_on) + ", without " + fmt("%.4f", r2_off) + " (need >= 0.98), slope ratio " +
              fmt("%.3f", ratio) + " (need < 2)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string config = MANTIS_DESK_CONFIG, out = "acceptance_out";
  std::vector<int> only;
  app.add_option("--config", config, "desk-scale config for criteria 7, 8, 11, 12, 13");
  app.add_option("--out", out, "directory for run artifacts");
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);

  ExperimentConfig desk;
  try {
    desk = load_config(config);
  } catch (const std::exception& e) {
    std::cerr << "cannot load desk config: " << e.what() << std::endl;
    return 2;
  }

  DeskRuns runs;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"kernel-scan equivalence", kernel_scan},
      {"zero-control identity", zero_control},
      {"proximal correctness", proximal},
      {"ZOH closed form", zoh},
      {"rank bound", rank_bound},
      {"deviation bound", deviation_bound},
      {"gradient check", [&] { return gradient_check_2block(desk); }},
      {"parameter accounting", [&] { return parameter_accounting(desk); }},
      {"serialization correctness", serialization},
      {"consistency loss sanity", dscd_sanity},
      {"desk-scale adaptation", [&] { return desk_adaptation(desk, runs, out); }},
      {"discrepancy reduction",
       [&] {
         if (runs.on.empty()) desk_adaptation(desk, runs, out);
         return discrepancy_reduction(desk, runs, out);
       }},
      {"linear complexity", [&] { return linear_complexity(desk, out); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("%s  %2d  %-26s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
