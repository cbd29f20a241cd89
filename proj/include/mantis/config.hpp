#pragma once

#include "mantis/core.hpp"
#include "mantis/dataset.hpp"
#include "mantis/model.hpp"
#include "mantis/saa.hpp"
#include "mantis/train.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace mantis {

using nlohmann::json;

struct RunConfig {
  std::string mode = "train";  // train | eval | analyze | ablate | complexity
  std::string out_dir = "runs/default";
  Components components;
  std::string ablation_axis = "components";
  std::vector<std::uint64_t> seeds;  // empty = just train.seed
  std::vector<std::size_t> complexity_lengths{64, 128, 256, 512, 1024};
  int complexity_repeats = 3;
  std::size_t analyze_samples = 2;
  std::size_t analyze_channels = 4;  // channels used for the dense kernel check
  std::string checkpoint;            // eval: weights to load; train: resume from
};

struct ExperimentConfig {
  ModelConfig model;
  SaaConfig saa;
  TrainConfig train;
  DataConfig data;
  RunConfig run;

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
    if (saa.d_phi < 1) throw ConfigError("saa.d_phi must be positive");
    static const std::set<std::string> modes{"train", "eval", "analyze", "ablate", "complexity", "generate"};
    if (!modes.count(run.mode)) throw ConfigError("unknown run.mode '" + run.mode + "'");
    static const std::set<std::string> axes{"curves", "r", "controller", "fusion", "modulate", "components"};
    if (!axes.count(run.ablation_axis)) throw ConfigError("unknown ablation axis '" + run.ablation_axis + "'");
    for (std::size_t i = 1; i < run.complexity_lengths.size(); ++i)
      if (run.complexity_lengths[i] <= run.complexity_lengths[i - 1])
        throw ConfigError("run.complexity_lengths must be strictly increasing");
    if (model.n > data.points) throw ConfigError("model.n exceeds data.points");
    if (model.k > data.points) throw ConfigError("model.k exceeds data.points");
  }

  std::vector<std::uint64_t> seed_list() const { return run.seeds.empty() ? std::vector<std::uint64_t>{train.seed} : run.seeds; }
};

namespace detail {

// Reads section keys, rejecting anything not consumed.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + name_ + "." + key + "': " + e.what());
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& raw(const char* key) const { return j_.at(key); }
  std::string path(const char* key) const { return name_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + name_ + "." + it.key() + "'");
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["model"] = {{"d", c.model.d},
                {"n", c.model.n},
                {"k", c.model.k},
                {"blocks", c.model.blocks},
                {"state", c.model.state},
                {"conv_width", c.model.conv_width},
                {"d_o", c.model.d_o},
                {"d_proj", c.model.d_proj},
                {"bits", c.model.bits},
                {"curves", {c.model.curve1.name(), c.model.curve2.name()}},
                {"backbone_seed", c.model.backbone_seed}};
  j["saa"] = {{"d_phi", c.saa.d_phi},
              {"r", c.saa.r},
              {"controller", to_string(c.saa.controller)},
              {"fusion", to_string(c.saa.fusion)},
              {"modulate", c.saa.modulate.name()}};
  j["train"] = {{"lr", c.train.lr},
                {"weight_decay", c.train.weight_decay},
                {"epochs", c.train.epochs},
                {"warmup", c.train.warmup},
                {"batch", c.train.batch},
                {"seed", c.train.seed},
                {"alpha", c.train.dscd.alpha},
                {"beta", c.train.dscd.beta},
                {"tau", c.train.dscd.tau},
                {"mode", to_string(c.train.mode)},
                {"discrepancy_every", c.train.discrepancy_every}};
  j["data"] = {{"classes", c.data.classes},
               {"points", c.data.points},
               {"samples_per_class", c.data.samples_per_class},
               {"noise", c.data.noise},
               {"rotate", c.data.rotate},
               {"scale_min", c.data.scale_min},
               {"scale_max", c.data.scale_max},
               {"train_fraction", c.data.train_fraction},
               {"seed", c.data.seed}};
  j["run"] = {{"mode", c.run.mode},
              {"out_dir", c.run.out_dir},
              {"components",
               {{"saa", c.run.components.saa}, {"feat", c.run.components.feat}, {"pred", c.run.components.pred}}},
              {"ablation_axis", c.run.ablation_axis},
              {"seeds", c.run.seeds},
              {"complexity_lengths", c.run.complexity_lengths},
              {"complexity_repeats", c.run.complexity_repeats},
              {"analyze_samples", c.run.analyze_samples},
              {"analyze_channels", c.run.analyze_channels},
              {"checkpoint", c.run.checkpoint}};
  return j;
}

inline ExperimentConfig from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config root must be an object");
  static const std::set<std::string> sections{"model", "saa", "train", "data", "run"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!sections.count(it.key())) throw ConfigError("unknown config section '" + it.key() + "'");

  ExperimentConfig c;
  const json empty = json::object();
  auto section = [&](const char* name) -> const json& { return j.contains(name) ? j.at(name) : empty; };

  {
    detail::Section s(section("model"), "model");
    s.get("d", c.model.d);
    s.get("n", c.model.n);
    s.get("k", c.model.k);
    s.get("blocks", c.model.blocks);
    s.get("state", c.model.state);
    s.get("conv_width", c.model.conv_width);
    s.get("d_o", c.model.d_o);
    s.get("d_proj", c.model.d_proj);
    s.get("bits", c.model.bits);
    s.get("backbone_seed", c.model.backbone_seed);
    if (s.has("curves")) {
      std::vector<std::string> curves;
      s.get("curves", curves);
      if (curves.size() != 2) throw ConfigError("model.curves must list exactly two curves");
      c.model.curve1 = CurveKind::parse(curves[0]);
      c.model.curve2 = CurveKind::parse(curves[1]);
    }
    s.finish();
  }
  {
    detail::Section s(section("saa"), "saa");
    s.get("d_phi", c.saa.d_phi);
    s.get("r", c.saa.r);
    std::string controller = to_string(c.saa.controller), fusion = to_string(c.saa.fusion),
                modulate = c.saa.modulate.name();
    s.get("controller", controller);
    s.get("fusion", fusion);
    s.get("modulate", modulate);
    c.saa.controller = parse_controller(controller);
    c.saa.fusion = parse_fusion(fusion);
    c.saa.modulate = OperatorMask::parse(modulate);
    s.finish();
  }
  {
    detail::Section s(section("train"), "train");
    s.get("lr", c.train.lr);
    s.get("weight_decay", c.train.weight_decay);
    s.get("epochs", c.train.epochs);
    s.get("warmup", c.train.warmup);
    s.get("batch", c.train.batch);
    s.get("seed", c.train.seed);
    s.get("alpha", c.train.dscd.alpha);
    s.get("beta", c.train.dscd.beta);
    s.get("tau", c.train.dscd.tau);
    s.get("discrepancy_every", c.train.discrepancy_every);
    std::string mode = to_string(c.train.mode);
    s.get("mode", mode);
    c.train.mode = parse_tuning_mode(mode);
    s.finish();
  }
  {
    detail::Section s(section("data"), "data");
    s.get("classes", c.data.classes);
    s.get("points", c.data.points);
    s.get("samples_per_class", c.data.samples_per_class);
    s.get("noise", c.data.noise);
    s.get("rotate", c.data.rotate);
    s.get("scale_min", c.data.scale_min);
    s.get("scale_max", c.data.scale_max);
    s.get("train_fraction", c.data.train_fraction);
    s.get("seed", c.data.seed);
    s.finish();
  }
  {
    detail::Section s(section("run"), "run");
    s.get("mode", c.run.mode);
    s.get("out_dir", c.run.out_dir);
    if (s.has("components")) {
      detail::Section comp(s.raw("components"), "run.components");
      comp.get("saa", c.run.components.saa);
      comp.get("feat", c.run.components.feat);
      comp.get("pred", c.run.components.pred);
      comp.finish();
    }
    s.get("ablation_axis", c.run.ablation_axis);
    s.get("seeds", c.run.seeds);
    s.get("complexity_lengths", c.run.complexity_lengths);
    s.get("complexity_repeats", c.run.complexity_repeats);
    s.get("analyze_samples", c.run.analyze_samples);
    s.get("analyze_channels", c.run.analyze_channels);
    s.get("checkpoint", c.run.checkpoint);
    s.finish();
  }
  c.model.classes = c.data.classes.size();
  return c;
}

/// Applies "section.key=value" (nested keys separated by dots). The value is
/// read as JSON when it parses, otherwise as a plain string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.size() < 2) throw ConfigError("override key '" + key + "' needs a section");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = value;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config '" + path + "' is not valid JSON");
  return j;
}

/// File, then overrides, then the MANTIS_SEED environment variable.
inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  json j = path.empty() ? json::object() : read_json_file(path);
  for (const auto& o : overrides) apply_override(j, o);
  ExperimentConfig c = from_json(j);
  if (const char* env = std::getenv("MANTIS_SEED")) {
    const std::string s = env;
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("MANTIS_SEED must be a non-negative integer");
    c.train.seed = std::stoull(s);
    c.run.seeds.clear();
  }
  c.validate();
  return c;
}

/// FNV-1a over the canonical dump of the resolved config.
inline std::string config_hash(const ExperimentConfig& c) {
  const std::string text = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mantis
