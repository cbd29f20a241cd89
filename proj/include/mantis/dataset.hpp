#pragma once

#include "mantis/core.hpp"
#include "mantis/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace mantis {

inline const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names{"sphere", "cube",    "cylinder",  "torus",
                                              "cone",   "pyramid", "ellipsoid", "helix"};
  return names;
}

inline std::size_t shape_index(const std::string& name) {
  const auto& names = shape_names();
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("unknown shape class '" + name + "'");
  return static_cast<std::size_t>(it - names.begin());
}

struct DataConfig {
  std::vector<std::string> classes = shape_names();
  std::size_t points = 256;
  std::size_t samples_per_class = 64;
  double noise = 0.02;
  bool rotate = true;
  double scale_min = 1.0;  // per-axis scale jitter range
  double scale_max = 1.0;
  double train_fraction = 0.8;
  std::uint64_t seed = 7;

  void validate() const {
    if (classes.size() < 2) throw ConfigError("data.classes needs at least 2 shape classes");
    if (samples_per_class < 8) throw ConfigError("data.samples_per_class must be at least 8");
    if (points < 1) throw ConfigError("data.points must be positive");
    if (!(noise >= 0.0)) throw ConfigError("data.noise must be non-negative");
    if (!(scale_min > 0.0 && scale_max >= scale_min)) throw ConfigError("data scale range is invalid");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("data.train_fraction must be in (0, 1)");
    for (std::size_t i = 0; i < classes.size(); ++i) {
      shape_index(classes[i]);
      for (std::size_t j = 0; j < i; ++j)
        if (classes[i] == classes[j]) throw ConfigError("duplicate shape class '" + classes[i] + "'");
    }
  }
};

struct Dataset {
  std::vector<PointCloud> train;
  std::vector<PointCloud> test;
  std::vector<std::string> classes;
};

/// One point on the noiseless surface of a unit-scale shape.
inline Vec3 sample_shape_point(std::size_t shape, Rng& rng) {
  const double tau = 2.0 * M_PI;
  switch (shape) {
    case 0: {  // sphere
      Vec3 v(rng.normal(), rng.normal(), rng.normal());
      while (v.norm() < 1e-12) v = Vec3(rng.normal(), rng.normal(), rng.normal());
      return v.normalized();
    }
    case 1: {  // cube surface
      const std::size_t face = rng.below(6);
      Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      p[static_cast<Eigen::Index>(face / 2)] = face % 2 ? 1.0 : -1.0;
      return p;
    }
    case 2: {  // cylinder, lateral surface and caps
      const double a = rng.uniform(0, tau);
      if (rng.uniform() < 0.7) return {std::cos(a), std::sin(a), rng.uniform(-1, 1)};
      const double r = std::sqrt(rng.uniform());
      return {r * std::cos(a), r * std::sin(a), rng.uniform() < 0.5 ? -1.0 : 1.0};
    }
    case 3: {  // torus
      const double u = rng.uniform(0, tau), v = rng.uniform(0, tau);
      const double R = 1.0, r = 0.35;
      return {(R + r * std::cos(v)) * std::cos(u), (R + r * std::cos(v)) * std::sin(u), r * std::sin(v)};
    }
    case 4: {  // cone, apex up, with base disc
      const double a = rng.uniform(0, tau);
      if (rng.uniform() < 0.75) {
        const double s = std::sqrt(rng.uniform());  // area-uniform along the slant
        return {s * std::cos(a), s * std::sin(a), 1.0 - 2.0 * s};
      }
      const double r = std::sqrt(rng.uniform());
      return {r * std::cos(a), r * std::sin(a), -1.0};
    }
    case 5: {  // square pyramid, apex (0, 0, 1), base [-1, 1]^2 at z = -1
      const std::size_t face = rng.below(5);
      double u = rng.uniform(), v = rng.uniform();
      if (face == 4) return {2 * u - 1, 2 * v - 1, -1.0};
      if (u + v > 1) u = 1 - u, v = 1 - v;
      static const double corners[4][2] = {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}};
      const Vec3 p0(corners[face][0], corners[face][1], -1.0);
      const Vec3 p1(corners[(face + 1) % 4][0], corners[(face + 1) % 4][1], -1.0);
      const Vec3 apex(0, 0, 1);
      return p0 + u * (p1 - p0) + v * (apex - p0);
    }
    case 6: {  // ellipsoid
      Vec3 v(rng.normal(), rng.normal(), rng.normal());
      while (v.norm() < 1e-12) v = Vec3(rng.normal(), rng.normal(), rng.normal());
      v.normalize();
      return {1.5 * v[0], 0.8 * v[1], 0.5 * v[2]};
    }
    case 7: {  // helix tube
      const double t = rng.uniform(0, 2 * tau);
      const double a = rng.uniform(0, tau);
      const Vec3 axis(std::cos(t), std::sin(t), t / tau - 1.0);
      return axis + 0.12 * Vec3(std::cos(a) * std::cos(t), std::cos(a) * std::sin(t), std::sin(a));
    }
    default:
      throw InternalError("shape index out of range");
  }
}

// Uniform random rotation from a normalized Gaussian quaternion.
inline Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

inline PointCloud generate_cloud(std::size_t shape, const DataConfig& cfg, Rng& rng, int label) {
  PointCloud cloud;
  cloud.label = label;
  cloud.points.reserve(cfg.points);
  const Eigen::Matrix3d rot = cfg.rotate ? random_rotation(rng) : Eigen::Matrix3d::Identity();
  const Vec3 scale(rng.uniform(cfg.scale_min, cfg.scale_max), rng.uniform(cfg.scale_min, cfg.scale_max),
                   rng.uniform(cfg.scale_min, cfg.scale_max));
  for (std::size_t i = 0; i < cfg.points; ++i) {
    Vec3 p = rot * sample_shape_point(shape, rng).cwiseProduct(scale);
    if (cfg.noise > 0) p += cfg.noise * Vec3(rng.normal(), rng.normal(), rng.normal());
    cloud.points.push_back(p);
  }
  return normalize(cloud);
}

/// Exact per-class counts, then one seeded shuffle and a rounded split.
inline Dataset generate_dataset(const DataConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.classes = cfg.classes;
  std::vector<PointCloud> all;
  for (std::size_t c = 0; c < cfg.classes.size(); ++c) {
    const std::size_t shape = shape_index(cfg.classes[c]);
    for (std::size_t s = 0; s < cfg.samples_per_class; ++s) {
      Rng rng(derive_seed(cfg.seed, c * 1000003 + s));
      all.push_back(generate_cloud(shape, cfg, rng, static_cast<int>(c)));
    }
  }
  std::vector<std::size_t> idx(all.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng split(derive_seed(cfg.seed, 0xD47A));
  split.shuffle(idx);
  const auto n_train = static_cast<std::size_t>(std::lround(cfg.train_fraction * static_cast<double>(all.size())));
  for (std::size_t i = 0; i < idx.size(); ++i) (i < n_train ? ds.train : ds.test).push_back(all[idx[i]]);
  return ds;
}

}  // namespace mantis
