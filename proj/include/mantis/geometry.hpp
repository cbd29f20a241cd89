#pragma once

#include "mantis/core.hpp"

#include <algorithm>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace mantis {

struct PointCloud {
  std::vector<Vec3> points;
  std::optional<int> label;

  std::size_t size() const { return points.size(); }
};

struct KeyPoints {
  std::vector<std::size_t> indices;
  std::vector<Vec3> coords;

  std::size_t size() const { return indices.size(); }
};

// Neighborhoods are stored re-centered on their key point.
struct PatchSet {
  KeyPoints centers;
  std::vector<std::vector<Vec3>> neighborhoods;
  std::vector<std::vector<std::size_t>> neighbor_indices;

  std::size_t size() const { return centers.size(); }
  std::size_t patch_size() const { return neighborhoods.empty() ? 0 : neighborhoods.front().size(); }
};

enum class SeedRule { farthest_from_centroid, first_point };

inline void validate_cloud(const PointCloud& cloud) {
  if (cloud.points.empty()) throw ValidationError("point cloud is empty");
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    if (!cloud.points[i].allFinite())
      throw ValidationError("point " + std::to_string(i) + " has a non-finite coordinate");
  }
}

inline Vec3 centroid(const std::vector<Vec3>& pts) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : pts) c += p;
  return c / static_cast<double>(pts.size());
}

// Centroid to the origin, farthest point to unit norm.
inline PointCloud normalize(const PointCloud& cloud) {
  validate_cloud(cloud);
  PointCloud out = cloud;
  const Vec3 c = centroid(cloud.points);
  double max_norm = 0.0;
  for (auto& p : out.points) {
    p -= c;
    max_norm = std::max(max_norm, p.norm());
  }
  if (max_norm > 0.0) {
    for (auto& p : out.points) p /= max_norm;
  } else {
    for (auto& p : out.points) p.setZero();
  }
  return out;
}

/// Greedy farthest point sampling: each new point maximizes its minimum
/// distance to the points already chosen, lowest index on ties.
inline KeyPoints farthest_point_sample(const PointCloud& cloud, std::size_t n,
                                       SeedRule seed_rule = SeedRule::farthest_from_centroid) {
  validate_cloud(cloud);
  const std::size_t m = cloud.size();
  if (n == 0 || n > m)
    throw ArgumentError("farthest_point_sample: need 1 <= n <= M, got n=" + std::to_string(n) +
                        " M=" + std::to_string(m));

  std::size_t first = 0;
  if (seed_rule == SeedRule::farthest_from_centroid) {
    const Vec3 c = centroid(cloud.points);
    double best = -1.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double dist = (cloud.points[i] - c).squaredNorm();
      if (dist > best) {
        best = dist;
        first = i;
      }
    }
  }

  KeyPoints keys;
  keys.indices.reserve(n);
  keys.coords.reserve(n);
  std::vector<double> min_dist(m, std::numeric_limits<double>::infinity());
  std::size_t current = first;
  for (std::size_t step = 0; step < n; ++step) {
    keys.indices.push_back(current);
    keys.coords.push_back(cloud.points[current]);
    min_dist[current] = -1.0;
    std::size_t next = m;
    double best = -1.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (min_dist[i] < 0.0) continue;
      const double dist = (cloud.points[i] - cloud.points[current]).squaredNorm();
      if (dist < min_dist[i]) min_dist[i] = dist;
      if (min_dist[i] > best) {
        best = min_dist[i];
        next = i;
      }
    }
    current = next;
  }
  return keys;
}

/// K nearest neighbors of every center (squared Euclidean distance, lowest
/// point index on ties), re-centered on the center.
inline PatchSet knn_patches(const PointCloud& cloud, const KeyPoints& centers, std::size_t k) {
  validate_cloud(cloud);
  const std::size_t m = cloud.size();
  if (k == 0 || k > m)
    throw ArgumentError("knn_patches: need 1 <= K <= M, got K=" + std::to_string(k) +
                        " M=" + std::to_string(m));

  PatchSet patches;
  patches.centers = centers;
  patches.neighborhoods.resize(centers.size());
  patches.neighbor_indices.resize(centers.size());

  std::vector<std::size_t> idx(m);
  std::vector<double> dist(m);
  for (std::size_t c = 0; c < centers.size(); ++c) {
    const Vec3& center = centers.coords[c];
    for (std::size_t i = 0; i < m; ++i) dist[i] = (cloud.points[i] - center).squaredNorm();
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                        return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
                      });
    auto& hood = patches.neighborhoods[c];
    auto& hood_idx = patches.neighbor_indices[c];
    hood.reserve(k);
    hood_idx.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t j = 0; j < k; ++j) hood.push_back(cloud.points[idx[j]] - center);
  }
  return patches;
}

// Text format: one point per line as three whitespace-separated decimals.
// An optional first line holding a single integer is the class label.
// Blank lines and lines starting with '#' are skipped.
inline PointCloud read_cloud(std::istream& in) {
  PointCloud cloud;
  std::string line;
  bool first_data_line = true;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    std::istringstream fields(line);
    std::vector<std::string> tokens;
    for (std::string tok; fields >> tok;) tokens.push_back(tok);
    if (first_data_line && tokens.size() == 1) {
      try {
        std::size_t used = 0;
        const int label = std::stoi(tokens[0], &used);
        if (used != tokens[0].size()) throw ValidationError("bad label");
        cloud.label = label;
      } catch (const std::exception&) {
        throw ValidationError("line " + std::to_string(line_no) + ": expected an integer label");
      }
      first_data_line = false;
      continue;
    }
    first_data_line = false;
    if (tokens.size() != 3)
      throw ValidationError("line " + std::to_string(line_no) + ": expected 3 coordinates");
    Vec3 p;
    for (int a = 0; a < 3; ++a) {
      try {
        std::size_t used = 0;
        p[a] = std::stod(tokens[static_cast<std::size_t>(a)], &used);
        if (used != tokens[static_cast<std::size_t>(a)].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ValidationError("line " + std::to_string(line_no) + ": bad coordinate '" +
                              tokens[static_cast<std::size_t>(a)] + "'");
      }
    }
    cloud.points.push_back(p);
  }
  validate_cloud(cloud);
  return cloud;
}

inline void write_cloud(std::ostream& out, const PointCloud& cloud) {
  if (cloud.label) out << *cloud.label << '\n';
  out.precision(17);
  for (const auto& p : cloud.points) out << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
}

}  // namespace mantis
