#pragma once

#include "mantis/core.hpp"
#include "mantis/geometry.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace mantis {

enum class CurveFamily { hilbert, trans_hilbert, zorder, trans_zorder, random };

struct CurveKind {
  CurveFamily family = CurveFamily::hilbert;
  std::uint64_t seed = 0;  // Random only

  static CurveKind hilbert() { return {CurveFamily::hilbert, 0}; }
  static CurveKind trans_hilbert() { return {CurveFamily::trans_hilbert, 0}; }
  static CurveKind zorder() { return {CurveFamily::zorder, 0}; }
  static CurveKind trans_zorder() { return {CurveFamily::trans_zorder, 0}; }
  static CurveKind random(std::uint64_t seed) { return {CurveFamily::random, seed}; }

  // Accepts "hilbert", "trans-hilbert", "z", "trans-z", "random:<seed>".
  static CurveKind parse(const std::string& s) {
    if (s == "hilbert") return hilbert();
    if (s == "trans-hilbert") return trans_hilbert();
    if (s == "z" || s == "z-order") return zorder();
    if (s == "trans-z" || s == "trans-z-order") return trans_zorder();
    const std::string prefix = "random:";
    if (s.rfind(prefix, 0) == 0) {
      const std::string digits = s.substr(prefix.size());
      if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigError("bad random curve seed in '" + s + "'");
      return random(std::stoull(digits));
    }
    throw ConfigError("unknown curve '" + s + "'");
  }

  std::string name() const {
    switch (family) {
      case CurveFamily::hilbert: return "hilbert";
      case CurveFamily::trans_hilbert: return "trans-hilbert";
      case CurveFamily::zorder: return "z";
      case CurveFamily::trans_zorder: return "trans-z";
      case CurveFamily::random: return "random:" + std::to_string(seed);
    }
    return "?";
  }

  bool operator==(const CurveKind&) const = default;
};

using GridPoint = std::array<std::uint32_t, 3>;

namespace detail {

inline void check_grid(const GridPoint& p, unsigned bits) {
  if (bits == 0 || bits > 21) throw ArgumentError("curve bits must be in [1, 21]");
  const std::uint32_t limit = 1u << bits;
  for (auto c : p)
    if (c >= limit) throw ArgumentError("grid coordinate out of range for " + std::to_string(bits) + " bits");
}

// Skilling's transpose form, in place. Coordinates become the Hilbert index
// written as b-bit words, one per axis, interleaved most-significant first.
inline void axes_to_transpose(GridPoint& x, unsigned bits) {
  const std::uint32_t top = 1u << (bits - 1);
  for (std::uint32_t q = top; q > 1; q >>= 1) {
    const std::uint32_t p = q - 1;
    for (std::size_t i = 0; i < 3; ++i) {
      if (x[i] & q) {
        x[0] ^= p;
      } else {
        const std::uint32_t t = (x[0] ^ x[i]) & p;
        x[0] ^= t;
        x[i] ^= t;
      }
    }
  }
  for (std::size_t i = 1; i < 3; ++i) x[i] ^= x[i - 1];
  std::uint32_t t = 0;
  for (std::uint32_t q = top; q > 1; q >>= 1)
    if (x[2] & q) t ^= q - 1;
  for (auto& c : x) c ^= t;
}

inline void transpose_to_axes(GridPoint& x, unsigned bits) {
  const std::uint32_t end = 2u << (bits - 1);
  const std::uint32_t t0 = x[2] >> 1;
  for (std::size_t i = 2; i > 0; --i) x[i] ^= x[i - 1];
  x[0] ^= t0;
  for (std::uint32_t q = 2; q != end; q <<= 1) {
    const std::uint32_t p = q - 1;
    for (std::size_t i = 3; i-- > 0;) {
      if (x[i] & q) {
        x[0] ^= p;
      } else {
        const std::uint32_t t = (x[0] ^ x[i]) & p;
        x[0] ^= t;
        x[i] ^= t;
      }
    }
  }
}

// Spreads the low 21 bits of v so bit j lands at bit 3j.
inline std::uint64_t spread_bits(std::uint64_t v) {
  v &= 0x1FFFFFULL;
  v = (v | (v << 32)) & 0x1F00000000FFFFULL;
  v = (v | (v << 16)) & 0x1F0000FF0000FFULL;
  v = (v | (v << 8)) & 0x100F00F00F00F00FULL;
  v = (v | (v << 4)) & 0x10C30C30C30C30C3ULL;
  v = (v | (v << 2)) & 0x1249249249249249ULL;
  return v;
}

inline std::uint32_t compact_bits(std::uint64_t v) {
  v &= 0x1249249249249249ULL;
  v = (v ^ (v >> 2)) & 0x10C30C30C30C30C3ULL;
  v = (v ^ (v >> 4)) & 0x100F00F00F00F00FULL;
  v = (v ^ (v >> 8)) & 0x1F0000FF0000FFULL;
  v = (v ^ (v >> 16)) & 0x1F00000000FFFFULL;
  v = (v ^ (v >> 32)) & 0x1FFFFFULL;
  return static_cast<std::uint32_t>(v);
}

// (x, y, z) -> (z, x, y)
inline GridPoint cyclic_permute(const GridPoint& p) { return {p[2], p[0], p[1]}; }

}  // namespace detail

/// Hilbert index of a cell on the 2^b grid, in [0, 2^{3b}).
inline std::uint64_t hilbert_encode_3d(GridPoint p, unsigned bits) {
  detail::check_grid(p, bits);
  detail::axes_to_transpose(p, bits);
  std::uint64_t code = 0;
  for (unsigned j = bits; j-- > 0;)
    for (std::size_t i = 0; i < 3; ++i) code = (code << 1) | ((p[i] >> j) & 1u);
  return code;
}

inline GridPoint hilbert_decode_3d(std::uint64_t code, unsigned bits) {
  if (bits == 0 || bits > 21) throw ArgumentError("curve bits must be in [1, 21]");
  if (bits < 21 && code >= (std::uint64_t{1} << (3 * bits))) throw ArgumentError("Hilbert code out of range");
  GridPoint p{0, 0, 0};
  unsigned shift = 3 * bits;
  for (unsigned j = bits; j-- > 0;) {
    for (std::size_t i = 0; i < 3; ++i) {
      --shift;
      p[i] |= static_cast<std::uint32_t>((code >> shift) & 1u) << j;
    }
  }
  detail::transpose_to_axes(p, bits);
  return p;
}

// Bit j of x lands at bit 3j, y at 3j+1, z at 3j+2.
inline std::uint64_t zorder_encode_3d(const GridPoint& p, unsigned bits) {
  detail::check_grid(p, bits);
  return detail::spread_bits(p[0]) | (detail::spread_bits(p[1]) << 1) | (detail::spread_bits(p[2]) << 2);
}

inline GridPoint zorder_decode_3d(std::uint64_t code, unsigned bits) {
  GridPoint p{detail::compact_bits(code), detail::compact_bits(code >> 1), detail::compact_bits(code >> 2)};
  detail::check_grid(p, bits);
  return p;
}

/// Maps a coordinate in [-1, 1]^3 onto the b-bit grid.
inline GridPoint quantize(const Vec3& c, unsigned bits) {
  const double scale = static_cast<double>((std::uint64_t{1} << bits) - 1);
  GridPoint g{};
  for (int a = 0; a < 3; ++a) {
    // Small tolerance for values that left [-1, 1] through rounding only.
    if (!(c[a] >= -1.0 - 1e-9 && c[a] <= 1.0 + 1e-9))
      throw ValidationError("serialization expects normalized coordinates in [-1, 1]");
    const double v = std::clamp(c[a], -1.0, 1.0);
    g[static_cast<std::size_t>(a)] = static_cast<std::uint32_t>(std::floor((v + 1.0) / 2.0 * scale + 0.5));
  }
  return g;
}

inline std::uint64_t curve_code(const CurveKind& curve, const GridPoint& g, unsigned bits) {
  switch (curve.family) {
    case CurveFamily::hilbert: return hilbert_encode_3d(g, bits);
    case CurveFamily::trans_hilbert: return hilbert_encode_3d(detail::cyclic_permute(g), bits);
    case CurveFamily::zorder: return zorder_encode_3d(g, bits);
    case CurveFamily::trans_zorder: return zorder_encode_3d(detail::cyclic_permute(g), bits);
    case CurveFamily::random: break;
  }
  throw InternalError("curve_code called for the random curve");
}

struct SerializedPatchSet {
  std::vector<std::size_t> order;     // order[t] = original patch index at sequence position t
  CurveKind curve;
  std::vector<std::uint64_t> codes;   // codes[t] belongs to order[t]
  PatchSet patches;                   // reordered along `order`
};

/// Orders key points along a curve: ascending code, original index on ties.
/// The random curve shuffles with its seed and reports the rank as the code.
inline SerializedPatchSet serialize_keypoints(const KeyPoints& centers, const CurveKind& curve,
                                              unsigned bits = 10) {
  const std::size_t n = centers.size();
  SerializedPatchSet out;
  out.curve = curve;
  out.order.resize(n);
  std::iota(out.order.begin(), out.order.end(), std::size_t{0});
  out.codes.resize(n);

  if (curve.family == CurveFamily::random) {
    Rng rng(curve.seed);
    rng.shuffle(out.order);
    std::iota(out.codes.begin(), out.codes.end(), std::uint64_t{0});
  } else {
    std::vector<std::uint64_t> raw(n);
    for (std::size_t i = 0; i < n; ++i) raw[i] = curve_code(curve, quantize(centers.coords[i], bits), bits);
    std::stable_sort(out.order.begin(), out.order.end(),
                     [&](std::size_t a, std::size_t b) { return raw[a] < raw[b]; });
    for (std::size_t t = 0; t < n; ++t) out.codes[t] = raw[out.order[t]];
  }

  out.patches.centers.indices.reserve(n);
  out.patches.centers.coords.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    out.patches.centers.indices.push_back(centers.indices[out.order[t]]);
    out.patches.centers.coords.push_back(centers.coords[out.order[t]]);
  }
  return out;
}

/// Serializes a full patch set; neighborhoods follow their centers.
inline SerializedPatchSet serialize_patches(const PatchSet& patches, const CurveKind& curve, unsigned bits = 10) {
  SerializedPatchSet out = serialize_keypoints(patches.centers, curve, bits);
  out.patches.neighborhoods.reserve(patches.size());
  out.patches.neighbor_indices.reserve(patches.size());
  for (std::size_t t = 0; t < out.order.size(); ++t) {
    out.patches.neighborhoods.push_back(patches.neighborhoods[out.order[t]]);
    out.patches.neighbor_indices.push_back(patches.neighbor_indices[out.order[t]]);
  }
  return out;
}

}  // namespace mantis
