#pragma once

#include "mantis/core.hpp"
#include "mantis/params.hpp"
#include "mantis/train.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace mantis {

// Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
// raw little-endian doubles. Header entries give name, shape, frozen flag
// and the element offset into the payload.
inline constexpr char kCheckpointMagic[8] = {'M', 'N', 'T', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointExtras {
  std::size_t epoch = 0;
  nlohmann::json meta = nlohmann::json::object();
};

namespace detail {

inline void append(std::vector<double>& payload, const Matrix& m) {
  payload.insert(payload.end(), m.data(), m.data() + m.size());
}

inline Matrix slice(const std::vector<double>& payload, std::size_t offset, Eigen::Index rows, Eigen::Index cols) {
  const auto count = static_cast<std::size_t>(rows * cols);
  if (offset + count > payload.size()) throw ValidationError("checkpoint payload is truncated");
  Matrix m(rows, cols);
  std::memcpy(m.data(), payload.data() + offset, count * sizeof(double));
  return m;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamStore& store, const AdamW* opt,
                            const CheckpointExtras& extras = {}) {
  nlohmann::json header;
  header["epoch"] = extras.epoch;
  header["meta"] = extras.meta;
  std::vector<double> payload;
  auto& tensors = header["tensors"] = nlohmann::json::array();
  for (const auto& p : store) {
    tensors.push_back({{"name", p.name},
                       {"shape", {p.value.rows(), p.value.cols()}},
                       {"frozen", !p.trainable},
                       {"offset", payload.size()}});
    detail::append(payload, p.value);
  }
  if (opt) {
    nlohmann::json o;
    o["step"] = opt->steps();
    auto& mom = o["moments"] = nlohmann::json::array();
    for (const auto& [name, m] : opt->moments()) {
      mom.push_back({{"name", name}, {"shape", {m.m.rows(), m.m.cols()}}, {"m", payload.size()}});
      detail::append(payload, m.m);
      mom.back()["v"] = payload.size();
      detail::append(payload, m.v);
    }
    header["optimizer"] = o;
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArgumentError("cannot write checkpoint '" + path + "'");
  const std::uint64_t len = text.size();
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(double)));
  if (!out) throw ArgumentError("failed writing checkpoint '" + path + "'");
}

/// Restores values (and trainable flags) into a store with the same tensor
/// names and shapes; restores optimizer state when `opt` is given.
inline CheckpointExtras load_checkpoint(const std::string& path, ParamStore& store, AdamW* opt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot read checkpoint '" + path + "'");
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw ValidationError("not a checkpoint file");
  if (version != kCheckpointVersion) throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  std::vector<double> payload;
  {
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (raw.size() % sizeof(double) != 0) throw ValidationError("checkpoint payload is misaligned");
    payload.resize(raw.size() / sizeof(double));
    std::memcpy(payload.data(), raw.data(), raw.size());
  }
  const nlohmann::json header = nlohmann::json::parse(text);

  std::size_t seen = 0;
  for (const auto& t : header.at("tensors")) {
    const std::string name = t.at("name");
    if (!store.contains(name)) throw ValidationError("checkpoint tensor '" + name + "' is unknown to this model");
    Param& p = store.at(name);
    const Eigen::Index rows = t.at("shape")[0], cols = t.at("shape")[1];
    if (rows != p.value.rows() || cols != p.value.cols())
      throw ValidationError("checkpoint tensor '" + name + "' has a different shape");
    p.value = detail::slice(payload, t.at("offset"), rows, cols);
    ParamStore::set_trainable(p, !t.at("frozen").get<bool>());
    ++seen;
  }
  if (seen != store.size()) throw ValidationError("checkpoint is missing tensors for this model");

  if (opt && header.contains("optimizer")) {
    const auto& o = header["optimizer"];
    std::map<std::string, Moments> moments;
    for (const auto& m : o.at("moments")) {
      const Eigen::Index rows = m.at("shape")[0], cols = m.at("shape")[1];
      moments[m.at("name")] = {detail::slice(payload, m.at("m"), rows, cols),
                               detail::slice(payload, m.at("v"), rows, cols)};
    }
    opt->restore(o.at("step").get<std::uint64_t>(), std::move(moments));
  }
  return {header.value("epoch", std::size_t{0}), header.value("meta", nlohmann::json::object())};
}

}  // namespace mantis
