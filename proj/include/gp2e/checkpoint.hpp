// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "gp2e/io.hpp"
#include "gp2e/optimizer.hpp"
#include "gp2e/policy.hpp"

namespace gp2e {

inline constexpr char kCheckpointMagic[4] = {'G', 'P', '2', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointVersionError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct CheckpointTruncatedError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct CheckpointManifestError : CheckpointError {
  using CheckpointError::CheckpointError;
};

enum class PayloadDType : std::uint8_t { F64 = 0, F32 = 1 };

struct Checkpoint {
  PolicyConfig config;
  ParamStore params;
  std::optional<AdamState> adam;
  std::uint64_t step = 0;
  double best_score = 0.0;
  std::uint64_t init_seed = 0;
};

/// Inverse of PolicyConfig::to_text.
inline PolicyConfig policy_config_from_text(const std::string& text) {
  PolicyConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::map<std::string, std::string> kv;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("config block: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto take = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw CheckpointError(std::string("config block: missing ") + key);
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto as_size = [](const std::string& s) { return static_cast<std::size_t>(std::stoull(s)); };
  cfg.n_points = as_size(take("n_points"));
  {
    std::istringstream cs(take("channels"));
    std::string part;
    for (std::size_t i = 0; i < 3; ++i) {
      if (!std::getline(cs, part, ',')) throw CheckpointError("config block: channels needs three extents");
      cfg.channels[i] = as_size(part);
    }
  }
  cfg.condensed_mode = condensed_mode_from_string(take("condensed_mode"));
  cfg.d_k = as_size(take("d_k"));
  cfg.bias_buckets = as_size(take("bias_buckets"));
  cfg.bias_max_dist = std::stod(take("bias_max_dist"));
  cfg.robot_state_dim = as_size(take("robot_state_dim"));
  cfg.action_dim = as_size(take("action_dim"));
  cfg.head_hidden = as_size(take("head_hidden"));
  cfg.attention = take("attention") == "1";
  if (!kv.empty()) throw CheckpointError("config block: unknown key " + kv.begin()->first);
  cfg.validate();
  return cfg;
}

namespace detail {

inline void put_manifest_entry(ByteWriter& w, const std::string& name, const Tensor& t, PayloadDType dt) {
  w.put_string(name);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(dt));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.put<std::uint64_t>(d);
}

inline void put_payload(ByteWriter& w, const Tensor& t, PayloadDType dt) {
  for (double v : t.data()) {
    if (dt == PayloadDType::F64)
      w.put<double>(v);
    else
      w.put<float>(static_cast<float>(v));
  }
}

}  // namespace detail

/// Serializes to bytes. `dtype` F32 shrinks parameter payloads; optimizer
/// moments are always stored as F64.
inline std::string encode_checkpoint(const Checkpoint& ck, PayloadDType dtype = PayloadDType::F64) {
  std::ostringstream meta;
  meta << ck.config.to_text() << "init=fan_in_uniform\n"
       << "init_seed=" << ck.init_seed << '\n'
       << "step=" << ck.step << '\n'
       << "best_score_bits=" << std::bit_cast<std::uint64_t>(ck.best_score) << '\n'
       << "adam_t=" << (ck.adam ? ck.adam->t : 0) << '\n'
       << "has_adam=" << (ck.adam ? 1 : 0) << '\n';

  struct Entry {
    std::string name;
    const Tensor* t;
    PayloadDType dt;
  };
  std::vector<Entry> entries;
  for (const auto& [name, t] : ck.params) entries.push_back({name, &t, dtype});
  if (ck.adam) {
    for (const auto& [name, t] : ck.adam->m) entries.push_back({"adam.m/" + name, &t, PayloadDType::F64});
    for (const auto& [name, t] : ck.adam->v) entries.push_back({"adam.v/" + name, &t, PayloadDType::F64});
  }

  ByteWriter w;
  w.put_bytes(std::string_view(kCheckpointMagic, 4));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(meta.str());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) detail::put_manifest_entry(w, e.name, *e.t, e.dt);
  for (const auto& e : entries) detail::put_payload(w, *e.t, e.dt);
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  ByteReader<CheckpointTruncatedError> r(bytes);
  if (r.get_bytes(4) != std::string_view(kCheckpointMagic, 4)) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));

  const std::string meta = r.get_string();
  std::string cfg_text, extra_text;
  {
    std::istringstream in(meta);
    std::string line;
    while (std::getline(in, line)) {
      const bool extra = line.rfind("init", 0) == 0 || line.rfind("step=", 0) == 0 ||
                         line.rfind("best_score_bits=", 0) == 0 || line.rfind("adam_t=", 0) == 0 ||
                         line.rfind("has_adam=", 0) == 0;
      (extra ? extra_text : cfg_text) += line + '\n';
    }
  }
  Checkpoint ck;
  ck.config = policy_config_from_text(cfg_text);
  std::map<std::string, std::string> extra;
  {
    std::istringstream in(extra_text);
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      extra[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  ck.init_seed = std::stoull(extra.at("init_seed"));
  ck.step = std::stoull(extra.at("step"));
  ck.best_score = std::bit_cast<double>(static_cast<std::uint64_t>(std::stoull(extra.at("best_score_bits"))));
  const bool has_adam = extra.at("has_adam") == "1";

  struct Entry {
    std::string name;
    PayloadDType dt;
    Shape shape;
  };
  const auto count = r.get<std::uint32_t>();
  std::vector<Entry> entries;
  std::size_t payload_bytes = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.get_string();
    const auto dt = r.get<std::uint8_t>();
    if (dt > 1) throw CheckpointManifestError("manifest entry '" + e.name + "': unknown dtype " + std::to_string(dt));
    e.dt = static_cast<PayloadDType>(dt);
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    payload_bytes += shape_numel(e.shape) * (e.dt == PayloadDType::F64 ? 8 : 4);
    entries.push_back(std::move(e));
  }

  // Validate the manifest against the architecture before touching payloads.
  std::map<std::string, Shape> expected;
  for (const auto& spec : policy_param_plan(ck.config)) expected[spec.name] = spec.shape;
  std::map<std::string, Shape> seen;
  for (const auto& e : entries) {
    std::string base = e.name;
    if (base.rfind("adam.m/", 0) == 0 || base.rfind("adam.v/", 0) == 0) {
      if (!has_adam) throw CheckpointManifestError("manifest has optimizer entry '" + e.name + "' but no optimizer state");
      base = base.substr(7);
    } else {
      seen[base] = e.shape;
    }
    auto it = expected.find(base);
    if (it == expected.end()) throw CheckpointManifestError("manifest entry '" + e.name + "' is not a parameter");
    if (it->second != e.shape)
      throw CheckpointManifestError("manifest entry '" + e.name + "' has shape " + shape_str(e.shape) + ", expected " +
                                    shape_str(it->second));
  }
  for (const auto& [name, shape] : expected)
    if (!seen.count(name)) throw CheckpointManifestError("manifest is missing parameter '" + name + "'");
  const std::size_t expected_entries = expected.size() * (has_adam ? 3 : 1);
  if (entries.size() != expected_entries)
    throw CheckpointManifestError("manifest has " + std::to_string(entries.size()) + " entries, expected " +
                                  std::to_string(expected_entries));
  if (r.remaining() < payload_bytes)
    throw CheckpointTruncatedError("payload needs " + std::to_string(payload_bytes) + " bytes, file has " +
                                   std::to_string(r.remaining()));
  if (r.remaining() > payload_bytes) throw CheckpointManifestError("trailing bytes after payload");

  if (has_adam) {
    ck.adam.emplace();
    ck.adam->t = std::stoull(extra.at("adam_t"));
  }
  for (const auto& e : entries) {
    Tensor t(e.shape);
    for (double& v : t.data()) v = e.dt == PayloadDType::F64 ? r.get<double>() : static_cast<double>(r.get<float>());
    if (e.name.rfind("adam.m/", 0) == 0)
      ck.adam->m.emplace(e.name.substr(7), std::move(t));
    else if (e.name.rfind("adam.v/", 0) == 0)
      ck.adam->v.emplace(e.name.substr(7), std::move(t));
    else
      ck.params.emplace(e.name, std::move(t));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck,
                            PayloadDType dtype = PayloadDType::F64) {
  atomic_write(path, encode_checkpoint(ck, dtype));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const IoError& e) {
    throw CheckpointError(e.what());
  }
  return decode_checkpoint(bytes);
}

}  // namespace gp2e
