#pragma once

// STEERCK1 container:
//   bytes 0..7   magic "STEERCK1"
//   u32 LE       format version
//   u64 LE       metadata length n
//   n bytes      UTF-8 JSON {"tensors": [{name, shape, dtype, offset, nbytes}], "attributes": {...}}
//   payload      little-endian f64 arrays; offsets are relative to the payload start

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steerlab/adapt/regime.hpp"
#include "steerlab/error.hpp"
#include "steerlab/model/params.hpp"

namespace steerlab {

inline constexpr std::array<char, 8> kCheckpointMagic = {'S', 'T', 'E', 'E', 'R', 'C', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  enum class Kind { io, bad_magic, unknown_version, truncated, malformed_metadata, duplicate_name,
                    overlapping_offsets, missing_tensor, shape_mismatch };

  CheckpointError(Kind kind, const std::string& detail)
      : Error(std::string(label(kind)) + ": " + detail), kind_(kind) {}

  Kind kind() const { return kind_; }

  static const char* label(Kind k) {
    switch (k) {
      case Kind::io: return "i/o error";
      case Kind::bad_magic: return "bad magic";
      case Kind::unknown_version: return "unknown version";
      case Kind::truncated: return "truncated payload";
      case Kind::malformed_metadata: return "malformed metadata";
      case Kind::duplicate_name: return "duplicate name";
      case Kind::overlapping_offsets: return "overlapping offsets";
      case Kind::missing_tensor: return "missing tensor";
      case Kind::shape_mismatch: return "shape mismatch";
    }
    return "checkpoint error";
  }

 private:
  Kind kind_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json attributes = nlohmann::json::object();

  const Tensor* find(const std::string& name) const {
    for (const auto& nt : tensors) {
      if (nt.name == name) return &nt.tensor;
    }
    return nullptr;
  }

  const Tensor& get(const std::string& name) const {
    if (const Tensor* t = find(name)) return *t;
    throw CheckpointError(CheckpointError::Kind::missing_tensor, "no tensor named '" + name + "'");
  }

  void add(std::string name, Tensor t) { tensors.push_back({std::move(name), std::move(t)}); }
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  using K = CheckpointError::Kind;
  nlohmann::json meta;
  meta["tensors"] = nlohmann::json::array();
  meta["attributes"] = ck.attributes;
  std::set<std::string> seen;
  std::uint64_t offset = 0;
  for (const auto& nt : ck.tensors) {
    if (!seen.insert(nt.name).second) throw CheckpointError(K::duplicate_name, "'" + nt.name + "'");
    const std::uint64_t nbytes = nt.tensor.size() * sizeof(double);
    meta["tensors"].push_back(
        {{"name", nt.name}, {"shape", nt.tensor.shape()}, {"dtype", "f64"}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string meta_text = meta.dump();
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, meta_text.size());
  out += meta_text;
  out.reserve(out.size() + offset);
  for (const auto& nt : ck.tensors) {
    for (double x : nt.tensor.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x));
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  using K = CheckpointError::Kind;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t header = kCheckpointMagic.size() + 4 + 8;
  if (bytes.size() < kCheckpointMagic.size() ||
      std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw CheckpointError(K::bad_magic, "file does not start with STEERCK1");
  }
  if (bytes.size() < header) throw CheckpointError(K::truncated, "header shorter than 20 bytes");
  const auto version = detail::get_le<std::uint32_t>(p + 8);
  if (version != kCheckpointVersion) {
    throw CheckpointError(K::unknown_version, "version " + std::to_string(version) + ", supported " +
                                                  std::to_string(kCheckpointVersion));
  }
  const auto meta_len = detail::get_le<std::uint64_t>(p + 12);
  if (meta_len > bytes.size() - header) throw CheckpointError(K::truncated, "metadata extends past end of file");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                                 bytes.begin() + static_cast<std::ptrdiff_t>(header + meta_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(K::malformed_metadata, e.what());
  }
  const std::size_t payload_begin = header + meta_len;
  const std::size_t payload_size = bytes.size() - payload_begin;

  Checkpoint ck;
  try {
    if (!meta.contains("tensors") || !meta["tensors"].is_array()) {
      throw CheckpointError(K::malformed_metadata, "missing tensor table");
    }
    if (meta.contains("attributes")) ck.attributes = meta["attributes"];
    std::set<std::string> names;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    for (const auto& entry : meta["tensors"]) {
      const std::string name = entry.at("name").get<std::string>();
      if (!names.insert(name).second) throw CheckpointError(K::duplicate_name, "'" + name + "'");
      if (entry.at("dtype").get<std::string>() != "f64") {
        throw CheckpointError(K::malformed_metadata, "tensor '" + name + "' has unsupported dtype");
      }
      const Shape shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const std::uint64_t nbytes = shape_numel(shape) * sizeof(double);
      if (entry.contains("nbytes") && entry["nbytes"].get<std::uint64_t>() != nbytes) {
        throw CheckpointError(K::malformed_metadata, "tensor '" + name + "' byte count disagrees with its shape");
      }
      if (offset > payload_size || nbytes > payload_size - offset) {
        throw CheckpointError(K::truncated, "tensor '" + name + "' extends past end of file");
      }
      spans.emplace_back(offset, offset + nbytes);
      std::vector<double> data(shape_numel(shape));
      const unsigned char* src = p + payload_begin + offset;
      for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(src + 8 * i));
      }
      ck.tensors.push_back({name, Tensor(shape, std::move(data))});
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
      if (spans[i].first < spans[i - 1].second) throw CheckpointError(K::overlapping_offsets, "tensor payloads overlap");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(K::malformed_metadata, e.what());
  } catch (const DimensionError& e) {
    throw CheckpointError(K::malformed_metadata, e.what());
  }
  return ck;
}

// Writes to a sibling temp file, then renames over the target.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError(CheckpointError::Kind::io, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Kind::io, "cannot rename onto " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// model <-> checkpoint

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_mlp", c.d_mlp},     {"max_seq_len", c.max_seq_len},
          {"rope_base", c.rope_base},   {"norm_eps", c.norm_eps}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_mlp = j.value("d_mlp", c.d_mlp);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

inline void add_params(Checkpoint& ck, const TransformerParams& p) {
  for_each_tensor(p, [&](const std::string& name, const Tensor& t) { ck.add(name, t); });
  ck.attributes["model"] = to_json(p.config);
}

inline void add_steering(Checkpoint& ck, const SteeringBank& s) {
  for_each_steering(s, [&](const std::string& name, const Tensor& t) { ck.add(name, t); });
}

inline void add_lora(Checkpoint& ck, const LoraBank& b) {
  for_each_lora(b, [&](const std::string& name, const Tensor& t) { ck.add(name, t); });
  ck.attributes["lora"] = {{"rank", b.rank}, {"alpha", b.alpha}};
}

namespace detail {

inline void assign_from(const Checkpoint& ck, const std::string& name, Tensor& dst) {
  const Tensor& src = ck.get(name);
  if (src.shape() != dst.shape()) {
    throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                          "tensor '" + name + "' is " + shape_str(src.shape()) + " in the file, model expects " +
                              shape_str(dst.shape()));
  }
  dst = src;
}

}  // namespace detail

// Loads into a freshly shaped parameter set; nothing is returned on failure.
inline TransformerParams params_from_checkpoint(const Checkpoint& ck, const ModelConfig& config) {
  config.validate();
  TransformerParams p = init_params(config, 0, 0.0);
  for_each_tensor(p, [&](const std::string& name, Tensor& t) { detail::assign_from(ck, name, t); });
  validate_params(p);
  return p;
}

inline ModelConfig checkpoint_model_config(const Checkpoint& ck) {
  if (!ck.attributes.contains("model")) {
    throw CheckpointError(CheckpointError::Kind::malformed_metadata, "no model config in attributes");
  }
  return model_config_from_json(ck.attributes["model"]);
}

inline TransformerParams params_from_checkpoint(const Checkpoint& ck) {
  return params_from_checkpoint(ck, checkpoint_model_config(ck));
}

inline SteeringBank steering_from_checkpoint(const Checkpoint& ck, const ModelConfig& config) {
  SteeringBank s = init_steering(config);
  for_each_steering(s, [&](const std::string& name, Tensor& t) { detail::assign_from(ck, name, t); });
  return s;
}

inline LoraBank lora_from_checkpoint(const Checkpoint& ck, const ModelConfig& config) {
  int rank = kDefaultLoraRank;
  double alpha = kDefaultLoraAlpha;
  if (ck.attributes.contains("lora")) {
    rank = ck.attributes["lora"].value("rank", rank);
    alpha = ck.attributes["lora"].value("alpha", alpha);
  }
  LoraBank b = init_lora(config, rank, alpha, 0);
  for_each_lora(b, [&](const std::string& name, Tensor& t) { detail::assign_from(ck, name, t); });
  return b;
}

}  // namespace steerlab
