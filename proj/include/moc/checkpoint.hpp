#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "moc/adamw.hpp"
#include "moc/error.hpp"
#include "moc/model.hpp"
#include "moc/tensor.hpp"

// Checkpoint layout (little-endian):
//   "MMOC" | u32 version = 1 | u32 tensor count
//   per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 payload
//   u32 length | UTF-8 JSON config snapshot

namespace moc {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'M', 'M', 'O', 'C'};
inline constexpr const char* kOptimizerPrefix = "optim.";

struct CheckpointData {
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::json config = nlohmann::json::object();
};

namespace detail {

template <class U>
void put_le(std::ostream& out, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(std::istream& in, const char* what) {
  unsigned char buf[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) {
    throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const CheckpointData& data) {
  out.write(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.tensors.size()));
  for (const auto& [name, t] : data.tensors) {
    if (name.size() > 0xFFFF) throw ArgumentError("checkpoint: tensor name too long");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : t.values()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  const std::string blob = data.config.dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(blob.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline CheckpointData read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
    throw FormatError("checkpoint: bad magic (expected MMOC)");
  }
  const auto version = detail::get_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = detail::get_le<std::uint32_t>(in, "tensor count");
  CheckpointData data;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = detail::get_le<std::uint16_t>(in, "name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("checkpoint truncated in tensor name");
    const auto rank = detail::get_le<std::uint8_t>(in, "rank");
    if (rank > 4) throw FormatError("checkpoint: tensor '" + name + "' has rank above 4");
    Shape shape;
    for (std::uint8_t r = 0; r < rank; ++r) {
      const auto d = detail::get_le<std::uint32_t>(in, "dims");
      if (d > 0x7FFFFFFFu) throw FormatError("checkpoint: extent overflow in '" + name + "'");
      shape.push_back(static_cast<int>(d));
    }
    Tensor t(shape);
    for (auto& v : t.storage()) v = std::bit_cast<float>(detail::get_le<std::uint32_t>(in, "payload"));
    data.tensors.emplace_back(std::move(name), std::move(t));
  }
  const auto blob_len = detail::get_le<std::uint32_t>(in, "config length");
  std::string blob(blob_len, '\0');
  if (!in.read(blob.data(), blob_len)) throw FormatError("checkpoint truncated in config blob");
  try {
    data.config = blob.empty() ? nlohmann::json::object() : nlohmann::json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: config blob is not JSON: ") + e.what());
  }
  return data;
}

inline void write_checkpoint_file(const std::filesystem::path& path, const CheckpointData& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  write_checkpoint(out, data);
  if (!out) throw IoError("write failed for " + path.string());
}

inline CheckpointData read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

/// Model parameters (and, when given, AdamW moments under `optim.m.` /
/// `optim.v.`) plus a JSON snapshot of the model config.
template <class T>
CheckpointData make_checkpoint(const MambaMoc<T>& model, AdamW<T>* optimizer = nullptr) {
  CheckpointData data;
  const auto params = model.named_parameters();
  for (const auto& [name, p] : params) data.tensors.emplace_back(name, p.value().template cast<float>());
  data.config["model"] = model.config().to_json();
  if (optimizer) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto& shape = params[k].second.shape();
      const auto& m = optimizer->first_moments()[k];
      const auto& v = optimizer->second_moments()[k];
      data.tensors.emplace_back(kOptimizerPrefix + std::string("m.") + params[k].first,
                                Tensor(shape, std::vector<float>(m.begin(), m.end())));
      data.tensors.emplace_back(kOptimizerPrefix + std::string("v.") + params[k].first,
                                Tensor(shape, std::vector<float>(v.begin(), v.end())));
    }
    const auto& o = optimizer->options();
    data.config["optimizer"] = {{"step", optimizer->step_count()}, {"lr", o.lr},
                                {"weight_decay", o.weight_decay}, {"beta1", o.beta1},
                                {"beta2", o.beta2}, {"eps", o.eps}};
  }
  return data;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const MambaMoc<T>& model, AdamW<T>* optimizer = nullptr) {
  write_checkpoint_file(path, make_checkpoint(model, optimizer));
}

/// Model config stored in a checkpoint.
inline ModelConfig checkpoint_config(const CheckpointData& data) {
  if (!data.config.contains("model")) throw FormatError("checkpoint: config snapshot lacks a model section");
  return ModelConfig::from_json(data.config.at("model"));
}

/// Copies checkpoint tensors into an existing model. Every model parameter
/// must be present with the same shape; unknown non-optimizer tensors are
/// rejected too.
template <class T>
void apply_checkpoint(const CheckpointData& data, MambaMoc<T>& model, AdamW<T>* optimizer = nullptr) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : data.tensors) by_name[name] = &t;
  const auto params = model.named_parameters();
  std::map<std::string, bool> known;
  for (const auto& [name, p] : params) {
    known[name] = true;
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CompatibilityError("checkpoint lacks tensor '" + name + "'");
    if (it->second->shape() != p.shape()) {
      throw CompatibilityError("tensor '" + name + "' has shape " + shape_str(it->second->shape()) +
                               " in checkpoint but " + shape_str(p.shape()) + " in model");
    }
  }
  for (const auto& [name, t] : data.tensors) {
    if (name.rfind(kOptimizerPrefix, 0) == 0) continue;
    if (!known.count(name)) throw CompatibilityError("checkpoint tensor '" + name + "' has no counterpart in model");
  }
  for (const auto& [name, p] : params) {
    BasicVar<T> v = p;
    const Tensor& src = *by_name.at(name);
    auto& dst = v.mutable_value();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
  }
  if (optimizer && data.config.contains("optimizer")) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      for (const char* which : {"m.", "v."}) {
        const auto it = by_name.find(kOptimizerPrefix + std::string(which) + params[k].first);
        if (it == by_name.end()) continue;
        if (it->second->size() != params[k].second.size()) {
          throw CompatibilityError("optimizer state for '" + params[k].first + "' has wrong size");
        }
        auto& dst = which[0] == 'm' ? optimizer->first_moments()[k] : optimizer->second_moments()[k];
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>((*it->second)[i]);
      }
    }
    optimizer->set_step_count(data.config["optimizer"].value("step", std::int64_t{0}));
  }
}

template <class T>
void load_checkpoint(const std::filesystem::path& path, MambaMoc<T>& model, AdamW<T>* optimizer = nullptr) {
  apply_checkpoint(read_checkpoint_file(path), model, optimizer);
}

}  // namespace moc
