#pragma once

// Parameter checkpoints: one line of JSON manifest mapping each tensor key to
// {shape, offset}, a newline, then a single little-endian float32 blob.
// Adam moments are stored as extra tensors "<key>:adam_m" / "<key>:adam_v"
// with the step counters listed under "adam_steps".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "paegan/nn/param_store.hpp"

namespace paegan::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr const char* kCheckpointFormat = "paegan-tensors/1";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
std::string serialize_params(const ParamStore<T>& store, bool include_optimizer = true) {
  nlohmann::json tensors = nlohmann::json::object();
  nlohmann::json steps = nlohmann::json::object();
  std::vector<float> blob;
  auto append = [&](const std::string& key, const Tensor<T>& t) {
    tensors[key] = {{"shape", t.shape()}, {"offset", blob.size() * sizeof(float)}};
    for (auto v : t.values()) blob.push_back(static_cast<float>(v));
  };
  for (const auto& [key, p] : store) {
    append(key, p.value);
    if (include_optimizer) {
      append(key + ":adam_m", p.m);
      append(key + ":adam_v", p.v);
      steps[key] = p.step;
    }
  }
  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"dtype", "float32"},
                             {"blob_bytes", blob.size() * sizeof(float)},
                             {"tensors", tensors}};
  if (include_optimizer) manifest["adam_steps"] = steps;
  std::string out = manifest.dump();
  out.push_back('\n');
  const std::size_t header = out.size();
  out.resize(header + blob.size() * sizeof(float));
  if (!blob.empty()) std::memcpy(out.data() + header, blob.data(), blob.size() * sizeof(float));
  return out;
}

namespace detail {
struct ParsedCheckpoint {
  nlohmann::json manifest;
  std::vector<float> blob;
};

inline ParsedCheckpoint parse_checkpoint(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw CheckpointError("checkpoint: missing manifest line");
  ParsedCheckpoint pc;
  try {
    pc.manifest = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  if (pc.manifest.value("format", "") != kCheckpointFormat) throw CheckpointError("checkpoint: unknown format");
  const std::size_t blob_bytes = pc.manifest.at("blob_bytes").get<std::size_t>();
  if (bytes.size() - nl - 1 != blob_bytes) throw CheckpointError("checkpoint: blob size does not match manifest");
  pc.blob.resize(blob_bytes / sizeof(float));
  if (blob_bytes) std::memcpy(pc.blob.data(), bytes.data() + nl + 1, blob_bytes);
  return pc;
}

template <class T>
void read_tensor(const ParsedCheckpoint& pc, const std::string& key, Tensor<T>& dst) {
  const auto& tensors = pc.manifest.at("tensors");
  if (!tensors.contains(key)) throw CheckpointError("checkpoint: missing tensor '" + key + "'");
  const auto& entry = tensors.at(key);
  const Shape shape = entry.at("shape").get<Shape>();
  if (shape != dst.shape()) {
    throw CheckpointError("checkpoint: tensor '" + key + "' has shape " + to_string(shape) + ", expected " +
                          to_string(dst.shape()));
  }
  const std::size_t offset = entry.at("offset").get<std::size_t>() / sizeof(float);
  if (offset + dst.size() > pc.blob.size()) throw CheckpointError("checkpoint: tensor '" + key + "' out of range");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(pc.blob[offset + i]);
}
}  // namespace detail

/// Loads values (and Adam state when present) into an existing store whose
/// keys and shapes must match the checkpoint.
template <class T>
void deserialize_params(ParamStore<T>& store, const std::string& bytes) {
  const auto pc = detail::parse_checkpoint(bytes);
  const auto& tensors = pc.manifest.at("tensors");
  std::size_t expected = 0;
  const bool has_opt = pc.manifest.contains("adam_steps");
  for (auto& [key, p] : store) {
    detail::read_tensor(pc, key, p.value);
    ++expected;
    if (has_opt) {
      detail::read_tensor(pc, key + ":adam_m", p.m);
      detail::read_tensor(pc, key + ":adam_v", p.v);
      p.step = pc.manifest.at("adam_steps").at(key).template get<std::uint64_t>();
      expected += 2;
    }
    p.grad.fill(T{0});
  }
  if (tensors.size() != expected) throw CheckpointError("checkpoint: contains tensors unknown to the model");
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

template <class T>
void save_params(const ParamStore<T>& store, const std::filesystem::path& path, bool include_optimizer = true) {
  write_file_bytes(path, serialize_params(store, include_optimizer));
}

template <class T>
void load_params(ParamStore<T>& store, const std::filesystem::path& path) {
  deserialize_params(store, read_file_bytes(path));
}

}  // namespace paegan::nn
