#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "eac/common.hpp"
#include "eac/tensor.hpp"

namespace eac {

/// Checkpoint container: magic, format version, a JSON header describing the
/// payload, then raw little-endian tensor blobs. Saves are atomic (temp file
/// plus rename) and round-trips are bit-exact.
namespace ckpt {

inline constexpr char kMagic[8] = {'E', 'A', 'C', 'C', 'K', 'P', 'T', '\n'};
inline constexpr std::uint32_t kVersion = 1;

template <typename T>
const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else if constexpr (std::is_same_v<T, double>) return "f64";
  else static_assert(sizeof(T) == 0, "unsupported checkpoint scalar type");
}

inline void require_little_endian() {
  const std::uint32_t probe = 1;
  char byte;
  std::memcpy(&byte, &probe, 1);
  if (byte != 1) throw IoError("checkpoint: big-endian hosts are not supported");
}

} // namespace ckpt

/// Loaded checkpoint: free-form metadata plus named tensors.
template <typename T>
struct Checkpoint {
  nlohmann::json meta;
  std::map<std::string, Tensor<T>> tensors;

  const Tensor<T>& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw IoError(msg("checkpoint: missing tensor '", name, "'"));
    return it->second;
  }
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const std::vector<std::pair<std::string, const Tensor<T>*>>& tensors) {
  ckpt::require_little_endian();
  nlohmann::json header;
  header["meta"] = meta;
  header["dtype"] = ckpt::dtype_name<T>();
  auto& list = header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : tensors) {
    if (tensor == nullptr) throw ContractError("save_checkpoint: null tensor");
    const std::uint64_t nbytes = tensor->numel() * sizeof(T);
    list.push_back({{"name", name},
                    {"shape", tensor->shape()},
                    {"offset", offset},
                    {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string header_bytes = header.dump();

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(msg("checkpoint: cannot open '", tmp.string(), "' for write"));
    out.write(ckpt::kMagic, sizeof(ckpt::kMagic));
    const std::uint32_t version = ckpt::kVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t hlen = header_bytes.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header_bytes.data(), static_cast<std::streamsize>(hlen));
    for (const auto& [name, tensor] : tensors)
      out.write(reinterpret_cast<const char*>(tensor->data()),
                static_cast<std::streamsize>(tensor->numel() * sizeof(T)));
    out.flush();
    if (!out) throw IoError(msg("checkpoint: short write to '", tmp.string(), "'"));
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError(msg("checkpoint: rename to '", path.string(), "' failed: ", ec.message()));
  }
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  ckpt::require_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(msg("checkpoint: cannot open '", path.string(), "'"));
  char magic[sizeof(ckpt::kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, ckpt::kMagic, sizeof(magic)) != 0)
    throw IoError(msg("checkpoint: '", path.string(), "' is not a checkpoint file"));
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != ckpt::kVersion)
    throw IoError(msg("checkpoint: unsupported format version ", version));
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in) throw IoError("checkpoint: truncated header length");
  std::string header_bytes(hlen, '\0');
  in.read(header_bytes.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_bytes);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(msg("checkpoint: bad header json: ", e.what()));
  }
  if (header.at("dtype").get<std::string>() != ckpt::dtype_name<T>())
    throw IoError(msg("checkpoint: dtype is ", header.at("dtype").get<std::string>(),
                      ", loader expects ", ckpt::dtype_name<T>()));
  Checkpoint<T> out;
  out.meta = header.value("meta", nlohmann::json::object());
  const std::streampos blob_base = in.tellg();
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    Tensor<T> tensor(shape);
    if (tensor.numel() * sizeof(T) != nbytes)
      throw IoError(msg("checkpoint: tensor '", name, "' shape/size mismatch"));
    in.seekg(blob_base + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(tensor.data()), static_cast<std::streamsize>(nbytes));
    if (!in) throw IoError(msg("checkpoint: truncated blob for tensor '", name, "'"));
    out.tensors.emplace(name, std::move(tensor));
  }
  return out;
}

} // namespace eac
