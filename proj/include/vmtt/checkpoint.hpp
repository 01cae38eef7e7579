#pragma once

// Binary checkpoint:
//   magic "VMTTCKPT" | u32 version | u64 n | n bytes JSON model config |
//   u64 blob count | per blob: u32 name length, name, u32 rank, u64 dims..., doubles
// All integers and doubles little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "vmtt/model.hpp"
#include "vmtt/serialization.hpp"

namespace vmtt {

inline constexpr char kCheckpointMagic[8] = {'V', 'M', 'T', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError("checkpoint: truncated file");
  return v;
}
}  // namespace detail

inline void save_checkpoint(const TransducerModel& model, std::ostream& os) {
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  const std::string cfg = to_json(model.config()).dump();
  detail::put<std::uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto& entries = model.params().entries();
  detail::put<std::uint64_t>(os, entries.size());
  for (const auto& [name, var] : entries) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto& shape = var.value().shape();
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) detail::put<std::uint64_t>(os, d);
    const auto& data = var.value().data();
    os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!os) throw CheckpointError("checkpoint: write failed");
}

inline void save_checkpoint(const TransducerModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
  save_checkpoint(model, os);
}

inline std::unique_ptr<TransducerModel> load_checkpoint(std::istream& is) {
  char magic[sizeof kCheckpointMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw CheckpointError("checkpoint: bad magic");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  std::string cfg(detail::get<std::uint64_t>(is), '\0');
  if (!is.read(cfg.data(), static_cast<std::streamsize>(cfg.size()))) throw CheckpointError("checkpoint: truncated file");
  auto model = std::make_unique<TransducerModel>(model_config_from_json(json::parse(cfg)), 0);
  auto& entries = model->params().entries();
  const auto count = detail::get<std::uint64_t>(is);
  if (count != entries.size()) throw CheckpointError("checkpoint: parameter count does not match config");
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(detail::get<std::uint32_t>(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw CheckpointError("checkpoint: truncated file");
    const Var* var = model->params().find(name);
    if (!var) throw CheckpointError("checkpoint: unknown parameter '" + name + "'");
    std::vector<std::size_t> shape(detail::get<std::uint32_t>(is));
    for (auto& d : shape) d = detail::get<std::uint64_t>(is);
    Var v = *var;
    auto& w = v.mutable_value();
    if (shape != w.shape()) throw CheckpointError("checkpoint: shape mismatch for '" + name + "'");
    auto& data = w.storage();
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double))))
      throw CheckpointError("checkpoint: truncated file");
  }
  return model;
}

inline std::unique_ptr<TransducerModel> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  return load_checkpoint(is);
}

}  // namespace vmtt
