#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "pil/model.hpp"

namespace pil {

/// Binary checkpoint, all integers and floats little-endian:
///
///   "PLCK" | u32 version | u32 count
///   count x { u32 name_len | name | u32 rank | u64 dims[rank] | f64 values[prod(dims)] }
///   u64 json_len | json
///
/// The trailing JSON object holds "network_spec" and an optional "meta" object.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  NetworkSpec spec;
  std::vector<Parameter> tensors;
  nlohmann::json meta = nlohmann::json::object();
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws IoError on a bad magic, unknown version or truncated payload.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint checkpoint_of(const Network& net, nlohmann::json meta = nlohmann::json::object());
/// Validates the stored tensors against the stored spec.
Network network_from_checkpoint(const Checkpoint& ckpt);

}  // namespace pil
