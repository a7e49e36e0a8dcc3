#pragma once

// Binary checkpoint: magic "CRFK", u32 version, u64-length-prefixed JSON
// block, u32 tensor count, then per tensor: u32 name length, name bytes, u32
// rank, u64 extents, little-endian float32 values.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "crformer/tensor.hpp"

namespace crformer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json meta;  // {"config": ..., "step": ...}
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(const std::string& name) const;  // throws FormatError
  bool has(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ck);
/// Throws FormatError on bad magic, version or truncated data.
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace crformer
