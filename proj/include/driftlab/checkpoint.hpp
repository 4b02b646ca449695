#pragma once

// Versioned binary tensor dump:
//   "DLCKPT\0\0" | u32 version | u64 header bytes | JSON header | raw float64 payload
// The header lists every tensor's name and shape in payload order plus free-form
// metadata (model kind, config). Values are stored as their IEEE-754 bit
// patterns, so a save/load round trip is bit-exact.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "driftlab/tensor.hpp"

namespace driftlab {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;

  const Tensor& get(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& os, const nlohmann::json& meta, const std::vector<NamedTensor>& tensors);
Checkpoint read_checkpoint(std::istream& is);

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const std::vector<NamedTensor>& tensors);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// SHA-256 over the serialized form; identical weights and metadata give
// identical hashes.
std::string checkpoint_hash(const nlohmann::json& meta, const std::vector<NamedTensor>& tensors);

// Copy values from `source` into same-named, same-shaped tensors of `target`.
void assign_tensors(const std::vector<NamedTensor>& target, const Checkpoint& source);

}  // namespace driftlab
