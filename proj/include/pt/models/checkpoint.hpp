#pragma once

// Versioned binary parameter checkpoints:
//   "PTCK" | u32 version | u64 config hash | u32 tensor count |
//   per tensor: u32 name length, name bytes, u64 rows, u64 cols, rows*cols f64
// All integers and doubles little-endian.

#include <cstdint>
#include <stdexcept>
#include <string>

#include "pt/diff/params.hpp"

namespace pt::models {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t config_hash = 0;
  diff::ParamStore params;
};

std::string checkpoint_bytes(const diff::ParamStore& params, std::uint64_t config_hash);
Checkpoint checkpoint_from_bytes(const std::string& bytes);
void save_checkpoint(const std::string& path, const diff::ParamStore& params, std::uint64_t config_hash);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace pt::models
