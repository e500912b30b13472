#pragma once

// Checkpoint container: a text manifest followed by a little-endian float32
// payload.
//
//   trfeddis-checkpoint <version>
//   client <id>
//   seed <seed>
//   round <rounds completed>
//   experiment <one-line JSON config>
//   model <one-line JSON model config>
//   param <name> <tag> <trainable> <rank> <dims...> <offset> <count>   (one per parameter)
//   payload <bytes>
//   <payload bytes>
//
// Offsets and counts are in floats from the start of the payload.

#include <cstdint>
#include <filesystem>
#include <stdexcept>

#include "trfeddis/config.hpp"
#include "trfeddis/model.hpp"

namespace trfeddis::checkpoint {

inline constexpr int kFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class VersionMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class Truncated : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class Inconsistent : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct Checkpoint {
  model::Model model;
  config::ExperimentConfig experiment;
  std::size_t client_id = 0;
  std::uint64_t seed = 0;
  std::size_t round = 0;
};

void write(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read(const std::filesystem::path& path);

}  // namespace trfeddis::checkpoint
