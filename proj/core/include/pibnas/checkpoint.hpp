#pragma once

// Flat binary parameter container ("PIBW"):
//   magic "PIBW" | version u32 | tensor count u32
//   per tensor: name length u32 | UTF-8 name | rank u32 | dims u64 x rank | f32 x numel
// All integers and floats little-endian.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "pibnas/tensor.hpp"

namespace pibnas {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A checkpoint does not fit a model; `tensor()` names the first offender.
class CheckpointMismatch : public CheckpointError {
 public:
  CheckpointMismatch(std::string tensor, const std::string& what)
      : CheckpointError(what), tensor_(std::move(tensor)) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

/// Copies `loaded` into `target` by name, in target order. Every target tensor
/// must be present with an identical shape and no extra tensors are allowed.
void restore_checkpoint(const NamedTensors& loaded, NamedTensors& target);

}  // namespace pibnas
