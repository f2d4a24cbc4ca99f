#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "moby/moby.hpp"

namespace moby {

// Checkpoint file, little-endian:
//   "MBCK" | u32 version | u64 seed | i64 step | i64 optimizer steps
//   | u32 config bytes | config text
//   | 2 x (i64 cursor, i64 fill)                       key queues
//   | u32 tensor count | per tensor:
//       u16 name bytes | name | u8 dtype | u8 rank | rank x i64 dims | payload
// Tensor names: online.*, target.* (parameters and buffers), adamw.m.*,
// adamw.v.* (moments keyed by parameter name), queue0, queue1.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { kF32 = 1, kF64 = 2 };

struct TensorRecord {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::string payload;  // raw little-endian values

  bool operator==(const TensorRecord&) const = default;
};

struct QueueState {
  std::int64_t cursor = 0;
  std::int64_t fill = 0;

  bool operator==(const QueueState&) const = default;
};

/// Complete training state in serializable form. Randomness is derived from
/// (seed, step) by counter, so no generator state needs saving.
struct Checkpoint {
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::int64_t optimizer_steps = 0;
  std::string config_text;
  std::array<QueueState, 2> queues;
  std::vector<TensorRecord> tensors;

  bool operator==(const Checkpoint&) const = default;

  const TensorRecord* find(const std::string& name) const;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);

/// Throws ParseError with the byte offset of the first bad or missing field.
Checkpoint read_checkpoint(std::istream& in);
Checkpoint read_checkpoint(const std::string& path);

template <typename Scalar>
Checkpoint snapshot(TrainingState<Scalar>& state, std::uint64_t seed, const std::string& config_text);

/// Loads a checkpoint into `state`. Every name, shape and dtype is checked
/// before anything is written, so a failed restore leaves `state` untouched.
/// Mismatches throw ShapeError naming the tensor.
template <typename Scalar>
void restore(TrainingState<Scalar>& state, const Checkpoint& ckpt);

/// Copies the online backbone of a checkpoint into `backbone` (same checks).
template <typename Scalar>
void restore_backbone(Backbone<Scalar>& backbone, const Checkpoint& ckpt);

std::string to_string(DType d);

}  // namespace moby
