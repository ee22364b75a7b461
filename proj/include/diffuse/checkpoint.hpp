// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "diffuse/predictor.hpp"
#include "diffuse/schedule.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace diffuse {

/// First-moment / second-moment accumulators of the adaptive-moment optimizer.
struct AdamState {
  PredictorParams<float> m;
  PredictorParams<float> v;
  std::uint64_t step = 0;
};

/// Everything needed to resume training or run inference.
///
/// File layout (all integers little-endian):
///   "DIFFUSE-CKPT" magic, u32 version (1)
///   u32 n, n bytes of "key=value\n" text: model.*, schedule.*, meta.*
///   u32 tensor count, then per tensor:
///     u16 name length, name, u32 rows, u32 cols, rows*cols float32 (column-major)
///   u8 has_optimizer; if 1: u64 step, then the m and v tensors in the same
///   layout (names prefixed "adam.m." / "adam.v.").
struct Checkpoint {
  PredictorParams<float> params;
  NoiseSchedule schedule = NoiseSchedule::from_betas({0.5});
  std::optional<AdamState> optimizer;
  std::map<std::string, std::string> meta;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace diffuse
