#pragma once

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "unidiff/backbone.hpp"
#include "unidiff/schedule.hpp"

namespace unidiff {

/// A trained network on disk: `<dir>/checkpoint.json` plus `<dir>/params.f32`
/// (little-endian f32 in layout order).
struct Checkpoint {
  BackboneConfig backbone;
  NoiseSchedule schedule;
  ParameterStore<float> params;
  nlohmann::json spec;   // training distribution, when known
  nlohmann::json train;  // resolved training config
  std::uint64_t step = 0;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);

/// Rebuilds the layout from the stored backbone config and checks it against
/// the recorded parameter names before reading the payload.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace unidiff
