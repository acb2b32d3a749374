#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include <json.hpp>

#include "unidiff/synthetic_data.hpp"

namespace unidiff {

/// UDS dataset container: a JSON manifest at `path` and a sibling raw file
/// `<path>.bin` of n * (d_x + d_y) little-endian f32 values, x block then y
/// block per record. Either block may be empty (single-modality samples).
struct UdsFile {
  Dataset data;
  nlohmann::json spec;  // null when the producer had no ground-truth spec
  std::uint64_t seed = 0;
  nlohmann::json extra;  // producer-specific metadata, e.g. the sampling task
};

void write_uds(const std::filesystem::path& path, const Dataset& data, const nlohmann::json& spec,
               std::uint64_t seed, const nlohmann::json& extra = nlohmann::json::object());

UdsFile read_uds(const std::filesystem::path& path);

/// Raw little-endian f32 helpers shared with the checkpoint format.
void write_f32_le(std::ostream& os, const float* data, std::size_t n);
void read_f32_le(std::istream& is, float* data, std::size_t n);

}  // namespace unidiff
