#pragma once

#include <cstdint>
#include <string>

#include "unidiff/backbone.hpp"

namespace unidiff {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst_param;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares Backbone<double>::backward against central finite differences of
/// a random linear functional of the outputs, at random parameters.
/// `max_params` = 0 checks every parameter; otherwise a seeded subset.
///
/// Relative error is |a - n| / max(|a|, |n|, abs_floor).
GradCheckReport gradient_check(const BackboneConfig& cfg, std::uint64_t seed, std::size_t max_params = 0,
                               int batch = 2, double h = 1e-5, double abs_floor = 1e-5);

/// A small random configuration (widths 4..16, depth 1..5) for sweeps.
BackboneConfig random_small_config(std::uint64_t seed);

}  // namespace unidiff
