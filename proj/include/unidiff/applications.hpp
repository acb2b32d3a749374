#pragma once

#include <cstdint>
#include <vector>

#include "unidiff/sampling.hpp"

namespace unidiff {

/// Spherical interpolation of raw (unnormalised) vectors. Falls back to
/// linear interpolation when the angle is below 1e-6 rad or either input is
/// zero; rejects antipodal inputs (angle within 1e-6 of pi).
Vec slerp(const Vec& a, const Vec& b, double theta);

enum class VariationDirection { XYX, YXY };

struct VariationRequest {
  VariationDirection direction = VariationDirection::XYX;
  double guidance_scale = 0.0;
  int steps = 50;
  std::uint64_t seed = 0;
  SamplerKind sampler = SamplerKind::Ancestral;
};

/// Two chained conditional generations, one row per source.
Mat variation(const EpsModel& m, const Mat& sources, const VariationRequest& req);

struct GibbsRequest {
  int rounds = 1;
  double guidance_scale = 0.0;
  int steps = 50;
  std::uint64_t seed = 0;
};

/// Blocked Gibbs from x-modality initial states, one chain per row.
/// Returns [x_init, y_1, x_1, y_2, x_2, ...], 1 + 2 * rounds entries.
std::vector<Mat> gibbs_chains(const EpsModel& m, const Mat& init, const GibbsRequest& req);

struct InterpolationRequest {
  Vec endpoint_a;
  Vec endpoint_b;
  double guidance_scale = 0.0;
  int steps = 50;
  std::uint64_t seed = 0;
  int solver_order = 2;
};

/// Deterministic conditional solve of one modality from t_start to t_end,
/// conditioned on `condition` (clean other modality). Filler noise for s > 0
/// comes from `filler_seed`.
Mat conditional_solve(const EpsModel& m, Task task, const Mat& init, const Mat& condition, int t_start, int t_end,
                      int steps, double s, std::uint64_t filler_seed, int order = 2);

/// Encode x0 to T under the model conditioned on y0, then decode back.
Mat round_trip(const EpsModel& m, const Mat& x0, const Mat& y0, int steps, double s, std::uint64_t seed,
               int order = 2);

/// Shared part of the interpolation procedure: one y_T draw, the two
/// cross-modal decodes and the two noise-injection encodes.
struct InterpolationPath {
  Vec y0_a, y0_b;
  Vec xT_a, xT_b;
};

InterpolationPath prepare_interpolation(const EpsModel& m, const InterpolationRequest& req);

/// Decodes slerp(xT_a, xT_b, theta) conditioned on slerp(y0_a, y0_b, theta).
Vec interpolate_at(const EpsModel& m, const InterpolationRequest& req, const InterpolationPath& path, double theta);

Vec interpolate(const EpsModel& m, const InterpolationRequest& req, double theta);

}  // namespace unidiff
