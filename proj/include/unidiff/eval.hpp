#pragma once

#include <cstdint>

#include <json.hpp>

#include "unidiff/sampling.hpp"
#include "unidiff/synthetic_data.hpp"

namespace unidiff {

struct MomentReport {
  std::size_t n = 0;
  Vec mean_dev;  // sample mean - target mean
  Mat cov_dev;   // sample covariance - target covariance
  double max_mean_dev = 0.0;
  double max_cov_dev = 0.0;

  nlohmann::json to_json() const;
};

/// Deviations of the sample moments (rows are samples) from the target.
/// Needs at least 100 samples.
MomentReport moment_report(const Mat& samples, const Vec& mean, const Mat& cov);

/// Target moments of what `task` generates: the joint law, a marginal, or
/// the analytic conditional at `condition`.
std::pair<Vec, Mat> task_moments(const DistributionSpec& spec, Task task, const std::optional<Vec>& condition = {});

struct EnergyTest {
  double statistic = 0.0;
  double p_value = 1.0;
  int permutations = 0;
  std::size_t n_a = 0, n_b = 0;  // sizes actually compared
};

/// V-statistic 2 E|A-B| - E|A-A'| - E|B-B'| with a label-permutation
/// p-value (1 + #{perm >= obs}) / (1 + permutations). When max_per_side > 0,
/// larger inputs are first subsampled without replacement (seeded).
EnergyTest energy_distance(const Mat& a, const Mat& b, int permutations = 200, std::uint64_t seed = 0,
                           std::size_t max_per_side = 0);

/// Squared 2-Wasserstein distance between two Gaussians:
/// |ma - mb|^2 + tr(Ca + Cb - 2 (Cb^1/2 Ca Cb^1/2)^1/2).
double gaussian_w2(const Vec& mean_a, const Mat& cov_a, const Vec& mean_b, const Mat& cov_b);

/// Symmetric PSD square root by eigendecomposition, eigenvalues clamped at
/// 1e-12.
Mat psd_sqrt(const Mat& a);

/// Samples of `target` given the other modality = `given`, against the
/// spec's analytic conditional.
MomentReport conditional_check(const Mat& samples, const DistributionSpec& spec, Modality target, const Vec& given);

}  // namespace unidiff
