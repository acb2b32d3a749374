#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "unidiff/schedule.hpp"
#include "unidiff/synthetic_data.hpp"

namespace unidiff {

/// Network output eps_theta = [eps^x, eps^y].
struct JointNoisePrediction {
  Vec eps_x;
  Vec eps_y;
};

/// Exact E[eps^x, eps^y | x_{tx}, y_{ty}] for a Gaussian-mixture data law
/// under the forward kernel.
///
/// With u = (x_{tx}, y_{ty}) = A z0 + S eps, where A and S are diagonal with
/// sqrt(alpha_bar) and sqrt(1 - alpha_bar) per block, each component k of the
/// data law maps to N(A mu_k, A Sigma_k A + S^2). The score of the perturbed
/// joint is -sum_k r_k(u) C_k^{-1} (u - A mu_k) and the noise prediction is
/// -S times that score. Blocks at t = 0 have S = 0 and predict zero noise.
class OracleModel {
 public:
  OracleModel(DistributionSpec spec, NoiseSchedule sched);

  const DistributionSpec& spec() const noexcept { return spec_; }
  const NoiseSchedule& schedule() const noexcept { return sched_; }

  JointNoisePrediction predict(const Vec& x, const Vec& y, int tx, int ty) const;

  /// Stacked (grad_x, grad_y) of log q(x_{tx}, y_{ty}).
  Vec score(const Vec& x, const Vec& y, int tx, int ty) const;

  double log_density(const Vec& x, const Vec& y, int tx, int ty) const;

  /// Posterior component weights given the perturbed pair; sums to 1.
  std::vector<double> responsibilities(const Vec& x, const Vec& y, int tx, int ty) const;

  /// Row-wise predict. Rows sharing a timestep pair share one factorization.
  void predict_batch(const Mat& x, const Mat& y, std::span<const int> tx, std::span<const int> ty,
                     Mat& eps_x, Mat& eps_y) const;

  /// Loss-optimal value of the joint regression objective at one sample,
  /// i.e. ||E[eps | u] - eps||^2, for oracle-gap monitoring.
  double squared_error(const Vec& x, const Vec& y, int tx, int ty, const Vec& eps_x, const Vec& eps_y) const;

 private:
  struct Perturbed;
  Perturbed perturbed(int tx, int ty) const;
  Vec score_with(const Perturbed& p, const Vec& u) const;

  DistributionSpec spec_;
  NoiseSchedule sched_;
};

/// E[eps | x_t] for a single-modality mixture law, by the same linear-Gaussian
/// conditioning specialised to one block.
Vec single_block_noise_prediction(const BlockMixture& law, const Vec& x, double alpha_bar);

struct MonteCarloEstimate {
  Vec mean;        // stacked (eps_x, eps_y)
  Vec std_error;   // per-coordinate standard error
  double effective_sample_size = 0.0;
};

/// Brute-force estimate of E[eps | x_{tx}, y_{ty}] by self-normalised
/// importance sampling over the noise/data pair consistent with u.
///
/// Only draws samples and evaluates the data density; it shares no
/// conditioning algebra with OracleModel. Per block, low-noise steps
/// (alpha_bar >= 1/2) draw eps from N(0, I) and solve for z0; high-noise
/// steps draw z0 from a moment-matched Gaussian and solve for eps.
MonteCarloEstimate monte_carlo_noise_posterior(const DistributionSpec& spec, const NoiseSchedule& sched,
                                               const Vec& x, const Vec& y, int tx, int ty,
                                               std::size_t draws, std::uint64_t seed);

struct OracleCheckRow {
  int tx = 0, ty = 0, coord = 0;
  double oracle = 0.0, monte_carlo = 0.0, std_error = 0.0;
  double z = 0.0;  // (monte_carlo - oracle) / std_error; 0 when both are exact
};

/// Oracle against Monte Carlo on every (tx, ty) in grid x grid, at one test
/// point per cell drawn from the perturbed law of that cell.
std::vector<OracleCheckRow> oracle_check_grid(const DistributionSpec& spec, const NoiseSchedule& sched,
                                              const std::vector<int>& grid, std::size_t draws, std::uint64_t seed);

}  // namespace unidiff
