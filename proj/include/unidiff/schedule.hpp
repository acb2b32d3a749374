#pragma once

#include <optional>
#include <vector>

#include <json.hpp>

#include "unidiff/common.hpp"

namespace unidiff {

/// Discrete forward chain q(x_t | x_{t-1}) = N(sqrt(alpha_t) x_{t-1}, beta_t I).
///
/// Steps are indexed 1..T for beta/alpha and 0..T for alpha_bar, with
/// alpha_bar(0) = 1 meaning clean data. Immutable once built.
class NoiseSchedule {
 public:
  /// Builds from an explicit beta vector (beta_1..beta_T).
  static NoiseSchedule from_betas(std::vector<double> betas);

  int T() const noexcept { return static_cast<int>(betas_.size()); }
  double beta(int t) const;
  double alpha(int t) const;
  double alpha_bar(int t) const;
  double one_minus_alpha_bar(int t) const { return 1.0 - alpha_bar(t); }

  const std::vector<double>& betas() const noexcept { return betas_; }
  const std::vector<double>& alphas() const noexcept { return alphas_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }

  /// True when alpha_bar(T) <= 1e-4, i.e. t = T carries negligible signal.
  bool marginalizing() const noexcept { return alpha_bars_.back() <= kMarginalizingThreshold; }

  /// Linear endpoints, when the schedule came from build_linear_schedule.
  std::optional<std::pair<double, double>> linear_bounds() const noexcept { return bounds_; }

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);

  static constexpr double kMarginalizingThreshold = 1e-4;

 private:
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  std::optional<std::pair<double, double>> bounds_;

  friend NoiseSchedule build_linear_schedule(int, double, double, bool);
};

/// Linear beta from beta_start to beta_end inclusive over T steps.
/// Throws ConfigError on bad bounds, or when `strict_marginal` is set and
/// alpha_bar(T) > 1e-4.
NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end,
                                    bool strict_marginal = false);

/// T=1000, beta in [1e-4, 0.02].
NoiseSchedule default_schedule();

/// T=50 with the default betas scaled by 1000/50, beta in [2e-3, 0.4].
/// alpha_bar(50) is about 7.7e-6.
NoiseSchedule toy_schedule();

void check_timestep(const NoiseSchedule& sched, int t);

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
Vec perturb(const Vec& x0, int t, const Vec& eps, const NoiseSchedule& sched);

}  // namespace unidiff
