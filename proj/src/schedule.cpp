#include "unidiff/schedule.hpp"

#include <cmath>
#include <string>

namespace unidiff {

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("betas", "schedule needs at least one step");
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("betas", "every beta must lie in (0, 1)");
  }
  NoiseSchedule s;
  s.betas_ = std::move(betas);
  s.alphas_.resize(s.betas_.size());
  s.alpha_bars_.resize(s.betas_.size() + 1);
  s.alpha_bars_[0] = 1.0;
  for (std::size_t i = 0; i < s.betas_.size(); ++i) {
    s.alphas_[i] = 1.0 - s.betas_[i];
    s.alpha_bars_[i + 1] = s.alpha_bars_[i] * s.alphas_[i];
  }
  if (!(s.alpha_bars_.back() > 0.0)) throw ConfigError("betas", "alpha_bar(T) underflowed to zero");
  return s;
}

double NoiseSchedule::beta(int t) const {
  if (t < 1 || t > T()) throw std::out_of_range("beta: step " + std::to_string(t) + " outside 1..T");
  return betas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha(int t) const {
  if (t < 1 || t > T()) throw std::out_of_range("alpha: step " + std::to_string(t) + " outside 1..T");
  return alphas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > T()) throw std::out_of_range("alpha_bar: step " + std::to_string(t) + " outside 0..T");
  return alpha_bars_[static_cast<std::size_t>(t)];
}

nlohmann::json NoiseSchedule::to_json() const {
  nlohmann::json j;
  j["T"] = T();
  if (bounds_) {
    j["beta_start"] = bounds_->first;
    j["beta_end"] = bounds_->second;
  } else {
    j["betas"] = betas_;
  }
  return j;
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  if (j.contains("betas")) return from_betas(j.at("betas").get<std::vector<double>>());
  for (const char* key : {"T", "beta_start", "beta_end"}) {
    if (!j.contains(key)) throw ConfigError(std::string("schedule.") + key, "missing");
  }
  if (!j.at("T").is_number_integer()) throw ConfigError("schedule.T", "must be an integer");
  return build_linear_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(),
                               j.at("beta_end").get<double>());
}

NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end, bool strict_marginal) {
  if (T < 1) throw ConfigError("T", "must be >= 1");
  if (!(beta_start > 0.0)) throw ConfigError("beta_start", "must be > 0");
  if (!(beta_end < 1.0)) throw ConfigError("beta_end", "must be < 1");
  if (!(beta_start <= beta_end)) throw ConfigError("beta_end", "must be >= beta_start");
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
  }
  NoiseSchedule s = NoiseSchedule::from_betas(std::move(betas));
  s.bounds_ = std::make_pair(beta_start, beta_end);
  if (strict_marginal && !s.marginalizing()) {
    throw ConfigError("beta_end", "alpha_bar(T) = " + std::to_string(s.alpha_bar(T)) +
                                      " exceeds the marginalization threshold 1e-4");
  }
  return s;
}

NoiseSchedule default_schedule() { return build_linear_schedule(1000, 1e-4, 0.02, true); }

NoiseSchedule toy_schedule() { return build_linear_schedule(50, 2e-3, 0.4, true); }

void check_timestep(const NoiseSchedule& sched, int t) {
  if (t < 0 || t > sched.T()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside 0.." + std::to_string(sched.T()));
  }
}

Vec perturb(const Vec& x0, int t, const Vec& eps, const NoiseSchedule& sched) {
  if (x0.size() != eps.size()) throw std::invalid_argument("perturb: x0 and eps dimensions differ");
  check_timestep(sched, t);
  if (t == 0) return x0;
  const double ab = sched.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

}  // namespace unidiff
