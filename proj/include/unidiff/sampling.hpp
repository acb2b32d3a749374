#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "unidiff/backbone.hpp"
#include "unidiff/checkpoint.hpp"
#include "unidiff/oracle.hpp"
#include "unidiff/schedule.hpp"

namespace unidiff {

enum class Task { Joint, MarginalX, MarginalY, XGivenY, YGivenX };

std::string to_string(Task task);
/// Accepts joint | x | y | x-given-y | y-given-x (and marginal-x, marginal-y).
Task parse_task(const std::string& name);
bool is_conditional(Task task) noexcept;

enum class SamplerKind { Ancestral, Deterministic };

/// sqrt(beta_t) or the posterior sqrt(beta~_t).
enum class SigmaKind { Large, Posterior };

/// Row-wise eps_theta(x, y, tx, ty).
class EpsModel {
 public:
  virtual ~EpsModel() = default;
  virtual int d_x() const = 0;
  virtual int d_y() const = 0;
  virtual const NoiseSchedule& schedule() const = 0;
  virtual void predict(const Mat& x, const Mat& y, std::span<const int> tx, std::span<const int> ty, Mat& eps_x,
                       Mat& eps_y) const = 0;
};

class NetworkEps final : public EpsModel {
 public:
  explicit NetworkEps(const Checkpoint& ckpt);
  NetworkEps(const BackboneConfig& cfg, NoiseSchedule sched, ParameterStore<float> params);

  int d_x() const override { return net_.config().d_x; }
  int d_y() const override { return net_.config().d_y; }
  const NoiseSchedule& schedule() const override { return sched_; }
  void predict(const Mat& x, const Mat& y, std::span<const int> tx, std::span<const int> ty, Mat& eps_x,
               Mat& eps_y) const override;
  const Backbone<float>& network() const noexcept { return net_; }

 private:
  Backbone<float> net_;
  NoiseSchedule sched_;
  ParameterStore<float> params_;
};

class OracleEps final : public EpsModel {
 public:
  explicit OracleEps(OracleModel oracle) : oracle_(std::move(oracle)) {}

  int d_x() const override { return oracle_.spec().d_x; }
  int d_y() const override { return oracle_.spec().d_y; }
  const NoiseSchedule& schedule() const override { return oracle_.schedule(); }
  void predict(const Mat& x, const Mat& y, std::span<const int> tx, std::span<const int> ty, Mat& eps_x,
               Mat& eps_y) const override {
    oracle_.predict_batch(x, y, tx, ty, eps_x, eps_y);
  }
  const OracleModel& oracle() const noexcept { return oracle_; }

 private:
  OracleModel oracle_;
};

/// Any callable as a model; used for stubs and instrumentation.
class FunctionEps final : public EpsModel {
 public:
  using Fn = std::function<void(const Mat&, const Mat&, std::span<const int>, std::span<const int>, Mat&, Mat&)>;
  FunctionEps(int d_x, int d_y, NoiseSchedule sched, Fn fn)
      : dx_(d_x), dy_(d_y), sched_(std::move(sched)), fn_(std::move(fn)) {}

  int d_x() const override { return dx_; }
  int d_y() const override { return dy_; }
  const NoiseSchedule& schedule() const override { return sched_; }
  void predict(const Mat& x, const Mat& y, std::span<const int> tx, std::span<const int> ty, Mat& eps_x,
               Mat& eps_y) const override {
    fn_(x, y, tx, ty, eps_x, eps_y);
  }

 private:
  int dx_, dy_;
  NoiseSchedule sched_;
  Fn fn_;
};

/// Guided prediction for the modalities a task generates; the other block is
/// left with zero columns.
struct GuidedEps {
  Mat eps_x;
  Mat eps_y;
};

/// The guidance table, one row per task. `x` and `y` hold the current state
/// or the clean condition as the task dictates; `fill_x` / `fill_y` are the
/// standard-normal stand-ins for a marginalised modality. All model calls for
/// one step go through a single predict().
///
///   joint        (1+s) eps(x, y, t, t) - s [eps^x(x, fy, t, T), eps^y(fx, y, T, t)]
///   x-given-y    (1+s) eps^x(x, y0, t, 0) - s eps^x(x, fy, t, T)
///   y-given-x    (1+s) eps^y(x0, y, 0, t) - s eps^y(fx, y, T, t)
///   x            eps^x(x, fy, t, T)
///   y            eps^y(fx, y, T, t)
///
/// With s = 0 the unconditional terms are never evaluated, so the result is
/// bitwise the unguided output.
GuidedEps guided_eps(const EpsModel& m, Task task, const Mat& x, const Mat& y, int t, double s, const Mat& fill_x,
                     const Mat& fill_y);

/// One reverse step from t_from to t_to < t_from (t_to = t_from - 1 unless
/// strided), with alpha = alpha_bar(t_from) / alpha_bar(t_to):
///   x_to = (x - (1 - alpha) / sqrt(1 - alpha_bar(t_from)) eps) / sqrt(alpha) + sigma z
/// z is ignored when t_to = 0.
Mat ancestral_step(const Mat& x, const Mat& eps_hat, int t_from, int t_to, const NoiseSchedule& sched, const Mat& z,
                   SigmaKind sigma = SigmaKind::Large);

inline Mat ancestral_step(const Mat& x, const Mat& eps_hat, int t, const NoiseSchedule& sched, const Mat& z,
                          SigmaKind sigma = SigmaKind::Large) {
  return ancestral_step(x, eps_hat, t, t - 1, sched, z, sigma);
}

double ancestral_sigma(const NoiseSchedule& sched, int t_from, int t_to, SigmaKind kind);

/// Order-1 deterministic update in either time direction:
///   x0_hat = (x - sqrt(1 - ab_from) eps) / sqrt(ab_from)
///   x_to   = sqrt(ab_to) x0_hat + sqrt(1 - ab_to) eps
Mat deterministic_step(const Mat& x, const Mat& eps_hat, int t_from, int t_to, const NoiseSchedule& sched);

/// Noise prediction whose implied x0 = (x - sqrt(1 - ab) eps) / sqrt(ab) is
/// clamped to [-bound, bound]. Identity at t = 0 or when bound <= 0.
Mat clip_eps(const Mat& x, const Mat& eps_hat, int t, const NoiseSchedule& sched, double bound);

/// `steps` + 1 integer times from t_start to t_end on a uniform stride.
std::vector<int> timestep_grid(int t_start, int t_end, int steps);

/// Joint state of a sampler; a modality the task does not evolve has zero
/// columns.
struct ModalState {
  Mat x;
  Mat y;
};

using StateEps = std::function<ModalState(const ModalState& state, int t)>;

/// Deterministic solve along the grid. order 1 applies deterministic_step
/// with eps at the start of each interval; order 2 is Heun's rule (trapezoid
/// in sigma/alpha): an order-1 predictor, then the step redone with the mean
/// of the start and predicted-end eps.
ModalState solve_deterministic(ModalState init, const std::vector<int>& grid, const NoiseSchedule& sched,
                               const StateEps& eps, int order = 2);

struct SampleRequest {
  Task task = Task::Joint;
  std::optional<Vec> condition;
  double guidance_scale = 0.0;
  SamplerKind sampler = SamplerKind::Ancestral;
  int steps = 50;
  std::uint64_t seed = 0;
  int n = 1;
  SigmaKind sigma = SigmaKind::Large;
  int solver_order = 2;
  // Marginalisation fillers are redrawn every step unless frozen per
  // trajectory. A separate filler seed isolates that stream.
  bool freeze_fillers = false;
  std::optional<std::uint64_t> filler_seed;
  // When > 0, the clean-sample estimate implied by each noise prediction is
  // clamped to [-clip_x0, clip_x0] and the prediction recomputed from it.
  // Keeps trajectories that stray outside the trained region from running
  // away; 0 leaves predictions untouched.
  double clip_x0 = 0.0;

  void validate(const EpsModel& m) const;
  nlohmann::json to_json() const;
  static SampleRequest from_json(const nlohmann::json& j);
};

/// Generated latents: x and y for joint, the generated block plus the
/// repeated condition for conditional tasks, a single block for marginals.
struct Samples {
  Mat x;
  Mat y;
};

/// Full reverse loop with one RNG stream per trajectory, so results do not
/// depend on batching.
Samples generate(const EpsModel& m, const SampleRequest& req);

/// Conditional generation where row i of `conditions` conditions trajectory
/// i; req.condition and req.n are ignored.
Samples generate_conditional(const EpsModel& m, const SampleRequest& req, const Mat& conditions);

}  // namespace unidiff
