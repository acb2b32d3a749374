#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "unidiff/backbone.hpp"
#include "unidiff/checkpoint.hpp"
#include "unidiff/oracle.hpp"
#include "unidiff/schedule.hpp"
#include "unidiff/synthetic_data.hpp"

namespace unidiff {

/// {0..T} (default) or {1..T}.
enum class TimestepSupport { Full, Positive };

struct TrainConfig {
  int batch_size = 256;
  int steps = 20000;
  double learning_rate = 2e-4;
  double weight_decay = 0.03;
  std::array<double, 2> adam_betas{0.9, 0.9};
  double adam_eps = 1e-8;
  double warmup_fraction = 0.01;
  // Linear decay of the learning rate to lr * final_lr_fraction after
  // warm-up; 1 keeps it constant.
  double final_lr_fraction = 1.0;
  // Exponential moving average of the weights; 0 disables it. When enabled
  // the checkpoint holds the averaged weights.
  double ema_decay = 0.0;
  std::uint64_t seed = 0;
  TimestepSupport timestep_support = TimestepSupport::Full;
  int eval_every = 1000;
  int eval_size = 4096;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TimestepPair {
  int tx = 0;
  int ty = 0;
};

/// Independent uniform draws over the support.
TimestepPair draw_timesteps(Rng& rng, int T, TimestepSupport support);

/// One Eq. 5 minibatch: clean pairs pushed to independent noise levels.
struct PerturbedBatch {
  Mat xt, yt;        // perturbed inputs
  Mat eps_x, eps_y;  // injected noise (regression targets)
  std::vector<int> tx, ty;

  Eigen::Index size() const noexcept { return xt.rows(); }
};

PerturbedBatch perturb_batch(const Mat& x0, const Mat& y0, const NoiseSchedule& sched, TimestepSupport support,
                             Rng& rng);

/// Mean over rows of ||[pred_x, pred_y] - [eps_x, eps_y]||^2.
double regression_loss(const PerturbedBatch& b, const Mat& pred_x, const Mat& pred_y);

/// Exactly one forward and one backward. Overwrites `grad` with the gradient
/// of the batch-mean loss and returns the loss.
double loss_on_batch(const Backbone<float>& net, const ParameterStore<float>& params, const PerturbedBatch& batch,
                     ForwardTape<float>& tape, ParameterStore<float>& grad);

/// Adam with decoupled weight decay (p -= lr * wd * p, separate from the
/// adaptive step).
class AdamW {
 public:
  AdamW(std::size_t n, std::array<double, 2> betas, double eps, double weight_decay);
  void step(AlignedVector<float>& params, const AlignedVector<float>& grad, double lr);
  std::uint64_t steps() const noexcept { return t_; }

 private:
  std::array<double, 2> betas_;
  double eps_;
  double wd_;
  std::uint64_t t_ = 0;
  AlignedVector<float> m_, v_;
};

/// Learning rate after `step` completed steps: linear warm-up, then optional
/// linear decay.
double learning_rate_at(const TrainConfig& cfg, int step);

/// Training data: a fixed dataset (minibatches drawn with replacement) or,
/// when absent, fresh pairs from the spec every step. The spec, if known,
/// also enables oracle-gap monitoring.
struct TrainData {
  std::optional<Dataset> dataset;
  std::optional<DistributionSpec> spec;
};

/// A fixed perturbed set for comparing network and oracle losses on the
/// same draws.
PerturbedBatch make_held_out(const DistributionSpec& spec, const NoiseSchedule& sched, int n, std::uint64_t seed,
                             TimestepSupport support);

double network_loss(const Backbone<float>& net, const ParameterStore<float>& p, const PerturbedBatch& b);
double oracle_loss(const OracleModel& oracle, const PerturbedBatch& b);

/// Mean over a (tx, ty) grid of the RMS difference between network and
/// oracle predictions, at inputs drawn from the perturbed law of each cell.
double oracle_rms_error(const Backbone<float>& net, const ParameterStore<float>& p, const OracleModel& oracle,
                        const std::vector<int>& grid, int per_cell, std::uint64_t seed);

struct LossRecord {
  int step = 0;
  double loss = 0.0;
  std::optional<double> oracle_gap;  // (net - oracle) / oracle on the held-out set
};

struct TrainResult {
  ParameterStore<float> params;
  std::vector<LossRecord> curve;
  CallCounts calls;
  int steps_done = 0;
};

struct TrainHooks {
  std::optional<std::filesystem::path> out_dir;  // checkpoints + loss.csv
  std::function<void(const LossRecord&)> on_eval;
};

/// Deterministic given cfg.seed. On a non-finite loss, saves the last good
/// parameters (when out_dir is set) and throws NumericalError.
TrainResult train(const TrainConfig& cfg, const TrainData& data, const BackboneConfig& bcfg,
                  const NoiseSchedule& sched, const TrainHooks& hooks = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& curve);

}  // namespace unidiff
