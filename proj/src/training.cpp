#include "unidiff/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

namespace unidiff {

namespace {

constexpr std::uint64_t kStepStream = 0x7a1;
constexpr std::uint64_t kDataStream = 0xda7b;
constexpr std::uint64_t kHeldOutStream = 0x4e1d;
constexpr std::uint64_t kInitStream = 0x1417;

const char* support_name(TimestepSupport s) { return s == TimestepSupport::Full ? "0..T" : "1..T"; }

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
  if (steps < 0) throw ConfigError("train.steps", "must be >= 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("train.learning_rate", "must be a finite value >= 0");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
  for (double b : adam_betas) {
    if (!(b >= 0.0 && b < 1.0)) throw ConfigError("train.adam_betas", "each beta must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps", "must be > 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("train.warmup_fraction", "must lie in [0, 1]");
  if (!(final_lr_fraction >= 0.0 && final_lr_fraction <= 1.0)) {
    throw ConfigError("train.final_lr_fraction", "must lie in [0, 1]");
  }
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("train.ema_decay", "must lie in [0, 1)");
  if (eval_every < 1) throw ConfigError("train.eval_every", "must be >= 1");
  if (eval_size < 1) throw ConfigError("train.eval_size", "must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size},
          {"steps", steps},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"adam_betas", adam_betas},
          {"adam_eps", adam_eps},
          {"warmup_fraction", warmup_fraction},
          {"final_lr_fraction", final_lr_fraction},
          {"ema_decay", ema_decay},
          {"seed", seed},
          {"timestep_support", support_name(timestep_support)},
          {"eval_every", eval_every},
          {"eval_size", eval_size}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train", "must be a JSON object");
  TrainConfig c;
  for (const auto& [k, v] : j.items()) {
    const std::string field = "train." + k;
    auto num = [&]() {
      if (!v.is_number()) throw ConfigError(field, "must be a number");
      return v.get<double>();
    };
    auto integer = [&]() {
      if (!v.is_number_integer()) throw ConfigError(field, "must be an integer");
      return v.get<long long>();
    };
    if (k == "batch_size") {
      c.batch_size = static_cast<int>(integer());
    } else if (k == "steps") {
      c.steps = static_cast<int>(integer());
    } else if (k == "learning_rate") {
      c.learning_rate = num();
    } else if (k == "weight_decay") {
      c.weight_decay = num();
    } else if (k == "adam_betas") {
      if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
        throw ConfigError(field, "must be a pair of numbers");
      }
      c.adam_betas = {v[0].get<double>(), v[1].get<double>()};
    } else if (k == "adam_eps") {
      c.adam_eps = num();
    } else if (k == "warmup_fraction") {
      c.warmup_fraction = num();
    } else if (k == "final_lr_fraction") {
      c.final_lr_fraction = num();
    } else if (k == "ema_decay") {
      c.ema_decay = num();
    } else if (k == "seed") {
      if (!v.is_number_unsigned()) throw ConfigError(field, "must be a non-negative integer");
      c.seed = v.get<std::uint64_t>();
    } else if (k == "timestep_support") {
      const auto s = v.is_string() ? v.get<std::string>() : std::string();
      if (s == "0..T") {
        c.timestep_support = TimestepSupport::Full;
      } else if (s == "1..T") {
        c.timestep_support = TimestepSupport::Positive;
      } else {
        throw ConfigError(field, "must be \"0..T\" or \"1..T\"");
      }
    } else if (k == "eval_every") {
      c.eval_every = static_cast<int>(integer());
    } else if (k == "eval_size") {
      c.eval_size = static_cast<int>(integer());
    } else {
      throw ConfigError(field, "unknown field");
    }
  }
  c.validate();
  return c;
}

TimestepPair draw_timesteps(Rng& rng, int T, TimestepSupport support) {
  std::uniform_int_distribution<int> u(support == TimestepSupport::Full ? 0 : 1, T);
  const int tx = u(rng);
  const int ty = u(rng);
  return {tx, ty};
}

PerturbedBatch perturb_batch(const Mat& x0, const Mat& y0, const NoiseSchedule& sched, TimestepSupport support,
                             Rng& rng) {
  if (x0.rows() != y0.rows() || x0.rows() == 0) throw std::invalid_argument("perturb_batch: batch must be non-empty");
  const auto n = x0.rows();
  PerturbedBatch b;
  b.tx.resize(static_cast<std::size_t>(n));
  b.ty.resize(static_cast<std::size_t>(n));
  b.eps_x.resize(n, x0.cols());
  b.eps_y.resize(n, y0.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto [tx, ty] = draw_timesteps(rng, sched.T(), support);
    b.tx[static_cast<std::size_t>(i)] = tx;
    b.ty[static_cast<std::size_t>(i)] = ty;
  }
  fill_normal(rng, b.eps_x);
  fill_normal(rng, b.eps_y);
  b.xt.resize(n, x0.cols());
  b.yt.resize(n, y0.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double ax = sched.alpha_bar(b.tx[static_cast<std::size_t>(i)]);
    const double ay = sched.alpha_bar(b.ty[static_cast<std::size_t>(i)]);
    b.xt.row(i) = std::sqrt(ax) * x0.row(i) + std::sqrt(1.0 - ax) * b.eps_x.row(i);
    b.yt.row(i) = std::sqrt(ay) * y0.row(i) + std::sqrt(1.0 - ay) * b.eps_y.row(i);
  }
  return b;
}

double regression_loss(const PerturbedBatch& b, const Mat& pred_x, const Mat& pred_y) {
  const double sx = (pred_x - b.eps_x).squaredNorm();
  const double sy = (pred_y - b.eps_y).squaredNorm();
  return (sx + sy) / static_cast<double>(b.size());
}

double loss_on_batch(const Backbone<float>& net, const ParameterStore<float>& params, const PerturbedBatch& batch,
                     ForwardTape<float>& tape, ParameterStore<float>& grad) {
  if (batch.size() == 0) throw std::invalid_argument("loss_on_batch: empty batch");
  const RowMat<float> xt = batch.xt.cast<float>();
  const RowMat<float> yt = batch.yt.cast<float>();
  RowMat<float> ex, ey;
  net.forward(params, xt, yt, batch.tx, batch.ty, tape, ex, ey);
  const RowMat<float> rx = ex - batch.eps_x.cast<float>();
  const RowMat<float> ry = ey - batch.eps_y.cast<float>();
  const double n = static_cast<double>(batch.size());
  const double loss = (rx.cast<double>().squaredNorm() + ry.cast<double>().squaredNorm()) / n;
  if (!std::isfinite(loss)) throw NumericalError("loss_on_batch: non-finite loss");
  const float scale = static_cast<float>(2.0 / n);
  net.backward(params, tape, scale * rx, scale * ry, grad);
  return loss;
}

AdamW::AdamW(std::size_t n, std::array<double, 2> betas, double eps, double weight_decay)
    : betas_(betas), eps_(eps), wd_(weight_decay), m_(n, 0.0f), v_(n, 0.0f) {}

void AdamW::step(AlignedVector<float>& params, const AlignedVector<float>& grad, double lr) {
  if (params.size() != m_.size() || grad.size() != m_.size()) throw std::invalid_argument("AdamW: size mismatch");
  ++t_;
  const double b1 = betas_[0];
  const double b2 = betas_[1];
  const float c1 = static_cast<float>(1.0 / (1.0 - std::pow(b1, static_cast<double>(t_))));
  const float c2 = static_cast<float>(1.0 / (1.0 - std::pow(b2, static_cast<double>(t_))));
  const float fb1 = static_cast<float>(b1);
  const float fb2 = static_cast<float>(b2);
  const float flr = static_cast<float>(lr);
  const float decay = static_cast<float>(1.0 - lr * wd_);
  const float feps = static_cast<float>(eps_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const float g = grad[i];
    m_[i] = fb1 * m_[i] + (1.0f - fb1) * g;
    v_[i] = fb2 * v_[i] + (1.0f - fb2) * g * g;
    const float mh = m_[i] * c1;
    const float vh = v_[i] * c2;
    params[i] = params[i] * decay - flr * mh / (std::sqrt(vh) + feps);
  }
}

double learning_rate_at(const TrainConfig& cfg, int step) {
  const int warm = static_cast<int>(std::ceil(cfg.warmup_fraction * cfg.steps));
  if (step < warm) return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warm);
  const int span = cfg.steps - warm;
  if (span <= 0 || cfg.final_lr_fraction == 1.0) return cfg.learning_rate;
  const double frac = static_cast<double>(step - warm) / static_cast<double>(span);
  return cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * frac);
}

PerturbedBatch make_held_out(const DistributionSpec& spec, const NoiseSchedule& sched, int n, std::uint64_t seed,
                             TimestepSupport support) {
  const Dataset d = sample_dataset(spec, static_cast<std::size_t>(n), seed ^ kHeldOutStream);
  Rng rng = make_rng(seed, kHeldOutStream, 0);
  return perturb_batch(d.x, d.y, sched, support, rng);
}

double network_loss(const Backbone<float>& net, const ParameterStore<float>& p, const PerturbedBatch& b) {
  Mat ex, ey;
  predict_rows(net, p, b.xt, b.yt, b.tx, b.ty, ex, ey);
  return regression_loss(b, ex, ey);
}

double oracle_loss(const OracleModel& oracle, const PerturbedBatch& b) {
  Mat ex, ey;
  oracle.predict_batch(b.xt, b.yt, b.tx, b.ty, ex, ey);
  return regression_loss(b, ex, ey);
}

double oracle_rms_error(const Backbone<float>& net, const ParameterStore<float>& p, const OracleModel& oracle,
                        const std::vector<int>& grid, int per_cell, std::uint64_t seed) {
  if (grid.empty() || per_cell < 1) throw std::invalid_argument("oracle_rms_error: empty grid");
  const auto& sched = oracle.schedule();
  const auto& spec = oracle.spec();
  const Dataset d = sample_dataset(spec, static_cast<std::size_t>(per_cell), seed);
  const auto cells = grid.size() * grid.size();
  const auto n = static_cast<Eigen::Index>(cells) * per_cell;
  Mat x0(n, spec.d_x), y0(n, spec.d_y);
  std::vector<int> tx(static_cast<std::size_t>(n)), ty(static_cast<std::size_t>(n));
  for (std::size_t c = 0; c < cells; ++c) {
    for (int i = 0; i < per_cell; ++i) {
      const auto r = static_cast<Eigen::Index>(c) * per_cell + i;
      x0.row(r) = d.x.row(i);
      y0.row(r) = d.y.row(i);
      tx[static_cast<std::size_t>(r)] = grid[c / grid.size()];
      ty[static_cast<std::size_t>(r)] = grid[c % grid.size()];
    }
  }
  Rng rng = make_rng(seed, kHeldOutStream, 1);
  Mat ex(n, spec.d_x), ey(n, spec.d_y);
  fill_normal(rng, ex);
  fill_normal(rng, ey);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double ax = sched.alpha_bar(tx[static_cast<std::size_t>(r)]);
    const double ay = sched.alpha_bar(ty[static_cast<std::size_t>(r)]);
    x0.row(r) = std::sqrt(ax) * x0.row(r) + std::sqrt(1.0 - ax) * ex.row(r);
    y0.row(r) = std::sqrt(ay) * y0.row(r) + std::sqrt(1.0 - ay) * ey.row(r);
  }
  Mat nx, ny, ox, oy;
  predict_rows(net, p, x0, y0, tx, ty, nx, ny);
  oracle.predict_batch(x0, y0, tx, ty, ox, oy);
  const double dim = spec.d_x + spec.d_y;
  double total = 0.0;
  for (std::size_t c = 0; c < cells; ++c) {
    const auto lo = static_cast<Eigen::Index>(c) * per_cell;
    const double se = (nx.middleRows(lo, per_cell) - ox.middleRows(lo, per_cell)).squaredNorm() +
                      (ny.middleRows(lo, per_cell) - oy.middleRows(lo, per_cell)).squaredNorm();
    total += std::sqrt(se / (dim * per_cell));
  }
  return total / static_cast<double>(cells);
}

TrainResult train(const TrainConfig& cfg, const TrainData& data, const BackboneConfig& bcfg,
                  const NoiseSchedule& sched, const TrainHooks& hooks) {
  cfg.validate();
  bcfg.validate();
  if (bcfg.timesteps != sched.T()) throw ConfigError("backbone.timesteps", "must equal the schedule's T");
  if (!data.dataset && !data.spec) throw ConfigError("data", "need a dataset or a spec");
  const int dx = data.dataset ? data.dataset->d_x() : data.spec->d_x;
  const int dy = data.dataset ? data.dataset->d_y() : data.spec->d_y;
  if (dx != bcfg.d_x) throw ConfigError("backbone.d_x", "does not match the data");
  if (dy != bcfg.d_y) throw ConfigError("backbone.d_y", "does not match the data");
  if (data.dataset && data.dataset->size() == 0) throw ConfigError("data", "dataset is empty");

  const Backbone<float> net(bcfg);
  // Held-out evaluation runs on its own instance so the training net's call
  // counts reflect optimisation steps only.
  const Backbone<float> eval_net(bcfg);
  TrainResult res;
  res.params = net.init_params(make_rng(cfg.seed, kInitStream, 0)());
  ParameterStore<float> grad = net.zero_params();
  ParameterStore<float> ema = res.params;
  AdamW opt(res.params.size(), cfg.adam_betas, cfg.adam_eps, cfg.weight_decay);
  ForwardTape<float> tape;

  std::optional<OracleModel> oracle;
  PerturbedBatch held;
  double held_oracle = 0.0;
  if (data.spec) {
    oracle.emplace(*data.spec, sched);
    held = make_held_out(*data.spec, sched, cfg.eval_size, cfg.seed, cfg.timestep_support);
    held_oracle = oracle_loss(*oracle, held);
  }
  const std::optional<RecordSampler> fresh =
      data.dataset ? std::nullopt : std::optional<RecordSampler>(RecordSampler(*data.spec));

  const auto& weights = [&]() -> const ParameterStore<float>& { return cfg.ema_decay > 0.0 ? ema : res.params; };
  auto snapshot = [&](const ParameterStore<float>& p, int step) {
    if (!hooks.out_dir) return;
    Checkpoint c{bcfg, sched, p, data.spec ? data.spec->to_json() : nlohmann::json(), cfg.to_json(),
                 static_cast<std::uint64_t>(step)};
    save_checkpoint(*hooks.out_dir, c);
    write_loss_csv(*hooks.out_dir / "loss.csv", res.curve);
  };

  const int B = cfg.batch_size;
  Mat x0(B, dx), y0(B, dy);
  std::vector<double> xr(static_cast<std::size_t>(dx)), yr(static_cast<std::size_t>(dy));
  for (int step = 0; step < cfg.steps; ++step) {
    if (data.dataset) {
      Rng pick = make_rng(cfg.seed, kDataStream, static_cast<std::uint64_t>(step));
      std::uniform_int_distribution<std::size_t> u(0, data.dataset->size() - 1);
      for (int i = 0; i < B; ++i) {
        const auto r = static_cast<Eigen::Index>(u(pick));
        x0.row(i) = data.dataset->x.row(r);
        y0.row(i) = data.dataset->y.row(r);
      }
    } else {
      Rng draw = make_rng(cfg.seed, kDataStream, static_cast<std::uint64_t>(step));
      for (int i = 0; i < B; ++i) {
        fresh->draw_from(draw, xr.data(), yr.data());
        x0.row(i) = Eigen::Map<const Eigen::RowVectorXd>(xr.data(), dx);
        y0.row(i) = Eigen::Map<const Eigen::RowVectorXd>(yr.data(), dy);
      }
    }
    Rng rng = make_rng(cfg.seed, kStepStream, static_cast<std::uint64_t>(step));
    const PerturbedBatch batch = perturb_batch(x0, y0, sched, cfg.timestep_support, rng);

    double loss = 0.0;
    try {
      loss = loss_on_batch(net, res.params, batch, tape, grad);
    } catch (const NumericalError&) {
      snapshot(weights(), step);
      throw NumericalError("training diverged at step " + std::to_string(step) + "; last good checkpoint kept");
    }
    opt.step(res.params.values, grad.values, learning_rate_at(cfg, step));
    if (cfg.ema_decay > 0.0) {
      const float d = static_cast<float>(std::min(cfg.ema_decay, (1.0 + step) / (10.0 + step)));
      for (std::size_t i = 0; i < ema.size(); ++i) ema.values[i] = d * ema.values[i] + (1.0f - d) * res.params.values[i];
    }
    res.steps_done = step + 1;

    LossRecord rec{res.steps_done, loss, std::nullopt};
    const bool eval_now = res.steps_done % cfg.eval_every == 0 || res.steps_done == cfg.steps;
    if (eval_now && oracle) {
      const double net_loss = network_loss(eval_net, weights(), held);
      rec.oracle_gap = (net_loss - held_oracle) / held_oracle;
    }
    res.curve.push_back(rec);
    if (eval_now) {
      if (hooks.on_eval) hooks.on_eval(rec);
      snapshot(weights(), res.steps_done);
    }
  }
  res.calls = net.calls();
  if (cfg.ema_decay > 0.0) res.params = ema;
  if (cfg.steps == 0) snapshot(res.params, 0);
  return res;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& curve) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os << "step,loss,oracle_gap\n" << std::setprecision(9);
  for (const auto& r : curve) {
    os << r.step << ',' << r.loss << ',';
    if (r.oracle_gap) os << *r.oracle_gap;
    os << '\n';
  }
}

}  // namespace unidiff
