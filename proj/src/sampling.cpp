#include "unidiff/sampling.hpp"

#include <cmath>
#include <string>

namespace unidiff {

namespace {

constexpr std::uint64_t kTrajectoryStream = 0x5a3e;
constexpr std::uint64_t kFillerStream = 0xf111;

struct EvalBlock {
  const Mat* x;
  const Mat* y;
  int tx;
  int ty;
};

// Stacks the blocks row-wise and evaluates them with a single predict().
std::vector<std::pair<Mat, Mat>> evaluate(const EpsModel& m, const std::vector<EvalBlock>& blocks) {
  const Eigen::Index n = blocks.front().x->rows();
  const auto total = n * static_cast<Eigen::Index>(blocks.size());
  Mat X(total, m.d_x()), Y(total, m.d_y());
  std::vector<int> tx(static_cast<std::size_t>(total)), ty(static_cast<std::size_t>(total));
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto lo = static_cast<Eigen::Index>(b) * n;
    X.middleRows(lo, n) = *blocks[b].x;
    Y.middleRows(lo, n) = *blocks[b].y;
    std::fill_n(tx.begin() + lo, n, blocks[b].tx);
    std::fill_n(ty.begin() + lo, n, blocks[b].ty);
  }
  Mat ex, ey;
  m.predict(X, Y, tx, ty, ex, ey);
  std::vector<std::pair<Mat, Mat>> out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto lo = static_cast<Eigen::Index>(b) * n;
    out.emplace_back(ex.middleRows(lo, n), ey.middleRows(lo, n));
  }
  return out;
}

Mat combine(const Mat& cond, const Mat& uncond, double s) { return (1.0 + s) * cond - s * uncond; }

void require_shape(const Mat& a, Eigen::Index rows, int cols, const char* what) {
  if (a.rows() != rows || a.cols() != cols) {
    throw std::invalid_argument(std::string("guided_eps: ") + what + " has the wrong shape");
  }
}

bool needs_fill_x(Task task, double s) {
  return task == Task::MarginalY || (s != 0.0 && (task == Task::YGivenX || task == Task::Joint));
}

bool needs_fill_y(Task task, double s) {
  return task == Task::MarginalX || (s != 0.0 && (task == Task::XGivenY || task == Task::Joint));
}

bool evolves_x(Task task) { return task == Task::Joint || task == Task::MarginalX || task == Task::XGivenY; }
bool evolves_y(Task task) { return task == Task::Joint || task == Task::MarginalY || task == Task::YGivenX; }

void check_finite(const Mat& m, const char* what, int t) {
  if (!m.allFinite()) throw NumericalError(std::string("generate: non-finite ") + what + " at t=" + std::to_string(t));
}

}  // namespace

std::string to_string(Task task) {
  switch (task) {
    case Task::Joint: return "joint";
    case Task::MarginalX: return "x";
    case Task::MarginalY: return "y";
    case Task::XGivenY: return "x-given-y";
    case Task::YGivenX: return "y-given-x";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  if (name == "joint") return Task::Joint;
  if (name == "x" || name == "marginal-x") return Task::MarginalX;
  if (name == "y" || name == "marginal-y") return Task::MarginalY;
  if (name == "x-given-y") return Task::XGivenY;
  if (name == "y-given-x") return Task::YGivenX;
  throw ConfigError("task", "unknown task '" + name + "'");
}

bool is_conditional(Task task) noexcept { return task == Task::XGivenY || task == Task::YGivenX; }

NetworkEps::NetworkEps(const Checkpoint& ckpt) : NetworkEps(ckpt.backbone, ckpt.schedule, ckpt.params) {}

NetworkEps::NetworkEps(const BackboneConfig& cfg, NoiseSchedule sched, ParameterStore<float> params)
    : net_(cfg), sched_(std::move(sched)), params_(std::move(params)) {
  if (sched_.T() != cfg.timesteps) throw ConfigError("backbone.timesteps", "does not match the schedule");
  if (params_.size() != net_.parameter_count()) throw ConfigError("params", "count does not match the backbone");
  params_.layout = net_.layout();
}

void NetworkEps::predict(const Mat& x, const Mat& y, std::span<const int> tx, std::span<const int> ty, Mat& eps_x,
                         Mat& eps_y) const {
  predict_rows(net_, params_, x, y, tx, ty, eps_x, eps_y);
}

GuidedEps guided_eps(const EpsModel& m, Task task, const Mat& x, const Mat& y, int t, double s, const Mat& fill_x,
                     const Mat& fill_y) {
  if (!(s >= 0.0)) throw ConfigError("guidance_scale", "must be >= 0");
  const int T = m.schedule().T();
  check_timestep(m.schedule(), t);
  const Eigen::Index n = std::max(x.rows(), y.rows());
  require_shape(x, n, m.d_x(), "x");
  require_shape(y, n, m.d_y(), "y");
  if (needs_fill_x(task, s)) require_shape(fill_x, n, m.d_x(), "x filler");
  if (needs_fill_y(task, s)) require_shape(fill_y, n, m.d_y(), "y filler");

  GuidedEps g{Mat(n, 0), Mat(n, 0)};
  switch (task) {
    case Task::Joint: {
      if (s == 0.0) {
        auto r = evaluate(m, {{&x, &y, t, t}});
        g.eps_x = std::move(r[0].first);
        g.eps_y = std::move(r[0].second);
      } else {
        auto r = evaluate(m, {{&x, &y, t, t}, {&x, &fill_y, t, T}, {&fill_x, &y, T, t}});
        g.eps_x = combine(r[0].first, r[1].first, s);
        g.eps_y = combine(r[0].second, r[2].second, s);
      }
      break;
    }
    case Task::XGivenY: {
      if (s == 0.0) {
        g.eps_x = std::move(evaluate(m, {{&x, &y, t, 0}})[0].first);
      } else {
        auto r = evaluate(m, {{&x, &y, t, 0}, {&x, &fill_y, t, T}});
        g.eps_x = combine(r[0].first, r[1].first, s);
      }
      break;
    }
    case Task::YGivenX: {
      if (s == 0.0) {
        g.eps_y = std::move(evaluate(m, {{&x, &y, 0, t}})[0].second);
      } else {
        auto r = evaluate(m, {{&x, &y, 0, t}, {&fill_x, &y, T, t}});
        g.eps_y = combine(r[0].second, r[1].second, s);
      }
      break;
    }
    case Task::MarginalX:
      g.eps_x = std::move(evaluate(m, {{&x, &fill_y, t, T}})[0].first);
      break;
    case Task::MarginalY:
      g.eps_y = std::move(evaluate(m, {{&fill_x, &y, T, t}})[0].second);
      break;
  }
  return g;
}

double ancestral_sigma(const NoiseSchedule& sched, int t_from, int t_to, SigmaKind kind) {
  const double ab_from = sched.alpha_bar(t_from);
  const double ab_to = sched.alpha_bar(t_to);
  const double beta = t_to == t_from - 1 ? sched.beta(t_from) : 1.0 - ab_from / ab_to;
  if (kind == SigmaKind::Large) return std::sqrt(beta);
  return std::sqrt(beta * (1.0 - ab_to) / (1.0 - ab_from));
}

Mat ancestral_step(const Mat& x, const Mat& eps_hat, int t_from, int t_to, const NoiseSchedule& sched, const Mat& z,
                   SigmaKind sigma) {
  if (t_from < 1 || t_from > sched.T()) throw std::out_of_range("ancestral_step: t must lie in 1..T");
  if (t_to < 0 || t_to >= t_from) throw std::out_of_range("ancestral_step: target must precede t");
  if (eps_hat.rows() != x.rows() || eps_hat.cols() != x.cols()) {
    throw std::invalid_argument("ancestral_step: eps has the wrong shape");
  }
  const double ab_from = sched.alpha_bar(t_from);
  const bool unit = t_to == t_from - 1;
  const double alpha = unit ? sched.alpha(t_from) : ab_from / sched.alpha_bar(t_to);
  const double beta = unit ? sched.beta(t_from) : 1.0 - alpha;
  Mat out = (x - (beta / std::sqrt(1.0 - ab_from)) * eps_hat) / std::sqrt(alpha);
  if (t_to > 0) {
    if (z.rows() != x.rows() || z.cols() != x.cols()) throw std::invalid_argument("ancestral_step: z has the wrong shape");
    out += ancestral_sigma(sched, t_from, t_to, sigma) * z;
  }
  return out;
}

Mat deterministic_step(const Mat& x, const Mat& eps_hat, int t_from, int t_to, const NoiseSchedule& sched) {
  check_timestep(sched, t_from);
  check_timestep(sched, t_to);
  if (t_from == t_to) throw std::invalid_argument("deterministic_step: t_from equals t_to");
  if (eps_hat.rows() != x.rows() || eps_hat.cols() != x.cols()) {
    throw std::invalid_argument("deterministic_step: eps has the wrong shape");
  }
  const double a_from = sched.alpha_bar(t_from);
  const double a_to = sched.alpha_bar(t_to);
  const Mat x0 = (x - std::sqrt(1.0 - a_from) * eps_hat) / std::sqrt(a_from);
  return std::sqrt(a_to) * x0 + std::sqrt(1.0 - a_to) * eps_hat;
}

std::vector<int> timestep_grid(int t_start, int t_end, int steps) {
  const int span = std::abs(t_end - t_start);
  if (steps < 1) throw ConfigError("steps", "must be >= 1");
  if (steps > span) throw ConfigError("steps", "cannot exceed the number of timesteps spanned");
  std::vector<int> g(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) {
    g[static_cast<std::size_t>(i)] =
        t_start + static_cast<int>(std::lround(static_cast<double>(t_end - t_start) * i / steps));
  }
  return g;
}

Mat clip_eps(const Mat& x, const Mat& eps_hat, int t, const NoiseSchedule& sched, double bound) {
  if (bound <= 0.0 || t == 0) return eps_hat;
  const double ab = sched.alpha_bar(t);
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  const Mat x0 = ((x - sb * eps_hat) / sa).cwiseMax(-bound).cwiseMin(bound);
  return (x - sa * x0) / sb;
}

ModalState solve_deterministic(ModalState state, const std::vector<int>& grid, const NoiseSchedule& sched,
                               const StateEps& eps, int order) {
  if (order != 1 && order != 2) throw ConfigError("solver_order", "must be 1 or 2");
  auto advance = [&](const ModalState& s, const ModalState& e, int a, int b) {
    ModalState out;
    out.x = s.x.cols() > 0 ? deterministic_step(s.x, e.x, a, b, sched) : s.x;
    out.y = s.y.cols() > 0 ? deterministic_step(s.y, e.y, a, b, sched) : s.y;
    return out;
  };
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const int a = grid[i];
    const int b = grid[i + 1];
    const ModalState e0 = eps(state, a);
    ModalState next = advance(state, e0, a, b);
    if (order == 2) {
      const ModalState e1 = eps(next, b);
      ModalState avg;
      avg.x = state.x.cols() > 0 ? Mat(0.5 * (e0.x + e1.x)) : Mat(state.x.rows(), 0);
      avg.y = state.y.cols() > 0 ? Mat(0.5 * (e0.y + e1.y)) : Mat(state.y.rows(), 0);
      next = advance(state, avg, a, b);
    }
    state = std::move(next);
  }
  return state;
}

void SampleRequest::validate(const EpsModel& m) const {
  const int T = m.schedule().T();
  if (steps < 1 || steps > T) throw ConfigError("steps", "must lie in 1..T (T=" + std::to_string(T) + ")");
  if (n < 1) throw ConfigError("n", "must be >= 1");
  if (!(guidance_scale >= 0.0) || !std::isfinite(guidance_scale)) {
    throw ConfigError("guidance_scale", "must be a finite value >= 0");
  }
  if (solver_order != 1 && solver_order != 2) throw ConfigError("solver_order", "must be 1 or 2");
  if (!(clip_x0 >= 0.0) || !std::isfinite(clip_x0)) throw ConfigError("clip_x0", "must be a finite value >= 0");
  if (is_conditional(task) != condition.has_value()) {
    throw ConfigError("condition", is_conditional(task) ? "required for a conditional task" : "only valid for conditional tasks");
  }
  if (condition) {
    const int d = task == Task::XGivenY ? m.d_y() : m.d_x();
    if (condition->size() != d) throw ConfigError("condition", "expected " + std::to_string(d) + " values");
  }
}

nlohmann::json SampleRequest::to_json() const {
  nlohmann::json j{{"task", unidiff::to_string(task)},
                   {"guidance_scale", guidance_scale},
                   {"sampler", sampler == SamplerKind::Ancestral ? "ancestral" : "deterministic"},
                   {"steps", steps},
                   {"seed", seed},
                   {"n", n},
                   {"sigma", sigma == SigmaKind::Large ? "large" : "posterior"},
                   {"solver_order", solver_order},
                   {"clip_x0", clip_x0},
                   {"freeze_fillers", freeze_fillers}};
  j["condition"] = condition ? nlohmann::json(std::vector<double>(condition->data(), condition->data() + condition->size()))
                             : nlohmann::json();
  j["filler_seed"] = filler_seed ? nlohmann::json(*filler_seed) : nlohmann::json();
  return j;
}

SampleRequest SampleRequest::from_json(const nlohmann::json& j) {
  SampleRequest r;
  try {
    r.task = parse_task(j.at("task").get<std::string>());
    if (j.contains("condition") && !j["condition"].is_null()) {
      const auto v = j["condition"].get<std::vector<double>>();
      r.condition = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
    r.guidance_scale = j.value("guidance_scale", 0.0);
    const auto sampler = j.value("sampler", std::string("ancestral"));
    if (sampler != "ancestral" && sampler != "deterministic") throw ConfigError("sampler", "unknown sampler");
    r.sampler = sampler == "ancestral" ? SamplerKind::Ancestral : SamplerKind::Deterministic;
    r.steps = j.value("steps", 50);
    r.seed = j.value("seed", std::uint64_t{0});
    r.n = j.value("n", 1);
    const auto sigma = j.value("sigma", std::string("large"));
    if (sigma != "large" && sigma != "posterior") throw ConfigError("sigma", "must be large or posterior");
    r.sigma = sigma == "large" ? SigmaKind::Large : SigmaKind::Posterior;
    r.solver_order = j.value("solver_order", 2);
    r.freeze_fillers = j.value("freeze_fillers", false);
    r.clip_x0 = j.value("clip_x0", 0.0);
    if (j.contains("filler_seed") && !j["filler_seed"].is_null()) r.filler_seed = j["filler_seed"].get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("request", e.what());
  }
  return r;
}

namespace {

Samples run(const EpsModel& m, const SampleRequest& req, int n, const Mat* conditions) {
  const auto& sched = m.schedule();
  const int T = sched.T();
  const Task task = req.task;
  const double s = req.guidance_scale;
  const int dx = m.d_x();
  const int dy = m.d_y();

  std::vector<Rng> traj, fill;
  for (int i = 0; i < n; ++i) {
    traj.push_back(make_rng(req.seed, kTrajectoryStream, static_cast<std::uint64_t>(i)));
    fill.push_back(make_rng(req.filler_seed.value_or(req.seed), kFillerStream, static_cast<std::uint64_t>(i)));
  }
  auto draw = [n](std::vector<Rng>& rngs, int d) {
    Mat out(n, d);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) out(i, j) = nd(rngs[static_cast<std::size_t>(i)]);
    return out;
  };

  ModalState state{Mat(n, evolves_x(task) ? dx : 0), Mat(n, evolves_y(task) ? dy : 0)};
  if (evolves_x(task)) state.x = draw(traj, dx);
  if (evolves_y(task)) state.y = draw(traj, dy);

  Mat frozen_x, frozen_y;
  if (req.freeze_fillers) {
    frozen_x = draw(fill, dx);
    frozen_y = draw(fill, dy);
  }
  auto fillers = [&]() {
    std::pair<Mat, Mat> f{Mat(n, dx), Mat(n, dy)};
    if (req.freeze_fillers) return std::pair<Mat, Mat>{frozen_x, frozen_y};
    if (needs_fill_x(task, s)) f.first = draw(fill, dx);
    if (needs_fill_y(task, s)) f.second = draw(fill, dy);
    return f;
  };

  // Model inputs for the current state: conditional tasks pin the clean
  // condition in the other slot; marginal tasks leave it to the filler.
  auto model_eps = [&](const ModalState& st, int t) {
    const auto [fx, fy] = fillers();
    const Mat& x = evolves_x(task) ? st.x : (task == Task::YGivenX ? *conditions : fx);
    const Mat& y = evolves_y(task) ? st.y : (task == Task::XGivenY ? *conditions : fy);
    GuidedEps g = guided_eps(m, task, x, y, t, s, fx, fy);
    check_finite(g.eps_x, "eps_x", t);
    check_finite(g.eps_y, "eps_y", t);
    if (req.clip_x0 > 0.0) {
      if (evolves_x(task)) g.eps_x = clip_eps(st.x, g.eps_x, t, sched, req.clip_x0);
      if (evolves_y(task)) g.eps_y = clip_eps(st.y, g.eps_y, t, sched, req.clip_x0);
    }
    return ModalState{std::move(g.eps_x), std::move(g.eps_y)};
  };

  const auto grid = timestep_grid(T, 0, req.steps);
  if (req.sampler == SamplerKind::Deterministic) {
    state = solve_deterministic(std::move(state), grid, sched, model_eps, req.solver_order);
  } else {
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
      const int t = grid[i];
      const int to = grid[i + 1];
      const ModalState e = model_eps(state, t);
      if (evolves_x(task)) {
        const Mat z = to > 0 ? draw(traj, dx) : Mat::Zero(n, dx);
        state.x = ancestral_step(state.x, e.x, t, to, sched, z, req.sigma);
      }
      if (evolves_y(task)) {
        const Mat z = to > 0 ? draw(traj, dy) : Mat::Zero(n, dy);
        state.y = ancestral_step(state.y, e.y, t, to, sched, z, req.sigma);
      }
    }
  }
  check_finite(state.x, "x", 0);
  check_finite(state.y, "y", 0);
  if (task == Task::XGivenY) state.y = *conditions;
  if (task == Task::YGivenX) state.x = *conditions;
  return {std::move(state.x), std::move(state.y)};
}

}  // namespace

Samples generate(const EpsModel& m, const SampleRequest& req) {
  req.validate(m);
  if (!is_conditional(req.task)) return run(m, req, req.n, nullptr);
  const Mat conditions = req.condition->transpose().replicate(req.n, 1);
  return run(m, req, req.n, &conditions);
}

Samples generate_conditional(const EpsModel& m, const SampleRequest& req, const Mat& conditions) {
  if (!is_conditional(req.task)) throw ConfigError("task", "generate_conditional needs a conditional task");
  SampleRequest r = req;
  r.n = static_cast<int>(conditions.rows());
  r.condition = conditions.row(0).transpose();
  r.validate(m);
  const int d = req.task == Task::XGivenY ? m.d_y() : m.d_x();
  if (conditions.cols() != d) throw ConfigError("condition", "expected " + std::to_string(d) + " columns");
  return run(m, r, r.n, &conditions);
}

}  // namespace unidiff
