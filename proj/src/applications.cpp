#include "unidiff/applications.hpp"

#include <cmath>
#include <numbers>

namespace unidiff {

namespace {

constexpr std::uint64_t kGibbsStream = 0x61bb;
constexpr std::uint64_t kInterpStream = 0x1e7b;
constexpr std::uint64_t kVariationStream = 0x7a71;
constexpr double kAngleTol = 1e-6;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return make_rng(seed, stream, index)();
}

}  // namespace

Vec slerp(const Vec& a, const Vec& b, double theta) {
  if (a.size() != b.size()) throw std::invalid_argument("slerp: endpoints differ in dimension");
  if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("theta", "must lie in [0, 1]");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return (1.0 - theta) * a + theta * b;
  const double c = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  const double omega = std::acos(c);
  if (omega < kAngleTol) return (1.0 - theta) * a + theta * b;
  if (std::numbers::pi - omega < kAngleTol) throw std::invalid_argument("slerp: antipodal endpoints are ill-posed");
  const double so = std::sin(omega);
  return (std::sin((1.0 - theta) * omega) / so) * a + (std::sin(theta * omega) / so) * b;
}

Mat variation(const EpsModel& m, const Mat& sources, const VariationRequest& req) {
  const bool xyx = req.direction == VariationDirection::XYX;
  SampleRequest r;
  r.guidance_scale = req.guidance_scale;
  r.steps = req.steps;
  r.sampler = req.sampler;
  r.task = xyx ? Task::YGivenX : Task::XGivenY;
  r.seed = derive_seed(req.seed, kVariationStream, 0);
  const Samples mid = generate_conditional(m, r, sources);
  r.task = xyx ? Task::XGivenY : Task::YGivenX;
  r.seed = derive_seed(req.seed, kVariationStream, 1);
  const Samples out = generate_conditional(m, r, xyx ? mid.y : mid.x);
  return xyx ? out.x : out.y;
}

std::vector<Mat> gibbs_chains(const EpsModel& m, const Mat& init, const GibbsRequest& req) {
  if (req.rounds < 0) throw ConfigError("rounds", "must be >= 0");
  if (init.cols() != m.d_x()) throw ConfigError("init", "expected an x-modality latent");
  std::vector<Mat> traj{init};
  SampleRequest r;
  r.guidance_scale = req.guidance_scale;
  r.steps = req.steps;
  Mat x = init;
  for (int round = 0; round < req.rounds; ++round) {
    r.task = Task::YGivenX;
    r.seed = derive_seed(req.seed, kGibbsStream, 2 * static_cast<std::uint64_t>(round));
    const Mat y = generate_conditional(m, r, x).y;
    r.task = Task::XGivenY;
    r.seed = derive_seed(req.seed, kGibbsStream, 2 * static_cast<std::uint64_t>(round) + 1);
    x = generate_conditional(m, r, y).x;
    traj.push_back(y);
    traj.push_back(x);
  }
  return traj;
}

Mat conditional_solve(const EpsModel& m, Task task, const Mat& init, const Mat& condition, int t_start, int t_end,
                      int steps, double s, std::uint64_t filler_seed, int order) {
  if (!is_conditional(task)) throw ConfigError("task", "conditional_solve needs a conditional task");
  const bool gen_x = task == Task::XGivenY;
  const auto n = init.rows();
  const int dx = m.d_x();
  const int dy = m.d_y();
  Rng fill = make_rng(filler_seed, kInterpStream, 0);
  auto eps = [&](const ModalState& st, int t) {
    Mat fx(n, dx), fy(n, dy);
    if (s != 0.0) {
      fill_normal(fill, fx);
      fill_normal(fill, fy);
    }
    const GuidedEps g = gen_x ? guided_eps(m, task, st.x, condition, t, s, fx, fy)
                              : guided_eps(m, task, condition, st.y, t, s, fx, fy);
    return ModalState{g.eps_x, g.eps_y};
  };
  ModalState st{gen_x ? init : Mat(n, 0), gen_x ? Mat(n, 0) : init};
  st = solve_deterministic(std::move(st), timestep_grid(t_start, t_end, steps), m.schedule(), eps, order);
  return gen_x ? st.x : st.y;
}

Mat round_trip(const EpsModel& m, const Mat& x0, const Mat& y0, int steps, double s, std::uint64_t seed, int order) {
  const int T = m.schedule().T();
  const Mat xT = conditional_solve(m, Task::XGivenY, x0, y0, 0, T, steps, s, derive_seed(seed, kInterpStream, 3), order);
  return conditional_solve(m, Task::XGivenY, xT, y0, T, 0, steps, s, derive_seed(seed, kInterpStream, 5), order);
}

InterpolationPath prepare_interpolation(const EpsModel& m, const InterpolationRequest& req) {
  if (req.endpoint_a.size() != m.d_x() || req.endpoint_b.size() != m.d_x()) {
    throw ConfigError("endpoints", "expected " + std::to_string(m.d_x()) + " values each");
  }
  if (!(req.guidance_scale >= 0.0)) throw ConfigError("guidance_scale", "must be >= 0");
  const int T = m.schedule().T();
  Rng rng = make_rng(req.seed, kInterpStream, 0);
  Mat yT(1, m.d_y());
  fill_normal(rng, yT);
  const Mat xa = req.endpoint_a.transpose();
  const Mat xb = req.endpoint_b.transpose();
  const double s = req.guidance_scale;
  // Filler streams: decodes of y use index 1, encodes of x index 3, and the
  // final decode index 5, matching round_trip.
  const auto f1 = derive_seed(req.seed, kInterpStream, 1);
  const auto f3 = derive_seed(req.seed, kInterpStream, 3);
  InterpolationPath p;
  const Mat ya = conditional_solve(m, Task::YGivenX, yT, xa, T, 0, req.steps, s, f1, req.solver_order);
  const Mat yb = conditional_solve(m, Task::YGivenX, yT, xb, T, 0, req.steps, s, f1, req.solver_order);
  p.y0_a = ya.row(0).transpose();
  p.y0_b = yb.row(0).transpose();
  p.xT_a = conditional_solve(m, Task::XGivenY, xa, ya, 0, T, req.steps, s, f3, req.solver_order).row(0).transpose();
  p.xT_b = conditional_solve(m, Task::XGivenY, xb, yb, 0, T, req.steps, s, f3, req.solver_order).row(0).transpose();
  return p;
}

Vec interpolate_at(const EpsModel& m, const InterpolationRequest& req, const InterpolationPath& path, double theta) {
  const Mat y0 = slerp(path.y0_a, path.y0_b, theta).transpose();
  const Mat xT = slerp(path.xT_a, path.xT_b, theta).transpose();
  const auto f5 = derive_seed(req.seed, kInterpStream, 5);
  const Mat x0 = conditional_solve(m, Task::XGivenY, xT, y0, m.schedule().T(), 0, req.steps, req.guidance_scale, f5,
                                   req.solver_order);
  return x0.row(0).transpose();
}

Vec interpolate(const EpsModel& m, const InterpolationRequest& req, double theta) {
  return interpolate_at(m, req, prepare_interpolation(m, req), theta);
}

}  // namespace unidiff
