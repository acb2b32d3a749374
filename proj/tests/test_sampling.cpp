#include <doctest.h>

#include <cmath>
#include <set>

#include "unidiff/eval.hpp"
#include "unidiff/sampling.hpp"

using namespace unidiff;

namespace {

// Scalar stub: 0.4 when the other slot is clean or tied (conditional / joint
// term), 0.1 when the other slot is at T (unconditional term).
FunctionEps stub(const NoiseSchedule& sched) {
  const int T = sched.T();
  return FunctionEps(1, 1, sched, [T](const Mat& x, const Mat&, std::span<const int> tx, std::span<const int> ty,
                                      Mat& ex, Mat& ey) {
    ex.resize(x.rows(), 1);
    ey.resize(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      ex(i, 0) = ty[static_cast<std::size_t>(i)] == T ? 0.1 : 0.4;
      ey(i, 0) = tx[static_cast<std::size_t>(i)] == T ? -0.1 : -0.4;
    }
  });
}

// Records every (tx, ty) it is called with; outputs depend on all arguments.
struct Recorder {
  std::vector<std::pair<int, int>> calls;
  FunctionEps model(const NoiseSchedule& sched, int dx, int dy) {
    return FunctionEps(dx, dy, sched, [this, dx, dy](const Mat& x, const Mat& y, std::span<const int> tx,
                                                     std::span<const int> ty, Mat& ex, Mat& ey) {
      ex.resize(x.rows(), dx);
      ey.resize(y.rows(), dy);
      for (std::size_t i = 0; i < tx.size(); ++i) {
        calls.emplace_back(tx[i], ty[i]);
        const auto r = static_cast<Eigen::Index>(i);
        ex.row(r) = 0.3 * x.row(r).array() + 0.1 * y.row(r).sum() + 0.01 * tx[i] + 0.02 * ty[i];
        ey.row(r) = 0.2 * y.row(r).array() - 0.1 * x.row(r).sum() + 0.03 * tx[i] - 0.01 * ty[i];
      }
    });
  }
};

Mat m1(double v) { return Mat::Constant(1, 1, v); }

// Twenty-five steps of large betas: alpha_bar(T) is below 1e-15, so fresh
// noise at T carries essentially no signal.
NoiseSchedule steep() { return build_linear_schedule(25, 0.5, 0.95); }

}  // namespace

TEST_CASE("guidance arithmetic on a stub") {
  const auto sched = toy_schedule();
  const auto m = stub(sched);
  const Mat f = m1(0.0);
  CHECK(guided_eps(m, Task::XGivenY, m1(1.0), m1(1.0), 10, 1.0, f, f).eps_x(0, 0) == doctest::Approx(0.7));
  CHECK(guided_eps(m, Task::XGivenY, m1(1.0), m1(1.0), 10, 6.0, f, f).eps_x(0, 0) == doctest::Approx(2.2));
  CHECK(guided_eps(m, Task::YGivenX, m1(1.0), m1(1.0), 10, 6.0, f, f).eps_y(0, 0) == doctest::Approx(-2.2));
  const auto j = guided_eps(m, Task::Joint, m1(1.0), m1(1.0), 10, 6.0, f, f);
  CHECK(j.eps_x(0, 0) == doctest::Approx(2.2));
  CHECK(j.eps_y(0, 0) == doctest::Approx(-2.2));
  // Marginals have no guided form.
  CHECK(guided_eps(m, Task::MarginalX, m1(1.0), m1(1.0), 10, 6.0, f, f).eps_x(0, 0) == doctest::Approx(0.1));
  CHECK(guided_eps(m, Task::MarginalY, m1(1.0), m1(1.0), 10, 6.0, f, f).eps_y(0, 0) == doctest::Approx(-0.1));
  CHECK_THROWS_AS(guided_eps(m, Task::Joint, m1(1.0), m1(1.0), 10, -1.0, f, f), ConfigError);
}

TEST_CASE("each table row evaluates the right arguments") {
  const auto sched = toy_schedule();
  const int T = sched.T(), t = 17;
  const double s = 2.5;
  Recorder rec;
  const auto m = rec.model(sched, 2, 3);
  Rng rng(1);
  Mat x(4, 2), y(4, 3), fx(4, 2), fy(4, 3);
  fill_normal(rng, x);
  fill_normal(rng, y);
  fill_normal(rng, fx);
  fill_normal(rng, fy);
  auto raw = [&](const Mat& a, const Mat& b, int tx, int ty) {
    Mat ex, ey;
    std::vector<int> vx(4, tx), vy(4, ty);
    m.predict(a, b, vx, vy, ex, ey);
    return std::pair{ex, ey};
  };

  SUBCASE("joint") {
    const auto g = guided_eps(m, Task::Joint, x, y, t, s, fx, fy);
    const auto c = raw(x, y, t, t), ux = raw(x, fy, t, T), uy = raw(fx, y, T, t);
    CHECK((g.eps_x - ((1 + s) * c.first - s * ux.first)).norm() < 1e-12);
    CHECK((g.eps_y - ((1 + s) * c.second - s * uy.second)).norm() < 1e-12);
  }
  SUBCASE("x given y") {
    const auto g = guided_eps(m, Task::XGivenY, x, y, t, s, fx, fy);
    const std::set<std::pair<int, int>> seen(rec.calls.begin(), rec.calls.end());
    const auto c = raw(x, y, t, 0), u = raw(x, fy, t, T);
    CHECK((g.eps_x - ((1 + s) * c.first - s * u.first)).norm() < 1e-12);
    CHECK(g.eps_y.cols() == 0);
    CHECK(seen == std::set<std::pair<int, int>>{{t, 0}, {t, T}});
  }
  SUBCASE("y given x") {
    const auto g = guided_eps(m, Task::YGivenX, x, y, t, s, fx, fy);
    const auto c = raw(x, y, 0, t), u = raw(fx, y, T, t);
    CHECK((g.eps_y - ((1 + s) * c.second - s * u.second)).norm() < 1e-12);
    CHECK(g.eps_x.cols() == 0);
  }
  SUBCASE("marginals") {
    CHECK((guided_eps(m, Task::MarginalX, x, y, t, s, fx, fy).eps_x - raw(x, fy, t, T).first).norm() < 1e-12);
    CHECK((guided_eps(m, Task::MarginalY, x, y, t, s, fx, fy).eps_y - raw(fx, y, T, t).second).norm() < 1e-12);
  }
}

TEST_CASE("zero guidance is bitwise the unguided output") {
  const auto sched = toy_schedule();
  OracleModel o(benchmark_spec(), sched);
  OracleEps m(o);
  Rng rng(4);
  Mat x(8, 2), y(8, 2), fx(8, 2), fy(8, 2);
  fill_normal(rng, x);
  fill_normal(rng, y);
  fill_normal(rng, fx);
  fill_normal(rng, fy);
  const int t = 23;
  std::vector<int> vt(8, t), v0(8, 0);
  Mat ex, ey;
  m.predict(x, y, vt, vt, ex, ey);
  const auto j = guided_eps(m, Task::Joint, x, y, t, 0.0, fx, fy);
  CHECK(j.eps_x == ex);
  CHECK(j.eps_y == ey);
  m.predict(x, y, vt, v0, ex, ey);
  CHECK(guided_eps(m, Task::XGivenY, x, y, t, 0.0, fx, fy).eps_x == ex);
}

TEST_CASE("joint guidance decomposes into guided conditional scores") {
  const auto sched = steep();
  REQUIRE(sched.alpha_bar(sched.T()) < 1e-14);
  const auto spec = benchmark_spec();
  OracleModel o(spec, sched);
  OracleEps m(o);
  const auto mx = marginal(spec, Modality::X), my = marginal(spec, Modality::Y);
  Rng rng(6);
  const int n = 200;
  Mat x(n, 2), y(n, 2), fx(n, 2), fy(n, 2);
  fill_normal(rng, x);
  fill_normal(rng, y);
  fill_normal(rng, fx);
  fill_normal(rng, fy);
  double worst = 0.0;
  for (int t = 1; t < sched.T(); ++t) {
    for (double s : {1.0, 3.0, 6.0}) {
      const auto g = guided_eps(m, Task::Joint, x, y, t, s, fx, fy);
      const double ab = sched.alpha_bar(t);
      for (int i = 0; i < n; ++i) {
        const Vec xi = x.row(i).transpose(), yi = y.row(i).transpose();
        // -sqrt(1 - ab) grad log q(x_t | y_t) is the joint oracle's x block.
        const auto joint = o.predict(xi, yi, t, t);
        const Vec rx = (1 + s) * joint.eps_x - s * single_block_noise_prediction(mx, xi, ab);
        const Vec ry = (1 + s) * joint.eps_y - s * single_block_noise_prediction(my, yi, ab);
        worst = std::max(worst, (g.eps_x.row(i).transpose() - rx).cwiseAbs().maxCoeff());
        worst = std::max(worst, (g.eps_y.row(i).transpose() - ry).cwiseAbs().maxCoeff());
      }
    }
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("ancestral step arithmetic") {
  const Mat z = m1(5.0);
  SUBCASE("zero prediction") {
    const auto sched = NoiseSchedule::from_betas({0.2});
    CHECK(ancestral_step(m1(1.0), m1(0.0), 1, sched, z)(0, 0) == doctest::Approx(1.118034).epsilon(1e-6));
  }
  SUBCASE("exact noise removal") {
    const auto sched = NoiseSchedule::from_betas({0.1, 0.2});
    REQUIRE(sched.alpha_bar(2) == doctest::Approx(0.72));
    const Mat out = ancestral_step(m1(1.0), m1(std::sqrt(0.28)), 2, sched, m1(0.0));
    CHECK(out(0, 0) == doctest::Approx(0.894427).epsilon(1e-6));
  }
  SUBCASE("z is ignored at the last step") {
    const auto sched = NoiseSchedule::from_betas({0.2, 0.3});
    const Mat a = ancestral_step(m1(0.3), m1(0.1), 1, sched, m1(5.0));
    const Mat b = ancestral_step(m1(0.3), m1(0.1), 1, sched, m1(-2.0));
    CHECK(a == b);
    CHECK(ancestral_step(m1(0.3), m1(0.1), 2, sched, m1(1.0))(0, 0) !=
          ancestral_step(m1(0.3), m1(0.1), 2, sched, m1(0.0))(0, 0));
  }
  SUBCASE("range checks") {
    const auto sched = NoiseSchedule::from_betas({0.2});
    CHECK_THROWS(ancestral_step(m1(1.0), m1(0.0), 0, sched, z));
    CHECK_THROWS(ancestral_step(m1(1.0), Mat(1, 2), 1, sched, z));
  }
  SUBCASE("sigma choices") {
    const auto sched = toy_schedule();
    CHECK(ancestral_sigma(sched, 10, 9, SigmaKind::Large) == doctest::Approx(std::sqrt(sched.beta(10))));
    const double post = sched.beta(10) * (1 - sched.alpha_bar(9)) / (1 - sched.alpha_bar(10));
    CHECK(ancestral_sigma(sched, 10, 9, SigmaKind::Posterior) == doctest::Approx(std::sqrt(post)));
  }
}

TEST_CASE("deterministic step arithmetic") {
  const auto sched = NoiseSchedule::from_betas({0.28, 0.5});
  REQUIRE(sched.alpha_bar(2) == doctest::Approx(0.36));
  CHECK(deterministic_step(m1(2.0), m1(0.8), 2, 1, sched)(0, 0) == doctest::Approx(2.346654).epsilon(1e-6));
  const Mat r = deterministic_step(m1(1.5), m1(0.0), 1, 2, sched);
  CHECK(r(0, 0) == doctest::Approx(std::sqrt(0.36 / 0.72) * 1.5));
  CHECK_THROWS(deterministic_step(m1(1.0), m1(0.0), 1, 1, sched));
  CHECK_THROWS(deterministic_step(m1(1.0), m1(0.0), 1, 3, sched));
}

TEST_CASE("timestep grid") {
  CHECK(timestep_grid(50, 0, 50).size() == 51);
  CHECK(timestep_grid(1000, 0, 4) == std::vector<int>{1000, 750, 500, 250, 0});
  CHECK(timestep_grid(0, 50, 5) == std::vector<int>{0, 10, 20, 30, 40, 50});
  CHECK_THROWS_AS(timestep_grid(50, 0, 51), ConfigError);
  CHECK_THROWS_AS(timestep_grid(50, 0, 0), ConfigError);
}

TEST_CASE("request validation") {
  OracleEps m(OracleModel(benchmark_spec(), toy_schedule()));
  SampleRequest r;
  r.task = Task::XGivenY;
  CHECK_THROWS_AS(r.validate(m), ConfigError);
  r.condition = Vec::Ones(2);
  CHECK_NOTHROW(r.validate(m));
  r.guidance_scale = -1.0;
  CHECK_THROWS_AS(r.validate(m), ConfigError);
  r.guidance_scale = 0.0;
  r.steps = 51;
  CHECK_THROWS_AS(r.validate(m), ConfigError);
  r.steps = 25;
  r.filler_seed = 4;
  const auto back = SampleRequest::from_json(r.to_json());
  CHECK(back.to_json() == r.to_json());
}

TEST_CASE("oracle-driven joint sampling matches the spec") {
  const auto spec = benchmark_spec();
  OracleEps m(OracleModel(spec, toy_schedule()));
  SampleRequest r;
  r.n = 10000;
  r.seed = 1;
  const auto out = generate(m, r);
  Mat joint(r.n, 4);
  joint << out.x, out.y;
  const auto rep = moment_report(joint, spec.mean(), spec.covariance());
  CHECK(rep.max_mean_dev <= 0.1);
  CHECK(rep.max_cov_dev <= 0.15);
  const auto truth = sample_dataset(spec, 10000, 2).joined();
  CHECK(energy_distance(joint, truth, 200, 3, 2500).p_value > 0.01);
}

TEST_CASE("oracle-driven conditional sampling") {
  const auto spec = correlated_gaussian(1, 1, 0.8);
  OracleEps m(OracleModel(spec, toy_schedule()));
  SampleRequest r;
  r.task = Task::XGivenY;
  r.condition = Vec::Ones(1);
  r.n = 10000;
  r.seed = 3;
  const auto out = generate(m, r);
  CHECK(out.y.isApprox(Mat::Ones(r.n, 1)));
  const double mean = out.x.mean();
  const double var = (out.x.array() - mean).square().sum() / (r.n - 1);
  CHECK(std::abs(mean - 0.8) <= 0.05);
  CHECK(std::abs(var - 0.36) <= 0.05);
  CHECK(generate(m, r).x == out.x);
}

TEST_CASE("joint sampling ties the timesteps") {
  const auto sched = toy_schedule();
  Recorder rec;
  const auto m = rec.model(sched, 2, 2);
  SampleRequest r;
  r.n = 3;
  r.steps = 10;
  generate(m, r);
  REQUIRE(!rec.calls.empty());
  for (auto [tx, ty] : rec.calls) CHECK(tx == ty);
}

TEST_CASE("marginal sampling ignores the filler stream") {
  OracleEps m(OracleModel(benchmark_spec(), steep()));
  SampleRequest r;
  r.task = Task::MarginalX;
  r.n = 50;
  r.steps = 25;
  r.seed = 9;
  r.filler_seed = 1;
  const auto a = generate(m, r);
  r.filler_seed = 2;
  const auto b = generate(m, r);
  CHECK(a.y.cols() == 0);
  CHECK((a.x - b.x).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("results do not depend on batch size") {
  OracleEps m(OracleModel(benchmark_spec(), toy_schedule()));
  SampleRequest r;
  r.n = 7;
  r.seed = 12;
  r.guidance_scale = 2.0;
  const auto big = generate(m, r);
  r.n = 3;
  const auto small = generate(m, r);
  CHECK(big.x.topRows(3) == small.x);
  CHECK(big.y.topRows(3) == small.y);
}

TEST_CASE("deterministic sampler is reproducible") {
  OracleEps m(OracleModel(benchmark_spec(), toy_schedule()));
  SampleRequest r;
  r.sampler = SamplerKind::Deterministic;
  r.n = 20;
  r.seed = 5;
  r.steps = 25;
  r.guidance_scale = 1.0;
  CHECK(generate(m, r).x == generate(m, r).x);
  r.solver_order = 1;
  CHECK(generate(m, r).x.allFinite());
}

TEST_CASE("clean-sample clipping") {
  const auto sched = toy_schedule();
  Rng rng(12);
  Mat x(6, 2), e(6, 2);
  fill_normal(rng, x);
  fill_normal(rng, e);
  const int t = 30;
  const double sa = std::sqrt(sched.alpha_bar(t)), sb = std::sqrt(1.0 - sched.alpha_bar(t));
  CHECK(clip_eps(x, e, t, sched, 0.0) == e);
  CHECK(clip_eps(x, e, 0, sched, 1.0) == e);
  // A bound far above every implied x0 changes nothing beyond roundoff.
  const Mat x0 = (x - sb * e) / sa;
  CHECK((clip_eps(x, e, t, sched, x0.cwiseAbs().maxCoeff() + 1.0) - e).cwiseAbs().maxCoeff() <= 1e-9);
  // Otherwise the implied x0 lands in the box.
  const Mat c = clip_eps(x, e, t, sched, 0.5);
  const Mat cx0 = (x - sb * c) / sa;
  CHECK(cx0.cwiseAbs().maxCoeff() <= 0.5 + 1e-9);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      if (std::abs(x0(i, j)) <= 0.5) CHECK(std::abs(c(i, j) - e(i, j)) <= 1e-9);
  SampleRequest r;
  r.clip_x0 = -1.0;
  CHECK_THROWS_AS(r.validate(OracleEps(OracleModel(benchmark_spec(), sched))), ConfigError);
}
