#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "unidiff/training.hpp"

using namespace unidiff;

namespace {

BackboneConfig small_backbone() {
  BackboneConfig b;
  b.token_dim = 16;
  b.n_heads = 2;
  b.depth = 3;
  b.mlp_dim = 16;
  b.time_freqs = 4;
  return b;
}

TrainConfig short_run(int steps) {
  TrainConfig c;
  c.steps = steps;
  c.batch_size = 32;
  c.eval_every = 5;
  c.eval_size = 256;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("timesteps are independent and uniform") {
  const int T = 10, n = 100000;
  Rng rng(1);
  std::vector<double> table((T + 1) * (T + 1), 0.0), rows(T + 1, 0.0), cols(T + 1, 0.0);
  for (int i = 0; i < n; ++i) {
    const auto p = draw_timesteps(rng, T, TimestepSupport::Full);
    table[p.tx * (T + 1) + p.ty] += 1;
    rows[p.tx] += 1;
    cols[p.ty] += 1;
  }
  double chi = 0.0;
  for (int a = 0; a <= T; ++a)
    for (int b = 0; b <= T; ++b) {
      const double e = rows[a] * cols[b] / n;
      chi += (table[a * (T + 1) + b] - e) * (table[a * (T + 1) + b] - e) / e;
    }
  // Upper 1% point of chi-square with (T)^2 = 100 degrees of freedom.
  CHECK(chi < 135.807);
  for (double r : rows) CHECK(std::abs(r / n - 1.0 / (T + 1)) < 0.005);

  bool saw_zero = false;
  for (int i = 0; i < 10000; ++i) {
    const auto p = draw_timesteps(rng, T, TimestepSupport::Positive);
    CHECK(p.tx >= 1);
    CHECK(p.ty >= 1);
    const auto f = draw_timesteps(rng, T, TimestepSupport::Full);
    saw_zero = saw_zero || f.tx == 0;
  }
  CHECK(saw_zero);
}

TEST_CASE("regression loss reference values") {
  const auto sched = toy_schedule();
  const auto spec = benchmark_spec();
  const auto d = sample_dataset(spec, 20000, 2);
  Rng rng(5);
  const auto b = perturb_batch(d.x, d.y, sched, TimestepSupport::Full, rng);

  // Predicting the drawn noise exactly.
  CHECK(regression_loss(b, b.eps_x, b.eps_y) == 0.0);

  // A zero predictor pays E|eps|^2 = d_x + d_y.
  const double zero = regression_loss(b, Mat::Zero(b.size(), 2), Mat::Zero(b.size(), 2));
  CHECK(std::abs(zero - 4.0) < 4.0 * std::sqrt(8.0 / b.size()));

  // The initial network has a zero head, so it is the zero predictor.
  Backbone<float> net(small_backbone());
  CHECK(network_loss(net, net.init_params(1), b) == doctest::Approx(zero).epsilon(1e-6));

  // At tx = ty = 0 the oracle predicts zero and pays the same.
  PerturbedBatch clean = b;
  clean.xt = d.x;
  clean.yt = d.y;
  std::fill(clean.tx.begin(), clean.tx.end(), 0);
  std::fill(clean.ty.begin(), clean.ty.end(), 0);
  OracleModel o(spec, sched);
  CHECK(oracle_loss(o, clean) == doctest::Approx(zero).epsilon(1e-12));
  CHECK(oracle_loss(o, b) < zero);
}

TEST_CASE("adamw step") {
  AdamW opt(2, {0.9, 0.9}, 1e-8, 0.03);
  AlignedVector<float> p{1.0f, -2.0f};
  opt.step(p, {0.5f, 0.0f}, 0.1);
  // Bias-corrected moments equal g and g^2 after one step.
  CHECK(p[0] == doctest::Approx(1.0 * (1 - 0.003) - 0.1).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-2.0 * (1 - 0.003)).epsilon(1e-6));
  CHECK(opt.steps() == 1);
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.steps = 1000;
  c.learning_rate = 1e-3;
  CHECK(learning_rate_at(c, 0) == doctest::Approx(1e-4));
  CHECK(learning_rate_at(c, 9) == doctest::Approx(1e-3));
  CHECK(learning_rate_at(c, 999) == doctest::Approx(1e-3));
  c.final_lr_fraction = 0.1;
  CHECK(learning_rate_at(c, 10) == doctest::Approx(1e-3));
  CHECK(learning_rate_at(c, 505) == doctest::Approx(1e-3 * (1 - 0.9 * 0.5)));
}

TEST_CASE("config validation and json") {
  TrainConfig c;
  c.learning_rate = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.adam_betas = {0.9, 1.0};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.timestep_support = TimestepSupport::Positive;
  c.ema_decay = 0.99;
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  try {
    TrainConfig::from_json({{"stepz", 10}});
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "train.stepz");
  }
}

TEST_CASE("one forward and one backward per step") {
  TrainData d;
  d.spec = benchmark_spec();
  const auto r = train(short_run(12), d, small_backbone(), toy_schedule());
  CHECK(r.steps_done == 12);
  CHECK(r.calls.forward == 12);
  CHECK(r.calls.backward == 12);
  CHECK(r.curve.size() >= 2);
  CHECK(r.curve.back().oracle_gap.has_value());
}

TEST_CASE("training is deterministic") {
  TrainData d;
  d.dataset = sample_dataset(benchmark_spec(), 300, 1);
  const auto a = train(short_run(10), d, small_backbone(), toy_schedule());
  const auto b = train(short_run(10), d, small_backbone(), toy_schedule());
  CHECK(a.params.values == b.params.values);
  REQUIRE(a.curve.size() == b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].loss == b.curve[i].loss);
  CHECK(!a.curve.back().oracle_gap.has_value());
  auto other = short_run(10);
  other.seed = 4;
  CHECK(train(other, d, small_backbone(), toy_schedule()).params.values != a.params.values);
}

TEST_CASE("zero learning rate leaves the parameters alone") {
  TrainData d;
  d.spec = benchmark_spec();
  auto c = short_run(1);
  c.learning_rate = 0.0;
  const auto one = train(c, d, small_backbone(), toy_schedule());
  c.steps = 15;
  const auto many = train(c, d, small_backbone(), toy_schedule());
  CHECK(one.params.values == many.params.values);
}

TEST_CASE("training writes its artifacts") {
  const auto dir = std::filesystem::temp_directory_path() / "unidiff_train_test";
  std::filesystem::remove_all(dir);
  TrainData d;
  d.spec = benchmark_spec();
  TrainHooks h;
  h.out_dir = dir;
  int evals = 0;
  h.on_eval = [&](const LossRecord&) { ++evals; };
  const auto r = train(short_run(10), d, small_backbone(), toy_schedule(), h);
  CHECK(evals == 2);
  CHECK(r.curve.size() == 10);
  CHECK(std::filesystem::exists(dir / "checkpoint.json"));
  std::ifstream csv(dir / "loss.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "step,loss,oracle_gap");
  const auto ck = load_checkpoint(dir);
  CHECK(ck.params.values == r.params.values);
  CHECK(ck.step == 10);
  std::filesystem::remove_all(dir);
}

TEST_CASE("learning reduces the loss") {
  TrainData d;
  d.spec = benchmark_spec();
  auto c = short_run(300);
  c.batch_size = 64;
  c.learning_rate = 2e-3;
  c.eval_every = 300;
  c.eval_size = 4096;
  const auto sched = toy_schedule();
  const auto r = train(c, d, small_backbone(), sched);
  Backbone<float> net(small_backbone());
  const auto held = make_held_out(*d.spec, sched, 4096, 9, TimestepSupport::Full);
  CHECK(network_loss(net, r.params, held) < 0.9 * network_loss(net, net.init_params(0), held));
}
