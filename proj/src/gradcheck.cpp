#include "unidiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace unidiff {

GradCheckReport gradient_check(const BackboneConfig& cfg, std::uint64_t seed, std::size_t max_params, int batch,
                               double h, double abs_floor) {
  const Backbone<double> net(cfg);
  Rng rng = make_rng(seed, 0x9c, 0);
  std::normal_distribution<double> nd(0.0, 1.0);

  auto params = net.zero_params();
  for (const auto& e : net.layout()->entries()) {
    double* dst = params.values.data() + e.offset;
    const bool gain = e.name.ends_with(".g");
    const bool bias = e.name.ends_with(".b");
    for (std::size_t i = 0; i < e.size(); ++i) {
      if (gain) {
        dst[i] = 1.0 + 0.1 * nd(rng);
      } else if (bias) {
        dst[i] = 0.1 * nd(rng);
      } else {
        dst[i] = nd(rng) / std::sqrt(static_cast<double>(e.rows));
      }
    }
  }

  RowMat<double> x(batch, cfg.d_x), y(batch, cfg.d_y), ux(batch, cfg.d_x), uy(batch, cfg.d_y);
  fill_normal(rng, x);
  fill_normal(rng, y);
  fill_normal(rng, ux);
  fill_normal(rng, uy);
  std::uniform_int_distribution<int> tdist(0, cfg.timesteps);
  std::vector<int> tx(static_cast<std::size_t>(batch)), ty(static_cast<std::size_t>(batch));
  for (auto& t : tx) t = tdist(rng);
  for (auto& t : ty) t = tdist(rng);

  ForwardTape<double> tape;
  RowMat<double> ex, ey;
  auto loss = [&](const ParameterStore<double>& p) {
    ForwardTape<double> local;
    RowMat<double> a, b;
    net.forward(p, x, y, tx, ty, local, a, b);
    return (a.cwiseProduct(ux)).sum() + (b.cwiseProduct(uy)).sum();
  };
  net.forward(params, x, y, tx, ty, tape, ex, ey);
  auto grad = net.zero_params();
  net.backward(params, tape, ux, uy, grad);

  std::vector<std::size_t> idx(params.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_params != 0 && max_params < idx.size()) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_params);
    std::sort(idx.begin(), idx.end());
  }

  GradCheckReport rep;
  for (std::size_t i : idx) {
    const double orig = params.values[i];
    params.values[i] = orig + h;
    const double lp = loss(params);
    params.values[i] = orig - h;
    const double lm = loss(params);
    params.values[i] = orig;
    const double numeric = (lp - lm) / (2.0 * h);
    const double analytic = grad.values[i];
    const double rel =
        std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), abs_floor});
    ++rep.checked;
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_analytic = analytic;
      rep.worst_numeric = numeric;
      for (const auto& e : net.layout()->entries()) {
        if (i >= e.offset && i < e.offset + e.size()) rep.worst_param = e.name;
      }
    }
  }
  return rep;
}

BackboneConfig random_small_config(std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x5c, 0);
  auto pick = [&](std::initializer_list<int> opts) {
    std::uniform_int_distribution<std::size_t> d(0, opts.size() - 1);
    return *(opts.begin() + static_cast<std::ptrdiff_t>(d(rng)));
  };
  BackboneConfig c;
  c.chunk_size = pick({1, 2});
  c.d_x = c.chunk_size * pick({1, 2});
  c.d_y = c.chunk_size * pick({1, 2, 3});
  c.n_heads = pick({1, 2});
  c.token_dim = c.n_heads * pick({2, 4, 6});
  c.depth = pick({1, 3, 5});
  c.mlp_dim = pick({4, 8, 12});
  c.time_freqs = pick({2, 4});
  c.timesteps = pick({10, 50, 1000});
  c.validate();
  return c;
}

}  // namespace unidiff
