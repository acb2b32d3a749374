#include "unidiff/oracle.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <numbers>

#include <Eigen/Cholesky>

namespace unidiff {

namespace {

constexpr double kResponsibilityFloor = 1e-300;

void check_dims(const DistributionSpec& spec, const Vec& x, const Vec& y) {
  if (x.size() != spec.d_x || y.size() != spec.d_y) {
    throw std::invalid_argument("oracle: input dimensions do not match the distribution spec");
  }
}

}  // namespace

struct OracleModel::Perturbed {
  Vec a;  // per-coordinate sqrt(alpha_bar)
  Vec s;  // per-coordinate sqrt(1 - alpha_bar)
  std::vector<double> log_weight;
  std::vector<Vec> mean;
  std::vector<Eigen::LLT<Mat>> llt;
  std::vector<double> log_norm;  // -1/2 log det C - d/2 log 2 pi
};

OracleModel::OracleModel(DistributionSpec spec, NoiseSchedule sched) : spec_(std::move(spec)), sched_(std::move(sched)) {
  spec_.validate();
}

OracleModel::Perturbed OracleModel::perturbed(int tx, int ty) const {
  check_timestep(sched_, tx);
  check_timestep(sched_, ty);
  const int d = spec_.dim();
  Perturbed p;
  p.a.resize(d);
  p.s.resize(d);
  const double abx = sched_.alpha_bar(tx);
  const double aby = sched_.alpha_bar(ty);
  for (int i = 0; i < d; ++i) {
    const double ab = i < spec_.d_x ? abx : aby;
    p.a(i) = std::sqrt(ab);
    p.s(i) = std::sqrt(1.0 - ab);
  }
  for (const auto& c : spec_.components) {
    Mat cov = p.a.asDiagonal() * c.cov * p.a.asDiagonal();
    cov.diagonal() += p.s.cwiseAbs2();
    Eigen::LLT<Mat> llt(cov);
    if (llt.info() != Eigen::Success) throw NumericalError("oracle: perturbed covariance is numerically singular");
    double logdet = 0.0;
    for (int i = 0; i < d; ++i) logdet += 2.0 * std::log(llt.matrixLLT()(i, i));
    p.log_weight.push_back(std::log(c.weight));
    p.mean.push_back(p.a.cwiseProduct(c.mean));
    p.llt.push_back(std::move(llt));
    p.log_norm.push_back(-0.5 * logdet - 0.5 * d * std::log(2.0 * std::numbers::pi));
  }
  return p;
}

namespace {

std::vector<double> component_log_terms(const std::vector<double>& log_weight, const std::vector<Vec>& mean,
                                        const std::vector<Eigen::LLT<Mat>>& llt,
                                        const std::vector<double>& log_norm, const Vec& u) {
  std::vector<double> out(mean.size());
  for (std::size_t k = 0; k < mean.size(); ++k) {
    const Vec w = llt[k].matrixL().solve(u - mean[k]);
    out[k] = log_weight[k] + log_norm[k] - 0.5 * w.squaredNorm();
  }
  return out;
}

std::vector<double> normalise(const std::vector<double>& logs) {
  const double best = *std::max_element(logs.begin(), logs.end());
  std::vector<double> r(logs.size());
  double total = 0.0;
  for (std::size_t k = 0; k < logs.size(); ++k) {
    r[k] = std::max(std::exp(logs[k] - best), kResponsibilityFloor);
    total += r[k];
  }
  for (auto& v : r) v /= total;
  return r;
}

}  // namespace

Vec OracleModel::score_with(const Perturbed& p, const Vec& u) const {
  if (p.mean.size() == 1) return -p.llt[0].solve(u - p.mean[0]);
  const auto r = normalise(component_log_terms(p.log_weight, p.mean, p.llt, p.log_norm, u));
  Vec g = Vec::Zero(u.size());
  for (std::size_t k = 0; k < r.size(); ++k) g -= r[k] * p.llt[k].solve(u - p.mean[k]);
  return g;
}

Vec OracleModel::score(const Vec& x, const Vec& y, int tx, int ty) const {
  check_dims(spec_, x, y);
  Vec u(spec_.dim());
  u << x, y;
  return score_with(perturbed(tx, ty), u);
}

JointNoisePrediction OracleModel::predict(const Vec& x, const Vec& y, int tx, int ty) const {
  check_dims(spec_, x, y);
  const Perturbed p = perturbed(tx, ty);
  Vec u(spec_.dim());
  u << x, y;
  const Vec eps = -p.s.cwiseProduct(score_with(p, u));
  if (!eps.allFinite()) throw NumericalError("oracle: non-finite prediction");
  return {eps.head(spec_.d_x), eps.tail(spec_.d_y)};
}

double OracleModel::log_density(const Vec& x, const Vec& y, int tx, int ty) const {
  check_dims(spec_, x, y);
  const Perturbed p = perturbed(tx, ty);
  Vec u(spec_.dim());
  u << x, y;
  const auto logs = component_log_terms(p.log_weight, p.mean, p.llt, p.log_norm, u);
  const double best = *std::max_element(logs.begin(), logs.end());
  double acc = 0.0;
  for (double l : logs) acc += std::exp(l - best);
  return best + std::log(acc);
}

std::vector<double> OracleModel::responsibilities(const Vec& x, const Vec& y, int tx, int ty) const {
  check_dims(spec_, x, y);
  const Perturbed p = perturbed(tx, ty);
  Vec u(spec_.dim());
  u << x, y;
  return normalise(component_log_terms(p.log_weight, p.mean, p.llt, p.log_norm, u));
}

void OracleModel::predict_batch(const Mat& x, const Mat& y, std::span<const int> tx, std::span<const int> ty,
                                Mat& eps_x, Mat& eps_y) const {
  const auto n = x.rows();
  if (y.rows() != n || static_cast<Eigen::Index>(tx.size()) != n || static_cast<Eigen::Index>(ty.size()) != n) {
    throw std::invalid_argument("oracle: batch sizes disagree");
  }
  if (x.cols() != spec_.d_x || y.cols() != spec_.d_y) throw std::invalid_argument("oracle: batch dimensions");
  eps_x.resize(n, spec_.d_x);
  eps_y.resize(n, spec_.d_y);
  std::map<std::pair<int, int>, Perturbed> cache;
  Vec u(spec_.dim());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto key = std::make_pair(tx[static_cast<std::size_t>(i)], ty[static_cast<std::size_t>(i)]);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, perturbed(key.first, key.second)).first;
    u << x.row(i).transpose(), y.row(i).transpose();
    const Vec eps = -it->second.s.cwiseProduct(score_with(it->second, u));
    eps_x.row(i) = eps.head(spec_.d_x).transpose();
    eps_y.row(i) = eps.tail(spec_.d_y).transpose();
  }
  if (!eps_x.allFinite() || !eps_y.allFinite()) throw NumericalError("oracle: non-finite prediction");
}

double OracleModel::squared_error(const Vec& x, const Vec& y, int tx, int ty, const Vec& eps_x,
                                  const Vec& eps_y) const {
  const auto p = predict(x, y, tx, ty);
  return (p.eps_x - eps_x).squaredNorm() + (p.eps_y - eps_y).squaredNorm();
}

Vec single_block_noise_prediction(const BlockMixture& law, const Vec& x, double alpha_bar) {
  if (x.size() != law.dim) throw std::invalid_argument("single_block_noise_prediction: dimension");
  const double a = std::sqrt(alpha_bar);
  const double s = std::sqrt(1.0 - alpha_bar);
  std::vector<double> logs;
  std::vector<Vec> grads;
  for (const auto& c : law.components) {
    Mat cov = alpha_bar * c.cov;
    cov.diagonal().array() += 1.0 - alpha_bar;
    Eigen::LLT<Mat> llt(cov);
    const Vec r = x - a * c.mean;
    double logdet = 0.0;
    for (int i = 0; i < law.dim; ++i) logdet += 2.0 * std::log(llt.matrixLLT()(i, i));
    logs.push_back(std::log(c.weight) - 0.5 * logdet - 0.5 * r.dot(llt.solve(r)));
    grads.push_back(llt.solve(r));
  }
  const auto w = normalise(logs);
  Vec out = Vec::Zero(law.dim);
  for (std::size_t k = 0; k < w.size(); ++k) out += w[k] * s * grads[k];
  return out;
}

MonteCarloEstimate monte_carlo_noise_posterior(const DistributionSpec& spec, const NoiseSchedule& sched,
                                               const Vec& x, const Vec& y, int tx, int ty,
                                               std::size_t draws, std::uint64_t seed) {
  check_dims(spec, x, y);
  check_timestep(sched, tx);
  check_timestep(sched, ty);
  const int d = spec.dim();
  Vec u(d);
  u << x, y;

  struct Block {
    int off, dim;
    double a, s;
    bool noise_free;
    Vec prop_mean;
    Mat prop_factor;
    Eigen::LLT<Mat> prop_llt;
  };
  const Vec total_mean = spec.mean();
  const Mat total_cov = spec.covariance();
  std::vector<Block> blocks;
  for (int b = 0; b < 2; ++b) {
    Block blk;
    blk.off = b == 0 ? 0 : spec.d_x;
    blk.dim = b == 0 ? spec.d_x : spec.d_y;
    const double ab = sched.alpha_bar(b == 0 ? tx : ty);
    blk.a = std::sqrt(ab);
    blk.s = std::sqrt(1.0 - ab);
    blk.noise_free = ab >= 0.5;
    blk.prop_mean = total_mean.segment(blk.off, blk.dim);
    const Mat pc = total_cov.block(blk.off, blk.off, blk.dim, blk.dim);
    blk.prop_llt.compute(pc);
    blk.prop_factor = blk.prop_llt.matrixL();
    blocks.push_back(std::move(blk));
  }
  auto log_std_normal = [](const Vec& v) {
    return -0.5 * v.squaredNorm() - 0.5 * static_cast<double>(v.size()) * std::log(2.0 * std::numbers::pi);
  };

  Rng rng = make_rng(seed, 0x3c3c, 0);
  std::vector<double> logw(draws);
  Mat eps_draws(static_cast<Eigen::Index>(draws), d);
  Vec z0(d), eps(d);
  for (std::size_t i = 0; i < draws; ++i) {
    double lw = 0.0;
    for (const auto& blk : blocks) {
      Vec g(blk.dim);
      fill_normal(rng, g.data(), static_cast<std::size_t>(blk.dim));
      const Vec ub = u.segment(blk.off, blk.dim);
      if (blk.noise_free) {
        eps.segment(blk.off, blk.dim) = g;
        z0.segment(blk.off, blk.dim) = (ub - blk.s * g) / blk.a;
      } else {
        const Vec zb = blk.prop_mean + blk.prop_factor * g;
        const Vec eb = (ub - blk.a * zb) / blk.s;
        z0.segment(blk.off, blk.dim) = zb;
        eps.segment(blk.off, blk.dim) = eb;
        // target N(eps_b) over proposal density of z0_b
        const Vec w = blk.prop_llt.matrixL().solve(zb - blk.prop_mean);
        double logdet = 0.0;
        for (int j = 0; j < blk.dim; ++j) logdet += std::log(blk.prop_llt.matrixLLT()(j, j));
        const double log_prop = -0.5 * w.squaredNorm() - logdet -
                                0.5 * static_cast<double>(blk.dim) * std::log(2.0 * std::numbers::pi);
        lw += log_std_normal(eb) - log_prop;
      }
    }
    lw += mixture_log_density(spec.components, z0);
    logw[i] = lw;
    eps_draws.row(static_cast<Eigen::Index>(i)) = eps.transpose();
  }
  const double best = *std::max_element(logw.begin(), logw.end());
  Eigen::ArrayXd w(static_cast<Eigen::Index>(draws));
  for (std::size_t i = 0; i < draws; ++i) w(static_cast<Eigen::Index>(i)) = std::exp(logw[i] - best);
  const double wsum = w.sum();
  MonteCarloEstimate est;
  est.mean = (eps_draws.transpose() * w.matrix()) / wsum;
  const Mat centred = eps_draws.rowwise() - est.mean.transpose();
  est.std_error = ((centred.array().square().colwise() * w.square()).colwise().sum().sqrt() / wsum).transpose();
  est.effective_sample_size = wsum * wsum / w.square().sum();
  return est;
}

std::vector<OracleCheckRow> oracle_check_grid(const DistributionSpec& spec, const NoiseSchedule& sched,
                                              const std::vector<int>& grid, std::size_t draws, std::uint64_t seed) {
  for (int t : grid) check_timestep(sched, t);
  if (draws < 2) throw ConfigError("n", "must be >= 2");
  const OracleModel oracle(spec, sched);
  const RecordSampler sampler(spec);
  std::vector<OracleCheckRow> rows;
  std::uint64_t cell = 0;
  for (int tx : grid) {
    for (int ty : grid) {
      Rng rng = make_rng(seed, 0x0c4e, cell);
      Vec x0(spec.d_x), y0(spec.d_y), ex(spec.d_x), ey(spec.d_y);
      sampler.draw_from(rng, x0.data(), y0.data());
      fill_normal(rng, ex.data(), static_cast<std::size_t>(ex.size()));
      fill_normal(rng, ey.data(), static_cast<std::size_t>(ey.size()));
      const Vec x = perturb(x0, tx, ex, sched), y = perturb(y0, ty, ey, sched);
      const auto p = oracle.predict(x, y, tx, ty);
      Vec exact(spec.dim());
      exact << p.eps_x, p.eps_y;
      const auto mc = monte_carlo_noise_posterior(spec, sched, x, y, tx, ty, draws, seed + cell);
      for (int k = 0; k < spec.dim(); ++k) {
        OracleCheckRow r{tx, ty, k, exact(k), mc.mean(k), mc.std_error(k), 0.0};
        const double diff = r.monte_carlo - r.oracle;
        if (r.std_error > 0.0) {
          r.z = diff / r.std_error;
        } else if (std::abs(diff) > 1e-12) {
          r.z = std::numeric_limits<double>::infinity();
        }
        rows.push_back(r);
      }
      ++cell;
    }
  }
  return rows;
}

}  // namespace unidiff
