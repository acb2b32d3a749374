#include "unidiff/eval.hpp"

#include <algorithm>
#include <numeric>

#include <Eigen/Eigenvalues>

namespace unidiff {

nlohmann::json MomentReport::to_json() const {
  nlohmann::json j;
  j["n"] = n;
  j["mean_dev"] = std::vector<double>(mean_dev.data(), mean_dev.data() + mean_dev.size());
  auto& rows = j["cov_dev"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < cov_dev.rows(); ++i) {
    const Vec r = cov_dev.row(i).transpose();
    rows.push_back(std::vector<double>(r.data(), r.data() + r.size()));
  }
  j["max_mean_dev"] = max_mean_dev;
  j["max_cov_dev"] = max_cov_dev;
  return j;
}

MomentReport moment_report(const Mat& samples, const Vec& mean, const Mat& cov) {
  if (samples.rows() < 100) throw ConfigError("samples", "moment_report needs at least 100 samples");
  if (samples.cols() != mean.size() || cov.rows() != mean.size() || cov.cols() != mean.size()) {
    throw ConfigError("samples", "dimension does not match the target");
  }
  const double n = static_cast<double>(samples.rows());
  const Vec mu = samples.colwise().mean().transpose();
  const Mat c = samples.rowwise() - mu.transpose();
  const Mat sc = (c.transpose() * c) / (n - 1.0);
  MomentReport r;
  r.n = static_cast<std::size_t>(samples.rows());
  r.mean_dev = mu - mean;
  r.cov_dev = sc - cov;
  r.max_mean_dev = r.mean_dev.cwiseAbs().maxCoeff();
  r.max_cov_dev = r.cov_dev.cwiseAbs().maxCoeff();
  return r;
}

std::pair<Vec, Mat> task_moments(const DistributionSpec& spec, Task task, const std::optional<Vec>& condition) {
  switch (task) {
    case Task::Joint: return {spec.mean(), spec.covariance()};
    case Task::MarginalX: {
      const auto m = marginal(spec, Modality::X);
      return {m.mean(), m.covariance()};
    }
    case Task::MarginalY: {
      const auto m = marginal(spec, Modality::Y);
      return {m.mean(), m.covariance()};
    }
    case Task::XGivenY:
    case Task::YGivenX: {
      if (!condition) throw ConfigError("condition", "conditional moments need the conditioning value");
      const auto c = conditional(spec, task == Task::XGivenY ? Modality::X : Modality::Y, *condition);
      return {c.mean(), c.covariance()};
    }
  }
  throw std::logic_error("task_moments: unreachable");
}

namespace {

Mat subsample(const Mat& m, std::size_t cap, Rng& rng) {
  const auto n = static_cast<std::size_t>(m.rows());
  if (cap == 0 || n <= cap) return m;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates; the first `cap` entries are a uniform subset.
  for (std::size_t i = 0; i < cap; ++i) {
    std::uniform_int_distribution<std::size_t> u(i, n - 1);
    std::swap(idx[i], idx[u(rng)]);
  }
  Mat out(static_cast<Eigen::Index>(cap), m.cols());
  for (std::size_t i = 0; i < cap; ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

// Energy statistic from a pooled distance matrix and 0/1 side weights:
// with v = D w, S_AA = w.v, S_AB = (1 - w).v, S_BB = sum(D) - S_AA - 2 S_AB.
double energy_from_labels(const Mat& d, double total, const Vec& w, double na, double nb) {
  const Vec v = d * w;
  const double saa = w.dot(v);
  const double sab = v.sum() - saa;
  const double sbb = total - saa - 2.0 * sab;
  return 2.0 * sab / (na * nb) - saa / (na * na) - sbb / (nb * nb);
}

}  // namespace

EnergyTest energy_distance(const Mat& a_in, const Mat& b_in, int permutations, std::uint64_t seed,
                           std::size_t max_per_side) {
  if (a_in.rows() == 0 || b_in.rows() == 0) throw ConfigError("samples", "energy_distance needs non-empty inputs");
  if (a_in.cols() != b_in.cols()) throw ConfigError("samples", "inputs differ in dimension");
  if (permutations < 0) throw ConfigError("permutations", "must be >= 0");
  Rng rng = make_rng(seed, 0xe7e7, 0);
  const Mat a = subsample(a_in, max_per_side, rng);
  const Mat b = subsample(b_in, max_per_side, rng);
  const auto na = a.rows();
  const auto nb = b.rows();
  const auto n = na + nb;
  Mat pooled(n, a.cols());
  pooled << a, b;

  Mat d(n, n);
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t j) {
    const auto c = static_cast<Eigen::Index>(j);
    for (Eigen::Index i = 0; i < n; ++i) d(i, c) = (pooled.row(i) - pooled.row(c)).norm();
  });
  const double total = d.sum();

  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Vec w = Vec::Zero(n);
  w.head(na).setOnes();
  EnergyTest out;
  out.n_a = static_cast<std::size_t>(na);
  out.n_b = static_cast<std::size_t>(nb);
  out.permutations = permutations;
  out.statistic = energy_from_labels(d, total, w, static_cast<double>(na), static_cast<double>(nb));
  int exceed = 0;
  for (int p = 0; p < permutations; ++p) {
    std::shuffle(order.begin(), order.end(), rng);
    w.setZero();
    for (Eigen::Index i = 0; i < na; ++i) w(static_cast<Eigen::Index>(order[static_cast<std::size_t>(i)])) = 1.0;
    const double stat = energy_from_labels(d, total, w, static_cast<double>(na), static_cast<double>(nb));
    if (stat >= out.statistic) ++exceed;
  }
  out.p_value = (1.0 + exceed) / (1.0 + permutations);
  return out;
}

Mat psd_sqrt(const Mat& a) {
  const Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (a + a.transpose()));
  const Vec ev = es.eigenvalues().cwiseMax(1e-12).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double gaussian_w2(const Vec& mean_a, const Mat& cov_a, const Vec& mean_b, const Mat& cov_b) {
  const auto d = mean_a.size();
  if (mean_b.size() != d || cov_a.rows() != d || cov_a.cols() != d || cov_b.rows() != d || cov_b.cols() != d) {
    throw ConfigError("cov", "dimension mismatch");
  }
  for (const Mat* c : {&cov_a, &cov_b}) {
    if (Eigen::LLT<Mat>(*c).info() != Eigen::Success) throw ConfigError("cov", "covariance must be positive definite");
  }
  const Mat rb = psd_sqrt(cov_b);
  const Mat cross = psd_sqrt(rb * cov_a * rb);
  const double w2 = (mean_a - mean_b).squaredNorm() + (cov_a + cov_b - 2.0 * cross).trace();
  return std::max(w2, 0.0);
}

MomentReport conditional_check(const Mat& samples, const DistributionSpec& spec, Modality target, const Vec& given) {
  const auto c = conditional(spec, target, given);
  return moment_report(samples, c.mean(), c.covariance());
}

}  // namespace unidiff
