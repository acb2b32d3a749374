#include "unidiff/synthetic_data.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include <Eigen/Cholesky>

namespace unidiff {

namespace {

constexpr std::uint64_t kDataStream = 0xda7a;

Eigen::LLT<Mat> checked_cholesky(const Mat& cov, const std::string& field) {
  if (cov.rows() != cov.cols()) throw ConfigError(field, "covariance must be square");
  if (!cov.allFinite()) throw ConfigError(field, "covariance has non-finite entries");
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-10 * (1.0 + cov.cwiseAbs().maxCoeff())) {
    throw ConfigError(field, "covariance is not symmetric");
  }
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success) throw ConfigError(field, "covariance is not positive definite");
  return llt;
}

Vec json_vec(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array()) throw ConfigError(field, "expected an array");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

Mat json_mat(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array() || j.empty()) throw ConfigError(field, "expected a non-empty array of rows");
  const auto n = static_cast<Eigen::Index>(j.size());
  Mat m(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != n) {
      throw ConfigError(field, "covariance must be square");
    }
    for (Eigen::Index c = 0; c < n; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

nlohmann::json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

nlohmann::json mat_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

double log_gaussian(const Vec& z, const Vec& mean, const Eigen::LLT<Mat>& llt) {
  const Vec diff = z - mean;
  const Vec w = llt.matrixL().solve(diff);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < llt.matrixL().rows(); ++i) logdet += std::log(llt.matrixLLT()(i, i));
  return -0.5 * w.squaredNorm() - logdet - 0.5 * static_cast<double>(z.size()) * std::log(2.0 * std::numbers::pi);
}

Vec mixture_mean(const std::vector<GaussianComponent>& comps) {
  Vec m = Vec::Zero(comps.front().mean.size());
  for (const auto& c : comps) m += c.weight * c.mean;
  return m;
}

Mat mixture_cov(const std::vector<GaussianComponent>& comps) {
  const Vec m = mixture_mean(comps);
  Mat s = Mat::Zero(m.size(), m.size());
  for (const auto& c : comps) {
    const Vec d = c.mean - m;
    s += c.weight * (c.cov + d * d.transpose());
  }
  return s;
}

std::size_t pick_component(const std::vector<GaussianComponent>& comps, Rng& rng) {
  if (comps.size() == 1) return 0;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = u(rng);
  double acc = 0.0;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    acc += comps[k].weight;
    if (r < acc) return k;
  }
  return comps.size() - 1;
}

}  // namespace

double mixture_log_density(const std::vector<GaussianComponent>& comps, const Vec& z) {
  std::vector<double> terms;
  terms.reserve(comps.size());
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& c : comps) {
    Eigen::LLT<Mat> llt(c.cov);
    const double t = std::log(c.weight) + log_gaussian(z, c.mean, llt);
    terms.push_back(t);
    best = std::max(best, t);
  }
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - best);
  return best + std::log(acc);
}

std::string to_string(DistributionKind kind) {
  return kind == DistributionKind::CorrelatedGaussian ? "correlated-gaussian" : "gaussian-mixture-pair";
}

void DistributionSpec::validate() const {
  if (d_x < 1) throw ConfigError("d_x", "must be >= 1");
  if (d_y < 1) throw ConfigError("d_y", "must be >= 1");
  if (components.empty()) throw ConfigError("components", "need at least one component");
  if (kind == DistributionKind::CorrelatedGaussian && components.size() != 1) {
    throw ConfigError("components", "correlated-gaussian has exactly one component");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < components.size(); ++k) {
    const auto& c = components[k];
    const std::string field = "components[" + std::to_string(k) + "]";
    if (!(c.weight > 0.0)) throw ConfigError(field + ".weight", "must be positive");
    if (c.mean.size() != dim()) throw ConfigError(field + ".mean", "length must equal d_x + d_y");
    if (!c.mean.allFinite()) throw ConfigError(field + ".mean", "non-finite entries");
    if (c.cov.rows() != dim()) throw ConfigError(field + ".cov", "size must equal d_x + d_y");
    checked_cholesky(c.cov, field + ".cov");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("weights", "mixture weights must sum to 1");
}

Vec DistributionSpec::mean() const { return mixture_mean(components); }

Mat DistributionSpec::covariance() const { return mixture_cov(components); }

nlohmann::json DistributionSpec::to_json() const {
  nlohmann::json j;
  j["kind"] = to_string(kind);
  j["d_x"] = d_x;
  j["d_y"] = d_y;
  if (kind == DistributionKind::CorrelatedGaussian) {
    j["mean"] = vec_json(components.front().mean);
    j["cov"] = mat_json(components.front().cov);
  } else {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : components) {
      comps.push_back({{"weight", c.weight}, {"mean", vec_json(c.mean)}, {"cov", mat_json(c.cov)}});
    }
    j["components"] = comps;
  }
  return j;
}

DistributionSpec DistributionSpec::from_json(const nlohmann::json& j) {
  DistributionSpec s;
  if (!j.contains("kind")) throw ConfigError("kind", "missing");
  const auto kind = j.at("kind").get<std::string>();
  for (const char* key : {"d_x", "d_y"}) {
    if (!j.contains(key) || !j.at(key).is_number_integer()) throw ConfigError(key, "missing or not an integer");
  }
  s.d_x = j.at("d_x").get<int>();
  s.d_y = j.at("d_y").get<int>();
  if (kind == "correlated-gaussian") {
    s.kind = DistributionKind::CorrelatedGaussian;
    if (!j.contains("mean")) throw ConfigError("mean", "missing");
    if (!j.contains("cov")) throw ConfigError("cov", "missing");
    s.components.push_back({1.0, json_vec(j.at("mean"), "mean"), json_mat(j.at("cov"), "cov")});
  } else if (kind == "gaussian-mixture-pair") {
    s.kind = DistributionKind::GaussianMixturePair;
    if (!j.contains("components")) throw ConfigError("components", "missing");
    std::size_t k = 0;
    for (const auto& c : j.at("components")) {
      const std::string field = "components[" + std::to_string(k++) + "]";
      if (!c.contains("weight")) throw ConfigError(field + ".weight", "missing");
      s.components.push_back({c.at("weight").get<double>(), json_vec(c.at("mean"), field + ".mean"),
                              json_mat(c.at("cov"), field + ".cov")});
    }
  } else {
    throw ConfigError("kind", "unknown distribution kind '" + kind + "'");
  }
  s.validate();
  return s;
}

DistributionSpec correlated_gaussian(int d_x, int d_y, double rho) {
  if (!(std::abs(rho) < 1.0)) throw ConfigError("rho", "correlation must lie in (-1, 1)");
  Mat cov = Mat::Identity(d_x + d_y, d_x + d_y);
  for (int i = 0; i < std::min(d_x, d_y); ++i) {
    cov(i, d_x + i) = rho;
    cov(d_x + i, i) = rho;
  }
  return correlated_gaussian(Vec::Zero(d_x + d_y), cov, d_x);
}

DistributionSpec correlated_gaussian(Vec mean, Mat cov, int d_x) {
  DistributionSpec s;
  s.kind = DistributionKind::CorrelatedGaussian;
  s.d_x = d_x;
  s.d_y = static_cast<int>(mean.size()) - d_x;
  s.components.push_back({1.0, std::move(mean), std::move(cov)});
  s.validate();
  return s;
}

DistributionSpec gaussian_mixture_pair(int d_x, int d_y, std::vector<GaussianComponent> components) {
  DistributionSpec s;
  s.kind = DistributionKind::GaussianMixturePair;
  s.d_x = d_x;
  s.d_y = d_y;
  s.components = std::move(components);
  s.validate();
  return s;
}

DistributionSpec benchmark_spec() { return correlated_gaussian(2, 2, 0.8); }

Vec BlockMixture::mean() const { return mixture_mean(components); }

Mat BlockMixture::covariance() const { return mixture_cov(components); }

Vec BlockMixture::sample(Rng& rng) const {
  const auto& c = components[pick_component(components, rng)];
  Vec z(dim);
  fill_normal(rng, z.data(), static_cast<std::size_t>(dim));
  return c.mean + Eigen::LLT<Mat>(c.cov).matrixL() * z;
}

BlockMixture marginal(const DistributionSpec& spec, Modality m) {
  const int off = m == Modality::X ? 0 : spec.d_x;
  const int d = m == Modality::X ? spec.d_x : spec.d_y;
  BlockMixture out{d, {}};
  for (const auto& c : spec.components) {
    out.components.push_back({c.weight, c.mean.segment(off, d), c.cov.block(off, off, d, d)});
  }
  return out;
}

BlockMixture conditional(const DistributionSpec& spec, Modality target, const Vec& given) {
  const int t_off = target == Modality::X ? 0 : spec.d_x;
  const int t_dim = target == Modality::X ? spec.d_x : spec.d_y;
  const int g_off = target == Modality::X ? spec.d_x : 0;
  const int g_dim = target == Modality::X ? spec.d_y : spec.d_x;
  if (given.size() != g_dim) throw std::invalid_argument("conditional: conditioning vector has wrong dimension");

  BlockMixture out{t_dim, {}};
  std::vector<double> logw;
  for (const auto& c : spec.components) {
    const Mat s_gg = c.cov.block(g_off, g_off, g_dim, g_dim);
    const Mat s_tg = c.cov.block(t_off, g_off, t_dim, g_dim);
    const Mat s_tt = c.cov.block(t_off, t_off, t_dim, t_dim);
    Eigen::LLT<Mat> llt(s_gg);
    const Vec resid = given - c.mean.segment(g_off, g_dim);
    const Mat gain = llt.solve(s_tg.transpose()).transpose();
    Mat cov = s_tt - gain * s_tg.transpose();
    cov = 0.5 * (cov + cov.transpose());
    out.components.push_back({0.0, c.mean.segment(t_off, t_dim) + gain * resid, cov});
    logw.push_back(std::log(c.weight) + log_gaussian(given, c.mean.segment(g_off, g_dim), llt));
  }
  const double best = *std::max_element(logw.begin(), logw.end());
  double total = 0.0;
  for (std::size_t k = 0; k < logw.size(); ++k) {
    out.components[k].weight = std::exp(logw[k] - best);
    total += out.components[k].weight;
  }
  for (auto& c : out.components) c.weight /= total;
  return out;
}

ModalPair Dataset::pair(std::size_t i) const {
  const auto r = static_cast<Eigen::Index>(i);
  return {x.row(r).transpose(), y.row(r).transpose()};
}

Mat Dataset::joined() const {
  Mat out(x.rows(), x.cols() + y.cols());
  out << x, y;
  return out;
}

RecordSampler::RecordSampler(const DistributionSpec& spec) : spec_(&spec) {
  spec.validate();
  for (const auto& c : spec.components) factors_.push_back(Eigen::LLT<Mat>(c.cov).matrixL());
}

void RecordSampler::draw_into(std::uint64_t seed, std::uint64_t i, double* x_out, double* y_out) const {
  Rng rng = make_rng(seed, kDataStream, i);
  draw_from(rng, x_out, y_out);
}

void RecordSampler::draw_from(Rng& rng, double* x_out, double* y_out) const {
  const std::size_t k = pick_component(spec_->components, rng);
  Vec z(spec_->dim());
  fill_normal(rng, z.data(), static_cast<std::size_t>(z.size()));
  const Vec v = spec_->components[k].mean + factors_[k] * z;
  for (int j = 0; j < spec_->d_x; ++j) x_out[j] = v(j);
  for (int j = 0; j < spec_->d_y; ++j) y_out[j] = v(spec_->d_x + j);
}

ModalPair RecordSampler::operator()(std::uint64_t seed, std::uint64_t i) const {
  ModalPair p{Vec(spec_->d_x), Vec(spec_->d_y)};
  draw_into(seed, i, p.x0.data(), p.y0.data());
  return p;
}

Dataset sample_dataset(const DistributionSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("n", "must be >= 1");
  const RecordSampler sampler(spec);
  // Row-major staging so each record writes a contiguous slice.
  RowMat<double> xs(static_cast<Eigen::Index>(n), spec.d_x);
  RowMat<double> ys(static_cast<Eigen::Index>(n), spec.d_y);
  parallel_for(n, [&](std::size_t i) {
    const auto r = static_cast<Eigen::Index>(i);
    sampler.draw_into(seed, i, xs.row(r).data(), ys.row(r).data());
  });
  return Dataset{xs, ys};
}

namespace {

std::pair<Vec, Vec> column_moments(const Mat& m, const char* field) {
  const Vec mean = m.colwise().mean().transpose();
  Vec sd(m.cols());
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    sd(c) = std::sqrt((m.col(c).array() - mean(c)).square().mean());
    if (!(sd(c) > 0.0)) throw ConfigError(field, "zero variance in coordinate " + std::to_string(c));
  }
  return {mean, sd};
}

}  // namespace

std::pair<Dataset, Standardization> standardize(const Dataset& data) {
  if (data.size() == 0) throw ConfigError("dataset", "empty dataset");
  Standardization tr;
  std::tie(tr.mean_x, tr.std_x) = column_moments(data.x, "x");
  std::tie(tr.mean_y, tr.std_y) = column_moments(data.y, "y");
  Dataset out;
  out.x = (data.x.rowwise() - tr.mean_x.transpose()).array().rowwise() / tr.std_x.transpose().array();
  out.y = (data.y.rowwise() - tr.mean_y.transpose()).array().rowwise() / tr.std_y.transpose().array();
  return {out, tr};
}

Dataset unstandardize(const Dataset& data, const Standardization& tr) {
  Dataset out;
  out.x = (data.x.array().rowwise() * tr.std_x.transpose().array()).matrix().rowwise() + tr.mean_x.transpose();
  out.y = (data.y.array().rowwise() * tr.std_y.transpose().array()).matrix().rowwise() + tr.mean_y.transpose();
  return out;
}

}  // namespace unidiff
