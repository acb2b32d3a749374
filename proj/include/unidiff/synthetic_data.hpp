#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "unidiff/common.hpp"

namespace unidiff {

enum class Modality { X, Y };

struct GaussianComponent {
  double weight = 1.0;
  Vec mean;
  Mat cov;
};

/// Log of the mixture density at `z`, via log-sum-exp over components.
double mixture_log_density(const std::vector<GaussianComponent>& comps, const Vec& z);

enum class DistributionKind { CorrelatedGaussian, GaussianMixturePair };

std::string to_string(DistributionKind kind);

/// Ground-truth joint law of (x0, y0). Components live on the stacked
/// (d_x + d_y)-dimensional space, x block first.
struct DistributionSpec {
  DistributionKind kind = DistributionKind::CorrelatedGaussian;
  int d_x = 0;
  int d_y = 0;
  std::vector<GaussianComponent> components;

  int dim() const noexcept { return d_x + d_y; }
  /// Throws ConfigError for non-PD covariances, bad weights or shapes.
  void validate() const;
  Vec mean() const;
  Mat covariance() const;

  nlohmann::json to_json() const;
  static DistributionSpec from_json(const nlohmann::json& j);
};

/// Unit marginal variances with correlation `rho` between x_i and y_i for
/// i < min(d_x, d_y); zero mean.
DistributionSpec correlated_gaussian(int d_x, int d_y, double rho);
DistributionSpec correlated_gaussian(Vec mean, Mat cov, int d_x);
DistributionSpec gaussian_mixture_pair(int d_x, int d_y, std::vector<GaussianComponent> components);

/// d_x = d_y = 2, rho = 0.8.
DistributionSpec benchmark_spec();

/// Gaussian mixture over one modality, e.g. a marginal or a conditional.
struct BlockMixture {
  int dim = 0;
  std::vector<GaussianComponent> components;

  Vec mean() const;
  Mat covariance() const;
  Vec sample(Rng& rng) const;
};

BlockMixture marginal(const DistributionSpec& spec, Modality m);

/// Law of the `target` modality given the other modality equals `given`.
BlockMixture conditional(const DistributionSpec& spec, Modality target, const Vec& given);

struct ModalPair {
  Vec x0;
  Vec y0;
};

/// n paired records; row i of x and y form one ModalPair.
struct Dataset {
  Mat x;
  Mat y;

  std::size_t size() const noexcept { return static_cast<std::size_t>(x.rows()); }
  int d_x() const noexcept { return static_cast<int>(x.cols()); }
  int d_y() const noexcept { return static_cast<int>(y.cols()); }
  ModalPair pair(std::size_t i) const;
  /// Rows of [x | y].
  Mat joined() const;
};

/// Draws records of a spec; record i comes from its own RNG stream keyed by
/// (seed, i). Cholesky factors are computed once.
class RecordSampler {
 public:
  explicit RecordSampler(const DistributionSpec& spec);
  ModalPair operator()(std::uint64_t seed, std::uint64_t i) const;
  void draw_into(std::uint64_t seed, std::uint64_t i, double* x_out, double* y_out) const;
  /// Next record from a caller-owned stream.
  void draw_from(Rng& rng, double* x_out, double* y_out) const;

 private:
  const DistributionSpec* spec_;
  std::vector<Mat> factors_;
};

/// n i.i.d. draws. Record i depends only on (seed, i), so serial and
/// threaded generation agree bit for bit.
Dataset sample_dataset(const DistributionSpec& spec, std::size_t n, std::uint64_t seed);

struct Standardization {
  Vec mean_x, std_x, mean_y, std_y;
};

std::pair<Dataset, Standardization> standardize(const Dataset& data);
Dataset unstandardize(const Dataset& data, const Standardization& tr);

}  // namespace unidiff
