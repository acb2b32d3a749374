#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace unidiff {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Rng = std::mt19937_64;

// Heap storage aligned like Eigen's own, so vectorised reductions over maps
// into it split the same way on every run.
template <class S>
using AlignedVector = std::vector<S, Eigen::aligned_allocator<S>>;

/// Invalid user-supplied configuration. `field` names the offending entry so
/// the CLI can report it.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Non-finite values or an ill-posed linear system surfaced during computation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Independent RNG streams keyed by (seed, stream, index). Any record or step
// can be regenerated without replaying the ones before it.
Rng make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

void fill_normal(Rng& rng, double* out, std::size_t n);

template <class Derived>
void fill_normal(Rng& rng, Eigen::MatrixBase<Derived>& m) {
  std::normal_distribution<double> nd(0.0, 1.0);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = nd(rng);
}

// Worker count from UNIDIFF_THREADS (default 1).
int worker_count();

// Runs fn(i) for i in [0, n) across worker_count() threads. fn must only
// write to state owned by index i.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace unidiff
