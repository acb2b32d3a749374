#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "unidiff/common.hpp"

namespace unidiff {

/// Desk-scale U-ViT: tokens are [time(tx), time(ty), x-chunks, y-chunks];
/// post-LN transformer blocks with (depth - 1) / 2 long skips.
struct BackboneConfig {
  int d_x = 2;
  int d_y = 2;
  int token_dim = 64;
  int n_heads = 4;
  int depth = 5;
  int mlp_dim = 64;
  int chunk_size = 1;
  int time_freqs = 16;
  int timesteps = 50;  // T of the schedule the network is trained on

  void validate() const;
  int x_tokens() const noexcept { return d_x / chunk_size; }
  int y_tokens() const noexcept { return d_y / chunk_size; }
  int seq_len() const noexcept { return 2 + x_tokens() + y_tokens(); }
  int long_skips() const noexcept { return (depth - 1) / 2; }

  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
};

struct ParamEntry {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const noexcept { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

class ParameterLayout {
 public:
  std::size_t add(const std::string& name, int rows, int cols);
  const ParamEntry& at(std::size_t i) const { return entries_.at(i); }
  const ParamEntry& find(const std::string& name) const;
  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  std::size_t total() const noexcept { return total_; }

 private:
  std::vector<ParamEntry> entries_;
  std::size_t total_ = 0;
};

/// Named flat parameter arrays sharing one contiguous buffer.
template <class S>
struct ParameterStore {
  std::shared_ptr<const ParameterLayout> layout;
  AlignedVector<S> values;

  std::size_t size() const noexcept { return values.size(); }
  Eigen::Map<RowMat<S>> mat(std::size_t i) {
    const auto& e = layout->at(i);
    return {values.data() + e.offset, e.rows, e.cols};
  }
  Eigen::Map<const RowMat<S>> mat(std::size_t i) const {
    const auto& e = layout->at(i);
    return {values.data() + e.offset, e.rows, e.cols};
  }
  Eigen::Map<RowMat<S>> mat(const std::string& name) {
    const auto& e = layout->find(name);
    return {values.data() + e.offset, e.rows, e.cols};
  }
  bool all_finite() const;
  void set_zero() { std::fill(values.begin(), values.end(), S(0)); }

  template <class T>
  ParameterStore<T> cast() const {
    ParameterStore<T> out{layout, AlignedVector<T>(values.size())};
    for (std::size_t i = 0; i < values.size(); ++i) out.values[i] = static_cast<T>(values[i]);
    return out;
  }
};

/// Raw sinusoidal features of t: sin(w_k s), cos(w_k s) with s = 1000 t / T
/// and w_k = 10000^(-k / F). Length 2F.
template <class S>
void time_features(int t, int T, int freqs, S* out);

/// Raw features followed by the learned time projection.
template <class S>
std::vector<S> time_embedding(const ParameterStore<S>& params, const BackboneConfig& cfg, int t);

/// Everything the backward pass needs from one forward call.
template <class S>
struct ForwardTape {
  struct Block {
    RowMat<S> in, qkv, attn, xhat1, h1, z, g, tanh, xhat2;
    AlignedVector<S> probs, rstd1, rstd2;
  };
  struct Skip {
    RowMat<S> cat, xhat;
    AlignedVector<S> rstd;
  };
  int batch = 0;
  RowMat<S> time_feats, x_chunks, y_chunks, out_h;
  std::vector<Block> blocks;
  std::vector<Skip> skips;
  bool recorded = false;
};

/// Instrumented counts of forward and backward invocations.
struct CallCounts {
  std::uint64_t forward = 0;
  std::uint64_t backward = 0;
};

template <class S>
class Backbone {
 public:
  explicit Backbone(BackboneConfig cfg);
  Backbone(const Backbone& other) : Backbone(other.cfg_) {}
  Backbone& operator=(const Backbone&) = delete;

  const BackboneConfig& config() const noexcept { return cfg_; }
  const std::shared_ptr<const ParameterLayout>& layout() const noexcept { return layout_; }
  std::size_t parameter_count() const noexcept { return layout_->total(); }

  /// Truncated-normal(0.02) weights, zero biases, unit LN gains, and a zero
  /// output head so the initial prediction is exactly 0.
  ParameterStore<S> init_params(std::uint64_t seed) const;
  ParameterStore<S> zero_params() const;

  /// x: B x d_x, y: B x d_y. Writes eps_x (B x d_x), eps_y (B x d_y).
  void forward(const ParameterStore<S>& p, const RowMat<S>& x, const RowMat<S>& y, std::span<const int> tx,
               std::span<const int> ty, ForwardTape<S>& tape, RowMat<S>& eps_x, RowMat<S>& eps_y) const;

  /// Overwrites `grad` with d(loss)/d(params) given upstream gradients on the
  /// outputs of the recorded forward call.
  void backward(const ParameterStore<S>& p, const ForwardTape<S>& tape, const RowMat<S>& d_eps_x,
                const RowMat<S>& d_eps_y, ParameterStore<S>& grad) const;

  CallCounts calls() const noexcept { return {n_forward_.load(), n_backward_.load()}; }
  void reset_calls() const noexcept {
    n_forward_ = 0;
    n_backward_ = 0;
  }

  // Parameter indices, resolved once at construction.
  struct BlockIdx {
    std::size_t qkv_w, qkv_b, proj_w, proj_b, ln1_g, ln1_b, fc1_w, fc1_b, fc2_w, fc2_b, ln2_g, ln2_b;
  };
  struct SkipIdx {
    std::size_t w, b, ln_g, ln_b;
  };

 private:
  BackboneConfig cfg_;
  std::shared_ptr<const ParameterLayout> layout_;
  std::size_t time_w_, time_b_, xin_w_, xin_b_, yin_w_, yin_b_, pos_, xout_w_, xout_b_, yout_w_, yout_b_;
  std::vector<BlockIdx> blocks_;
  std::vector<SkipIdx> skips_;
  mutable std::atomic<std::uint64_t> n_forward_{0};
  mutable std::atomic<std::uint64_t> n_backward_{0};
};

extern template class Backbone<float>;
extern template class Backbone<double>;

/// Inference on double rows through a float network, in independent chunks
/// of at most `chunk` rows spread over the worker pool.
void predict_rows(const Backbone<float>& net, const ParameterStore<float>& p, const Mat& x, const Mat& y,
                  std::span<const int> tx, std::span<const int> ty, Mat& eps_x, Mat& eps_y, int chunk = 512);

/// LayerNorm epsilon added to the per-token variance.
inline constexpr double kLayerNormEps = 1e-8;

}  // namespace unidiff
