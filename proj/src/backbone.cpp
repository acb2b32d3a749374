#include "unidiff/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace unidiff {

void BackboneConfig::validate() const {
  if (d_x < 1) throw ConfigError("backbone.d_x", "must be >= 1");
  if (d_y < 1) throw ConfigError("backbone.d_y", "must be >= 1");
  if (token_dim < 1) throw ConfigError("backbone.token_dim", "must be >= 1");
  if (n_heads < 1 || token_dim % n_heads != 0) {
    throw ConfigError("backbone.n_heads", "token_dim must be divisible by n_heads");
  }
  if (depth < 1 || depth % 2 == 0) throw ConfigError("backbone.depth", "must be odd");
  if (mlp_dim < 1) throw ConfigError("backbone.mlp_dim", "must be >= 1");
  if (chunk_size < 1 || d_x % chunk_size != 0 || d_y % chunk_size != 0) {
    throw ConfigError("backbone.chunk_size", "must divide both d_x and d_y");
  }
  if (time_freqs < 1) throw ConfigError("backbone.time_freqs", "must be >= 1");
  if (timesteps < 1) throw ConfigError("backbone.timesteps", "must be >= 1");
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"d_x", d_x},         {"d_y", d_y},       {"token_dim", token_dim}, {"n_heads", n_heads},
          {"depth", depth},     {"mlp_dim", mlp_dim}, {"chunk_size", chunk_size},
          {"time_freqs", time_freqs}, {"timesteps", timesteps}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  auto read = [&](const char* key, int& field) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_number_integer()) throw ConfigError(std::string("backbone.") + key, "must be an integer");
    field = j.at(key).get<int>();
  };
  read("d_x", c.d_x);
  read("d_y", c.d_y);
  read("token_dim", c.token_dim);
  read("n_heads", c.n_heads);
  read("depth", c.depth);
  read("mlp_dim", c.mlp_dim);
  read("chunk_size", c.chunk_size);
  read("time_freqs", c.time_freqs);
  read("timesteps", c.timesteps);
  for (const auto& [k, v] : j.items()) {
    static const char* known[] = {"d_x", "d_y", "token_dim", "n_heads", "depth",
                                  "mlp_dim", "chunk_size", "time_freqs", "timesteps"};
    if (std::find(std::begin(known), std::end(known), k) == std::end(known)) {
      throw ConfigError("backbone." + k, "unknown field");
    }
  }
  c.validate();
  return c;
}

std::size_t ParameterLayout::add(const std::string& name, int rows, int cols) {
  for (const auto& e : entries_) {
    if (e.name == name) throw std::logic_error("duplicate parameter name " + name);
  }
  entries_.push_back({name, rows, cols, total_});
  total_ += entries_.back().size();
  return entries_.size() - 1;
}

const ParamEntry& ParameterLayout::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("no parameter named " + name);
}

template <class S>
bool ParameterStore<S>::all_finite() const {
  for (S v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template struct ParameterStore<float>;
template struct ParameterStore<double>;

template <class S>
void time_features(int t, int T, int freqs, S* out) {
  if (t < 0 || t > T) throw std::out_of_range("time embedding: timestep outside 0..T");
  const double s = 1000.0 * static_cast<double>(t) / static_cast<double>(T);
  for (int k = 0; k < freqs; ++k) {
    const double w = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(freqs));
    out[k] = static_cast<S>(std::sin(w * s));
    out[freqs + k] = static_cast<S>(std::cos(w * s));
  }
}

template void time_features<float>(int, int, int, float*);
template void time_features<double>(int, int, int, double*);

template <class S>
std::vector<S> time_embedding(const ParameterStore<S>& params, const BackboneConfig& cfg, int t) {
  RowMat<S> f(1, 2 * cfg.time_freqs);
  time_features<S>(t, cfg.timesteps, cfg.time_freqs, f.data());
  const auto& ew = params.layout->find("time.w");
  const auto& eb = params.layout->find("time.b");
  const Eigen::Map<const RowMat<S>> w(params.values.data() + ew.offset, ew.rows, ew.cols);
  const Eigen::Map<const RowMat<S>> b(params.values.data() + eb.offset, eb.rows, eb.cols);
  const RowMat<S> e = f * w + b;
  return std::vector<S>(e.data(), e.data() + e.size());
}

template std::vector<float> time_embedding(const ParameterStore<float>&, const BackboneConfig&, int);
template std::vector<double> time_embedding(const ParameterStore<double>&, const BackboneConfig&, int);

namespace {

template <class S>
using CRef = Eigen::Ref<const RowMat<S>>;

template <class S>
void linear_forward(const CRef<S>& x, const CRef<S>& w, const CRef<S>& b, RowMat<S>& y) {
  y.resize(x.rows(), w.cols());
  y.noalias() = x * w;
  y.rowwise() += b.row(0);
}

// Accumulates dW, db; writes dx when requested.
template <class S>
void linear_backward(const CRef<S>& x, const CRef<S>& w, const CRef<S>& dy, Eigen::Map<RowMat<S>> dw,
                     Eigen::Map<RowMat<S>> db, RowMat<S>* dx) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
  if (dx != nullptr) {
    dx->resize(dy.rows(), w.rows());
    dx->noalias() = dy * w.transpose();
  }
}

template <class S>
void layer_norm_forward(const RowMat<S>& x, const CRef<S>& g, const CRef<S>& b, RowMat<S>& y, RowMat<S>& xhat,
                        AlignedVector<S>& rstd) {
  const auto n = x.rows();
  const auto d = x.cols();
  y.resize(n, d);
  xhat.resize(n, d);
  rstd.resize(static_cast<std::size_t>(n));
  const S* gp = g.data();
  const S* bp = b.data();
  const S inv_d = S(1) / static_cast<S>(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S* xr = x.data() + i * d;
    S* hr = xhat.data() + i * d;
    S* yr = y.data() + i * d;
    S mean = 0;
    for (Eigen::Index j = 0; j < d; ++j) mean += xr[j];
    mean *= inv_d;
    S var = 0;
    for (Eigen::Index j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var *= inv_d;
    const S r = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    rstd[static_cast<std::size_t>(i)] = r;
    for (Eigen::Index j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mean) * r;
      yr[j] = hr[j] * gp[j] + bp[j];
    }
  }
}

// dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
template <class S>
void layer_norm_backward(const RowMat<S>& dy, const RowMat<S>& xhat, const AlignedVector<S>& rstd, const CRef<S>& g,
                         Eigen::Map<RowMat<S>> dg, Eigen::Map<RowMat<S>> db, RowMat<S>& dx) {
  const auto n = dy.rows();
  const auto d = dy.cols();
  dx.resize(n, d);
  const S* gp = g.data();
  S* dgp = dg.data();
  S* dbp = db.data();
  const S inv_d = S(1) / static_cast<S>(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S* dyr = dy.data() + i * d;
    const S* hr = xhat.data() + i * d;
    S* dxr = dx.data() + i * d;
    S m1 = 0;
    S m2 = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      dgp[j] += dyr[j] * hr[j];
      dbp[j] += dyr[j];
      const S dh = dyr[j] * gp[j];
      m1 += dh;
      m2 += dh * hr[j];
    }
    m1 *= inv_d;
    m2 *= inv_d;
    const S r = rstd[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < d; ++j) dxr[j] = r * (dyr[j] * gp[j] - m1 - hr[j] * m2);
  }
}

// tanh-form GELU: 0.5 z (1 + tanh(c (z + 0.044715 z^3))), c = sqrt(2 / pi).
template <class S>
void gelu_forward(const RowMat<S>& z, RowMat<S>& g, RowMat<S>& th) {
  const S c = static_cast<S>(std::numbers::sqrt2 * std::numbers::inv_sqrtpi);
  th = (c * (z.array() + S(0.044715) * z.array().cube())).tanh().matrix();
  g = (S(0.5) * z.array() * (S(1) + th.array())).matrix();
}

template <class S>
void gelu_backward(const RowMat<S>& z, const RowMat<S>& th, const RowMat<S>& dg, RowMat<S>& dz) {
  const S c = static_cast<S>(std::numbers::sqrt2 * std::numbers::inv_sqrtpi);
  const auto zz = z.array();
  const auto t = th.array();
  dz = (dg.array() * (S(0.5) * (S(1) + t) +
                      S(0.5) * zz * (S(1) - t.square()) * c * (S(1) + S(3 * 0.044715) * zz.square())))
           .matrix();
}

// qkv: (B*L) x 3D with q | k | v column blocks; heads split each block.
// Per (batch, head) the q, k, v slices are L x dh views into qkv with row stride 3D.
template <class S>
using HeadView = Eigen::Map<const RowMat<S>, 0, Eigen::OuterStride<>>;
template <class S>
using HeadViewMut = Eigen::Map<RowMat<S>, 0, Eigen::OuterStride<>>;

template <class S>
void attention_forward(const RowMat<S>& qkv, int batch, int len, int heads, RowMat<S>& out, AlignedVector<S>& probs) {
  const auto d = qkv.cols() / 3;
  const auto dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  out.resize(qkv.rows(), d);
  probs.resize(static_cast<std::size_t>(batch) * heads * len * len);
  const Eigen::OuterStride<> s3(3 * d);
  const Eigen::OuterStride<> s1(d);
  for (int b = 0; b < batch; ++b) {
    const S* base = qkv.data() + static_cast<Eigen::Index>(b) * len * 3 * d;
    for (int h = 0; h < heads; ++h) {
      const HeadView<S> q(base + h * dh, len, dh, s3);
      const HeadView<S> k(base + d + h * dh, len, dh, s3);
      const HeadView<S> v(base + 2 * d + h * dh, len, dh, s3);
      Eigen::Map<RowMat<S>> p(probs.data() + ((static_cast<std::size_t>(b) * heads + h) * len * len), len, len);
      p.noalias() = scale * q.lazyProduct(k.transpose());
      for (int i = 0; i < len; ++i) {
        auto r = p.row(i);
        r = (r.array() - r.maxCoeff()).exp().matrix();
        r /= r.sum();
      }
      HeadViewMut<S> o(out.data() + static_cast<Eigen::Index>(b) * len * d + h * dh, len, dh, s1);
      o.noalias() = p.lazyProduct(v);
    }
  }
}

template <class S>
void attention_backward(const RowMat<S>& qkv, const AlignedVector<S>& probs, const RowMat<S>& dout, int batch, int len,
                        int heads, RowMat<S>& dqkv) {
  const auto d = qkv.cols() / 3;
  const auto dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  dqkv.resize(qkv.rows(), qkv.cols());
  const Eigen::OuterStride<> s3(3 * d);
  const Eigen::OuterStride<> s1(d);
  RowMat<S> ds(len, len);
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index off3 = static_cast<Eigen::Index>(b) * len * 3 * d;
    const S* base = qkv.data() + off3;
    S* dbase = dqkv.data() + off3;
    for (int h = 0; h < heads; ++h) {
      const HeadView<S> q(base + h * dh, len, dh, s3);
      const HeadView<S> k(base + d + h * dh, len, dh, s3);
      const HeadView<S> v(base + 2 * d + h * dh, len, dh, s3);
      HeadViewMut<S> dq(dbase + h * dh, len, dh, s3);
      HeadViewMut<S> dk(dbase + d + h * dh, len, dh, s3);
      HeadViewMut<S> dv(dbase + 2 * d + h * dh, len, dh, s3);
      const Eigen::Map<const RowMat<S>> p(probs.data() + ((static_cast<std::size_t>(b) * heads + h) * len * len),
                                          len, len);
      const HeadView<S> dO(dout.data() + static_cast<Eigen::Index>(b) * len * d + h * dh, len, dh, s1);
      dv.noalias() = p.transpose().lazyProduct(dO);
      ds.noalias() = dO.lazyProduct(v.transpose());
      // Softmax Jacobian, row by row: p * (dp - <dp, p>).
      for (int i = 0; i < len; ++i) {
        const S dot = ds.row(i).dot(p.row(i));
        ds.row(i) = (p.row(i).array() * (ds.row(i).array() - dot) * scale).matrix();
      }
      dq.noalias() = ds.lazyProduct(k);
      dk.noalias() = ds.transpose().lazyProduct(q);
    }
  }
}

template <class S>
void truncated_normal(Rng& rng, S* out, std::size_t n, double std) {
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    double v;
    do {
      v = nd(rng);
    } while (std::abs(v) > 2.0);
    out[i] = static_cast<S>(v * std);
  }
}

}  // namespace

template <class S>
Backbone<S>::Backbone(BackboneConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  auto layout = std::make_shared<ParameterLayout>();
  const int D = cfg_.token_dim;
  const int c = cfg_.chunk_size;
  time_w_ = layout->add("time.w", 2 * cfg_.time_freqs, D);
  time_b_ = layout->add("time.b", 1, D);
  xin_w_ = layout->add("x_in.w", c, D);
  xin_b_ = layout->add("x_in.b", 1, D);
  yin_w_ = layout->add("y_in.w", c, D);
  yin_b_ = layout->add("y_in.b", 1, D);
  pos_ = layout->add("pos", cfg_.seq_len(), D);
  for (int i = 0; i < cfg_.depth; ++i) {
    const int k = cfg_.long_skips();
    if (i > k) {
      const std::string s = "skip" + std::to_string(i - k - 1);
      skips_.push_back({layout->add(s + ".w", 2 * D, D), layout->add(s + ".b", 1, D),
                        layout->add(s + ".ln.g", 1, D), layout->add(s + ".ln.b", 1, D)});
    }
    const std::string p = "block" + std::to_string(i);
    BlockIdx b{};
    b.qkv_w = layout->add(p + ".qkv.w", D, 3 * D);
    b.qkv_b = layout->add(p + ".qkv.b", 1, 3 * D);
    b.proj_w = layout->add(p + ".proj.w", D, D);
    b.proj_b = layout->add(p + ".proj.b", 1, D);
    b.ln1_g = layout->add(p + ".ln1.g", 1, D);
    b.ln1_b = layout->add(p + ".ln1.b", 1, D);
    b.fc1_w = layout->add(p + ".fc1.w", D, cfg_.mlp_dim);
    b.fc1_b = layout->add(p + ".fc1.b", 1, cfg_.mlp_dim);
    b.fc2_w = layout->add(p + ".fc2.w", cfg_.mlp_dim, D);
    b.fc2_b = layout->add(p + ".fc2.b", 1, D);
    b.ln2_g = layout->add(p + ".ln2.g", 1, D);
    b.ln2_b = layout->add(p + ".ln2.b", 1, D);
    blocks_.push_back(b);
  }
  xout_w_ = layout->add("x_out.w", D, c);
  xout_b_ = layout->add("x_out.b", 1, c);
  yout_w_ = layout->add("y_out.w", D, c);
  yout_b_ = layout->add("y_out.b", 1, c);
  layout_ = std::move(layout);
}

template <class S>
ParameterStore<S> Backbone<S>::zero_params() const {
  return ParameterStore<S>{layout_, AlignedVector<S>(layout_->total(), S(0))};
}

template <class S>
ParameterStore<S> Backbone<S>::init_params(std::uint64_t seed) const {
  auto p = zero_params();
  Rng rng = make_rng(seed, 0x1417, 0);
  for (const auto& e : layout_->entries()) {
    S* dst = p.values.data() + e.offset;
    const auto& n = e.name;
    const bool is_gain = n.ends_with(".g");
    const bool is_head = n.starts_with("x_out.") || n.starts_with("y_out.");
    const bool is_bias = n.ends_with(".b");
    if (is_gain) {
      std::fill(dst, dst + e.size(), S(1));
    } else if (!is_head && !is_bias) {
      truncated_normal(rng, dst, e.size(), 0.02);
    }
  }
  return p;
}

template <class S>
void Backbone<S>::forward(const ParameterStore<S>& p, const RowMat<S>& x, const RowMat<S>& y,
                          std::span<const int> tx, std::span<const int> ty, ForwardTape<S>& tape,
                          RowMat<S>& eps_x, RowMat<S>& eps_y) const {
  const auto B = static_cast<int>(x.rows());
  if (x.cols() != cfg_.d_x || y.cols() != cfg_.d_y || y.rows() != B) {
    throw std::invalid_argument("backbone forward: input dimensions do not match the config");
  }
  if (static_cast<int>(tx.size()) != B || static_cast<int>(ty.size()) != B) {
    throw std::invalid_argument("backbone forward: one timestep pair per row required");
  }
  if (p.size() != layout_->total()) throw std::invalid_argument("backbone forward: parameter count mismatch");
  ++n_forward_;
  const int D = cfg_.token_dim;
  const int L = cfg_.seq_len();
  const int nx = cfg_.x_tokens();
  const int ny = cfg_.y_tokens();
  const int c = cfg_.chunk_size;
  const int F = cfg_.time_freqs;
  const Eigen::Index N = static_cast<Eigen::Index>(B) * L;

  tape.batch = B;
  tape.time_feats.resize(2 * B, 2 * F);
  for (int b = 0; b < B; ++b) {
    time_features<S>(tx[static_cast<std::size_t>(b)], cfg_.timesteps, F, tape.time_feats.row(2 * b).data());
    time_features<S>(ty[static_cast<std::size_t>(b)], cfg_.timesteps, F, tape.time_feats.row(2 * b + 1).data());
  }
  tape.x_chunks = Eigen::Map<const RowMat<S>>(x.data(), static_cast<Eigen::Index>(B) * nx, c);
  tape.y_chunks = Eigen::Map<const RowMat<S>>(y.data(), static_cast<Eigen::Index>(B) * ny, c);

  RowMat<S> te, ex, ey;
  linear_forward<S>(tape.time_feats, p.mat(time_w_), p.mat(time_b_), te);
  linear_forward<S>(tape.x_chunks, p.mat(xin_w_), p.mat(xin_b_), ex);
  linear_forward<S>(tape.y_chunks, p.mat(yin_w_), p.mat(yin_b_), ey);

  RowMat<S> h(N, D);
  const auto pos = p.mat(pos_);
  for (int b = 0; b < B; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * L;
    h.row(base) = te.row(2 * b) + pos.row(0);
    h.row(base + 1) = te.row(2 * b + 1) + pos.row(1);
    for (int j = 0; j < nx; ++j) h.row(base + 2 + j) = ex.row(b * nx + j) + pos.row(2 + j);
    for (int j = 0; j < ny; ++j) h.row(base + 2 + nx + j) = ey.row(b * ny + j) + pos.row(2 + nx + j);
  }

  tape.blocks.resize(static_cast<std::size_t>(cfg_.depth));
  tape.skips.resize(skips_.size());
  const int k = cfg_.long_skips();
  RowMat<S> tmp, attn_proj;
  for (int i = 0; i < cfg_.depth; ++i) {
    auto& bt = tape.blocks[static_cast<std::size_t>(i)];
    const auto& bi = blocks_[static_cast<std::size_t>(i)];
    if (i > k) {
      // Up block i pairs with down block depth-1-i, whose output is the
      // recorded input of the block after it.
      auto& st = tape.skips[static_cast<std::size_t>(i - k - 1)];
      const auto& si = skips_[static_cast<std::size_t>(i - k - 1)];
      const RowMat<S>& skip = tape.blocks[static_cast<std::size_t>(cfg_.depth - i)].in;
      st.cat.resize(N, 2 * D);
      st.cat << h, skip;
      linear_forward<S>(st.cat, p.mat(si.w), p.mat(si.b), tmp);
      layer_norm_forward<S>(tmp, p.mat(si.ln_g), p.mat(si.ln_b), h, st.xhat, st.rstd);
    }
    bt.in = h;
    linear_forward<S>(bt.in, p.mat(bi.qkv_w), p.mat(bi.qkv_b), bt.qkv);
    attention_forward<S>(bt.qkv, B, L, cfg_.n_heads, bt.attn, bt.probs);
    linear_forward<S>(bt.attn, p.mat(bi.proj_w), p.mat(bi.proj_b), attn_proj);
    tmp = bt.in + attn_proj;
    layer_norm_forward<S>(tmp, p.mat(bi.ln1_g), p.mat(bi.ln1_b), bt.h1, bt.xhat1, bt.rstd1);
    linear_forward<S>(bt.h1, p.mat(bi.fc1_w), p.mat(bi.fc1_b), bt.z);
    gelu_forward<S>(bt.z, bt.g, bt.tanh);
    linear_forward<S>(bt.g, p.mat(bi.fc2_w), p.mat(bi.fc2_b), tmp);
    tmp += bt.h1;
    layer_norm_forward<S>(tmp, p.mat(bi.ln2_g), p.mat(bi.ln2_b), h, bt.xhat2, bt.rstd2);
  }
  tape.out_h = h;

  RowMat<S> gx(static_cast<Eigen::Index>(B) * nx, D), gy(static_cast<Eigen::Index>(B) * ny, D);
  for (int b = 0; b < B; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * L;
    for (int j = 0; j < nx; ++j) gx.row(b * nx + j) = h.row(base + 2 + j);
    for (int j = 0; j < ny; ++j) gy.row(b * ny + j) = h.row(base + 2 + nx + j);
  }
  RowMat<S> ox, oy;
  linear_forward<S>(gx, p.mat(xout_w_), p.mat(xout_b_), ox);
  linear_forward<S>(gy, p.mat(yout_w_), p.mat(yout_b_), oy);
  eps_x = Eigen::Map<const RowMat<S>>(ox.data(), B, cfg_.d_x);
  eps_y = Eigen::Map<const RowMat<S>>(oy.data(), B, cfg_.d_y);
  if (!eps_x.allFinite() || !eps_y.allFinite()) throw NumericalError("backbone forward: non-finite activations");
  tape.recorded = true;
}

template <class S>
void Backbone<S>::backward(const ParameterStore<S>& p, const ForwardTape<S>& tape, const RowMat<S>& d_eps_x,
                           const RowMat<S>& d_eps_y, ParameterStore<S>& grad) const {
  if (!tape.recorded) throw std::logic_error("backbone backward: no forward pass recorded");
  ++n_backward_;
  const int B = tape.batch;
  if (d_eps_x.rows() != B || d_eps_x.cols() != cfg_.d_x || d_eps_y.rows() != B || d_eps_y.cols() != cfg_.d_y) {
    throw std::invalid_argument("backbone backward: upstream gradient has the wrong shape");
  }
  if (grad.layout != layout_ || grad.size() != layout_->total()) grad = zero_params();
  grad.set_zero();
  const int D = cfg_.token_dim;
  const int L = cfg_.seq_len();
  const int nx = cfg_.x_tokens();
  const int ny = cfg_.y_tokens();
  const int c = cfg_.chunk_size;
  const Eigen::Index N = static_cast<Eigen::Index>(B) * L;

  // Output head.
  RowMat<S> gx(static_cast<Eigen::Index>(B) * nx, D), gy(static_cast<Eigen::Index>(B) * ny, D);
  for (int b = 0; b < B; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * L;
    for (int j = 0; j < nx; ++j) gx.row(b * nx + j) = tape.out_h.row(base + 2 + j);
    for (int j = 0; j < ny; ++j) gy.row(b * ny + j) = tape.out_h.row(base + 2 + nx + j);
  }
  const Eigen::Map<const RowMat<S>> dox(d_eps_x.data(), static_cast<Eigen::Index>(B) * nx, c);
  const Eigen::Map<const RowMat<S>> doy(d_eps_y.data(), static_cast<Eigen::Index>(B) * ny, c);
  RowMat<S> dgx, dgy;
  linear_backward<S>(gx, p.mat(xout_w_), dox, grad.mat(xout_w_), grad.mat(xout_b_), &dgx);
  linear_backward<S>(gy, p.mat(yout_w_), doy, grad.mat(yout_w_), grad.mat(yout_b_), &dgy);
  RowMat<S> dh = RowMat<S>::Zero(N, D);
  for (int b = 0; b < B; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * L;
    for (int j = 0; j < nx; ++j) dh.row(base + 2 + j) = dgx.row(b * nx + j);
    for (int j = 0; j < ny; ++j) dh.row(base + 2 + nx + j) = dgy.row(b * ny + j);
  }

  const int k = cfg_.long_skips();
  // Gradient arriving at each down block's output through its long skip.
  std::vector<RowMat<S>> dskip(static_cast<std::size_t>(k));
  RowMat<S> dr, dtmp, dz, dattn, dqkv;
  for (int i = cfg_.depth - 1; i >= 0; --i) {
    const auto& bt = tape.blocks[static_cast<std::size_t>(i)];
    const auto& bi = blocks_[static_cast<std::size_t>(i)];
    if (i < k) dh += dskip[static_cast<std::size_t>(i)];

    layer_norm_backward<S>(dh, bt.xhat2, bt.rstd2, p.mat(bi.ln2_g), grad.mat(bi.ln2_g), grad.mat(bi.ln2_b), dr);
    linear_backward<S>(bt.g, p.mat(bi.fc2_w), dr, grad.mat(bi.fc2_w), grad.mat(bi.fc2_b), &dtmp);
    gelu_backward<S>(bt.z, bt.tanh, dtmp, dz);
    linear_backward<S>(bt.h1, p.mat(bi.fc1_w), dz, grad.mat(bi.fc1_w), grad.mat(bi.fc1_b), &dtmp);
    dtmp += dr;
    layer_norm_backward<S>(dtmp, bt.xhat1, bt.rstd1, p.mat(bi.ln1_g), grad.mat(bi.ln1_g), grad.mat(bi.ln1_b), dr);
    linear_backward<S>(bt.attn, p.mat(bi.proj_w), dr, grad.mat(bi.proj_w), grad.mat(bi.proj_b), &dattn);
    attention_backward<S>(bt.qkv, bt.probs, dattn, B, L, cfg_.n_heads, dqkv);
    linear_backward<S>(bt.in, p.mat(bi.qkv_w), dqkv, grad.mat(bi.qkv_w), grad.mat(bi.qkv_b), &dh);
    dh += dr;

    if (i > k) {
      const auto& st = tape.skips[static_cast<std::size_t>(i - k - 1)];
      const auto& si = skips_[static_cast<std::size_t>(i - k - 1)];
      layer_norm_backward<S>(dh, st.xhat, st.rstd, p.mat(si.ln_g), grad.mat(si.ln_g), grad.mat(si.ln_b), dr);
      linear_backward<S>(st.cat, p.mat(si.w), dr, grad.mat(si.w), grad.mat(si.b), &dtmp);
      dh = dtmp.leftCols(D);
      dskip[static_cast<std::size_t>(cfg_.depth - 1 - i)] = dtmp.rightCols(D);
    }
  }

  // Token assembly.
  auto dpos = grad.mat(pos_);
  RowMat<S> dte(2 * B, D), dex(static_cast<Eigen::Index>(B) * nx, D), dey(static_cast<Eigen::Index>(B) * ny, D);
  for (int b = 0; b < B; ++b) {
    const Eigen::Index base = static_cast<Eigen::Index>(b) * L;
    dte.row(2 * b) = dh.row(base);
    dte.row(2 * b + 1) = dh.row(base + 1);
    for (int j = 0; j < nx; ++j) dex.row(b * nx + j) = dh.row(base + 2 + j);
    for (int j = 0; j < ny; ++j) dey.row(b * ny + j) = dh.row(base + 2 + nx + j);
    for (int s = 0; s < L; ++s) dpos.row(s) += dh.row(base + s);
  }
  linear_backward<S>(tape.time_feats, p.mat(time_w_), dte, grad.mat(time_w_), grad.mat(time_b_), nullptr);
  linear_backward<S>(tape.x_chunks, p.mat(xin_w_), dex, grad.mat(xin_w_), grad.mat(xin_b_), nullptr);
  linear_backward<S>(tape.y_chunks, p.mat(yin_w_), dey, grad.mat(yin_w_), grad.mat(yin_b_), nullptr);
}

void predict_rows(const Backbone<float>& net, const ParameterStore<float>& p, const Mat& x, const Mat& y,
                  std::span<const int> tx, std::span<const int> ty, Mat& eps_x, Mat& eps_y, int chunk) {
  const auto n = x.rows();
  if (y.rows() != n || static_cast<Eigen::Index>(tx.size()) != n || static_cast<Eigen::Index>(ty.size()) != n) {
    throw std::invalid_argument("predict_rows: row counts disagree");
  }
  eps_x.resize(n, x.cols());
  eps_y.resize(n, y.cols());
  const auto n_chunks = static_cast<std::size_t>((n + chunk - 1) / chunk);
  parallel_for(n_chunks, [&](std::size_t c) {
    const Eigen::Index lo = static_cast<Eigen::Index>(c) * chunk;
    const Eigen::Index m = std::min<Eigen::Index>(chunk, n - lo);
    const RowMat<float> xb = x.middleRows(lo, m).cast<float>();
    const RowMat<float> yb = y.middleRows(lo, m).cast<float>();
    // Reused per thread: the tape buffers are large and otherwise hit the
    // allocator on every call.
    thread_local ForwardTape<float> tape;
    RowMat<float> ex, ey;
    net.forward(p, xb, yb, tx.subspan(static_cast<std::size_t>(lo), static_cast<std::size_t>(m)),
                ty.subspan(static_cast<std::size_t>(lo), static_cast<std::size_t>(m)), tape, ex, ey);
    eps_x.middleRows(lo, m) = ex.cast<double>();
    eps_y.middleRows(lo, m) = ey.cast<double>();
  });
}

template class Backbone<float>;
template class Backbone<double>;

}  // namespace unidiff
