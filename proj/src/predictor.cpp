// SPDX-License-Identifier: Apache-2.0
#include "diffuse/predictor.hpp"

#include <cmath>
#include <numbers>
#include <thread>

namespace diffuse {

// ---------------------------------------------------------------------------
// Config

int PredictorConfig::dilation(int layer) const {
  const int per_block = n_layers / n_blocks;
  return 1 << (layer % per_block);
}

std::vector<int> PredictorConfig::dilations() const {
  std::vector<int> d(static_cast<std::size_t>(n_layers));
  for (int l = 0; l < n_layers; ++l) d[l] = dilation(l);
  return d;
}

int PredictorConfig::receptive_radius() const {
  int r = 0;
  for (int l = 0; l < n_layers; ++l) r += dilation(l) * (kernel_size - 1) / 2;
  return r;
}

void PredictorConfig::validate() const {
  const auto fail = [](const std::string& m) { throw std::invalid_argument("predictor config: " + m); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (n_blocks < 1 || n_layers % n_blocks != 0) fail("n_layers must be divisible by n_blocks");
  if (n_layers / n_blocks > 30) fail("too many layers per dilation cycle");
  if (residual_channels < 1) fail("residual_channels must be >= 1");
  if (kernel_size < 1 || kernel_size % 2 == 0) fail("kernel_size must be odd");
  if (conditioner_dim < 1) fail("conditioner_dim must be >= 1");
  if (conditioner_channels < 1) fail("conditioner_channels must be >= 1");
  if (step_encoding_dim < 4 || step_encoding_dim % 2 != 0) fail("step_encoding_dim must be even and >= 4");
  if (step_hidden_dim < 1) fail("step_hidden_dim must be >= 1");
}

std::map<std::string, std::string> PredictorConfig::to_map() const {
  return {{"model.n_layers", std::to_string(n_layers)},
          {"model.n_blocks", std::to_string(n_blocks)},
          {"model.residual_channels", std::to_string(residual_channels)},
          {"model.kernel_size", std::to_string(kernel_size)},
          {"model.conditioner_dim", std::to_string(conditioner_dim)},
          {"model.conditioner_channels", std::to_string(conditioner_channels)},
          {"model.step_encoding_dim", std::to_string(step_encoding_dim)},
          {"model.step_hidden_dim", std::to_string(step_hidden_dim)}};
}

PredictorConfig PredictorConfig::from_map(const std::map<std::string, std::string>& kv) {
  const auto get = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("model config missing '" + key + "'");
    return std::stoi(it->second);
  };
  PredictorConfig c;
  c.n_layers = get("model.n_layers");
  c.n_blocks = get("model.n_blocks");
  c.residual_channels = get("model.residual_channels");
  c.kernel_size = get("model.kernel_size");
  c.conditioner_dim = get("model.conditioner_dim");
  c.conditioner_channels = get("model.conditioner_channels");
  c.step_encoding_dim = get("model.step_encoding_dim");
  c.step_hidden_dim = get("model.step_hidden_dim");
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Params

template <typename Scalar>
PredictorParams<Scalar> PredictorParams<Scalar>::zeros_like() const {
  PredictorParams z = *this;
  z.for_each([](const std::string&, MatrixT<Scalar>& m, bool) { m.setZero(); });
  return z;
}

template <typename Scalar>
std::size_t PredictorParams<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const MatrixT<Scalar>& m, bool) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <typename Scalar>
bool PredictorParams<Scalar>::all_finite() const {
  bool ok = true;
  for_each([&](const std::string&, const MatrixT<Scalar>& m, bool) { ok = ok && m.allFinite(); });
  return ok;
}

namespace {

template <typename Scalar>
MatrixT<Scalar> kaiming(Eigen::Index rows, Eigen::Index cols, double fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / fan_in);
  MatrixT<Scalar> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(stddev * rng.normal());
  return m;
}

template <typename Scalar>
MatrixT<Scalar> uniform_fan_in(Eigen::Index rows, Eigen::Index cols, double fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  MatrixT<Scalar> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(bound * (2.0 * rng.uniform() - 1.0));
  return m;
}

template <typename Scalar>
MatrixT<Scalar> interpolation_kernel(Eigen::Index channels) {
  MatrixT<Scalar> m(channels, kUpsampleKernel);
  const double centre = (kUpsampleKernel - 1) / 2.0;
  for (int j = 0; j < kUpsampleKernel; ++j)
    m.col(j).setConstant(static_cast<Scalar>(1.0 - std::abs(j - centre) / kUpsampleStride));
  return m;
}

template <typename Scalar>
void init_conditioner_encoder(PredictorParams<Scalar>& p, Rng& rng) {
  const auto& c = p.config;
  const int C2 = 2 * c.residual_channels;
  const int E = c.conditioner_channels;
  p.cond_in_w = kaiming<Scalar>(E, c.conditioner_dim, c.conditioner_dim, rng);
  p.cond_in_b = MatrixT<Scalar>::Zero(E, 1);
  p.up1_w = interpolation_kernel<Scalar>(E);
  p.up1_b = MatrixT<Scalar>::Zero(E, 1);
  p.up2_w = interpolation_kernel<Scalar>(E);
  p.up2_b = MatrixT<Scalar>::Zero(E, 1);
  for (auto& L : p.layers) {
    L.cond_w = kaiming<Scalar>(C2, E, E, rng);
    L.cond_b = MatrixT<Scalar>::Zero(C2, 1);
  }
}

}  // namespace

template <typename Scalar>
PredictorParams<Scalar> init_params(const PredictorConfig& config, Rng& rng) {
  config.validate();
  const int C = config.residual_channels;
  const int H = config.step_hidden_dim;
  const int D = config.step_encoding_dim;
  const int k = config.kernel_size;
  PredictorParams<Scalar> p;
  p.config = config;
  p.input_w = kaiming<Scalar>(C, 1, 1.0, rng);
  p.input_b = MatrixT<Scalar>::Zero(C, 1);
  p.emb1_w = uniform_fan_in<Scalar>(H, D, D, rng);
  p.emb1_b = MatrixT<Scalar>::Zero(H, 1);
  p.emb2_w = uniform_fan_in<Scalar>(H, H, H, rng);
  p.emb2_b = MatrixT<Scalar>::Zero(H, 1);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& L : p.layers) {
    L.step_w = uniform_fan_in<Scalar>(C, H, H, rng);
    L.step_b = MatrixT<Scalar>::Zero(C, 1);
    L.dil_w = kaiming<Scalar>(2 * C, k * C, k * C, rng);
    L.dil_b = MatrixT<Scalar>::Zero(2 * C, 1);
    L.out_w = kaiming<Scalar>(2 * C, C, C, rng);
    L.out_b = MatrixT<Scalar>::Zero(2 * C, 1);
  }
  p.skip_w = kaiming<Scalar>(C, C, C, rng);
  p.skip_b = MatrixT<Scalar>::Zero(C, 1);
  p.head_w = MatrixT<Scalar>::Zero(1, C);
  p.head_b = MatrixT<Scalar>::Zero(1, 1);
  init_conditioner_encoder(p, rng);
  return p;
}

template <typename Scalar>
PredictorParams<Scalar> reset_conditioner_encoder(const PredictorParams<Scalar>& params, int new_dim, Rng& rng) {
  PredictorParams<Scalar> out = params;
  out.config.conditioner_dim = new_dim;
  out.config.validate();
  init_conditioner_encoder(out, rng);
  return out;
}

template <typename To, typename From>
PredictorParams<To> cast_params(const PredictorParams<From>& p) {
  PredictorParams<To> out;
  out.config = p.config;
  out.layers.resize(p.layers.size());
  std::vector<const MatrixT<From>*> src;
  p.for_each([&](const std::string&, const MatrixT<From>& m, bool) { src.push_back(&m); });
  std::size_t i = 0;
  out.for_each([&](const std::string&, MatrixT<To>& m, bool) { m = src[i++]->template cast<To>(); });
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename Scalar>
VectorT<Scalar> step_encoding(double position, int dim) {
  const int half = dim / 2;
  VectorT<Scalar> enc(dim);
  for (int j = 0; j < half; ++j) {
    const double freq = std::pow(10.0, 4.0 * j / (half - 1));
    enc[j] = static_cast<Scalar>(std::sin(position * freq));
    enc[half + j] = static_cast<Scalar>(std::cos(position * freq));
  }
  return enc;
}

namespace {

constexpr double kLeakySlope = 0.4;

template <typename Scalar>
using Mat = MatrixT<Scalar>;

template <typename Derived>
auto sigmoid(const Eigen::ArrayBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return (S(1) + (-x).exp()).inverse();
}

template <typename Scalar>
Mat<Scalar> leaky(const Mat<Scalar>& x) {
  return x.array().max(Scalar(kLeakySlope) * x.array()).matrix();
}

template <typename Scalar>
void leaky_backward(Mat<Scalar>& grad, const Mat<Scalar>& pre) {
  grad.array() *= (pre.array() > Scalar(0)).template cast<Scalar>() * Scalar(1 - kLeakySlope) + Scalar(kLeakySlope);
}

// Depthwise transposed convolution, stride 16, kernel 32, padding 8:
// output length is 16 x input length.
template <typename Scalar>
Mat<Scalar> upsample(const Mat<Scalar>& u, const Mat<Scalar>& w, const Mat<Scalar>& b) {
  const Eigen::Index F = u.cols();
  const Eigen::Index out_len = F * kUpsampleStride;
  Mat<Scalar> v = b.col(0).replicate(1, out_len);
  constexpr int pad = (kUpsampleKernel - kUpsampleStride) / 2;
  for (Eigen::Index i = 0; i < F; ++i) {
    for (int j = 0; j < kUpsampleKernel; ++j) {
      const Eigen::Index p = i * kUpsampleStride + j - pad;
      if (p < 0 || p >= out_len) continue;
      v.col(p).array() += w.col(j).array() * u.col(i).array();
    }
  }
  return v;
}

template <typename Scalar>
void upsample_backward(const Mat<Scalar>& u, const Mat<Scalar>& w, const Mat<Scalar>& dv, Mat<Scalar>& du,
                       Mat<Scalar>& dw, Mat<Scalar>& db) {
  const Eigen::Index F = u.cols();
  const Eigen::Index out_len = dv.cols();
  constexpr int pad = (kUpsampleKernel - kUpsampleStride) / 2;
  du = Mat<Scalar>::Zero(u.rows(), F);
  for (Eigen::Index i = 0; i < F; ++i) {
    for (int j = 0; j < kUpsampleKernel; ++j) {
      const Eigen::Index p = i * kUpsampleStride + j - pad;
      if (p < 0 || p >= out_len) continue;
      du.col(i).array() += w.col(j).array() * dv.col(p).array();
      dw.col(j).array() += u.col(i).array() * dv.col(p).array();
    }
  }
  db.col(0) += dv.rowwise().sum();
}

template <typename Scalar>
struct ConditionerCache {
  Mat<Scalar> frames_t;  // dim x F
  Mat<Scalar> u0;
  Mat<Scalar> pre1, u1;
  Mat<Scalar> pre2;
  Eigen::Index length = 0;
};

template <typename Scalar>
void check_conditioner(const PredictorConfig& config, const Conditioner& cond, Eigen::Index length) {
  if (length <= 0) throw ShapeMismatch("predictor: empty waveform");
  if (cond.dim() != config.conditioner_dim)
    throw ShapeMismatch("predictor: conditioner has " + std::to_string(cond.dim()) + " features, model expects " +
                        std::to_string(config.conditioner_dim));
  if (cond.n_frames() != frames_for_length(length))
    throw ShapeMismatch("predictor: conditioner has " + std::to_string(cond.n_frames()) + " frames, waveform of " +
                        std::to_string(length) + " samples needs " + std::to_string(frames_for_length(length)));
}

template <typename Scalar>
Mat<Scalar> encode_forward(const PredictorParams<Scalar>& p, const Conditioner& cond, Eigen::Index length,
                           ConditionerCache<Scalar>* cache) {
  check_conditioner<Scalar>(p.config, cond, length);
  Mat<Scalar> frames_t = cond.frames.transpose().template cast<Scalar>();
  Mat<Scalar> u0 = p.cond_in_w * frames_t;
  u0.colwise() += p.cond_in_b.col(0);
  Mat<Scalar> pre1 = upsample(u0, p.up1_w, p.up1_b);
  Mat<Scalar> u1 = leaky(pre1);
  Mat<Scalar> pre2 = upsample(u1, p.up2_w, p.up2_b);
  Mat<Scalar> encoded = leaky(Mat<Scalar>(pre2.leftCols(length)));
  if (cache) {
    cache->frames_t = std::move(frames_t);
    cache->u0 = std::move(u0);
    cache->pre1 = std::move(pre1);
    cache->u1 = std::move(u1);
    cache->pre2 = std::move(pre2);
    cache->length = length;
  }
  return encoded;
}

template <typename Scalar>
void encode_backward(const PredictorParams<Scalar>& p, const ConditionerCache<Scalar>& cache,
                     const Mat<Scalar>& d_encoded, PredictorParams<Scalar>& g) {
  Mat<Scalar> d_pre2 = Mat<Scalar>::Zero(cache.pre2.rows(), cache.pre2.cols());
  d_pre2.leftCols(cache.length) = d_encoded;
  leaky_backward(d_pre2, cache.pre2);
  Mat<Scalar> d_u1;
  upsample_backward(cache.u1, p.up2_w, d_pre2, d_u1, g.up2_w, g.up2_b);
  leaky_backward(d_u1, cache.pre1);
  Mat<Scalar> d_u0;
  upsample_backward(cache.u0, p.up1_w, d_u1, d_u0, g.up1_w, g.up1_b);
  g.cond_in_w.noalias() += d_u0 * cache.frames_t.transpose();
  g.cond_in_b.col(0) += d_u0.rowwise().sum();
}

template <typename Scalar>
struct LayerCache {
  Mat<Scalar> y;       // input to the dilated conv
  Mat<Scalar> gate;    // sigmoid half
  Mat<Scalar> filter;  // tanh half
  Mat<Scalar> gated;
};

template <typename Scalar>
struct TrunkCache {
  VectorT<Scalar> x;
  Mat<Scalar> h0;
  VectorT<Scalar> enc, pre1, e1, pre2, e2;
  std::vector<LayerCache<Scalar>> layers;
  Mat<Scalar> skip;  // scaled skip sum
  Mat<Scalar> q;     // after skip projection + relu
};

template <typename Derived>
auto silu_grad(const Eigen::ArrayBase<Derived>& x) {
  using S = typename Derived::Scalar;
  const auto s = sigmoid(x).eval();
  return (s * (S(1) + x * (S(1) - s))).eval();
}

template <typename Scalar>
void dilated_conv(const Mat<Scalar>& w, const Mat<Scalar>& y, int dilation, int kernel, Mat<Scalar>& z) {
  const Eigen::Index C = y.rows();
  const Eigen::Index L = y.cols();
  const int half = (kernel - 1) / 2;
  for (int j = 0; j < kernel; ++j) {
    const Eigen::Index o = static_cast<Eigen::Index>(j - half) * dilation;
    const Eigen::Index len = L - std::abs(o);
    if (len <= 0) continue;
    z.middleCols(std::max<Eigen::Index>(0, -o), len).noalias() +=
        w.middleCols(j * C, C) * y.middleCols(std::max<Eigen::Index>(0, o), len);
  }
}

template <typename Scalar>
void dilated_conv_backward(const Mat<Scalar>& w, const Mat<Scalar>& y, int dilation, int kernel,
                           const Mat<Scalar>& dz, Mat<Scalar>& dy, Mat<Scalar>& dw) {
  const Eigen::Index C = y.rows();
  const Eigen::Index L = y.cols();
  const int half = (kernel - 1) / 2;
  for (int j = 0; j < kernel; ++j) {
    const Eigen::Index o = static_cast<Eigen::Index>(j - half) * dilation;
    const Eigen::Index len = L - std::abs(o);
    if (len <= 0) continue;
    const auto dz_blk = dz.middleCols(std::max<Eigen::Index>(0, -o), len);
    const auto y_blk = y.middleCols(std::max<Eigen::Index>(0, o), len);
    dy.middleCols(std::max<Eigen::Index>(0, o), len).noalias() += w.middleCols(j * C, C).transpose() * dz_blk;
    dw.middleCols(j * C, C).noalias() += dz_blk * y_blk.transpose();
  }
}

template <typename Scalar>
VectorT<Scalar> trunk_forward(const PredictorParams<Scalar>& p, const VectorT<Scalar>& x, double position,
                              const Mat<Scalar>& cond, TrunkCache<Scalar>* cache) {
  const auto& cfg = p.config;
  const Eigen::Index C = cfg.residual_channels;
  const Eigen::Index L = x.size();
  if (cond.cols() != L || cond.rows() != cfg.conditioner_channels)
    throw ShapeMismatch("predictor: encoded conditioner does not match waveform length");

  VectorT<Scalar> enc = step_encoding<Scalar>(position, cfg.step_encoding_dim);
  VectorT<Scalar> pre1 = p.emb1_w * enc + p.emb1_b.col(0);
  VectorT<Scalar> e1 = (pre1.array() * sigmoid(pre1.array())).matrix();
  VectorT<Scalar> pre2 = p.emb2_w * e1 + p.emb2_b.col(0);
  VectorT<Scalar> e2 = (pre2.array() * sigmoid(pre2.array())).matrix();

  Mat<Scalar> h = (p.input_w * x.transpose()).colwise() + p.input_b.col(0);
  h = h.cwiseMax(Scalar(0));
  if (cache) {
    cache->x = x;
    cache->h0 = h;
    cache->layers.resize(p.layers.size());
  }

  const Scalar inv_sqrt2 = Scalar(1.0 / std::numbers::sqrt2);
  Mat<Scalar> skip = Mat<Scalar>::Zero(C, L);
  Mat<Scalar> y(C, L), z(2 * C, L), gated(C, L), o(2 * C, L);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& P = p.layers[l];
    const VectorT<Scalar> d = P.step_w * e2 + P.step_b.col(0);
    y = h.colwise() + d;
    z.noalias() = P.cond_w * cond;
    z.colwise() += P.dil_b.col(0) + P.cond_b.col(0);
    dilated_conv(P.dil_w, y, cfg.dilation(static_cast<int>(l)), cfg.kernel_size, z);
    Mat<Scalar> gate = sigmoid(z.topRows(C).array()).matrix();
    Mat<Scalar> filter = z.bottomRows(C).array().tanh().matrix();
    gated = gate.cwiseProduct(filter);
    o.noalias() = P.out_w * gated;
    o.colwise() += P.out_b.col(0);
    h = (h + o.topRows(C)) * inv_sqrt2;
    skip += o.bottomRows(C);
    if (cache) {
      auto& lc = cache->layers[l];
      lc.y = y;
      lc.gate = std::move(gate);
      lc.filter = std::move(filter);
      lc.gated = gated;
    }
  }
  skip *= Scalar(1.0 / std::sqrt(static_cast<double>(p.layers.size())));
  Mat<Scalar> q = (p.skip_w * skip).colwise() + p.skip_b.col(0);
  q = q.cwiseMax(Scalar(0));
  VectorT<Scalar> out = (p.head_w * q).transpose();
  out.array() += p.head_b(0, 0);
  if (cache) {
    cache->enc = std::move(enc);
    cache->pre1 = std::move(pre1);
    cache->e1 = std::move(e1);
    cache->pre2 = std::move(pre2);
    cache->e2 = std::move(e2);
    cache->skip = std::move(skip);
    cache->q = std::move(q);
  }
  return out;
}

// Accumulates parameter gradients into g and returns d(loss)/d(cond).
template <typename Scalar>
Mat<Scalar> trunk_backward(const PredictorParams<Scalar>& p, const TrunkCache<Scalar>& cache, const Mat<Scalar>& cond,
                           const VectorT<Scalar>& d_out, PredictorParams<Scalar>& g) {
  const auto& cfg = p.config;
  const Eigen::Index C = cfg.residual_channels;
  const Eigen::Index L = cache.x.size();
  const Scalar inv_sqrt2 = Scalar(1.0 / std::numbers::sqrt2);
  const Scalar skip_scale = Scalar(1.0 / std::sqrt(static_cast<double>(p.layers.size())));

  g.head_w.noalias() += d_out.transpose() * cache.q.transpose();
  g.head_b(0, 0) += d_out.sum();
  Mat<Scalar> dq = p.head_w.transpose() * d_out.transpose();
  dq.array() *= (cache.q.array() > Scalar(0)).template cast<Scalar>();
  g.skip_w.noalias() += dq * cache.skip.transpose();
  g.skip_b.col(0) += dq.rowwise().sum();
  const Mat<Scalar> d_skip = (p.skip_w.transpose() * dq) * skip_scale;

  Mat<Scalar> d_cond = Mat<Scalar>::Zero(cond.rows(), L);
  VectorT<Scalar> d_e2 = VectorT<Scalar>::Zero(cfg.step_hidden_dim);
  Mat<Scalar> dh = Mat<Scalar>::Zero(C, L);  // gradient w.r.t. h leaving the current layer
  Mat<Scalar> d_o(2 * C, L), d_gated(C, L), dz(2 * C, L), dy(C, L);
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& P = p.layers[li];
    auto& G = g.layers[li];
    const auto& lc = cache.layers[li];
    d_o.topRows(C) = dh * inv_sqrt2;
    d_o.bottomRows(C) = d_skip;
    G.out_w.noalias() += d_o * lc.gated.transpose();
    G.out_b.col(0) += d_o.rowwise().sum();
    d_gated.noalias() = P.out_w.transpose() * d_o;
    dz.topRows(C) = (d_gated.array() * lc.filter.array() * lc.gate.array() * (Scalar(1) - lc.gate.array())).matrix();
    dz.bottomRows(C) =
        (d_gated.array() * lc.gate.array() * (Scalar(1) - lc.filter.array().square())).matrix();
    const VectorT<Scalar> dz_sum = dz.rowwise().sum();
    G.dil_b.col(0) += dz_sum;
    G.cond_b.col(0) += dz_sum;
    G.cond_w.noalias() += dz * cond.transpose();
    d_cond.noalias() += P.cond_w.transpose() * dz;
    dy.setZero();
    dilated_conv_backward(P.dil_w, lc.y, cfg.dilation(static_cast<int>(li)), cfg.kernel_size, dz, dy, G.dil_w);
    const VectorT<Scalar> dd = dy.rowwise().sum();
    G.step_w.noalias() += dd * cache.e2.transpose();
    G.step_b.col(0) += dd;
    d_e2.noalias() += P.step_w.transpose() * dd;
    dh = dh * inv_sqrt2 + dy;
  }

  dh.array() *= (cache.h0.array() > Scalar(0)).template cast<Scalar>();
  g.input_w.noalias() += dh * cache.x;
  g.input_b.col(0) += dh.rowwise().sum();

  const VectorT<Scalar> d_pre2 = (d_e2.array() * silu_grad(cache.pre2.array())).matrix();
  g.emb2_w.noalias() += d_pre2 * cache.e1.transpose();
  g.emb2_b.col(0) += d_pre2;
  const VectorT<Scalar> d_e1 = p.emb2_w.transpose() * d_pre2;
  const VectorT<Scalar> d_pre1 = (d_e1.array() * silu_grad(cache.pre1.array())).matrix();
  g.emb1_w.noalias() += d_pre1 * cache.enc.transpose();
  g.emb1_b.col(0) += d_pre1;
  return d_cond;
}

template <typename Scalar>
void add_into(PredictorParams<Scalar>& acc, const PredictorParams<Scalar>& g) {
  std::vector<const MatrixT<Scalar>*> src;
  g.for_each([&](const std::string&, const MatrixT<Scalar>& m, bool) { src.push_back(&m); });
  std::size_t i = 0;
  acc.for_each([&](const std::string&, MatrixT<Scalar>& m, bool) { m += *src[i++]; });
}

// Loss of one example; adds its unscaled gradient (d/d params of
// scale * ||eps - eps_hat||^2) into g.
template <typename Scalar>
double example_loss_and_grad(const PredictorParams<Scalar>& p, const BatchItem<Scalar>& item, Scalar scale,
                             PredictorParams<Scalar>& g) {
  if (!item.cond) throw std::invalid_argument("loss_and_grad: batch item without conditioner");
  if (item.epsilon.size() != item.x_t.size()) throw ShapeMismatch("loss_and_grad: epsilon/x_t length mismatch");
  ConditionerCache<Scalar> ccache;
  const Mat<Scalar> cond = encode_forward(p, *item.cond, item.x_t.size(), &ccache);
  TrunkCache<Scalar> tcache;
  const VectorT<Scalar> pred = trunk_forward(p, item.x_t, item.step_position, cond, &tcache);
  const VectorT<Scalar> diff = item.epsilon - pred;
  const double loss = diff.template cast<double>().squaredNorm();
  const VectorT<Scalar> d_out = (Scalar(-2) * scale) * diff;
  const Mat<Scalar> d_cond = trunk_backward(p, tcache, cond, d_out, g);
  encode_backward(p, ccache, d_cond, g);
  return loss;
}

}  // namespace

template <typename Scalar>
MatrixT<Scalar> encode_conditioner(const PredictorParams<Scalar>& params, const Conditioner& cond,
                                   Eigen::Index length) {
  return encode_forward<Scalar>(params, cond, length, nullptr);
}

template <typename Scalar>
VectorT<Scalar> predict_noise_encoded(const PredictorParams<Scalar>& params, const VectorT<Scalar>& x_t,
                                      double step_position, const MatrixT<Scalar>& encoded) {
  return trunk_forward<Scalar>(params, x_t, step_position, encoded, nullptr);
}

template <typename Scalar>
VectorT<Scalar> predict_noise(const PredictorParams<Scalar>& params, const VectorT<Scalar>& x_t,
                              double step_position, const Conditioner& cond) {
  return predict_noise_encoded(params, x_t, step_position, encode_conditioner(params, cond, x_t.size()));
}

template <typename Scalar>
double loss_and_grad(const PredictorParams<Scalar>& params, std::span<const BatchItem<Scalar>> batch,
                     PredictorParams<Scalar>& grads, int jobs) {
  if (batch.empty()) throw std::invalid_argument("loss_and_grad: empty batch");
  const Scalar scale = Scalar(1.0 / static_cast<double>(batch.size()));
  grads = params.zeros_like();
  std::vector<double> losses(batch.size());
  if (jobs <= 1 || batch.size() == 1) {
    PredictorParams<Scalar> scratch = grads;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (i) scratch.for_each([](const std::string&, MatrixT<Scalar>& m, bool) { m.setZero(); });
      losses[i] = example_loss_and_grad(params, batch[i], scale, scratch);
      add_into(grads, scratch);
    }
  } else {
    std::vector<PredictorParams<Scalar>> per_example(batch.size(), grads);
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(jobs));
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        try {
          for (std::size_t i = static_cast<std::size_t>(w); i < batch.size(); i += static_cast<std::size_t>(jobs))
            losses[i] = example_loss_and_grad(params, batch[i], scale, per_example[i]);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    }
    for (auto& t : workers) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    for (const auto& g : per_example) add_into(grads, g);
  }
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(batch.size());
}

template <typename Scalar>
double batch_loss(const PredictorParams<Scalar>& params, std::span<const BatchItem<Scalar>> batch) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  double total = 0.0;
  for (const auto& item : batch) {
    if (!item.cond) throw std::invalid_argument("batch_loss: batch item without conditioner");
    const VectorT<Scalar> pred = predict_noise(params, item.x_t, item.step_position, *item.cond);
    total += (item.epsilon - pred).template cast<double>().squaredNorm();
  }
  return total / static_cast<double>(batch.size());
}

Vector oracle_predict_alpha_bar(const Vector& x_t, double alpha_bar, const Vector& x0) {
  if (x_t.size() != x0.size()) throw ShapeMismatch("oracle_predict: x_t and x0 differ in length");
  if (!(alpha_bar < 1.0)) throw std::domain_error("oracle_predict: undefined at step 0 (alpha_bar = 1)");
  return (x_t - std::sqrt(alpha_bar) * x0) / std::sqrt(1.0 - alpha_bar);
}

Vector oracle_predict(const Vector& x_t, int t, const Vector& x0, const NoiseSchedule& schedule) {
  if (t < 1) throw std::domain_error("oracle_predict: undefined at step 0");
  return oracle_predict_alpha_bar(x_t, schedule.alpha_bar(t), x0);
}

#define DIFFUSE_INSTANTIATE(S)                                                                                 \
  template struct PredictorParams<S>;                                                                          \
  template PredictorParams<S> init_params<S>(const PredictorConfig&, Rng&);                                   \
  template PredictorParams<S> reset_conditioner_encoder<S>(const PredictorParams<S>&, int, Rng&);             \
  template VectorT<S> step_encoding<S>(double, int);                                                           \
  template MatrixT<S> encode_conditioner<S>(const PredictorParams<S>&, const Conditioner&, Eigen::Index);      \
  template VectorT<S> predict_noise<S>(const PredictorParams<S>&, const VectorT<S>&, double, const Conditioner&); \
  template VectorT<S> predict_noise_encoded<S>(const PredictorParams<S>&, const VectorT<S>&, double,          \
                                               const MatrixT<S>&);                                             \
  template double loss_and_grad<S>(const PredictorParams<S>&, std::span<const BatchItem<S>>, PredictorParams<S>&, \
                                   int);                                                                       \
  template double batch_loss<S>(const PredictorParams<S>&, std::span<const BatchItem<S>>);

DIFFUSE_INSTANTIATE(float)
DIFFUSE_INSTANTIATE(double)
#undef DIFFUSE_INSTANTIATE

template PredictorParams<float> cast_params<float, double>(const PredictorParams<double>&);
template PredictorParams<double> cast_params<double, float>(const PredictorParams<float>&);
template PredictorParams<float> cast_params<float, float>(const PredictorParams<float>&);
template PredictorParams<double> cast_params<double, double>(const PredictorParams<double>&);

}  // namespace diffuse
