// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "diffuse/core.hpp"
#include "diffuse/schedule.hpp"
#include "diffuse/signal.hpp"

#include <map>
#include <span>
#include <utility>
#include <string>
#include <vector>

namespace diffuse {

/// Architecture of the noise predictor: a stack of residual layers with
/// bidirectional dilated convolutions, gated activations and skip
/// connections, a sinusoidal step embedding and a conditioner encoder that
/// upsamples frame-rate features to the sample rate (x16, x16).
struct PredictorConfig {
  int n_layers = 30;
  int n_blocks = 3;
  int residual_channels = 63;
  int kernel_size = 3;
  int conditioner_dim = kMelBins;
  /// Channels of the upsampled conditioner fed to every layer.
  int conditioner_channels = 80;
  /// Length of the sinusoidal step encoding (half sines, half cosines).
  int step_encoding_dim = 128;
  int step_hidden_dim = 512;

  /// Dilation of layer l (0-based): 2^(l mod (n_layers / n_blocks)).
  int dilation(int layer) const;
  std::vector<int> dilations() const;
  /// Samples on either side of an output that can influence it through the
  /// waveform path.
  int receptive_radius() const;
  void validate() const;

  std::map<std::string, std::string> to_map() const;
  static PredictorConfig from_map(const std::map<std::string, std::string>& kv);

  bool operator==(const PredictorConfig&) const = default;
};

inline constexpr int kUpsampleStride = 16;
inline constexpr int kUpsampleKernel = 32;

template <typename Scalar>
struct LayerParams {
  MatrixT<Scalar> step_w, step_b;  // C x H, C x 1
  MatrixT<Scalar> dil_w, dil_b;    // 2C x (k C), 2C x 1; tap j is columns [jC, (j+1)C)
  MatrixT<Scalar> cond_w, cond_b;  // 2C x E, 2C x 1 (conditioner encoder)
  MatrixT<Scalar> out_w, out_b;    // 2C x C, 2C x 1
};

/// Every learnable tensor of the predictor. Gradients use the same type.
template <typename Scalar>
struct PredictorParams {
  PredictorConfig config;

  MatrixT<Scalar> input_w, input_b;  // C x 1
  MatrixT<Scalar> emb1_w, emb1_b;    // H x D, H x 1
  MatrixT<Scalar> emb2_w, emb2_b;    // H x H, H x 1
  // Conditioner encoder: frame projection then two depthwise transposed
  // convolutions (E x 32 kernels).
  MatrixT<Scalar> cond_in_w, cond_in_b;  // E x dim, E x 1
  MatrixT<Scalar> up1_w, up1_b;          // E x 32, E x 1
  MatrixT<Scalar> up2_w, up2_b;
  std::vector<LayerParams<Scalar>> layers;
  MatrixT<Scalar> skip_w, skip_b;  // C x C, C x 1
  MatrixT<Scalar> head_w, head_b;  // 1 x C, 1 x 1

  /// Visits (name, tensor, is_conditioner_encoder) in a fixed order.
  template <typename F>
  void for_each(F&& f);
  template <typename F>
  void for_each(F&& f) const;

  /// Same shapes, all zeros.
  PredictorParams zeros_like() const;
  std::size_t parameter_count() const;
  bool all_finite() const;
};

/// Draws a fresh parameter set. Projection weights are Kaiming-normal,
/// embedding layers uniform in +-1/sqrt(fan_in), upsampling kernels start
/// as linear interpolation, biases and the output head start at zero so an
/// untrained network predicts zero noise.
template <typename Scalar>
PredictorParams<Scalar> init_params(const PredictorConfig& config, Rng& rng);

/// Re-initializes the conditioner encoder for `new_dim` input features; every
/// other tensor is copied unchanged.
template <typename Scalar>
PredictorParams<Scalar> reset_conditioner_encoder(const PredictorParams<Scalar>& params, int new_dim, Rng& rng);

template <typename To, typename From>
PredictorParams<To> cast_params(const PredictorParams<From>& p);

/// Sinusoidal encoding of a (possibly fractional) step position.
template <typename Scalar>
VectorT<Scalar> step_encoding(double position, int dim);

/// Conditioner upsampled to sample rate and cropped to `length`: E x length.
template <typename Scalar>
MatrixT<Scalar> encode_conditioner(const PredictorParams<Scalar>& params, const Conditioner& cond,
                                   Eigen::Index length);

/// eps_theta(x_t, t, cond). The conditioner must have ceil(L / 256) frames.
template <typename Scalar>
VectorT<Scalar> predict_noise(const PredictorParams<Scalar>& params, const VectorT<Scalar>& x_t,
                              double step_position, const Conditioner& cond);

/// Same with a conditioner already passed through encode_conditioner.
template <typename Scalar>
VectorT<Scalar> predict_noise_encoded(const PredictorParams<Scalar>& params, const VectorT<Scalar>& x_t,
                                      double step_position, const MatrixT<Scalar>& encoded);

template <typename Scalar>
struct BatchItem {
  VectorT<Scalar> x_t;
  double step_position = 1.0;
  VectorT<Scalar> epsilon;
  const Conditioner* cond = nullptr;
};

/// Mean over the batch of ||eps - eps_theta(x_t, t, cond)||^2 and its
/// gradient with respect to every tensor (written to `grads`, which is
/// resized as needed). `jobs` > 1 evaluates examples on worker threads;
/// the reduction order is fixed so results do not depend on it.
template <typename Scalar>
double loss_and_grad(const PredictorParams<Scalar>& params, std::span<const BatchItem<Scalar>> batch,
                     PredictorParams<Scalar>& grads, int jobs = 1);

/// Loss only.
template <typename Scalar>
double batch_loss(const PredictorParams<Scalar>& params, std::span<const BatchItem<Scalar>> batch);

/// Exact noise recovered from x_t when x0 is known:
/// (x_t - sqrt(abar_t) x0) / sqrt(1 - abar_t).
Vector oracle_predict(const Vector& x_t, int t, const Vector& x0, const NoiseSchedule& schedule);
/// Same with alpha_bar given directly (used by short inference chains).
Vector oracle_predict_alpha_bar(const Vector& x_t, double alpha_bar, const Vector& x0);

// ---------------------------------------------------------------------------

template <typename Scalar>
template <typename F>
void PredictorParams<Scalar>::for_each(F&& f) {
  f("input.w", input_w, false);
  f("input.b", input_b, false);
  f("step_mlp.1.w", emb1_w, false);
  f("step_mlp.1.b", emb1_b, false);
  f("step_mlp.2.w", emb2_w, false);
  f("step_mlp.2.b", emb2_b, false);
  f("cond.in.w", cond_in_w, true);
  f("cond.in.b", cond_in_b, true);
  f("cond.up1.w", up1_w, true);
  f("cond.up1.b", up1_b, true);
  f("cond.up2.w", up2_w, true);
  f("cond.up2.b", up2_b, true);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    auto& L = layers[l];
    f(p + "step.w", L.step_w, false);
    f(p + "step.b", L.step_b, false);
    f(p + "dilconv.w", L.dil_w, false);
    f(p + "dilconv.b", L.dil_b, false);
    f(p + "cond.w", L.cond_w, true);
    f(p + "cond.b", L.cond_b, true);
    f(p + "out.w", L.out_w, false);
    f(p + "out.b", L.out_b, false);
  }
  f("skip.w", skip_w, false);
  f("skip.b", skip_b, false);
  f("head.w", head_w, false);
  f("head.b", head_b, false);
}

template <typename Scalar>
template <typename F>
void PredictorParams<Scalar>::for_each(F&& f) const {
  const_cast<PredictorParams*>(this)->for_each(
      [&](const std::string& name, MatrixT<Scalar>& m, bool cond) { f(name, std::as_const(m), cond); });
}

}  // namespace diffuse
