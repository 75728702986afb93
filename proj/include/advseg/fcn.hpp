#pragma once

// Multi-scale fully convolutional sub-nets with a position-prior biased
// softmax. Each sub-net is
//
//   image[1,40,40] -> (conv same -> tanh -> maxpool2) x 3 -> [C3,5,5]
//                  -> transpose conv (2 kernels) -> [2,40,40] logits
//                  -> + (log(1-w), log w) -> log softmax over labels
//
// Channel 0 is background, channel 1 is mass.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "advseg/autodiff.hpp"
#include "advseg/rng.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

inline constexpr int kImageSize = 40;
inline constexpr int kNumLabels = 2;
inline constexpr int kNumScales = 4;

struct ConvLayerSpec {
  int channels = 0;
  int kernel = 0;

  bool operator==(const ConvLayerSpec&) const = default;
};

/// Architecture of one sub-net.
struct FcnConfig {
  std::string name;
  std::array<ConvLayerSpec, 3> conv{};
  int labels = kNumLabels;
  int image_size = kImageSize;

  /// Spatial size after the three pooling stages.
  int bottleneck_size() const { return image_size / 8; }

  /// Transpose-conv kernel size that maps the bottleneck back to full size.
  int transpose_kernel() const { return image_size - bottleneck_size() + 1; }

  /// Kernel counts and sizes of the four multi-scale sub-nets.
  static FcnConfig preset(int index) {
    switch (index) {
      case 1: return {"fcn1", {{{6, 5}, {12, 5}, {588, 7}}}};
      case 2: return {"fcn2", {{{9, 4}, {12, 4}, {588, 7}}}};
      case 3: return {"fcn3", {{{16, 3}, {13, 3}, {415, 8}}}};
      case 4: return {"fcn4", {{{37, 2}, {12, 2}, {355, 9}}}};
      default: throw ContractError("FCN preset index must be in 1..4, got " + std::to_string(index));
    }
  }

  /// Same kernel sizes with every layer's kernel count divided by `divisor`
  /// (rounded up). divisor 1 is the preset itself.
  FcnConfig narrowed(int divisor) const {
    if (divisor < 1) throw ContractError("width divisor must be >= 1");
    FcnConfig c = *this;
    for (auto& layer : c.conv) layer.channels = (layer.channels + divisor - 1) / divisor;
    return c;
  }

  bool operator==(const FcnConfig&) const = default;
};

/// Closed-form learnable parameter count of a sub-net.
inline std::size_t parameter_count(const FcnConfig& c) {
  std::size_t n = 0;
  int in = 1;
  for (const auto& layer : c.conv) {
    n += static_cast<std::size_t>(layer.channels) * in * layer.kernel * layer.kernel + layer.channels;
    in = layer.channels;
  }
  const std::size_t tk = static_cast<std::size_t>(c.transpose_kernel());
  return n + static_cast<std::size_t>(c.labels) * in * tk * tk;
}

/// Weights of one sub-net. Conv kernels are [Cout,Cin,k,k]; the transpose
/// kernel is [labels,C3,t,t] and carries no bias.
struct FcnParams {
  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;
  Tensor conv3_w, conv3_b;
  Tensor tconv_w;

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("conv1.w", self.conv1_w);
    f("conv1.b", self.conv1_b);
    f("conv2.w", self.conv2_w);
    f("conv2.b", self.conv2_b);
    f("conv3.w", self.conv3_w);
    f("conv3.b", self.conv3_b);
    f("tconv.w", self.tconv_w);
  }
  template <class F>
  void for_each(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

  std::size_t size() const {
    std::size_t n = 0;
    for_each([&](const char*, const Tensor& t) { n += t.size(); });
    return n;
  }

  bool operator==(const FcnParams&) const = default;
};

/// The same parameters registered on a tape.
struct FcnVars {
  ad::Var conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b, tconv_w;
};

/// Registers params as named leaves "<prefix>.<layer>" (or constants when
/// `differentiable` is false).
inline FcnVars register_params(ad::Tape& tape, const FcnParams& p, const std::string& prefix,
                               bool differentiable = true) {
  auto reg = [&](const char* name, const Tensor& t) {
    return differentiable ? tape.leaf(t, prefix + "." + name) : tape.constant(t);
  };
  return {reg("conv1.w", p.conv1_w), reg("conv1.b", p.conv1_b), reg("conv2.w", p.conv2_w),
          reg("conv2.b", p.conv2_b), reg("conv3.w", p.conv3_w), reg("conv3.b", p.conv3_b),
          reg("tconv.w", p.tconv_w)};
}

/// Glorot-uniform kernels, zero biases. Deterministic in `seed`.
inline FcnParams init_params(const FcnConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  auto kernel = [&](int cout, int cin, int k) {
    Tensor t({cout, cin, k, k});
    const double fan_in = static_cast<double>(cin) * k * k;
    const double fan_out = static_cast<double>(cout) * k * k;
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-a, a);
    for (double& v : t.data()) v = dist(rng);
    return t;
  };
  FcnParams p;
  const auto& c = config.conv;
  p.conv1_w = kernel(c[0].channels, 1, c[0].kernel);
  p.conv1_b = Tensor({c[0].channels});
  p.conv2_w = kernel(c[1].channels, c[0].channels, c[1].kernel);
  p.conv2_b = Tensor({c[1].channels});
  p.conv3_w = kernel(c[2].channels, c[1].channels, c[2].kernel);
  p.conv3_b = Tensor({c[2].channels});
  p.tconv_w = kernel(config.labels, c[2].channels, config.transpose_kernel());
  return p;
}

/// Per-pixel empirical mass frequency w_i, strictly inside (0,1).
struct PositionPrior {
  Tensor prior;  // [H,W]

  static PositionPrior uniform(double w = 0.5, int size = kImageSize) { return {Tensor({size, size}, w)}; }

  void validate() const {
    if (prior.rank() != 2) throw ShapeError("position prior must be [H,W], got " + to_string(prior.shape()));
    for (double w : prior.data())
      if (!(w > 0.0 && w < 1.0)) throw ContractError("position prior entries must lie in (0,1)");
  }

  /// Additive logit bias [2,H,W]: log(1-w) for background, log(w) for mass.
  Tensor log_bias() const {
    validate();
    const int h = prior.dim(0), w = prior.dim(1);
    Tensor b({kNumLabels, h, w});
    const std::size_t plane = prior.size();
    for (std::size_t i = 0; i < plane; ++i) {
      b[i] = std::log1p(-prior[i]);
      b[plane + i] = std::log(prior[i]);
    }
    return b;
  }

  bool operator==(const PositionPrior&) const = default;
};

/// Learnable per-scale unary weights, initialised to 1/4 each.
struct ScaleWeights {
  Tensor w = Tensor({kNumScales}, 0.25);

  bool operator==(const ScaleWeights&) const = default;
};

/// Log-probabilities [2,H,W] of one sub-net on the tape. `prior_bias` is the
/// output of PositionPrior::log_bias() recorded as a constant.
inline ad::Var fcn_log_probs(ad::Var image, const FcnVars& p, ad::Var prior_bias) {
  using namespace ad;
  Var h = maxpool2(tanh(conv2d(image, p.conv1_w, p.conv1_b, Padding::same)));
  h = maxpool2(tanh(conv2d(h, p.conv2_w, p.conv2_b, Padding::same)));
  h = maxpool2(tanh(conv2d(h, p.conv3_w, p.conv3_b, Padding::same)));
  Var logits = transpose_conv2d(h, p.tconv_w);
  const Tensor& lv = image.tape->value(logits);
  const Tensor& bv = image.tape->value(prior_bias);
  if (lv.shape() != bv.shape()) {
    throw ShapeError("sub-net output " + to_string(lv.shape()) + " does not match prior bias " +
                     to_string(bv.shape()));
  }
  return log_softmax_pixelwise(add(logits, prior_bias));
}

/// Stand-alone forward pass returning log-probabilities [2,40,40].
inline Tensor fcn_forward(const Tensor& image, const FcnParams& params, const FcnConfig& config,
                          const PositionPrior& prior) {
  require_shape(image, {1, config.image_size, config.image_size}, "fcn_forward image");
  ad::Tape tape;
  ad::Var x = tape.constant(image);
  FcnVars vars = register_params(tape, params, config.name, false);
  ad::Var bias = tape.constant(prior.log_bias());
  return tape.value(fcn_log_probs(x, vars, bias));
}

inline void require_binary(const Tensor& mask, const char* what) {
  for (double v : mask.data())
    if (v != 0.0 && v != 1.0) throw ContractError(std::string(what) + ": mask entries must be 0 or 1");
}

/// Per-pixel mean negative log-likelihood of a single image on the tape.
inline ad::Var fcn_loss(ad::Var log_probs, const Tensor& mask) {
  require_binary(mask, "fcn_loss");
  return ad::scale(ad::pixel_nll_sum(log_probs, mask), 1.0 / static_cast<double>(mask.size()));
}

inline double fcn_loss(const Tensor& log_probs, const Tensor& mask) {
  ad::Tape tape;
  return tape.value(fcn_loss(tape.constant(log_probs), mask)).item();
}

/// psi_u = sum_s w_s * psi_s with psi_s = -log P_s.
inline ad::Var multiscale_unary(const std::vector<ad::Var>& per_scale_unaries, ad::Var weights) {
  if (per_scale_unaries.size() != static_cast<std::size_t>(kNumScales)) {
    throw ShapeError("multiscale_unary expects 4 unaries, got " + std::to_string(per_scale_unaries.size()));
  }
  return ad::weighted_sum(per_scale_unaries, weights);
}

inline Tensor multiscale_unary(const std::vector<Tensor>& per_scale_unaries, const ScaleWeights& weights) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Tensor& u : per_scale_unaries) vars.push_back(tape.constant(u));
  return tape.value(multiscale_unary(vars, tape.constant(weights.w)));
}

/// Elementwise mean of per-scale probability maps.
inline Tensor average_prediction(const std::vector<Tensor>& per_scale_probs) {
  if (per_scale_probs.empty()) throw ContractError("average_prediction needs at least one input");
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Tensor& p : per_scale_probs) vars.push_back(tape.constant(p));
  return tape.value(ad::mean_of(vars));
}

}  // namespace advseg
