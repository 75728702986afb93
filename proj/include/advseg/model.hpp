#pragma once

// The eight model variants: single- or multi-scale FCN unaries, optionally
// followed by the CRF-as-RNN layer, optionally trained adversarially.

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "advseg/autodiff.hpp"
#include "advseg/crf.hpp"
#include "advseg/eval.hpp"
#include "advseg/fcn.hpp"
#include "advseg/rng.hpp"
#include "advseg/synth.hpp"

namespace advseg {

enum class Variant {
  fcn,
  adv_fcn,
  fcn_crf,
  adv_fcn_crf,
  multi_fcn,
  adv_multi_fcn,
  multi_fcn_crf,
  adv_multi_fcn_crf,
};

inline constexpr std::array<Variant, 8> kAllVariants = {
    Variant::fcn,       Variant::adv_fcn,       Variant::fcn_crf,       Variant::adv_fcn_crf,
    Variant::multi_fcn, Variant::adv_multi_fcn, Variant::multi_fcn_crf, Variant::adv_multi_fcn_crf};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::fcn: return "fcn";
    case Variant::adv_fcn: return "adv_fcn";
    case Variant::fcn_crf: return "fcn_crf";
    case Variant::adv_fcn_crf: return "adv_fcn_crf";
    case Variant::multi_fcn: return "multi_fcn";
    case Variant::adv_multi_fcn: return "adv_multi_fcn";
    case Variant::multi_fcn_crf: return "multi_fcn_crf";
    case Variant::adv_multi_fcn_crf: return "adv_multi_fcn_crf";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : kAllVariants)
    if (to_string(v) == s) return v;
  throw ContractError("unknown variant '" + std::string(s) + "'");
}

inline bool is_adversarial(Variant v) { return to_string(v).starts_with("adv_"); }
inline bool is_multiscale(Variant v) { return to_string(v).find("multi_") != std::string_view::npos; }
inline bool uses_crf(Variant v) { return to_string(v).ends_with("_crf"); }

/// Counterpart of v without adversarial training.
inline Variant clean_counterpart(Variant v) {
  if (!is_adversarial(v)) return v;
  return parse_variant(to_string(v).substr(4));
}

struct ModelConfig {
  int width_divisor = 1;  // 1 = the full preset kernel counts
  Bandwidths bandwidths;
  int crf_steps_train = 5;
  int crf_steps_test = 10;
  double crf_weight_init = 0.5;

  bool operator==(const ModelConfig&) const = default;
};

struct Model {
  Variant variant = Variant::fcn;
  std::vector<FcnConfig> configs;
  std::vector<FcnParams> nets;
  ScaleWeights scale;
  CrfParams crf;
  Bandwidths bandwidths;

  /// Visits every learnable parameter of this variant in a fixed order.
  template <class F>
  void for_each_param(F&& f) {
    for_each_impl(*this, f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    for_each_impl(*this, f);
  }

  std::map<std::string, Tensor> parameters() const {
    std::map<std::string, Tensor> out;
    for_each_param([&](const std::string& name, const Tensor& t) { out.emplace(name, t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  bool operator==(const Model&) const = default;

 private:
  template <class Self, class F>
  static void for_each_impl(Self& self, F& f) {
    for (std::size_t s = 0; s < self.nets.size(); ++s) {
      const std::string prefix = self.configs[s].name + ".";
      self.nets[s].for_each([&](const char* layer, auto& t) { f(prefix + layer, t); });
    }
    if (is_multiscale(self.variant) && uses_crf(self.variant)) f(std::string("scale.w"), self.scale.w);
    if (uses_crf(self.variant)) f(std::string("crf.w"), self.crf.kernel_weights);
  }
};

inline std::vector<FcnConfig> model_configs(Variant v, int width_divisor) {
  std::vector<FcnConfig> out;
  const int scales = is_multiscale(v) ? kNumScales : 1;
  for (int s = 1; s <= scales; ++s) out.push_back(FcnConfig::preset(s).narrowed(width_divisor));
  return out;
}

inline Model make_model(Variant v, const ModelConfig& mc, std::uint64_t seed) {
  Model m;
  m.variant = v;
  m.configs = model_configs(v, mc.width_divisor);
  for (std::size_t s = 0; s < m.configs.size(); ++s) m.nets.push_back(init_params(m.configs[s], derive_seed(seed, "init", s)));
  m.crf.kernel_weights = Tensor({kNumKernels}, mc.crf_weight_init);
  m.crf.t_train = mc.crf_steps_train;
  m.crf.t_test = mc.crf_steps_test;
  m.crf.validate();
  m.bandwidths = mc.bandwidths;
  return m;
}

/// One sample ready for the network: normalized input, CRF features and mask.
struct PreparedSample {
  Tensor input;  // [1,40,40], z-scored
  std::shared_ptr<const MessageOperator> kernels;
  Tensor mask;  // [40,40]
};

/// Model parameters recorded on a tape.
struct BoundModel {
  const Model* model = nullptr;
  std::vector<FcnVars> nets;
  ad::Var scale;
  ad::Var crf_w;
  ad::Var prior_bias;
};

inline BoundModel bind(ad::Tape& tape, const Model& m, const Tensor& prior_bias, bool differentiable = true) {
  BoundModel b;
  b.model = &m;
  for (std::size_t s = 0; s < m.nets.size(); ++s) b.nets.push_back(register_params(tape, m.nets[s], m.configs[s].name, differentiable));
  const bool ms_crf = is_multiscale(m.variant) && uses_crf(m.variant);
  b.scale = differentiable && ms_crf ? tape.leaf(m.scale.w, "scale.w") : tape.constant(m.scale.w);
  b.crf_w = differentiable && uses_crf(m.variant) ? tape.leaf(m.crf.kernel_weights, "crf.w")
                                                  : tape.constant(m.crf.kernel_weights);
  b.prior_bias = tape.constant(prior_bias);
  return b;
}

struct ModelOutput {
  ad::Var log_probs;                    // log of the predicted label distribution
  std::vector<ad::Var> scale_log_probs;  // one per sub-net
  std::optional<MeanField> crf;
};

/// Forward pass of the bound model. `crf_steps` selects the unrolled depth.
inline ModelOutput forward(const BoundModel& b, ad::Var image, const PreparedSample& features, int crf_steps) {
  const Model& m = *b.model;
  ModelOutput out;
  for (const FcnVars& net : b.nets) out.scale_log_probs.push_back(fcn_log_probs(image, net, b.prior_bias));

  if (!uses_crf(m.variant)) {
    out.log_probs = is_multiscale(m.variant) ? ad::log_mean_exp(out.scale_log_probs) : out.scale_log_probs.front();
    return out;
  }
  if (!features.kernels) throw ContractError("CRF variant needs pairwise kernels for the sample");
  ad::Var unary;
  if (is_multiscale(m.variant)) {
    std::vector<ad::Var> unaries;
    for (ad::Var lp : out.scale_log_probs) unaries.push_back(ad::neg(lp));
    unary = multiscale_unary(unaries, b.scale);
  } else {
    unary = ad::neg(out.scale_log_probs.front());
  }
  out.crf = crf_infer(unary, features.kernels, b.crf_w, crf_steps);
  out.log_probs = ad::log_softmax_pixelwise(out.crf->logits);
  return out;
}

/// Predicted probabilities [2,H,W]. Multi-scale FCN variants average the
/// sub-net predictions; CRF variants return the mean-field marginals.
inline Tensor probabilities(const ad::Tape& tape, const ModelOutput& out, Variant v) {
  if (out.crf) return tape.value(out.crf->q);
  if (is_multiscale(v)) {
    std::vector<Tensor> probs;
    for (ad::Var lp : out.scale_log_probs) probs.push_back(ad::detail::softmax_channels(tape.value(lp)));
    return average_prediction(probs);
  }
  return ad::detail::softmax_channels(tape.value(out.log_probs));
}

inline Tensor predict(const Model& m, const Tensor& prior_bias, const PreparedSample& s) {
  ad::Tape tape;
  BoundModel b = bind(tape, m, prior_bias, false);
  ModelOutput out = forward(b, tape.constant(s.input), s, m.crf.t_test);
  return probabilities(tape, out, m.variant);
}

inline MetricsReport evaluate(const Model& m, const Tensor& prior_bias, const std::vector<PreparedSample>& samples) {
  MetricsReport r;
  for (const PreparedSample& s : samples) accumulate(r, binarize(predict(m, prior_bias, s)), s.mask);
  return r;
}

/// Training/evaluation data after normalization and prior estimation.
struct PreparedData {
  NormStats norm;
  PositionPrior prior;
  Tensor prior_bias;
  std::vector<PreparedSample> train;       // augmented
  std::vector<PreparedSample> train_eval;  // original training samples
  std::vector<PreparedSample> test;
};

inline PreparedSample prepare_sample(const Sample& s, const NormStats& norm, const Bandwidths& bw) {
  // Quantizing keeps the appearance kernel at <= 256 intensity groups.
  const Tensor scaled = minmax_scale(quantize_8bit(s.image));
  return {apply_normalizer(norm, scaled), std::make_shared<const MessageOperator>(MessageOperator::factored(scaled, bw)),
          s.mask};
}

/// Contrast-stretches every image, fits the per-pixel normalizer and the
/// position prior on the (optionally flip-augmented) training split.
inline PreparedData prepare(const std::vector<Sample>& train, const std::vector<Sample>& test, const Bandwidths& bw,
                            bool augment = true) {
  if (train.empty()) throw ContractError("training split is empty");
  const std::vector<Sample> expanded = augment ? augment_flips(train) : train;
  std::vector<Tensor> scaled;
  for (const Sample& s : expanded) scaled.push_back(minmax_scale(quantize_8bit(s.image)));
  PreparedData d;
  d.norm = fit_normalizer(scaled);
  d.prior = estimate_prior(expanded);
  d.prior_bias = d.prior.log_bias();
  for (const Sample& s : expanded) d.train.push_back(prepare_sample(s, d.norm, bw));
  for (const Sample& s : train) d.train_eval.push_back(prepare_sample(s, d.norm, bw));
  for (const Sample& s : test) d.test.push_back(prepare_sample(s, d.norm, bw));
  return d;
}

}  // namespace advseg
