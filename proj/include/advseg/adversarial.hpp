#pragma once

// Adversarial perturbation under an L2 ball, the adversarial and total
// training objectives, Adam, and the end-to-end training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "advseg/autodiff.hpp"
#include "advseg/eval.hpp"
#include "advseg/model.hpp"
#include "advseg/rng.hpp"

namespace advseg {

/// Perturbation radii used for sharp-boundary and smooth-boundary data.
inline constexpr double kEpsilonSharpBoundaries = 0.1;
inline constexpr double kEpsilonSmoothBoundaries = 0.5;

struct AdvConfig {
  double epsilon = kEpsilonSharpBoundaries;
  double lambda = 0.5;
  double learning_rate = 0.003;
  int epochs = 300;
  int batch_size = 8;
  std::uint64_t seed = 42;
  Variant variant = Variant::adv_multi_fcn_crf;
  int eval_every = 1;  // epochs between metric evaluations; the last epoch is always evaluated

  void validate() const {
    if (!(epsilon >= 0.0)) throw ContractError("epsilon must be >= 0");
    if (!(lambda >= 0.0)) throw ContractError("lambda must be >= 0");
    if (!(learning_rate > 0.0)) throw ContractError("learning rate must be > 0");
    if (epochs < 1 || batch_size < 1 || eval_every < 1) throw ContractError("epochs, batch size and eval_every must be >= 1");
  }
  bool operator==(const AdvConfig&) const = default;
};

/// R = -epsilon * g / ||g||_2, or zero when ||g||_2 < 1e-12.
inline Tensor perturbation(const Tensor& g, double epsilon) {
  if (!(epsilon >= 0.0)) throw ContractError("perturbation: epsilon must be >= 0");
  const double norm = std::sqrt(squared_norm(g));
  Tensor r(g.shape());
  if (norm < 1e-12) return r;
  const double s = -epsilon / norm;
  for (std::size_t i = 0; i < g.size(); ++i) r[i] = s * g[i];
  return r;
}

/// Per-image negative log-likelihood -sum_i log P(y_i | I) on the tape.
inline ad::Var image_nll(const BoundModel& b, ad::Var image, const PreparedSample& s, int crf_steps) {
  require_binary(s.mask, "image_nll");
  return ad::pixel_nll_sum(forward(b, image, s, crf_steps).log_probs, s.mask);
}

/// g = grad_I sum_i log P(y_i | I). For CRF variants P is the mean-field
/// posterior after `crf_steps` updates; kernels stay fixed.
inline Tensor input_gradient(const Model& m, const Tensor& prior_bias, const PreparedSample& s, int crf_steps) {
  ad::Tape tape;
  BoundModel b = bind(tape, m, prior_bias, false);
  ad::Var image = tape.leaf(s.input, "image");
  ad::Var nll = image_nll(b, image, s, crf_steps);
  Tensor g = tape.backward(nll).at("image");
  for (double& v : g.data()) v = -v;
  return g;
}

/// -(1/N) sum_n log P(y_n | I_n + R_n) with each R_n computed at the current
/// parameters and then held fixed.
inline double adversarial_loss(const Model& m, const Tensor& prior_bias, const std::vector<PreparedSample>& batch,
                               double epsilon, int crf_steps) {
  if (batch.empty()) throw ContractError("adversarial_loss: empty batch");
  double total = 0.0;
  for (const PreparedSample& s : batch) {
    PreparedSample shifted = s;
    shifted.input = s.input + perturbation(input_gradient(m, prior_bias, s, crf_steps), epsilon);
    ad::Tape tape;
    BoundModel b = bind(tape, m, prior_bias, false);
    total += tape.value(image_nll(b, tape.constant(shifted.input), shifted, crf_steps)).item();
  }
  return total / static_cast<double>(batch.size());
}

inline double clean_loss(const Model& m, const Tensor& prior_bias, const std::vector<PreparedSample>& batch,
                         int crf_steps) {
  if (batch.empty()) throw ContractError("clean_loss: empty batch");
  double total = 0.0;
  for (const PreparedSample& s : batch) {
    ad::Tape tape;
    BoundModel b = bind(tape, m, prior_bias, false);
    total += tape.value(image_nll(b, tape.constant(s.input), s, crf_steps)).item();
  }
  return total / static_cast<double>(batch.size());
}

inline double l2_penalty(const Model& m) {
  double s = 0.0;
  m.for_each_param([&](const std::string&, const Tensor& t) { s += squared_norm(t); });
  return s;
}

/// Objective on a tape with fixed perturbations:
///   (1/N) sum_n [nll(I_n + R_n) + nll(I_n)] + lambda/2 ||theta||^2.
/// Differentiating it gives the stop-gradient adversarial update.
inline ad::Var total_loss_on_tape(const BoundModel& b, const std::vector<PreparedSample>& batch,
                                  const std::vector<Tensor>& perturbations, double lambda, int crf_steps) {
  ad::Tape& tape = *b.prior_bias.tape;
  if (perturbations.size() != batch.size()) throw ContractError("one perturbation per sample required");
  std::vector<ad::Var> terms;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    terms.push_back(image_nll(b, tape.constant(batch[n].input + perturbations[n]), batch[n], crf_steps));
    terms.push_back(image_nll(b, tape.constant(batch[n].input), batch[n], crf_steps));
  }
  ad::Var data = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) data = ad::add(data, terms[i]);
  data = ad::scale(data, 1.0 / static_cast<double>(batch.size()));
  if (lambda == 0.0) return data;
  std::vector<ad::Var> params;
  for (const FcnVars& v : b.nets)
    for (ad::Var p : {v.conv1_w, v.conv1_b, v.conv2_w, v.conv2_b, v.conv3_w, v.conv3_b, v.tconv_w}) params.push_back(p);
  if (is_multiscale(b.model->variant) && uses_crf(b.model->variant)) params.push_back(b.scale);
  if (uses_crf(b.model->variant)) params.push_back(b.crf_w);
  ad::Var reg = ad::square_sum(params.front());
  for (std::size_t i = 1; i < params.size(); ++i) reg = ad::add(reg, ad::square_sum(params[i]));
  return ad::add(data, ad::scale(reg, lambda / 2.0));
}

/// L_adv + clean NLL + lambda/2 ||theta||^2 for one batch.
inline double total_loss(const Model& m, const Tensor& prior_bias, const std::vector<PreparedSample>& batch,
                         const AdvConfig& cfg, int crf_steps) {
  return adversarial_loss(m, prior_bias, batch, cfg.epsilon, crf_steps) + clean_loss(m, prior_bias, batch, crf_steps) +
         0.5 * cfg.lambda * l2_penalty(m);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainState {
  Model model;
  std::map<std::string, Tensor> m;  // first moments
  std::map<std::string, Tensor> v;  // second moments
  std::int64_t step = 0;
  int epoch = 0;  // completed epochs

  bool operator==(const TrainState&) const = default;
};

inline TrainState make_train_state(Model model) {
  TrainState s{std::move(model), {}, {}, 0, 0};
  s.model.for_each_param([&](const std::string& name, const Tensor& t) {
    s.m.emplace(name, Tensor(t.shape()));
    s.v.emplace(name, Tensor(t.shape()));
  });
  return s;
}

/// One bias-corrected Adam update. `grads` must hold exactly the model's
/// learnable parameter names.
inline void adam_step(TrainState& state, const std::map<std::string, Tensor>& grads, double lr,
                      const AdamSettings& a = {}) {
  std::size_t matched = 0;
  state.model.for_each_param([&](const std::string& name, const Tensor& t) {
    if (!grads.contains(name)) throw ContractError("adam_step: missing gradient for '" + name + "'");
    require_same_shape(grads.at(name), t, "adam_step");
    ++matched;
  });
  if (matched != grads.size()) throw ContractError("adam_step: gradients contain keys that are not parameters");

  ++state.step;
  const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(state.step));
  state.model.for_each_param([&](const std::string& name, Tensor& p) {
    const Tensor& g = grads.at(name);
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = a.beta1 * m[i] + (1.0 - a.beta1) * g[i];
      v[i] = a.beta2 * v[i] + (1.0 - a.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + a.eps);
    }
  });
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct BatchResult {
  std::map<std::string, Tensor> grads;  // gradient of the total objective
  double clean = 0.0;                   // mean clean NLL
  double adversarial = 0.0;             // mean adversarial NLL
  double objective = 0.0;
};

namespace detail {

inline std::map<std::string, Tensor> keep_parameters(const Model& m, ad::Gradients&& all) {
  std::map<std::string, Tensor> out;
  m.for_each_param([&](const std::string& name, const Tensor&) { out.emplace(name, std::move(all.at(name))); });
  return out;
}

}  // namespace detail

/// Gradient of the total objective on one batch. Perturbations are computed
/// from the clean pass (whose input gradients come for free) and treated as
/// constants. Non-adversarial variants reuse the clean pass for the second
/// term, which makes epsilon = 0 bit-identical to them.
inline BatchResult batch_gradient(const Model& m, const Tensor& prior_bias, const std::vector<const PreparedSample*>& batch,
                                  double epsilon, double lambda) {
  const bool adversarial = is_adversarial(m.variant);
  const int steps = m.crf.t_train;
  const double inv = 1.0 / static_cast<double>(batch.size());
  BatchResult r;

  std::vector<Tensor> shifted;
  std::map<std::string, Tensor> clean_grads;
  {
    ad::Tape tape;
    BoundModel b = bind(tape, m, prior_bias, true);
    std::vector<ad::Var> images;
    std::vector<ad::Var> nlls;
    for (std::size_t n = 0; n < batch.size(); ++n) {
      images.push_back(adversarial ? tape.leaf(batch[n]->input, "image/" + std::to_string(n))
                                   : tape.constant(batch[n]->input));
      nlls.push_back(image_nll(b, images.back(), *batch[n], steps));
    }
    ad::Var total = nlls.front();
    for (std::size_t n = 1; n < nlls.size(); ++n) total = ad::add(total, nlls[n]);
    r.clean = tape.value(total).item() * inv;
    ad::Gradients all = tape.backward(total);
    if (adversarial) {
      for (std::size_t n = 0; n < batch.size(); ++n) {
        Tensor g = all.at("image/" + std::to_string(n));
        for (double& v : g.data()) v = -v;  // gradient of the log-likelihood
        shifted.push_back(batch[n]->input + perturbation(g, epsilon));
      }
    }
    clean_grads = detail::keep_parameters(m, std::move(all));
  }

  std::map<std::string, Tensor> adv_grads;
  if (adversarial) {
    ad::Tape tape;
    BoundModel b = bind(tape, m, prior_bias, true);
    ad::Var total;
    for (std::size_t n = 0; n < batch.size(); ++n) {
      ad::Var nll = image_nll(b, tape.constant(shifted[n]), *batch[n], steps);
      total = n == 0 ? nll : ad::add(total, nll);
    }
    r.adversarial = tape.value(total).item() * inv;
    adv_grads = detail::keep_parameters(m, tape.backward(total));
  } else {
    r.adversarial = r.clean;
    adv_grads = clean_grads;
  }

  double penalty = 0.0;
  m.for_each_param([&](const std::string& name, const Tensor& p) {
    Tensor g = clean_grads.at(name);
    const Tensor& ga = adv_grads.at(name);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (g[i] + ga[i]) * inv + lambda * p[i];
    penalty += squared_norm(p);
    r.grads.emplace(name, std::move(g));
  });
  r.objective = r.clean + r.adversarial + 0.5 * lambda * penalty;
  return r;
}

struct SplitMetrics {
  double dice = 0.0;
  std::array<std::optional<double>, kTrimapWidths> trimap{};
};

inline SplitMetrics summarize(const MetricsReport& r) {
  SplitMetrics s;
  s.dice = r.dice();
  for (int w = 1; w <= kTrimapWidths; ++w) s.trimap[static_cast<std::size_t>(w - 1)] = r.trimap_accuracy(w);
  return s;
}

struct EpochRecord {
  int epoch = 0;  // 1-based
  double objective = 0.0;
  double clean = 0.0;
  double adversarial = 0.0;
  std::optional<SplitMetrics> train;
  std::optional<SplitMetrics> test;
};

/// Raised when the objective stops being finite. Carries the state at the
/// start of the failing epoch.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, TrainState last_good)
      : NumericalError(what), last_good_(std::move(last_good)) {}
  const TrainState& last_good() const { return last_good_; }

 private:
  TrainState last_good_;
};

using EpochCallback = std::function<void(const TrainState&, const EpochRecord&)>;

/// Epoch order is a seeded shuffle keyed by (seed, epoch), so a run resumed
/// from a checkpoint follows the same trajectory as an uninterrupted one.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, "shuffle", static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// Runs epochs state.epoch+1 .. cfg.epochs.
inline std::vector<EpochRecord> train(TrainState& state, const PreparedData& data, const AdvConfig& cfg,
                                      const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.train.empty()) throw ContractError("train: empty training set");
  if (state.model.variant != cfg.variant) throw ContractError("train: state variant does not match config");
  std::vector<EpochRecord> history;
  while (state.epoch < cfg.epochs) {
    const TrainState last_good = state;
    const int epoch = state.epoch + 1;
    EpochRecord rec;
    rec.epoch = epoch;
    const auto order = epoch_order(data.train.size(), cfg.seed, epoch);
    std::size_t batches = 0;
    try {
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        std::vector<const PreparedSample*> batch;
        for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) batch.push_back(&data.train[order[i]]);
        BatchResult br = batch_gradient(state.model, data.prior_bias, batch, cfg.epsilon, cfg.lambda);
        if (!std::isfinite(br.objective)) throw NumericalError("objective is not finite");
        adam_step(state, br.grads, cfg.learning_rate);
        rec.objective += br.objective;
        rec.clean += br.clean;
        rec.adversarial += br.adversarial;
        ++batches;
      }
    } catch (const NumericalError& e) {
      throw TrainingDiverged("training diverged in epoch " + std::to_string(epoch) + ": " + e.what(), last_good);
    }
    rec.objective /= static_cast<double>(batches);
    rec.clean /= static_cast<double>(batches);
    rec.adversarial /= static_cast<double>(batches);
    state.epoch = epoch;
    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      rec.train = summarize(evaluate(state.model, data.prior_bias, data.train_eval));
      if (!data.test.empty()) rec.test = summarize(evaluate(state.model, data.prior_bias, data.test));
    }
    if (on_epoch) on_epoch(state, rec);
    history.push_back(rec);
  }
  return history;
}

}  // namespace advseg
