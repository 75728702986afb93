#pragma once

// Built-in numerical checks shared by the `selftest` command and the test
// suites: finite-difference gradients of every primitive and of the model
// composites, CRF invariants against exact enumeration, and the
// perturbation contract.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "advseg/adversarial.hpp"
#include "advseg/autodiff.hpp"
#include "advseg/crf.hpp"
#include "advseg/fcn.hpp"
#include "advseg/model.hpp"
#include "advseg/rng.hpp"

namespace advseg::check {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdTolerance = 1e-4;

struct CheckResult {
  std::string name;
  bool pass = false;
  double measured = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(shape);
  for (double& v : t.data()) v = d(rng);
  return t;
}

inline Tensor random_mask(int h, int w, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  Tensor t({h, w});
  for (double& v : t.data()) v = coin(rng) ? 1.0 : 0.0;
  return t;
}

/// Optional corruption of analytic gradients, used to confirm the checks can fail.
using Tamper = std::function<void(Tensor&)>;

inline Tamper mutate_first_entry() {
  return [](Tensor& g) {
    if (!g.empty()) g[0] = g[0] * 1.01 + 1e-3;
  };
}

inline CheckResult fd_result(const std::string& name, const ad::GradCheckResult& r) {
  return {name, r.max_rel_error < kFdTolerance, r.max_rel_error, kFdTolerance,
          "worst index " + std::to_string(r.worst_index) + " analytic " + std::to_string(r.analytic) + " numeric " +
              std::to_string(r.numeric)};
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace detail {

/// Scalar probe <op(x), R> for a fixed random R of the output's shape.
class Probe {
 public:
  explicit Probe(std::uint64_t seed) : rng_(make_rng(seed, "probe")) {}

  ad::Var contract(ad::Var y) {
    ad::Tape& t = *y.tape;
    const Tensor& v = t.value(y);
    if (weights_.shape() != v.shape()) weights_ = random_tensor(v.shape(), rng_, 0.5, 1.5);
    return ad::sum(ad::mul(y, t.constant(weights_)));
  }

 private:
  Rng rng_;
  Tensor weights_;
};

}  // namespace detail

/// Checks d<op(x_k), R>/dx_k for every input slot k of `op`.
inline std::vector<CheckResult> check_op(const std::string& name, const std::vector<Tensor>& inputs,
                                         const std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>& op,
                                         std::uint64_t seed, const Tamper& tamper = {}) {
  std::vector<CheckResult> out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    detail::Probe probe(seed);
    auto f = [&](ad::Tape& t, ad::Var x) {
      std::vector<ad::Var> vars;
      for (std::size_t j = 0; j < inputs.size(); ++j) vars.push_back(j == k ? x : t.constant(inputs[j]));
      return probe.contract(op(t, vars));
    };
    const std::string label = inputs.size() == 1 ? name : name + " d/dx" + std::to_string(k);
    out.push_back(fd_result(label, ad::finite_diff_check(f, inputs[k], kFdStep, tamper)));
  }
  return out;
}

inline std::vector<CheckResult> primitive_gradients(std::uint64_t seed = 1, const Tamper& tamper = {}) {
  using namespace ad;
  Rng rng = make_rng(seed, "primitives");
  std::vector<CheckResult> all;
  auto add_checks = [&](std::vector<CheckResult> r) { all.insert(all.end(), r.begin(), r.end()); };
  const Shape s3 = {2, 3, 3};
  auto r3 = [&] { return random_tensor(s3, rng); };

  add_checks(check_op("add", {r3(), r3()}, [](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); }, seed, tamper));
  add_checks(check_op("sub", {r3(), r3()}, [](Tape&, const std::vector<Var>& v) { return sub(v[0], v[1]); }, seed, tamper));
  add_checks(check_op("mul", {r3(), r3()}, [](Tape&, const std::vector<Var>& v) { return mul(v[0], v[1]); }, seed, tamper));
  add_checks(check_op("scale", {r3()}, [](Tape&, const std::vector<Var>& v) { return scale(v[0], -1.7); }, seed, tamper));
  add_checks(check_op("neg", {r3()}, [](Tape&, const std::vector<Var>& v) { return neg(v[0]); }, seed, tamper));
  add_checks(check_op("scale_by", {random_tensor({3}, rng), r3()},
                      [](Tape&, const std::vector<Var>& v) { return scale_by(v[0], 1, v[1]); }, seed, tamper));
  add_checks(check_op("sum", {r3()}, [](Tape&, const std::vector<Var>& v) { return sum(v[0]); }, seed, tamper));
  add_checks(check_op("square_sum", {r3()}, [](Tape&, const std::vector<Var>& v) { return square_sum(v[0]); }, seed, tamper));
  add_checks(check_op("tanh", {r3()}, [](Tape&, const std::vector<Var>& v) { return tanh(v[0]); }, seed, tamper));
  add_checks(check_op("exp", {r3()}, [](Tape&, const std::vector<Var>& v) { return exp(v[0]); }, seed, tamper));
  add_checks(check_op("conv2d same", {random_tensor({2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)},
                      [](Tape&, const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], Padding::same); }, seed, tamper));
  add_checks(check_op("conv2d same even kernel",
                      {random_tensor({2, 6, 6}, rng), random_tensor({2, 2, 4, 4}, rng), random_tensor({2}, rng)},
                      [](Tape&, const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], Padding::same); }, seed, tamper));
  add_checks(check_op("conv2d valid", {random_tensor({2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)},
                      [](Tape&, const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], Padding::valid); }, seed, tamper));
  add_checks(check_op("transpose_conv2d", {random_tensor({2, 3, 3}, rng), random_tensor({2, 2, 4, 4}, rng)},
                      [](Tape&, const std::vector<Var>& v) { return transpose_conv2d(v[0], v[1]); }, seed, tamper));
  add_checks(check_op("maxpool2", {random_tensor({2, 4, 4}, rng)}, [](Tape&, const std::vector<Var>& v) { return maxpool2(v[0]); },
                      seed, tamper));
  add_checks(check_op("softmax_pixelwise", {r3()}, [](Tape&, const std::vector<Var>& v) { return softmax_pixelwise(v[0]); }, seed,
                      tamper));
  add_checks(check_op("log_softmax_pixelwise", {r3()},
                      [](Tape&, const std::vector<Var>& v) { return log_softmax_pixelwise(v[0]); }, seed, tamper));
  const Tensor labels = random_mask(3, 3, rng);
  add_checks(check_op("pixel_nll_sum", {r3()},
                      [&](Tape&, const std::vector<Var>& v) { return pixel_nll_sum(log_softmax_pixelwise(v[0]), labels); }, seed,
                      tamper));
  add_checks(check_op("potts_compat", {r3()}, [](Tape&, const std::vector<Var>& v) { return potts_compat(v[0]); }, seed, tamper));
  add_checks(check_op("mean_of", {r3(), r3(), r3()}, [](Tape&, const std::vector<Var>& v) { return mean_of(v); }, seed, tamper));
  add_checks(check_op("log_mean_exp", {r3(), r3(), r3()}, [](Tape&, const std::vector<Var>& v) { return log_mean_exp(v); }, seed,
                      tamper));
  add_checks(check_op("weighted_sum", {random_tensor({3}, rng), r3(), r3(), r3()},
                      [](Tape&, const std::vector<Var>& v) {
                        return weighted_sum({v[1], v[2], v[3]}, v[0]);
                      },
                      seed, tamper));
  add_checks(check_op("multiscale_unary", {random_tensor({4}, rng), r3(), r3(), r3(), r3()},
                      [](Tape&, const std::vector<Var>& v) {
                        return multiscale_unary({v[1], v[2], v[3], v[4]}, v[0]);
                      },
                      seed, tamper));

  const Tensor image = random_tensor({1, 4, 4}, rng, 0.0, 1.0);
  const Bandwidths bw{0.3, 1.5};
  auto op = std::make_shared<const MessageOperator>(MessageOperator::factored(image, bw));
  const Shape s4 = {2, 4, 4};
  for (int m = 0; m < kNumKernels; ++m) {
    add_checks(check_op("kernel_message k" + std::to_string(m), {random_tensor(s4, rng, 0.0, 1.0)},
                        [&](Tape&, const std::vector<Var>& v) { return kernel_message(v[0], op, m); }, seed, tamper));
  }
  add_checks(check_op("meanfield_step",
                      {ad::detail::softmax_channels(random_tensor(s4, rng)), random_tensor(s4, rng), random_tensor({2}, rng, 0.1, 1.0)},
                      [&](Tape&, const std::vector<Var>& v) { return meanfield_step(v[0], v[1], op, v[2]).q; }, seed, tamper));
  add_checks(check_op("crf_infer 3 steps", {random_tensor(s4, rng), random_tensor({2}, rng, 0.1, 1.0)},
                      [&](Tape&, const std::vector<Var>& v) { return crf_infer(v[0], op, v[1], 3).q; }, seed, tamper));
  return all;
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

/// A miniature instance of a variant on an 8x8 frame: narrow sub-nets,
/// a random image with CRF kernels and a random mask.
struct MiniInstance {
  Model model;
  Tensor prior_bias;
  PreparedSample sample;
};

inline MiniInstance mini_instance(Variant v, std::uint64_t seed) {
  constexpr int size = 8;
  Rng rng = make_rng(seed, "mini");
  MiniInstance mi;
  mi.model.variant = v;
  const int scales = is_multiscale(v) ? kNumScales : 1;
  for (int s = 1; s <= scales; ++s) {
    FcnConfig c{"fcn" + std::to_string(s), {{{2, 2 + s % 2}, {2, 3}, {3, 2 + s % 3}}}, kNumLabels, size};
    mi.model.configs.push_back(c);
    mi.model.nets.push_back(init_params(c, derive_seed(seed, "init", static_cast<std::uint64_t>(s))));
  }
  mi.model.scale.w = random_tensor({kNumScales}, rng, 0.15, 0.35);
  mi.model.crf.kernel_weights = random_tensor({kNumKernels}, rng, 0.05, 0.2);
  mi.model.crf.t_train = 3;
  mi.model.crf.t_test = 3;
  mi.model.bandwidths = {0.3, 1.0};
  // Make every parameter non-trivial so no gradient entry is structurally tiny.
  mi.model.for_each_param([&](const std::string& name, Tensor& t) {
    if (name.ends_with(".b")) t = random_tensor(t.shape(), rng, -0.3, 0.3);
  });
  mi.prior_bias = PositionPrior{random_tensor({size, size}, rng, 0.2, 0.8)}.log_bias();
  const Tensor image = quantize_8bit(random_tensor({1, size, size}, rng, 0.0, 1.0));
  mi.sample.input = random_tensor({1, size, size}, rng, -1.5, 1.5);
  mi.sample.kernels = std::make_shared<const MessageOperator>(MessageOperator::factored(image, mi.model.bandwidths));
  mi.sample.mask = random_mask(size, size, rng);
  return mi;
}

using LossBuilder = std::function<ad::Var(const BoundModel&, ad::Var image)>;

/// Central differences of `loss` w.r.t. every learnable parameter tensor and
/// the input image, against a single backward pass.
inline std::vector<CheckResult> check_composite(const std::string& name, const MiniInstance& mi, const LossBuilder& loss,
                                                const Tamper& tamper = {}) {
  ad::Gradients analytic;
  {
    ad::Tape tape;
    BoundModel b = bind(tape, mi.model, mi.prior_bias, true);
    ad::Var image = tape.leaf(mi.sample.input, "image");
    analytic = tape.backward(loss(b, image));
  }
  auto evaluate = [&](const Model& m, const Tensor& input) {
    ad::Tape tape;
    BoundModel b = bind(tape, m, mi.prior_bias, false);
    return tape.value(loss(b, tape.constant(input))).item();
  };

  std::vector<CheckResult> out;
  auto compare = [&](const std::string& label, Tensor grad, const std::function<double(std::size_t, double)>& shifted) {
    if (tamper) tamper(grad);
    ad::GradCheckResult r;
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double numeric = (shifted(i, kFdStep) - shifted(i, -kFdStep)) / (2.0 * kFdStep);
      const double err = ad::relative_error(grad[i], numeric);
      if (i == 0 || err > r.max_rel_error) r = {err, i, grad[i], numeric};
    }
    out.push_back(fd_result(name + " d/" + label, r));
  };

  Model probe = mi.model;
  std::vector<std::string> names;
  mi.model.for_each_param([&](const std::string& n, const Tensor&) { names.push_back(n); });
  for (const std::string& pname : names) {
    compare(pname, analytic.at(pname), [&](std::size_t i, double h) {
      double* entry = nullptr;
      probe.for_each_param([&](const std::string& n, Tensor& t) {
        if (n == pname) entry = &t[i];
      });
      const double saved = *entry;
      *entry = saved + h;
      const double v = evaluate(probe, mi.sample.input);
      *entry = saved;
      return v;
    });
  }
  compare("image", analytic.at("image"), [&](std::size_t i, double h) {
    Tensor in = mi.sample.input;
    in[i] += h;
    return evaluate(mi.model, in);
  });
  return out;
}

inline std::vector<CheckResult> composite_gradients(std::uint64_t seed = 1, const Tamper& tamper = {}) {
  std::vector<CheckResult> all;
  auto add_checks = [&](std::vector<CheckResult> r) { all.insert(all.end(), r.begin(), r.end()); };
  constexpr double lambda = 0.5;

  for (Variant v : {Variant::fcn, Variant::fcn_crf, Variant::multi_fcn_crf}) {
    const MiniInstance mi = mini_instance(v, seed);
    add_checks(check_composite(std::string(to_string(v)), mi,
                               [&](const BoundModel& b, ad::Var image) { return image_nll(b, image, mi.sample, 3); }, tamper));
  }
  // Adversarial composites: the total objective with the perturbation held fixed.
  for (Variant v : {Variant::adv_fcn_crf, Variant::adv_multi_fcn_crf}) {
    const MiniInstance mi = mini_instance(v, seed);
    const Tensor r = perturbation(input_gradient(mi.model, mi.prior_bias, mi.sample, 3), 0.5);
    add_checks(check_composite(std::string(to_string(v)), mi,
                               [&](const BoundModel& b, ad::Var image) {
                                 ad::Tape& t = *image.tape;
                                 const ad::Var shifted = ad::add(image, t.constant(r));
                                 const ad::Var data = ad::add(image_nll(b, shifted, mi.sample, 3), image_nll(b, image, mi.sample, 3));
                                 std::vector<ad::Var> params;
                                 for (const FcnVars& n : b.nets)
                                   for (ad::Var p : {n.conv1_w, n.conv1_b, n.conv2_w, n.conv2_b, n.conv3_w, n.conv3_b, n.tconv_w})
                                     params.push_back(p);
                                 if (is_multiscale(b.model->variant)) params.push_back(b.scale);
                                 params.push_back(b.crf_w);
                                 ad::Var reg = ad::square_sum(params.front());
                                 for (std::size_t i = 1; i < params.size(); ++i) reg = ad::add(reg, ad::square_sum(params[i]));
                                 return ad::add(data, ad::scale(reg, lambda / 2.0));
                               },
                               tamper));
  }
  return all;
}

// ---------------------------------------------------------------------------
// CRF invariants
// ---------------------------------------------------------------------------

/// Zero kernel weights: crf_infer equals softmax(-unary) bit for bit, 1..10 steps.
inline CheckResult crf_zero_coupling(std::uint64_t seed = 1) {
  Rng rng = make_rng(seed, "zero-coupling");
  const Tensor image = quantize_8bit(random_tensor({1, 6, 6}, rng, 0.0, 1.0));
  auto op = std::make_shared<const MessageOperator>(MessageOperator::factored(image, Bandwidths{}));
  const Tensor unary = random_tensor({2, 6, 6}, rng, -3.0, 3.0);
  double worst = 0.0;
  for (int steps = 1; steps <= 10; ++steps) {
    ad::Tape t;
    const Tensor q = t.value(crf_infer(t.constant(unary), op, t.constant(Tensor({kNumKernels}, 0.0)), steps).q);
    const Tensor expect = meanfield_init(unary);
    worst = std::max(worst, max_abs_diff(q, expect));
  }
  return {"crf zero coupling equals unary softmax (1-10 steps)", worst == 0.0, worst, 0.0, "max |diff|"};
}

/// Largest per-pixel deviation of sum_l Q_i(l) from 1 over every step.
inline CheckResult crf_normalization(std::uint64_t seed = 1) {
  Rng rng = make_rng(seed, "normalization");
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor image = quantize_8bit(random_tensor({1, 10, 10}, rng, 0.0, 1.0));
    auto op = std::make_shared<const MessageOperator>(MessageOperator::factored(image, Bandwidths{}));
    const Tensor unary = random_tensor({2, 10, 10}, rng, -4.0, 4.0);
    const Tensor w = random_tensor({kNumKernels}, rng, 0.0, 2.0);
    ad::Tape t;
    ad::Var u = t.constant(unary);
    MeanField mf{meanfield_init(u), ad::neg(u)};
    for (int s = 0; s < 10; ++s) {
      mf = meanfield_step(mf.q, u, op, t.constant(w));
      const Tensor& q = t.value(mf.q);
      const std::size_t plane = q.size() / 2;
      for (std::size_t i = 0; i < plane; ++i) worst = std::max(worst, std::abs(q[i] + q[plane + i] - 1.0));
    }
  }
  return {"crf per-pixel normalization after every step", worst <= 1e-9, worst, 1e-9, "max |sum Q - 1|"};
}

struct OracleAgreement {
  int instances = 0;
  int agree = 0;
  double rate() const { return instances == 0 ? 0.0 : static_cast<double>(agree) / instances; }
};

/// Mean-field (t steps) argmax vs exact-enumeration argmax on random 2x2
/// instances with kernel weights in [0,1].
inline OracleAgreement crf_exact_agreement(int instances = 100, int steps = 10, std::uint64_t seed = 1) {
  Rng rng = make_rng(seed, "exact-oracle");
  OracleAgreement a;
  for (int n = 0; n < instances; ++n) {
    const Tensor image = random_tensor({1, 2, 2}, rng, 0.0, 1.0);
    const Bandwidths bw;  // the run defaults
    const KernelMatrices km = build_kernels(image, bw);
    const Tensor unary = random_tensor({2, 2, 2}, rng, -2.0, 2.0);
    const Tensor w = random_tensor({kNumKernels}, rng, 0.0, 1.0);
    const Tensor exact = exact_marginals(unary, km, w);
    ad::Tape t;
    auto op = std::make_shared<const MessageOperator>(MessageOperator::dense(km));
    const Tensor q = t.value(crf_infer(t.constant(unary), op, t.constant(w), steps).q);
    bool same = true;
    for (std::size_t i = 0; i < 4; ++i) same = same && ((q[4 + i] > 0.5) == (exact[4 + i] > 0.5));
    ++a.instances;
    if (same) ++a.agree;
  }
  return a;
}

inline CheckResult crf_exact_oracle(std::uint64_t seed = 1) {
  const OracleAgreement a = crf_exact_agreement(100, 10, seed);
  return {"crf mean-field argmax vs exact enumeration (100 2x2 instances)", a.rate() >= 0.9, a.rate(), 0.9,
          std::to_string(a.agree) + "/" + std::to_string(a.instances) + " agree"};
}

// ---------------------------------------------------------------------------
// Perturbation contract
// ---------------------------------------------------------------------------

inline std::vector<CheckResult> perturbation_contract(std::uint64_t seed = 1) {
  Rng rng = make_rng(seed, "perturbation");
  double norm_err = 0.0, inner_err = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_real_distribution<double> mag(-8.0, 4.0);
    const Tensor g = map(random_tensor({1, 40, 40}, rng), [&](double v) { return v * std::pow(10.0, mag(rng)); });
    for (double eps : {kEpsilonSharpBoundaries, kEpsilonSmoothBoundaries, 1.7}) {
      const Tensor r = perturbation(g, eps);
      const double gn = std::sqrt(squared_norm(g));
      norm_err = std::max(norm_err, std::abs(std::sqrt(squared_norm(r)) - eps));
      inner_err = std::max(inner_err, std::abs(dot(r, g) + eps * gn) / (eps * gn));
    }
  }
  return {{"perturbation norm equals epsilon", norm_err <= 1e-12, norm_err, 1e-12, "max | ||R|| - eps |"},
          {"perturbation opposes the gradient", inner_err <= 1e-12, inner_err, 1e-12, "max relative |<R,g> + eps||g|||"}};
}

}  // namespace advseg::check
