#include <gtest/gtest.h>

#include "advseg/adversarial.hpp"
#include "advseg/config.hpp"
#include "advseg/selftest.hpp"

using namespace advseg;

TEST(Perturbation, HandExample) {
  const Tensor r = perturbation(Tensor({2}, std::vector<double>{3.0, 4.0}), 0.1);
  EXPECT_NEAR(r[0], -0.06, 1e-15);
  EXPECT_NEAR(r[1], -0.08, 1e-15);
}

TEST(Perturbation, ZeroGradientGivesZero) {
  EXPECT_EQ(perturbation(Tensor({3, 3}, 0.0), 0.5), Tensor({3, 3}, 0.0));
  EXPECT_EQ(perturbation(Tensor({2}, 1e-13), 0.5), Tensor({2}, 0.0));
  EXPECT_THROW(perturbation(Tensor({2}, 1.0), -0.1), ContractError);
}

TEST(Perturbation, NormAndDirectionContract) {
  for (const check::CheckResult& r : check::perturbation_contract(3)) EXPECT_TRUE(r.pass) << r.name << " " << r.detail;
}

TEST(Perturbation, ZeroEpsilonIsExactlyClean) {
  Rng rng = make_rng(1, "t");
  const Tensor x = check::random_tensor({1, 5, 5}, rng);
  const Tensor g = check::random_tensor({1, 5, 5}, rng);
  EXPECT_EQ(x + perturbation(g, 0.0), x);
}

TEST(InputGradient, ZeroWeightModelHasZeroGradient) {
  check::MiniInstance mi = check::mini_instance(Variant::fcn, 1);
  mi.model.for_each_param([](const std::string&, Tensor& t) { t.fill(0.0); });
  const Tensor g = input_gradient(mi.model, mi.prior_bias, mi.sample, 0);
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(InputGradient, PerturbationLowersLikelihood) {
  for (Variant v : {Variant::fcn, Variant::fcn_crf, Variant::multi_fcn_crf}) {
    const check::MiniInstance mi = check::mini_instance(v, 2);
    const std::vector<PreparedSample> batch = {mi.sample};
    const double clean = clean_loss(mi.model, mi.prior_bias, batch, 3);
    EXPECT_GT(adversarial_loss(mi.model, mi.prior_bias, batch, 0.05, 3), clean) << to_string(v);
    EXPECT_EQ(adversarial_loss(mi.model, mi.prior_bias, batch, 0.0, 3), clean) << to_string(v);
  }
}

TEST(TotalLoss, Decomposition) {
  const check::MiniInstance mi = check::mini_instance(Variant::adv_fcn_crf, 4);
  const std::vector<PreparedSample> batch = {mi.sample};
  AdvConfig cfg;
  cfg.epsilon = 0.0;
  cfg.lambda = 0.0;
  const double clean = clean_loss(mi.model, mi.prior_bias, batch, 3);
  EXPECT_EQ(total_loss(mi.model, mi.prior_bias, batch, cfg, 3), 2.0 * clean);
  cfg.lambda = 0.5;
  EXPECT_NEAR(total_loss(mi.model, mi.prior_bias, batch, cfg, 3), 2.0 * clean + 0.25 * l2_penalty(mi.model), 1e-9);
}

TEST(TotalLoss, BatchGradientMatchesTapeObjective) {
  for (Variant v : {Variant::adv_fcn, Variant::adv_fcn_crf, Variant::adv_multi_fcn_crf}) {
    check::MiniInstance mi = check::mini_instance(v, 5);
    mi.model.crf.t_train = 3;
    check::MiniInstance other = check::mini_instance(v, 6);
    const std::vector<PreparedSample> batch = {mi.sample, other.sample};
    const double eps = 0.3, lambda = 0.5;

    std::vector<Tensor> rs;
    for (const PreparedSample& s : batch) rs.push_back(perturbation(input_gradient(mi.model, mi.prior_bias, s, 3), eps));
    ad::Tape tape;
    BoundModel b = bind(tape, mi.model, mi.prior_bias, true);
    ad::Var obj = total_loss_on_tape(b, batch, rs, lambda, 3);
    const double expect = tape.value(obj).item();
    const ad::Gradients g = tape.backward(obj);

    const BatchResult r = batch_gradient(mi.model, mi.prior_bias, {&batch[0], &batch[1]}, eps, lambda);
    EXPECT_NEAR(r.objective, expect, 1e-9 * std::abs(expect));
    AdvConfig cfg;
    cfg.epsilon = eps;
    cfg.lambda = lambda;
    EXPECT_NEAR(total_loss(mi.model, mi.prior_bias, batch, cfg, 3), expect, 1e-9 * std::abs(expect));
    for (const auto& [name, grad] : r.grads)
      for (std::size_t i = 0; i < grad.size(); ++i) ASSERT_NEAR(grad[i], g.at(name)[i], 1e-9 * (1.0 + std::abs(grad[i]))) << name;
  }
}

TEST(TotalLoss, CompositeGradientsMatchFiniteDifferences) {
  for (const check::CheckResult& r : check::composite_gradients(7)) {
    if (!r.name.starts_with("adv_")) continue;
    EXPECT_TRUE(r.pass) << r.name << " " << r.detail;
  }
}

TEST(Adam, FirstStepIsSignTimesRate) {
  Model m;
  m.variant = Variant::fcn_crf;
  m.crf.kernel_weights = Tensor({3}, 0.0);
  TrainState s = make_train_state(m);
  adam_step(s, {{"crf.w", Tensor({3}, std::vector<double>{0.3, -2.0, 1e-3})}}, 0.003);
  // After one step mhat = g and vhat = g^2, so the update is -lr * g / (|g| + 1e-8).
  EXPECT_NEAR(s.model.crf.kernel_weights[0], -0.003 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(s.model.crf.kernel_weights[1], 0.003 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_NEAR(s.model.crf.kernel_weights[2], -0.003 * 1e-3 / (1e-3 + 1e-8), 1e-15);
  EXPECT_NEAR(s.model.crf.kernel_weights[2], -0.0029999700003, 1e-12);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  const check::MiniInstance mi = check::mini_instance(Variant::multi_fcn_crf, 1);
  TrainState s = make_train_state(mi.model);
  std::map<std::string, Tensor> zero;
  for (const auto& [name, t] : mi.model.parameters()) zero.emplace(name, Tensor(t.shape()));
  adam_step(s, zero, 0.003);
  EXPECT_EQ(s.model, mi.model);
}

TEST(Adam, RejectsMismatchedKeys) {
  const check::MiniInstance mi = check::mini_instance(Variant::fcn_crf, 1);
  TrainState s = make_train_state(mi.model);
  std::map<std::string, Tensor> grads = mi.model.parameters();
  grads.erase("crf.w");
  EXPECT_THROW(adam_step(s, grads, 0.003), ContractError);
  grads = mi.model.parameters();
  grads.emplace("bogus", Tensor({1}, 0.0));
  EXPECT_THROW(adam_step(s, grads, 0.003), ContractError);
  grads = mi.model.parameters();
  grads.at("crf.w") = Tensor({5}, 0.0);
  EXPECT_THROW(adam_step(s, grads, 0.003), ShapeError);
  EXPECT_EQ(s.step, 0);
}

TEST(Config, Defaults) {
  const RunConfig c;
  EXPECT_EQ(c.train.learning_rate, 0.003);
  EXPECT_EQ(c.train.lambda, 0.5);
  EXPECT_EQ(kEpsilonSharpBoundaries, 0.1);
  EXPECT_EQ(kEpsilonSmoothBoundaries, 0.5);
  EXPECT_EQ(c.model.crf_steps_train, 5);
  EXPECT_EQ(c.model.crf_steps_test, 10);
  EXPECT_EQ(c.data.gen.size, 40);
  EXPECT_EQ(kAugmentationFactor, 4);
  EXPECT_TRUE(c.augment);
  EXPECT_EQ(c.train.epochs, 300);
}

namespace {

struct TinyRun {
  PreparedData data;
  AdvConfig cfg;
  ModelConfig mc;
};

TinyRun tiny_run(Variant v, double epsilon) {
  GenSpec spec;
  spec.count = 6;
  spec.seed = 3;
  const std::vector<Sample> all = generate(spec);
  TinyRun r;
  r.mc.width_divisor = 64;
  r.data = prepare({all.begin(), all.begin() + 4}, {all.begin() + 4, all.end()}, r.mc.bandwidths, false);
  r.cfg.variant = v;
  r.cfg.epsilon = epsilon;
  r.cfg.epochs = 2;
  r.cfg.batch_size = 2;
  r.cfg.seed = 9;
  return r;
}

TrainState run(Variant v, double epsilon, std::vector<EpochRecord>* history = nullptr) {
  TinyRun r = tiny_run(v, epsilon);
  TrainState s = make_train_state(make_model(v, r.mc, r.cfg.seed));
  auto h = train(s, r.data, r.cfg);
  if (history) *history = h;
  return s;
}

}  // namespace

TEST(Training, ZeroEpsilonReproducesCleanVariantBitExactly) {
  for (auto [adv, clean] : {std::pair{Variant::adv_fcn, Variant::fcn}, std::pair{Variant::adv_fcn_crf, Variant::fcn_crf}}) {
    std::vector<EpochRecord> ha, hc;
    const TrainState a = run(adv, 0.0, &ha), c = run(clean, 0.0, &hc);
    EXPECT_EQ(a.model.nets, c.model.nets) << to_string(adv);
    EXPECT_EQ(a.model.crf, c.model.crf);
    EXPECT_EQ(a.m, c.m);
    EXPECT_EQ(a.v, c.v);
    ASSERT_EQ(ha.size(), hc.size());
    for (std::size_t i = 0; i < ha.size(); ++i) {
      EXPECT_EQ(ha[i].objective, hc[i].objective);
      EXPECT_EQ(ha[i].test->dice, hc[i].test->dice);
    }
  }
}

TEST(Training, PositiveEpsilonChangesTrajectory) {
  EXPECT_NE(run(Variant::adv_fcn, 0.5).model.nets, run(Variant::fcn, 0.5).model.nets);
}

TEST(Training, DeterministicAndResumable) {
  const TrainState full = run(Variant::fcn_crf, 0.1);
  EXPECT_EQ(full, run(Variant::fcn_crf, 0.1));

  TinyRun r = tiny_run(Variant::fcn_crf, 0.1);
  TrainState s = make_train_state(make_model(Variant::fcn_crf, r.mc, r.cfg.seed));
  AdvConfig first = r.cfg;
  first.epochs = 1;
  train(s, r.data, first);
  EXPECT_EQ(s.epoch, 1);
  TrainState copy = s;
  train(copy, r.data, r.cfg);
  EXPECT_EQ(copy, full);
}

TEST(Training, RejectsVariantMismatch) {
  TinyRun r = tiny_run(Variant::fcn, 0.1);
  TrainState s = make_train_state(make_model(Variant::fcn_crf, r.mc, 1));
  EXPECT_THROW(train(s, r.data, r.cfg), ContractError);
}

TEST(Training, DivergenceKeepsLastGoodState) {
  TinyRun r = tiny_run(Variant::fcn, 0.1);
  TrainState s = make_train_state(make_model(Variant::fcn, r.mc, 1));
  s.model.nets[0].conv1_b[0] = std::numeric_limits<double>::infinity();
  const TrainState start = s;
  try {
    train(s, r.data, r.cfg);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.last_good(), start);
  }
}

TEST(EpochOrder, SeededPermutation) {
  const auto a = epoch_order(20, 1, 1);
  EXPECT_EQ(a, epoch_order(20, 1, 1));
  EXPECT_NE(a, epoch_order(20, 1, 2));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Variants, ZeroCrfWeightsMatchFcnPredictions) {
  TinyRun r = tiny_run(Variant::fcn, 0.1);
  const Model fcn = make_model(Variant::fcn, r.mc, 3);
  Model crf = make_model(Variant::fcn_crf, r.mc, 3);
  crf.crf.kernel_weights.fill(0.0);
  for (const PreparedSample& s : r.data.test)
    EXPECT_EQ(predict(fcn, r.data.prior_bias, s), predict(crf, r.data.prior_bias, s));
}

TEST(AdversarialLoss, ExceedsCleanOnHeldOutSamples) {
  GenSpec spec;
  spec.count = 28;
  spec.seed = 8;
  const auto all = generate(spec);
  ModelConfig mc;
  mc.width_divisor = 64;
  const PreparedData d = prepare({all.begin(), all.begin() + 8}, {all.begin() + 8, all.end()}, mc.bandwidths, false);
  AdvConfig cfg;
  cfg.variant = Variant::fcn;
  cfg.epochs = 10;
  TrainState s = make_train_state(make_model(Variant::fcn, mc, 1));
  train(s, d, cfg);
  int higher = 0;
  for (const PreparedSample& x : d.test)
    higher += adversarial_loss(s.model, d.prior_bias, {x}, 0.05, 0) >= clean_loss(s.model, d.prior_bias, {x}, 0) ? 1 : 0;
  EXPECT_GE(higher, 18) << higher << "/20";
}
