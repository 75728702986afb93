// Acceptance run: one PASS/FAIL line per criterion, followed by the numbers
// behind it. Exit status is the number of failed criteria.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <numeric>

#include "advseg/adversarial.hpp"
#include "advseg/config.hpp"
#include "advseg/selftest.hpp"
#include "oracles.hpp"

using namespace advseg;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& what, bool pass, const std::string& detail) {
  std::printf("%s criterion %d: %s | %s\n", pass ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += pass ? 0 : 1;
}

std::string num(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

void criterion_gradients() {
  const auto t0 = Clock::now();
  std::vector<check::CheckResult> all = check::primitive_gradients(1);
  for (auto& r : check::composite_gradients(1)) all.push_back(r);
  const double secs = seconds_since(t0);
  int bad = 0;
  double worst = 0.0;
  for (const auto& r : all) {
    bad += r.pass ? 0 : 1;
    worst = std::max(worst, r.measured);
    if (!r.pass) std::printf("  failed: %s (%s)\n", r.name.c_str(), r.detail.c_str());
  }
  report(1, "finite-difference gradients, step 1e-5, rel err < 1e-4", bad == 0 && secs < 120.0,
         std::to_string(all.size() - bad) + "/" + std::to_string(all.size()) + " checks, worst rel err " + num(worst) + ", " +
             num(secs, 3) + " s");
}

void criterion_crf() {
  const auto zero = check::crf_zero_coupling();
  const auto norm = check::crf_normalization();
  const auto agree = check::crf_exact_agreement(100, 10, 1);
  report(2, "mean-field CRF invariants and exact-marginal agreement",
         zero.pass && norm.pass && agree.rate() >= 0.9,
         "zero-weight max diff " + num(zero.measured) + ", normalization max err " + num(norm.measured) +
             ", argmax agreement " + std::to_string(agree.agree) + "/" + std::to_string(agree.instances));
}

struct Tiny {
  PreparedData data;
  ModelConfig mc;
};

Tiny tiny_data() {
  GenSpec spec;
  spec.count = 6;
  spec.seed = 3;
  const auto all = generate(spec);
  Tiny t;
  t.mc.width_divisor = 64;
  t.data = prepare({all.begin(), all.begin() + 4}, {all.begin() + 4, all.end()}, t.mc.bandwidths, false);
  return t;
}

void criterion_adversarial() {
  const auto contract = check::perturbation_contract(1);
  // perturbation_contract returns {norm check, direction check}.
  const bool ok = contract[0].pass && contract[1].pass;
  const double norm_err = contract[0].measured, dir_err = contract[1].measured;
  const Tiny t = tiny_data();
  int identical = 0;
  const std::vector<std::pair<Variant, Variant>> pairs = {{Variant::adv_fcn, Variant::fcn},
                                                          {Variant::adv_fcn_crf, Variant::fcn_crf},
                                                          {Variant::adv_multi_fcn, Variant::multi_fcn},
                                                          {Variant::adv_multi_fcn_crf, Variant::multi_fcn_crf}};
  for (auto [adv, clean] : pairs) {
    AdvConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.epsilon = 0.0;
    cfg.variant = adv;
    TrainState a = make_train_state(make_model(adv, t.mc, 7));
    const auto ha = train(a, t.data, cfg);
    cfg.variant = clean;
    TrainState c = make_train_state(make_model(clean, t.mc, 7));
    const auto hc = train(c, t.data, cfg);
    const bool same = a.model.nets == c.model.nets && a.model.scale == c.model.scale && a.model.crf == c.model.crf &&
                      a.m == c.m && a.v == c.v && ha.back().objective == hc.back().objective;
    identical += same ? 1 : 0;
  }
  report(3, "perturbation norm and direction, epsilon 0 bit-identity",
         ok && identical == static_cast<int>(pairs.size()),
         std::to_string(contract.size()) + " contract checks (max norm err " + num(norm_err) + ", max inner-product err " +
             num(dir_err) + "), " + std::to_string(identical) + "/" + std::to_string(pairs.size()) +
             " variant pairs bit-identical at epsilon 0");
}

void criterion_metrics() {
  Rng rng = make_rng(2024, "acceptance");
  int dice_ok = 0, band_ok = 0;
  for (int i = 0; i < 1000; ++i) {
    const Tensor a = check::random_mask(8, 8, rng), b = check::random_mask(8, 8, rng);
    dice_ok += dice(a, b) == oracle::dice(a, b) ? 1 : 0;
    bool all_w = true;
    for (int w = 1; w <= kTrimapWidths; ++w) all_w = all_w && trimap_accuracy(a, b, w) == oracle::band_accuracy(a, b, w);
    band_ok += all_w ? 1 : 0;
  }
  std::vector<std::uint8_t> x, y;
  for (int i = 0; i < 10; ++i) x.push_back(1), y.push_back(0);
  for (int i = 0; i < 2; ++i) x.push_back(0), y.push_back(1);
  const double p = mcnemar_pvalue(x, y);
  report(4, "Dice and trimap recounts, McNemar b=10 c=2",
         dice_ok == 1000 && band_ok == 1000 && std::abs(p - 0.0433) <= 1e-3,
         "Dice " + std::to_string(dice_ok) + "/1000, trimap " + std::to_string(band_ok) + "/1000, McNemar p " + num(p, 10));
}

void criterion_defaults() {
  const RunConfig c;
  const bool ok = c.train.learning_rate == 0.003 && c.train.lambda == 0.5 && kEpsilonSharpBoundaries == 0.1 &&
                  kEpsilonSmoothBoundaries == 0.5 && c.model.crf_steps_train == 5 && c.model.crf_steps_test == 10 &&
                  c.data.gen.size == 40 && kImageSize == 40 && kAugmentationFactor == 4 && c.augment &&
                  augment_flips(generate(GenSpec{})).size() == 4 * static_cast<std::size_t>(GenSpec{}.count);
  report(5, "default configuration", ok,
         "lr " + num(c.train.learning_rate) + ", lambda " + num(c.train.lambda) + ", epsilon presets {" +
             num(kEpsilonSharpBoundaries) + ", " + num(kEpsilonSmoothBoundaries) + "}, CRF steps " +
             std::to_string(c.model.crf_steps_train) + "/" + std::to_string(c.model.crf_steps_test) + ", input " +
             std::to_string(c.data.gen.size) + "x" + std::to_string(c.data.gen.size) + ", augmentation x" +
             std::to_string(kAugmentationFactor));
}

// Benchmark -----------------------------------------------------------------

constexpr int kBenchSeeds = 5;
constexpr int kBenchWidthDivisor = 128;
constexpr std::array<Variant, 3> kBenchVariants = {Variant::fcn, Variant::multi_fcn_crf, Variant::adv_multi_fcn_crf};

struct BenchResult {
  std::map<Variant, std::vector<SplitMetrics>> test;
  double seconds = 0.0;
};

double mean_dice(const std::vector<SplitMetrics>& v) {
  double s = 0.0;
  for (const auto& m : v) s += m.dice;
  return s / static_cast<double>(v.size());
}

double mean_trimap(const std::vector<SplitMetrics>& v, int width) {
  double s = 0.0;
  for (const auto& m : v) s += m.trimap[static_cast<std::size_t>(width - 1)].value_or(0.0);
  return s / static_cast<double>(v.size());
}

BenchResult run_benchmark() {
  const auto t0 = Clock::now();
  GenSpec spec;
  spec.seed = 42;
  spec.count = 300;
  const auto all = generate(spec);
  ModelConfig mc;
  mc.width_divisor = kBenchWidthDivisor;
  const PreparedData data = prepare({all.begin(), all.begin() + 200}, {all.begin() + 200, all.end()}, mc.bandwidths, false);
  std::printf("  benchmark: data seed 42, 200 train / 100 test, 300 epochs, width divisor %d, no augmentation\n",
              kBenchWidthDivisor);
  BenchResult r;
  for (int seed = 0; seed < kBenchSeeds; ++seed) {
    for (Variant v : kBenchVariants) {
      AdvConfig cfg;
      cfg.variant = v;
      cfg.seed = static_cast<std::uint64_t>(seed);
      cfg.eval_every = cfg.epochs;
      TrainState s = make_train_state(make_model(v, mc, cfg.seed));
      const auto t1 = Clock::now();
      std::optional<SplitMetrics> test;
      try {
        test = train(s, data, cfg).back().test;
      } catch (const TrainingDiverged& e) {
        std::printf("  %s seed %d diverged: %s\n", std::string(to_string(v)).c_str(), seed, e.what());
        test = summarize(evaluate(e.last_good().model, data.prior_bias, data.test));
      }
      std::printf("  seed %d %-18s test dice %.4f  trimap w1..3 %.4f %.4f %.4f  (%.0f s)\n", seed,
                  std::string(to_string(v)).c_str(), test->dice, test->trimap[0].value_or(0), test->trimap[1].value_or(0),
                  test->trimap[2].value_or(0), seconds_since(t1));
      std::fflush(stdout);
      r.test[v].push_back(*test);
    }
  }
  r.seconds = seconds_since(t0);
  return r;
}

void criterion_ordering(const BenchResult& b) {
  const double fcn = mean_dice(b.test.at(Variant::fcn));
  const double crf = mean_dice(b.test.at(Variant::multi_fcn_crf));
  const double adv = mean_dice(b.test.at(Variant::adv_multi_fcn_crf));
  const bool order = adv >= crf && crf >= fcn - 0.005;
  const bool fast = b.seconds < 30.0 * 60.0;
  report(6, "benchmark ordering adv_multi_fcn_crf >= multi_fcn_crf >= fcn - 0.005 in < 30 min", order && fast,
         "mean test Dice fcn " + num(fcn, 5) + ", multi_fcn_crf " + num(crf, 5) + ", adv_multi_fcn_crf " + num(adv, 5) +
             "; ordering " + (order ? "holds" : "violated") + "; runtime " + num(b.seconds / 60.0, 3) + " min");
}

void criterion_trimap(const BenchResult& b) {
  bool ok = true;
  std::string detail;
  for (int w = 1; w <= 3; ++w) {
    const double clean = mean_trimap(b.test.at(Variant::multi_fcn_crf), w);
    const double adv = mean_trimap(b.test.at(Variant::adv_multi_fcn_crf), w);
    ok = ok && adv >= clean - 0.01;
    detail += (w > 1 ? ", " : "") + std::string("w") + std::to_string(w) + " adv " + num(adv, 5) + " vs clean " + num(clean, 5);
  }
  report(7, "trimap accuracy, adversarial >= non-adversarial - 0.01 at widths 1-3", ok, detail);
}

}  // namespace

int main() {
  criterion_gradients();
  criterion_crf();
  criterion_adversarial();
  criterion_metrics();
  criterion_defaults();
  const BenchResult bench = run_benchmark();
  criterion_ordering(bench);
  criterion_trimap(bench);
  std::printf("%d of 7 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
