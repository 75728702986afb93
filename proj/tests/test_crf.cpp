#include <gtest/gtest.h>

#include <cmath>

#include "advseg/crf.hpp"
#include "advseg/selftest.hpp"

using namespace advseg;

namespace {

std::shared_ptr<const MessageOperator> factored(const Tensor& image, Bandwidths bw = {}) {
  return std::make_shared<const MessageOperator>(MessageOperator::factored(image, bw));
}

}  // namespace

TEST(Kernels, HandValues) {
  // Two pixels side by side with intensities 0 and 1, unit bandwidths.
  const KernelMatrices km = build_kernels(Tensor({1, 1, 2}, std::vector<double>{0.0, 1.0}), Bandwidths{1.0, 1.0});
  EXPECT_NEAR(km.k[kAppearanceKernel][1], 0.6065306597126334, 1e-15);
  EXPECT_NEAR(km.k[kPositionKernel][1], 0.6065306597126334, 1e-15);
  EXPECT_EQ(km.k[kAppearanceKernel][0], 0.0);
  EXPECT_EQ(km.k[kPositionKernel][3], 0.0);
}

TEST(Kernels, SymmetricZeroDiagonalUnitRange) {
  Rng rng = make_rng(1, "t");
  const KernelMatrices km = build_kernels(check::random_tensor({1, 4, 5}, rng, 0.0, 1.0), Bandwidths{});
  const int n = km.pixels();
  for (const Tensor& k : km.k)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double v = k[static_cast<std::size_t>(i * n + j)];
        EXPECT_EQ(v, k[static_cast<std::size_t>(j * n + i)]);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        if (i == j) {
          EXPECT_EQ(v, 0.0);
        }
      }
}

TEST(Kernels, RejectsBadBandwidth) {
  EXPECT_THROW(build_kernels(Tensor({1, 2, 2}), Bandwidths{0.0, 1.0}), ContractError);
}

TEST(MessageOperator, FactoredMatchesDense) {
  Rng rng = make_rng(2, "t");
  for (Bandwidths bw : {Bandwidths{}, Bandwidths{0.3, 1.5}}) {
    const Tensor image = quantize_8bit(check::random_tensor({1, 12, 9}, rng, 0.0, 1.0));
    const MessageOperator f = MessageOperator::factored(image, bw);
    const MessageOperator d = MessageOperator::dense(build_kernels(image, bw));
    const Tensor q = check::random_tensor({2, 12, 9}, rng, 0.0, 1.0);
    for (int m = 0; m < kNumKernels; ++m) {
      Tensor a({2, 12, 9}), b({2, 12, 9});
      f.apply(m, q.raw(), 2, a.raw());
      d.apply(m, q.raw(), 2, b.raw());
      EXPECT_LT(max_abs_diff(a, b), 1e-11) << "kernel " << m;
    }
  }
}

TEST(MeanField, InitExamples) {
  Tensor q = meanfield_init(Tensor({2, 1, 1}, 0.0));
  EXPECT_EQ(q[0], 0.5);
  q = meanfield_init(Tensor({2, 1, 1}, std::vector<double>{-std::log(0.9), -std::log(0.1)}));
  EXPECT_NEAR(q[0], 0.9, 1e-15);
  EXPECT_NEAR(q[1], 0.1, 1e-15);
}

TEST(MeanField, ZeroWeightsReturnUnarySoftmax) {
  Rng rng = make_rng(3, "t");
  const Tensor image = check::random_tensor({1, 3, 3}, rng, 0.0, 1.0);
  const Tensor unary = check::random_tensor({2, 3, 3}, rng, -2.0, 2.0);
  const Tensor q = meanfield_init(check::random_tensor({2, 3, 3}, rng));
  EXPECT_EQ(meanfield_step(q, unary, build_kernels(image, {}), Tensor({2}, 0.0)), meanfield_init(unary));
}

TEST(MeanField, OnePixelHasNoNeighbours) {
  const Tensor unary({2, 1, 1}, std::vector<double>{0.3, -0.4});
  const Tensor q({2, 1, 1}, std::vector<double>{0.2, 0.8});
  EXPECT_EQ(meanfield_step(q, unary, build_kernels(Tensor({1, 1, 1}, 0.5), {}), Tensor({2}, 1.0)), meanfield_init(unary));
}

TEST(MeanField, TwoPixelHandUnrolledStep) {
  // Intensities 0.2 / 0.5, unit bandwidths, weights (0.3, 0.7), one step from
  // the unary initialization; reference from an independent numpy unroll.
  const KernelMatrices km = build_kernels(Tensor({1, 1, 2}, std::vector<double>{0.2, 0.5}), Bandwidths{1.0, 1.0});
  const Tensor unary({2, 1, 2}, std::vector<double>{0.1, 1.2, 0.9, 0.4});
  const Tensor q = meanfield_step(meanfield_init(unary), unary, km, Tensor({2}, std::vector<double>{0.3, 0.7}));
  EXPECT_NEAR(q[0], 0.6294167400338312, 1e-14);
  EXPECT_NEAR(q[1], 0.3705832599661689, 1e-14);
  EXPECT_NEAR(q[2], 0.37058325996616887, 1e-14);
  EXPECT_NEAR(q[3], 0.6294167400338312, 1e-14);
}

TEST(CrfInfer, ZeroStepsIsInitialization) {
  Rng rng = make_rng(4, "t");
  const Tensor image = check::random_tensor({1, 4, 4}, rng, 0.0, 1.0);
  const Tensor unary = check::random_tensor({2, 4, 4}, rng);
  EXPECT_EQ(crf_infer(unary, image, CrfParams{}, Bandwidths{}, 0), meanfield_init(unary));
}

TEST(CrfInfer, ZeroCouplingExactForAnyStepCount) {
  const auto r = check::crf_zero_coupling(5);
  EXPECT_TRUE(r.pass) << r.measured;
}

TEST(CrfInfer, NormalizedAfterEveryStep) {
  const auto r = check::crf_normalization(6);
  EXPECT_TRUE(r.pass) << r.measured;
}

TEST(CrfInfer, StrongPositionKernelFlipsOutlier) {
  // 2x2, constant image, three mass-leaning pixels and one background-leaning.
  const Tensor image({1, 2, 2}, 0.5);
  const Tensor unary({2, 2, 2}, std::vector<double>{1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.5});
  const Tensor w({2}, std::vector<double>{0.0, 1.0});
  EXPECT_GT(meanfield_init(unary)[3], 0.5);
  CrfParams p;
  p.kernel_weights = w;
  const Tensor q = crf_infer(unary, image, p, Bandwidths{}, 10);
  EXPECT_GT(q[4 + 3], 0.5);
  EXPECT_NEAR(q[4 + 3], 0.9065010398782329, 1e-12);
  const Tensor exact = exact_marginals(unary, build_kernels(image, Bandwidths{}), w);
  EXPECT_NEAR(exact[4 + 3], 0.8143715274665152, 1e-12);
}

TEST(ExactMarginals, ZeroPairwiseIsUnarySoftmax) {
  Rng rng = make_rng(7, "t");
  const Tensor image = check::random_tensor({1, 2, 3}, rng, 0.0, 1.0);
  const Tensor unary = check::random_tensor({2, 2, 3}, rng);
  EXPECT_LT(max_abs_diff(exact_marginals(unary, build_kernels(image, {}), Tensor({2}, 0.0)), meanfield_init(unary)), 1e-15);
}

TEST(ExactMarginals, SymmetricInstanceSymmetricMarginals) {
  const Tensor image({1, 1, 2}, 0.4);
  const Tensor unary({2, 1, 2}, std::vector<double>{0.3, 0.3, -0.2, -0.2});
  const Tensor m = exact_marginals(unary, build_kernels(image, {}), Tensor({2}, 0.8));
  EXPECT_NEAR(m[0], m[1], 1e-15);
  EXPECT_NEAR(m[2], m[3], 1e-15);
}

TEST(ExactMarginals, TooLargeRejected) {
  EXPECT_THROW(exact_marginals(Tensor({2, 5, 4}), build_kernels(Tensor({1, 5, 4}), {}), Tensor({2}, 0.5)), ContractError);
}

TEST(ExactMarginals, MeanFieldAgreementRate) {
  const check::OracleAgreement a = check::crf_exact_agreement(100, 10, 1);
  RecordProperty("agreement_rate", std::to_string(a.rate()));
  std::cout << "mean-field vs exact argmax agreement: " << a.agree << "/" << a.instances << "\n";
  EXPECT_GE(a.rate(), 0.9);
}

TEST(CrfInfer, PermutationEquivariant) {
  // Transposing a square instance transposes the output.
  Rng rng = make_rng(8, "t");
  const Tensor image = quantize_8bit(check::random_tensor({1, 5, 5}, rng, 0.0, 1.0));
  const Tensor unary = check::random_tensor({2, 5, 5}, rng);
  auto transpose = [](const Tensor& t) {
    Tensor o = t;
    for (int c = 0; c < t.dim(0); ++c)
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) o.at(c, x, y) = t.at(c, y, x);
    return o;
  };
  CrfParams p;
  const Tensor a = crf_infer(unary, image, p, Bandwidths{}, 5);
  const Tensor b = crf_infer(transpose(unary), transpose(image), p, Bandwidths{}, 5);
  EXPECT_LT(max_abs_diff(transpose(a), b), 1e-12);
}

TEST(CrfGradient, ThroughThreeSteps) {
  Rng rng = make_rng(9, "t");
  const auto op = factored(quantize_8bit(check::random_tensor({1, 4, 4}, rng, 0.0, 1.0)), Bandwidths{0.3, 1.5});
  const Tensor unary = check::random_tensor({2, 4, 4}, rng);
  const Tensor w = check::random_tensor({2}, rng, 0.1, 1.0);
  const Tensor probe = check::random_tensor({2, 4, 4}, rng);
  auto loss = [&](ad::Tape& t, ad::Var u, ad::Var wv) { return ad::sum(ad::mul(crf_infer(u, op, wv, 3).q, t.constant(probe))); };
  EXPECT_LT(ad::finite_diff_check([&](ad::Tape& t, ad::Var x) { return loss(t, x, t.constant(w)); }, unary, 1e-5).max_rel_error, 1e-4);
  EXPECT_LT(ad::finite_diff_check([&](ad::Tape& t, ad::Var x) { return loss(t, t.constant(unary), x); }, w, 1e-5).max_rel_error, 1e-4);
}

TEST(Composite, FcnCrfGradients) {
  const check::MiniInstance mi = check::mini_instance(Variant::fcn_crf, 4);
  for (const auto& r : check::check_composite("fcn_crf", mi, [&](const BoundModel& b, ad::Var image) {
         return image_nll(b, image, mi.sample, 3);
       }))
    EXPECT_TRUE(r.pass) << r.name << " " << r.measured;
}
