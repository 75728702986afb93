#pragma once

// Fully connected pairwise CRF over image pixels with Potts compatibility and
// two Gaussian kernels (appearance on intensity, smoothness on position).
// Mean-field updates are recorded on the tape so that an unrolled inference
// trains end-to-end with the unary network.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "advseg/autodiff.hpp"
#include "advseg/fcn.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

inline constexpr int kNumKernels = 2;
inline constexpr int kAppearanceKernel = 0;
inline constexpr int kPositionKernel = 1;

/// Kernel bandwidths: appearance in intensity units, position in pixels.
struct Bandwidths {
  double appearance = 0.1;
  double position = 5.0;

  void validate() const {
    if (!(appearance > 0.0) || !(position > 0.0)) throw ContractError("kernel bandwidths must be positive");
  }
  bool operator==(const Bandwidths&) const = default;
};

struct CrfParams {
  /// w^(1) appearance, w^(2) position.
  Tensor kernel_weights = Tensor({kNumKernels}, 0.5);
  int t_train = 5;
  int t_test = 10;

  /// Potts compatibility.
  static constexpr double compatibility(int l, int l2) { return l == l2 ? 0.0 : 1.0; }

  void validate() const {
    require_shape(kernel_weights, {kNumKernels}, "CRF kernel weights");
    if (t_train < 1 || t_test < 1) throw ContractError("CRF step counts must be >= 1");
  }
  bool operator==(const CrfParams&) const = default;
};

/// Dense kernel matrices k^(m)_ij over the N = H*W pixels, zero diagonal.
struct KernelMatrices {
  int height = 0;
  int width = 0;
  std::array<Tensor, kNumKernels> k;  // each [N,N]

  int pixels() const { return height * width; }
};

inline KernelMatrices build_kernels(const Tensor& image, const Bandwidths& bw) {
  bw.validate();
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw ShapeError("build_kernels: image must be [1,H,W], got " + to_string(image.shape()));
  }
  KernelMatrices km;
  km.height = image.dim(1);
  km.width = image.dim(2);
  const int n = km.pixels();
  for (auto& t : km.k) t = Tensor({n, n});
  const double a = 2.0 * bw.appearance * bw.appearance;
  const double p = 2.0 * bw.position * bw.position;
  for (int i = 0; i < n; ++i) {
    const int yi = i / km.width, xi = i % km.width;
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      const int yj = j / km.width, xj = j % km.width;
      const double di = image[static_cast<std::size_t>(i)] - image[static_cast<std::size_t>(j)];
      const double dy = yi - yj, dx = xi - xj;
      const std::size_t idx = static_cast<std::size_t>(i) * n + j;
      km.k[kAppearanceKernel][idx] = std::exp(-di * di / a);
      km.k[kPositionKernel][idx] = std::exp(-(dy * dy + dx * dx) / p);
    }
  }
  return km;
}

/// Applies out_i = sum_{j != i} k^(m)_ij in_j for either kernel.
///
/// The factored route is exact and avoids the N^2 matrices: the position
/// kernel separates into row and column Gaussians, and the appearance kernel
/// only depends on intensity, so pixels sharing an intensity are summed once
/// (8-bit images have at most 256 groups). The self term (k_ii = 1) is
/// subtracted afterwards.
class MessageOperator {
 public:
  static MessageOperator dense(KernelMatrices km) {
    MessageOperator op;
    op.height_ = km.height;
    op.width_ = km.width;
    op.dense_ = std::make_shared<const KernelMatrices>(std::move(km));
    return op;
  }

  static MessageOperator factored(const Tensor& image, const Bandwidths& bw) {
    bw.validate();
    if (image.rank() != 3 || image.dim(0) != 1) {
      throw ShapeError("MessageOperator: image must be [1,H,W], got " + to_string(image.shape()));
    }
    MessageOperator op;
    op.height_ = image.dim(1);
    op.width_ = image.dim(2);
    auto toeplitz = [&](int n) {
      Eigen::MatrixXd g(n, n);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) g(r, c) = std::exp(-static_cast<double>((r - c) * (r - c)) / (2.0 * bw.position * bw.position));
      return g;
    };
    op.rows_ = toeplitz(op.height_);
    op.cols_ = toeplitz(op.width_);
    std::vector<double> levels(image.values());
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    op.group_.resize(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
      op.group_[i] = static_cast<std::uint32_t>(std::lower_bound(levels.begin(), levels.end(), image[i]) - levels.begin());
    }
    const auto g = static_cast<Eigen::Index>(levels.size());
    op.affinity_.resize(g, g);
    const double a = 2.0 * bw.appearance * bw.appearance;
    for (Eigen::Index r = 0; r < g; ++r)
      for (Eigen::Index c = 0; c < g; ++c) {
        const double d = levels[static_cast<std::size_t>(r)] - levels[static_cast<std::size_t>(c)];
        op.affinity_(r, c) = std::exp(-d * d / a);
      }
    return op;
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int pixels() const { return height_ * width_; }

  /// Filters `planes` consecutive H*W planes. With `accumulate` the result is
  /// added to `out` instead of overwriting it.
  void apply(int kernel, const double* in, int planes, double* out, bool accumulate = false) const {
    if (kernel != kAppearanceKernel && kernel != kPositionKernel) throw ContractError("unknown kernel index");
    const Eigen::Index n = pixels();
    Eigen::Map<const Eigen::MatrixXd> x(in, n, planes);  // one column per plane
    Eigen::MatrixXd y(n, planes);
    if (dense_) {
      ad::detail::ConstMatMap k(dense_->k.at(static_cast<std::size_t>(kernel)).raw(), n, n);
      y.noalias() = k * x;
    } else if (kernel == kAppearanceKernel) {
      appearance(x, y);
    } else {
      position(in, planes, y);
    }
    Eigen::Map<Eigen::MatrixXd> dst(out, n, planes);
    if (accumulate) dst += y;
    else dst = y;
  }

  void apply(int kernel, std::span<const double> in, std::span<double> out) const {
    const std::size_t n = static_cast<std::size_t>(pixels());
    if (in.size() != n || out.size() != n) throw ShapeError("MessageOperator::apply: plane size mismatch");
    apply(kernel, in.data(), 1, out.data());
  }

 private:
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  void appearance(const Eigen::Map<const Eigen::MatrixXd>& x, Eigen::MatrixXd& y) const {
    Eigen::MatrixXd mass = Eigen::MatrixXd::Zero(affinity_.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) mass.row(group_[static_cast<std::size_t>(i)]) += x.row(i);
    const Eigen::MatrixXd spread = affinity_ * mass;
    for (Eigen::Index i = 0; i < x.rows(); ++i) y.row(i) = spread.row(group_[static_cast<std::size_t>(i)]) - x.row(i);
  }

  void position(const double* in, int planes, Eigen::MatrixXd& y) const {
    const Eigen::Index h = height_, w = width_;
    // All planes stacked as a (planes*h) x w row-major matrix: one product
    // filters every row, then each plane is filtered along its columns.
    Eigen::Map<const RowMat> stacked(in, planes * h, w);
    const RowMat along_rows = stacked * cols_;
    for (int l = 0; l < planes; ++l) {
      Eigen::Map<RowMat> dst(y.data() + l * h * w, h, w);
      dst.noalias() = rows_ * along_rows.middleRows(l * h, h);
      dst -= stacked.middleRows(l * h, h);
    }
  }

  int height_ = 0;
  int width_ = 0;
  std::shared_ptr<const KernelMatrices> dense_;
  Eigen::MatrixXd rows_;  // Gaussian of row offsets, h x h
  Eigen::MatrixXd cols_;  // Gaussian of column offsets, w x w
  std::vector<std::uint32_t> group_;
  Eigen::MatrixXd affinity_;  // intensity level x intensity level
};

/// Message Q~^(m)_i(l) = sum_{j != i} k^(m)_ij Q_j(l) for every label plane.
/// Kernels are constants: gradients flow to Q only.
inline ad::Var kernel_message(ad::Var q, std::shared_ptr<const MessageOperator> op, int kernel) {
  ad::Tape& t = *q.tape;
  const Tensor& qv = t.value(q);
  if (qv.rank() != 3 || qv.dim(1) != op->height() || qv.dim(2) != op->width()) {
    throw ShapeError("kernel_message: marginals " + to_string(qv.shape()) + " do not match kernel grid");
  }
  const int planes = qv.dim(0);
  Tensor out(qv.shape());
  op->apply(kernel, qv.raw(), planes, out.raw());
  // Kernel matrices are symmetric, so the adjoint is the same filter.
  return t.record(std::move(out), {q}, [q, op, kernel, planes](ad::Tape& tp, const Tensor& g) {
    op->apply(kernel, g.raw(), planes, tp.grad_ref(q).raw(), true);
  });
}

/// Q_i = softmax(-psi_u(i)).
inline ad::Var meanfield_init(ad::Var unary) { return ad::softmax_pixelwise(ad::neg(unary)); }

inline Tensor meanfield_init(const Tensor& unary) {
  ad::Tape t;
  return t.value(meanfield_init(t.constant(unary)));
}

struct MeanField {
  ad::Var q;       // marginals after the last step
  ad::Var logits;  // pre-softmax scores of the last step; log Q = log_softmax(logits)
};

/// One mean-field update: message passing, kernel re-weighting, Potts
/// compatibility, unary addition and normalization,
///   Q_i(l) \propto exp(-psi_u(l) - sum_{l'} mu(l,l') sum_m w_m Q~^(m)_i(l')).
inline MeanField meanfield_step(ad::Var q, ad::Var unary, const std::shared_ptr<const MessageOperator>& op,
                                ad::Var kernel_weights) {
  using namespace ad;
  std::vector<Var> messages;
  for (int m = 0; m < kNumKernels; ++m) messages.push_back(kernel_message(q, op, m));
  Var reweighted = weighted_sum(messages, kernel_weights);
  Var pairwise = potts_compat(reweighted);
  Var logits = neg(add(unary, pairwise));
  return {softmax_pixelwise(logits), logits};
}

/// Mean-field inference unrolled for `steps` updates from the unary softmax.
inline MeanField crf_infer(ad::Var unary, const std::shared_ptr<const MessageOperator>& op, ad::Var kernel_weights,
                           int steps) {
  if (steps < 0) throw ContractError("crf_infer: steps must be non-negative");
  ad::Var logits = ad::neg(unary);
  MeanField mf{ad::softmax_pixelwise(logits), logits};
  for (int s = 0; s < steps; ++s) mf = meanfield_step(mf.q, unary, op, kernel_weights);
  return mf;
}

inline Tensor crf_infer(const Tensor& unary, const Tensor& image, const CrfParams& params, const Bandwidths& bw,
                        int steps) {
  params.validate();
  ad::Tape t;
  auto op = std::make_shared<const MessageOperator>(MessageOperator::factored(image, bw));
  return t.value(crf_infer(t.constant(unary), op, t.constant(params.kernel_weights), steps).q);
}

inline Tensor meanfield_step(const Tensor& q, const Tensor& unary, const KernelMatrices& km,
                             const Tensor& kernel_weights) {
  ad::Tape t;
  auto op = std::make_shared<const MessageOperator>(MessageOperator::dense(km));
  return t.value(meanfield_step(t.constant(q), t.constant(unary), op, t.constant(kernel_weights)).q);
}

/// Exact marginals of the Gibbs distribution
///   E(y) = sum_i psi_u(y_i) + sum_{i<j} mu(y_i,y_j) sum_m w_m k^(m)_ij
/// by enumerating all 2^N labelings. Limited to N <= 16.
inline Tensor exact_marginals(const Tensor& unary, const KernelMatrices& km, const Tensor& kernel_weights) {
  const int n = km.pixels();
  if (n > 16) throw ContractError("exact_marginals: at most 16 pixels, got " + std::to_string(n));
  require_shape(unary, {kNumLabels, km.height, km.width}, "exact_marginals unary");
  require_shape(kernel_weights, {kNumKernels}, "exact_marginals weights");
  std::vector<double> coupling(static_cast<std::size_t>(n) * n, 0.0);
  for (int m = 0; m < kNumKernels; ++m)
    for (std::size_t i = 0; i < coupling.size(); ++i) coupling[i] += kernel_weights[static_cast<std::size_t>(m)] * km.k[static_cast<std::size_t>(m)][i];

  const std::uint32_t states = 1u << n;
  std::vector<double> energy(states);
  for (std::uint32_t s = 0; s < states; ++s) {
    double e = 0.0;
    for (int i = 0; i < n; ++i) {
      const int li = (s >> i) & 1u;
      e += unary[static_cast<std::size_t>(li * n + i)];
      for (int j = i + 1; j < n; ++j) {
        const int lj = (s >> j) & 1u;
        e += CrfParams::compatibility(li, lj) * coupling[static_cast<std::size_t>(i) * n + j];
      }
    }
    energy[s] = e;
  }
  const double emin = *std::min_element(energy.begin(), energy.end());
  Tensor marg({kNumLabels, km.height, km.width});
  double z = 0.0;
  for (std::uint32_t s = 0; s < states; ++s) {
    const double p = std::exp(-(energy[s] - emin));
    z += p;
    for (int i = 0; i < n; ++i) marg[static_cast<std::size_t>(((s >> i) & 1u) * n + i)] += p;
  }
  for (double& v : marg.data()) v /= z;
  return marg;
}

}  // namespace advseg
