#pragma once

// Seeded synthetic stand-in for mass ROIs: noisy low-contrast rotated
// ellipses on a 40x40 frame, plus flip augmentation, per-pixel z-score
// normalization and the empirical position prior.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "advseg/fcn.hpp"
#include "advseg/rng.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

struct Sample {
  Tensor image;  // [1,40,40]
  Tensor mask;   // [40,40], entries 0/1

  bool operator==(const Sample&) const = default;
};

struct GenSpec {
  std::uint64_t seed = 42;
  int count = 8;
  int size = kImageSize;
  double center_jitter = 4.0;  // radius (pixels) around the frame centre
  double semi_axis_min = 5.0;
  double semi_axis_max = 11.0;
  double rotation_min = 0.0;
  double rotation_max = std::numbers::pi;
  double background_mean = 0.35;
  double contrast_gap = 0.15;  // foreground mean = background_mean + contrast_gap
  double noise_sigma = 0.08;
  double edge_softness = 1.5;  // width (pixels) of the intensity ramp across the boundary

  double foreground_mean() const { return background_mean + contrast_gap; }

  void validate() const {
    if (count < 1) throw ContractError("GenSpec: count must be >= 1");
    if (size < 8) throw ContractError("GenSpec: frame too small");
    if (semi_axis_min < 2.0) throw ContractError("GenSpec: semi-axes must be >= 2 pixels");
    if (semi_axis_max < semi_axis_min) throw ContractError("GenSpec: semi_axis_max < semi_axis_min");
    if (!(contrast_gap > 0.0)) throw ContractError("GenSpec: contrast gap must be positive");
    if (noise_sigma < 0.0 || edge_softness < 0.0 || center_jitter < 0.0) {
      throw ContractError("GenSpec: noise, softness and jitter must be non-negative");
    }
    if (rotation_max < rotation_min) throw ContractError("GenSpec: rotation range is empty");
    const double half = (size - 1) / 2.0;
    if (center_jitter + semi_axis_max > half) {
      throw ContractError("GenSpec: ellipses can leave the frame (jitter + max semi-axis > " + std::to_string(half) + ")");
    }
  }

  bool operator==(const GenSpec&) const = default;
};

/// Analytic mean ellipse area pi * E[a] * E[b] for independent uniform axes.
inline double expected_ellipse_area(const GenSpec& spec) {
  const double m = 0.5 * (spec.semi_axis_min + spec.semi_axis_max);
  return std::numbers::pi * m * m;
}

inline std::vector<Sample> generate(const GenSpec& spec) {
  spec.validate();
  Rng rng = make_rng(spec.seed, "data");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const int n = spec.size;
  const double centre = (n - 1) / 2.0;

  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  for (int s = 0; s < spec.count; ++s) {
    // Centre uniform in a disc of radius center_jitter.
    const double r = spec.center_jitter * std::sqrt(unit(rng));
    const double phi = 2.0 * std::numbers::pi * unit(rng);
    const double cy = centre + r * std::sin(phi);
    const double cx = centre + r * std::cos(phi);
    const double a = spec.semi_axis_min + (spec.semi_axis_max - spec.semi_axis_min) * unit(rng);
    const double b = spec.semi_axis_min + (spec.semi_axis_max - spec.semi_axis_min) * unit(rng);
    const double theta = spec.rotation_min + (spec.rotation_max - spec.rotation_min) * unit(rng);
    const double ct = std::cos(theta), st = std::sin(theta);

    Sample smp{Tensor({1, n, n}), Tensor({n, n})};
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double dy = y - cy, dx = x - cx;
        const double u = (dx * ct + dy * st) / a;
        const double v = (-dx * st + dy * ct) / b;
        const double rho = std::sqrt(u * u + v * v);
        const bool inside = rho <= 1.0;
        double coverage;
        if (spec.edge_softness == 0.0) {
          coverage = inside ? 1.0 : 0.0;
        } else {
          // Approximate signed distance to the boundary in pixels.
          const double dist = (rho - 1.0) * std::min(a, b);
          coverage = std::clamp(0.5 - dist / spec.edge_softness, 0.0, 1.0);
        }
        const double value = spec.background_mean + spec.contrast_gap * coverage + spec.noise_sigma * noise(rng);
        const std::size_t i = static_cast<std::size_t>(y * n + x);
        smp.image[i] = std::round(std::clamp(value, 0.0, 1.0) * 255.0) / 255.0;  // 8-bit acquisition
        smp.mask[i] = inside ? 1.0 : 0.0;
      }
    out.push_back(std::move(smp));
  }
  return out;
}

/// Rounds intensities to the 8-bit grid k/255 used by the PGM files.
inline Tensor quantize_8bit(const Tensor& image) {
  Tensor q(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) q[i] = std::round(std::clamp(image[i], 0.0, 1.0) * 255.0) / 255.0;
  return q;
}

enum class Flip { none, horizontal, vertical, both };

/// Flips the last two axes of a [...,H,W] tensor.
inline Tensor flip(const Tensor& t, Flip f) {
  if (f == Flip::none) return t;
  const int h = t.dim(t.rank() - 2), w = t.dim(t.rank() - 1);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out(t.shape());
  for (std::size_t base = 0; base < t.size(); base += plane)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int sy = (f == Flip::vertical || f == Flip::both) ? h - 1 - y : y;
        const int sx = (f == Flip::horizontal || f == Flip::both) ? w - 1 - x : x;
        out[base + static_cast<std::size_t>(y * w + x)] = t[base + static_cast<std::size_t>(sy * w + sx)];
      }
  return out;
}

/// Each sample followed by its horizontal, vertical and double flip.
inline std::vector<Sample> augment_flips(const std::vector<Sample>& samples) {
  std::vector<Sample> out;
  out.reserve(samples.size() * 4);
  for (const Sample& s : samples)
    for (Flip f : {Flip::none, Flip::horizontal, Flip::vertical, Flip::both}) out.push_back({flip(s.image, f), flip(s.mask, f)});
  return out;
}

/// Per-image contrast stretch to [0,1]. Constant images map to zeros.
inline Tensor minmax_scale(const Tensor& image) {
  const auto [lo, hi] = std::minmax_element(image.data().begin(), image.data().end());
  const double low = *lo, range = *hi - *lo;
  Tensor out(image.shape());
  if (range <= 0.0) return out;
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = (image[i] - low) / range;
  return out;
}

inline constexpr double kStdFloor = 1e-6;

struct NormStats {
  Tensor mean;  // same shape as one image
  Tensor std;

  bool operator==(const NormStats&) const = default;
};

/// Per-pixel mean and (population) standard deviation over the training images.
inline NormStats fit_normalizer(const std::vector<Tensor>& images) {
  if (images.size() < 2) throw ContractError("fit_normalizer needs at least two images");
  NormStats st{Tensor(images.front().shape()), Tensor(images.front().shape())};
  for (const Tensor& im : images) st.mean += im;
  const double inv = 1.0 / static_cast<double>(images.size());
  for (double& v : st.mean.data()) v *= inv;
  for (const Tensor& im : images) {
    require_same_shape(im, st.mean, "fit_normalizer");
    for (std::size_t i = 0; i < im.size(); ++i) {
      const double d = im[i] - st.mean[i];
      st.std[i] += d * d;
    }
  }
  for (double& v : st.std.data()) v = std::max(std::sqrt(v * inv), kStdFloor);
  return st;
}

inline NormStats fit_normalizer(const std::vector<Sample>& train) {
  std::vector<Tensor> images;
  images.reserve(train.size());
  for (const Sample& s : train) images.push_back(s.image);
  return fit_normalizer(images);
}

inline Tensor apply_normalizer(const NormStats& stats, const Tensor& image) {
  require_same_shape(stats.mean, image, "apply_normalizer");
  Tensor out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = (image[i] - stats.mean[i]) / stats.std[i];
  return out;
}

inline constexpr double kPriorSmoothing = 1.0;

/// w_i = (count_i + 1) / (N + 2), strictly inside (0,1).
inline PositionPrior estimate_prior(const std::vector<Tensor>& masks) {
  if (masks.empty()) throw ContractError("estimate_prior needs at least one mask");
  Tensor counts(masks.front().shape());
  for (const Tensor& m : masks) {
    require_same_shape(m, counts, "estimate_prior");
    require_binary(m, "estimate_prior");
    counts += m;
  }
  const double denom = static_cast<double>(masks.size()) + 2.0 * kPriorSmoothing;
  for (double& v : counts.data()) v = (v + kPriorSmoothing) / denom;
  return {counts};
}

inline PositionPrior estimate_prior(const std::vector<Sample>& train) {
  std::vector<Tensor> masks;
  masks.reserve(train.size());
  for (const Sample& s : train) masks.push_back(s.mask);
  return estimate_prior(masks);
}

}  // namespace advseg
