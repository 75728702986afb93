#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "advseg/fcn.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

inline ConfusionCounts confusion(const Tensor& pred, const Tensor& truth) {
  require_same_shape(pred, truth, "confusion");
  require_binary(pred, "confusion (prediction)");
  require_binary(truth, "confusion (truth)");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0.0, t = truth[i] != 0.0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// 2TP / (2TP + FP + FN); 1 when both masks are empty.
inline double dice(const ConfusionCounts& c) {
  const std::uint64_t denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

inline double dice(const Tensor& pred, const Tensor& truth) { return dice(confusion(pred, truth)); }

/// Mass where P(mass) > 0.5, from probabilities [2,H,W].
inline Tensor binarize(const Tensor& probs) {
  if (probs.rank() != 3 || probs.dim(0) != kNumLabels) {
    throw ShapeError("binarize expects [2,H,W], got " + to_string(probs.shape()));
  }
  const int h = probs.dim(1), w = probs.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor mask({h, w});
  for (std::size_t i = 0; i < plane; ++i) mask[i] = probs[plane + i] > 0.5 ? 1.0 : 0.0;
  return mask;
}

/// Pixels of either label that have a 4-neighbour of the opposite label.
inline std::vector<std::size_t> boundary_pixels(const Tensor& truth) {
  const int h = truth.dim(0), w = truth.dim(1);
  std::vector<std::size_t> out;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double v = truth[static_cast<std::size_t>(y * w + x)];
      const int ny[4] = {y - 1, y + 1, y, y};
      const int nx[4] = {x, x, x - 1, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
        if (truth[static_cast<std::size_t>(ny[k] * w + nx[k])] != v) {
          out.push_back(static_cast<std::size_t>(y * w + x));
          break;
        }
      }
    }
  return out;
}

struct TrimapBand {
  int width = 0;
  Tensor members;  // [H,W] binary

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(members.data().begin(), members.data().end(), 1.0));
  }
};

/// All pixels within Euclidean distance `width` of a boundary pixel.
inline TrimapBand trimap(const Tensor& truth, int width) {
  if (truth.rank() != 2) throw ShapeError("trimap expects [H,W], got " + to_string(truth.shape()));
  if (width < 1) throw ContractError("trimap width must be >= 1");
  require_binary(truth, "trimap");
  const int h = truth.dim(0), w = truth.dim(1);
  TrimapBand band{width, Tensor({h, w})};
  const std::vector<std::size_t> edge = boundary_pixels(truth);
  const int r2 = width * width;
  for (std::size_t b : edge) {
    const int by = static_cast<int>(b) / w, bx = static_cast<int>(b) % w;
    for (int y = std::max(0, by - width); y <= std::min(h - 1, by + width); ++y)
      for (int x = std::max(0, bx - width); x <= std::min(w - 1, bx + width); ++x)
        if ((y - by) * (y - by) + (x - bx) * (x - bx) <= r2) band.members[static_cast<std::size_t>(y * w + x)] = 1.0;
  }
  return band;
}

struct BandTally {
  std::uint64_t correct = 0;
  std::uint64_t total = 0;

  BandTally& operator+=(const BandTally& o) {
    correct += o.correct;
    total += o.total;
    return *this;
  }
  std::optional<double> accuracy() const {
    if (total == 0) return std::nullopt;
    return static_cast<double>(correct) / static_cast<double>(total);
  }
};

inline BandTally band_tally(const Tensor& pred, const Tensor& truth, const Tensor& members) {
  require_same_shape(pred, truth, "band_tally");
  require_same_shape(members, truth, "band_tally");
  BandTally t;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (members[i] == 0.0) continue;
    ++t.total;
    if (pred[i] == truth[i]) ++t.correct;
  }
  return t;
}

/// Fraction of band pixels labelled correctly; nullopt for an empty band.
inline std::optional<double> trimap_accuracy(const Tensor& pred, const Tensor& truth, int width) {
  require_binary(pred, "trimap_accuracy");
  return band_tally(pred, truth, trimap(truth, width).members).accuracy();
}

/// Survival function of the chi-square distribution with one degree of freedom.
inline double chi2_sf_1dof(double x) { return x <= 0.0 ? 1.0 : std::erfc(std::sqrt(x / 2.0)); }

struct McNemarResult {
  std::uint64_t a_only = 0;  // a correct, b wrong
  std::uint64_t b_only = 0;  // a wrong, b correct
  double statistic = 0.0;
  double p_value = 1.0;
};

/// McNemar's test with continuity correction on paired correctness vectors.
inline McNemarResult mcnemar(const std::vector<std::uint8_t>& correct_a, const std::vector<std::uint8_t>& correct_b) {
  if (correct_a.size() != correct_b.size()) {
    throw ContractError("mcnemar: correctness vectors differ in length (" + std::to_string(correct_a.size()) + " vs " +
                        std::to_string(correct_b.size()) + ")");
  }
  McNemarResult r;
  for (std::size_t i = 0; i < correct_a.size(); ++i) {
    if (correct_a[i] && !correct_b[i]) ++r.a_only;
    else if (!correct_a[i] && correct_b[i]) ++r.b_only;
  }
  const double discordant = static_cast<double>(r.a_only + r.b_only);
  if (discordant == 0.0) return r;
  const double diff = std::abs(static_cast<double>(r.a_only) - static_cast<double>(r.b_only)) - 1.0;
  r.statistic = diff * diff / discordant;
  r.p_value = std::clamp(chi2_sf_1dof(r.statistic), 0.0, 1.0);
  return r;
}

inline double mcnemar_pvalue(const std::vector<std::uint8_t>& correct_a, const std::vector<std::uint8_t>& correct_b) {
  return mcnemar(correct_a, correct_b).p_value;
}

inline constexpr int kTrimapWidths = 5;

/// Pooled metrics over a set of predictions.
struct MetricsReport {
  ConfusionCounts pooled;
  std::vector<ConfusionCounts> per_sample;
  std::vector<BandTally> trimap{std::vector<BandTally>(kTrimapWidths)};  // widths 1..5, pooled pixels
  std::vector<std::uint8_t> correct;  // per-pixel correctness, concatenated over samples

  double dice() const { return advseg::dice(pooled); }
  std::optional<double> trimap_accuracy(int width) const {
    return trimap.at(static_cast<std::size_t>(width - 1)).accuracy();
  }
};

inline void accumulate(MetricsReport& report, const Tensor& pred, const Tensor& truth) {
  const ConfusionCounts c = confusion(pred, truth);
  report.pooled += c;
  report.per_sample.push_back(c);
  for (int w = 1; w <= kTrimapWidths; ++w) {
    report.trimap[static_cast<std::size_t>(w - 1)] += band_tally(pred, truth, trimap(truth, w).members);
  }
  for (std::size_t i = 0; i < pred.size(); ++i) report.correct.push_back(pred[i] == truth[i] ? 1 : 0);
}

}  // namespace advseg
