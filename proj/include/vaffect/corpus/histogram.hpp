#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "vaffect/corpus/image.hpp"

namespace vaffect::corpus {

/// Per-channel colour histograms, channel-major (R bins, then G, then B).
struct HistogramFeature {
  std::size_t bins = 0;
  std::vector<double> counts;  // 3 * bins

  std::span<const double> channel(std::size_t c) const { return std::span<const double>(counts).subspan(c * bins, bins); }
};

inline HistogramFeature histogram(const Image& img, std::size_t bins) {
  if (bins < 2 || bins > 256) throw ContractError("histogram: bins must be in [2, 256]");
  if (img.pixels.empty()) throw ContractError("histogram: empty image");
  HistogramFeature h;
  h.bins = bins;
  h.counts.assign(3 * bins, 0.0);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const std::size_t c = i % 3;
    h.counts[c * bins + img.pixels[i] * bins / 256] += 1.0;
  }
  return h;
}

/// Correlation coefficient between the two concatenated histograms, each
/// first normalised to unit mass per channel. Two flat histograms count as
/// identical (1.0).
inline double similarity(const HistogramFeature& a, const HistogramFeature& b) {
  if (a.bins != b.bins) throw ContractError("similarity: bin counts differ");
  const std::size_t n = a.counts.size();
  auto normalised = [&](const HistogramFeature& h) {
    std::vector<double> out(h.counts);
    for (std::size_t c = 0; c < 3; ++c) {
      double total = 0.0;
      for (std::size_t i = 0; i < h.bins; ++i) total += out[c * h.bins + i];
      if (total > 0.0)
        for (std::size_t i = 0; i < h.bins; ++i) out[c * h.bins + i] /= total;
    }
    return out;
  };
  const auto x = normalised(a), y = normalised(b);
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  const double den = std::sqrt(sxx * syy);
  return den > 0.0 ? sxy / den : 1.0;
}

/// Index of the candidate most similar to the reference; ties go to the
/// lowest index.
inline std::size_t pick_face(std::span<const Image> candidates, const Image& reference, std::size_t bins = 32) {
  if (candidates.empty()) throw ContractError("pick_face: no candidates");
  const auto ref = histogram(reference, bins);
  std::size_t best = 0;
  double best_sim = -2.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double s = similarity(histogram(candidates[i], bins), ref);
    if (s > best_sim) {
      best_sim = s;
      best = i;
    }
  }
  return best;
}

}  // namespace vaffect::corpus
