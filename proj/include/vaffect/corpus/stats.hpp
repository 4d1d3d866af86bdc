#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <vector>

#include "vaffect/corpus/annotation.hpp"

namespace vaffect::corpus {

struct HistogramBin {
  int low;
  int high;  // exclusive, except the last bin which also holds kLabelMax
  std::size_t count;
  friend bool operator==(const HistogramBin&, const HistogramBin&) = default;
};

/// Label histogram over [-1000, 1000] with fixed-width bins; only non-empty
/// bins are returned, in ascending order.
inline std::vector<HistogramBin> label_histogram(std::span<const int> values, int width = 100) {
  if (width <= 0 || (kLabelMax - kLabelMin) % width != 0) throw ContractError("label_histogram: width must divide 2000");
  const int nbins = (kLabelMax - kLabelMin) / width;
  std::map<int, std::size_t> counts;
  for (int v : values) {
    if (v < kLabelMin || v > kLabelMax) throw ContractError("label_histogram: value out of range");
    ++counts[std::min((v - kLabelMin) / width, nbins - 1)];
  }
  std::vector<HistogramBin> out;
  for (auto [bin, n] : counts) out.push_back({kLabelMin + bin * width, kLabelMin + (bin + 1) * width, n});
  return out;
}

inline void write_histogram_csv(std::ostream& out, const std::vector<HistogramBin>& bins) {
  out << "bin_low,bin_high,count\n";
  for (const auto& b : bins) out << b.low << ',' << b.high << ',' << b.count << '\n';
}

inline void write_histogram_csv(const std::filesystem::path& path, const std::vector<HistogramBin>& bins) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  write_histogram_csv(out, bins);
}

/// Every `stride`-th (valence, arousal) pair as "valence,arousal" rows.
inline void write_scatter_csv(const std::filesystem::path& path, std::span<const int> valence, std::span<const int> arousal,
                              std::size_t stride = 1) {
  if (valence.size() != arousal.size()) throw ContractError("scatter: length mismatch");
  if (stride == 0) throw ContractError("scatter: stride must be positive");
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "valence,arousal\n";
  for (std::size_t i = 0; i < valence.size(); i += stride) out << valence[i] << ',' << arousal[i] << '\n';
}

}  // namespace vaffect::corpus
