#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "vaffect/errors.hpp"

namespace vaffect::corpus {

inline constexpr int kLabelMin = -1000;
inline constexpr int kLabelMax = 1000;
// Frame spacing used to timestamp frame k as k * interval (30 fps videos).
inline constexpr double kFrameInterval = 0.03333;

enum class Dimension { Valence, Arousal };

inline const char* dimension_name(Dimension d) { return d == Dimension::Valence ? "valence" : "arousal"; }

inline Dimension parse_dimension(const std::string& s) {
  if (s == "valence") return Dimension::Valence;
  if (s == "arousal") return Dimension::Arousal;
  throw ContractError("unknown dimension: " + s);
}

struct AnnotationSample {
  double time;  // seconds
  int value;
};

/// Irregularly timed annotator output for one dimension. Timestamps are
/// strictly increasing and values lie in [-1000, 1000].
struct AnnotationTrack {
  Dimension dimension = Dimension::Valence;
  std::vector<AnnotationSample> samples;

  void validate() const {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (!std::isfinite(s.time)) throw ContractError("annotation: non-finite timestamp at entry " + std::to_string(i + 1));
      if (s.value < kLabelMin || s.value > kLabelMax) {
        throw ContractError("annotation: value " + std::to_string(s.value) + " out of range at entry " + std::to_string(i + 1));
      }
      if (i > 0 && !(s.time > samples[i - 1].time)) {
        throw ContractError("annotation: timestamps not strictly increasing at entry " + std::to_string(i + 1));
      }
    }
  }
};

/// Parses "timestamp<SPACE>value" lines. Blank lines are ignored.
inline AnnotationTrack parse_track(std::istream& in, Dimension dim) {
  AnnotationTrack track;
  track.dimension = dim;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    double t;
    long v;
    std::string extra;
    if (!(ls >> t >> v) || (ls >> extra)) throw FormatError("annotation line " + std::to_string(lineno) + ": expected 'timestamp value'");
    if (v < kLabelMin || v > kLabelMax) throw FormatError("annotation line " + std::to_string(lineno) + ": value out of range");
    track.samples.push_back({t, static_cast<int>(v)});
  }
  try {
    track.validate();
  } catch (const ContractError& e) {
    throw FormatError(e.what());
  }
  return track;
}

inline AnnotationTrack read_track(const std::filesystem::path& path, Dimension dim) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open annotation file " + path.string());
  return parse_track(in, dim);
}

inline void write_track(std::ostream& out, const AnnotationTrack& track) {
  for (const auto& s : track.samples) out << std::setprecision(10) << s.time << ' ' << s.value << '\n';
}

inline void write_track(const std::filesystem::path& path, const AnnotationTrack& track) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write annotation file " + path.string());
  write_track(out, track);
}

/// Nearest-neighbour assignment: frame k (1-based) is timestamped
/// k * interval and takes the value of the closest sample; ties go to the
/// earlier sample. Returns one value per frame.
inline std::vector<int> match_track(const AnnotationTrack& track, std::size_t frame_count, double interval = kFrameInterval) {
  if (track.samples.empty()) throw ContractError("match_track: empty annotation track");
  const auto& s = track.samples;
  std::vector<int> out(frame_count);
  for (std::size_t k = 1; k <= frame_count; ++k) {
    const double t = static_cast<double>(k) * interval;
    auto it = std::lower_bound(s.begin(), s.end(), t, [](const AnnotationSample& a, double v) { return a.time < v; });
    std::size_t best;
    if (it == s.begin()) {
      best = 0;
    } else if (it == s.end()) {
      best = s.size() - 1;
    } else {
      const std::size_t hi = static_cast<std::size_t>(it - s.begin());
      best = (t - s[hi - 1].time) <= (s[hi].time - t) ? hi - 1 : hi;
    }
    out[k - 1] = s[best].value;
  }
  return out;
}

/// One row of a merged per-video annotation file.
struct MergedRow {
  int frame;
  int valence;
  int arousal;
  friend bool operator==(const MergedRow&, const MergedRow&) = default;
};

inline std::vector<MergedRow> merge(const std::vector<int>& valence, const std::vector<int>& arousal) {
  if (valence.size() != arousal.size()) {
    throw ContractError("merge: frame count mismatch " + std::to_string(valence.size()) + " vs " + std::to_string(arousal.size()));
  }
  std::vector<MergedRow> rows;
  rows.reserve(valence.size());
  for (std::size_t i = 0; i < valence.size(); ++i) rows.push_back({static_cast<int>(i + 1), valence[i], arousal[i]});
  return rows;
}

// "frameNumber<TAB>valence<TAB>arousal" per line.
inline void write_merged(std::ostream& out, const std::vector<MergedRow>& rows) {
  for (const auto& r : rows) out << r.frame << '\t' << r.valence << '\t' << r.arousal << '\n';
}

inline void write_merged(const std::filesystem::path& path, const std::vector<MergedRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write merged annotation " + path.string());
  write_merged(out, rows);
}

inline std::vector<MergedRow> parse_merged(std::istream& in) {
  std::vector<MergedRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    MergedRow r{};
    std::string extra;
    if (!(ls >> r.frame >> r.valence >> r.arousal) || (ls >> extra)) {
      throw FormatError("merged annotation line " + std::to_string(lineno) + ": expected 'frame valence arousal'");
    }
    if (r.frame < 1) throw FormatError("merged annotation line " + std::to_string(lineno) + ": frame number must be positive");
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<MergedRow> read_merged(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open merged annotation " + path.string());
  return parse_merged(in);
}

}  // namespace vaffect::corpus
