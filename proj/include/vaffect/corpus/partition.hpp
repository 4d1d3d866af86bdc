#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "vaffect/errors.hpp"

namespace vaffect::corpus {

// Column order follows the category census 43:58:46:12.
enum class Category { MainlyPositive = 0, MainlyNegative = 1, BothValence = 2, Neutral = 3 };
inline constexpr std::size_t kCategoryCount = 4;

inline const char* category_name(Category c) {
  switch (c) {
    case Category::MainlyPositive: return "mainly_positive";
    case Category::MainlyNegative: return "mainly_negative";
    case Category::BothValence: return "both_valence";
    case Category::Neutral: return "neutral";
  }
  return "?";
}

inline Category parse_category(const std::string& s) {
  for (std::size_t i = 0; i < kCategoryCount; ++i)
    if (s == category_name(static_cast<Category>(i))) return static_cast<Category>(i);
  throw FormatError("unknown category: " + s);
}

/// p = share of frames with valence > 100, q = share below -100.
inline Category categorize(std::span<const int> valence) {
  if (valence.empty()) throw ContractError("categorize: no frames");
  std::size_t pos = 0, neg = 0;
  for (int v : valence) {
    pos += v > 100;
    neg += v < -100;
  }
  const double p = static_cast<double>(pos) / static_cast<double>(valence.size());
  const double q = static_cast<double>(neg) / static_cast<double>(valence.size());
  if (p >= 0.5 && q < 0.2) return Category::MainlyPositive;
  if (q >= 0.5 && p < 0.2) return Category::MainlyNegative;
  if (p >= 0.2 && q >= 0.2) return Category::BothValence;
  return Category::Neutral;
}

enum class Gender { Female, Male };
enum class Split { Train = 0, Validation = 1, Test = 2 };
inline constexpr std::size_t kSplitCount = 3;

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "validation" || s == "val") return Split::Validation;
  if (s == "test") return Split::Test;
  throw FormatError("unknown split: " + s);
}

struct VideoMeta {
  std::string id;
  std::size_t frames = 0;
  int fps = 30;
  Gender gender = Gender::Female;
  std::string subject;
  std::optional<Category> category;
  std::optional<Split> split;
};

inline Gender parse_gender(const std::string& s) {
  if (s == "female" || s == "F" || s == "f") return Gender::Female;
  if (s == "male" || s == "M" || s == "m") return Gender::Male;
  throw FormatError("unknown gender: " + s);
}

/// Reads "video_id,frames,fps,gender,subject_id,category" (category may be
/// empty). The header line is required.
inline std::vector<VideoMeta> read_meta(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header");
  std::vector<VideoMeta> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 6) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
    VideoMeta m;
    m.id = f[0];
    try {
      m.frames = std::stoul(f[1]);
      m.fps = std::stoi(f[2]);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
    if (m.fps != 30) throw FormatError(m.id + ": videos must be 30 fps, got " + std::to_string(m.fps));
    m.gender = parse_gender(f[3]);
    m.subject = f[4];
    if (!f[5].empty()) m.category = parse_category(f[5]);
    out.push_back(std::move(m));
  }
  return out;
}

inline void write_meta(const std::filesystem::path& path, const std::vector<VideoMeta>& videos) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "video_id,frames,fps,gender,subject_id,category\n";
  for (const auto& v : videos) {
    out << v.id << ',' << v.frames << ',' << v.fps << ',' << (v.gender == Gender::Female ? "female" : "male") << ',' << v.subject
        << ',' << (v.category ? category_name(*v.category) : "") << '\n';
  }
}

/// Split fractions; validation and test sizes are floored and train takes
/// the rest.
struct PartitionTargets {
  double train = 0.64;
  double validation = 0.16;
  double test = 0.20;

  std::array<std::size_t, kSplitCount> sizes(std::size_t n) const {
    const auto val = static_cast<std::size_t>(std::floor(validation * static_cast<double>(n) + 1e-9));
    const auto tst = static_cast<std::size_t>(std::floor(test * static_cast<double>(n) + 1e-9));
    return {n - val - tst, val, tst};
  }
};

struct PartitionOptions {
  PartitionTargets targets;
  std::uint64_t seed = 0;
  std::size_t iterations = 20000;
  double category_tolerance = 1.0;
  double gender_tolerance = 2.0;
};

/// Counts of one split and their proportional targets.
struct SplitTally {
  std::size_t videos = 0;
  std::array<std::size_t, kCategoryCount> category{};
  std::size_t female = 0;
  std::size_t frames = 0;
};

struct PartitionReport {
  std::array<SplitTally, kSplitCount> tally{};
  std::array<std::size_t, kSplitCount> sizes{};
  // Proportional targets: n_category * size_split / N, and likewise for gender.
  std::array<std::array<double, kSplitCount>, kCategoryCount> category_target{};
  std::array<double, kSplitCount> female_target{};
};

inline PartitionReport partition_report(const std::vector<VideoMeta>& videos, const PartitionTargets& targets) {
  PartitionReport r;
  const std::size_t n = videos.size();
  r.sizes = targets.sizes(n);
  std::array<std::size_t, kCategoryCount> census{};
  std::size_t female = 0;
  for (const auto& v : videos) {
    if (!v.category) throw ContractError("partition: video " + v.id + " has no category");
    ++census[static_cast<std::size_t>(*v.category)];
    female += v.gender == Gender::Female;
    if (v.split) {
      auto& t = r.tally[static_cast<std::size_t>(*v.split)];
      ++t.videos;
      ++t.category[static_cast<std::size_t>(*v.category)];
      t.female += v.gender == Gender::Female;
      t.frames += v.frames;
    }
  }
  for (std::size_t s = 0; s < kSplitCount; ++s) {
    const double share = n ? static_cast<double>(r.sizes[s]) / static_cast<double>(n) : 0.0;
    for (std::size_t c = 0; c < kCategoryCount; ++c) r.category_target[c][s] = static_cast<double>(census[c]) * share;
    r.female_target[s] = static_cast<double>(female) * share;
  }
  return r;
}

/// Every rule a finished partition must satisfy; returns one message per
/// violation (empty when the assignment is valid).
inline std::vector<std::string> check_partition(const std::vector<VideoMeta>& videos, const PartitionOptions& opt = {}) {
  std::vector<std::string> bad;
  std::map<std::string, Split> subject_split;
  for (const auto& v : videos) {
    if (!v.split) {
      bad.push_back("video " + v.id + " unassigned");
      continue;
    }
    auto [it, fresh] = subject_split.emplace(v.subject, *v.split);
    if (!fresh && it->second != *v.split) bad.push_back("subject " + v.subject + " spans several splits");
  }
  if (!bad.empty()) return bad;
  const auto r = partition_report(videos, opt.targets);
  for (std::size_t s = 0; s < kSplitCount; ++s) {
    const char* name = split_name(static_cast<Split>(s));
    if (r.tally[s].videos != r.sizes[s]) {
      bad.push_back(std::string(name) + ": " + std::to_string(r.tally[s].videos) + " videos, expected " + std::to_string(r.sizes[s]));
    }
    for (std::size_t c = 0; c < kCategoryCount; ++c) {
      if (std::abs(static_cast<double>(r.tally[s].category[c]) - r.category_target[c][s]) > opt.category_tolerance + 1e-9) {
        bad.push_back(std::string(name) + ": " + category_name(static_cast<Category>(c)) + " count off target");
      }
    }
    if (std::abs(static_cast<double>(r.tally[s].female) - r.female_target[s]) > opt.gender_tolerance + 1e-9) {
      bad.push_back(std::string(name) + ": gender balance off target");
    }
  }
  return bad;
}

namespace detail {

struct SubjectUnit {
  std::string subject;
  std::vector<std::size_t> videos;
  std::array<int, kCategoryCount> category{};
  int female = 0;
  long frames = 0;
};

class PartitionSearch {
 public:
  PartitionSearch(const std::vector<VideoMeta>& videos, const PartitionOptions& opt) : opt_(opt) {
    report_ = partition_report(videos, opt.targets);
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < videos.size(); ++i) {
      const auto& v = videos[i];
      auto [it, fresh] = index.emplace(v.subject, units_.size());
      if (fresh) units_.push_back({v.subject, {}, {}, 0, 0});
      auto& u = units_[it->second];
      u.videos.push_back(i);
      ++u.category[static_cast<std::size_t>(*v.category)];
      u.female += v.gender == Gender::Female;
      u.frames += static_cast<long>(v.frames);
      total_frames_ += static_cast<double>(v.frames);
    }
    where_.assign(units_.size(), 0);
  }

  // Greedy start, then annealed repair; restarts from the best assignment
  // seen until every hard constraint holds or the restart budget is spent.
  std::vector<std::size_t> solve() {
    greedy();
    std::mt19937_64 rng(opt_.seed);
    for (std::size_t round = 0; round < kRestarts && violation() > 1e-9; ++round) improve(rng, round == 0 ? 0.0 : 1500.0);
    return where_;
  }

  double violation() const {
    double v = 0.0;
    for (std::size_t s = 0; s < kSplitCount; ++s) v += split_violation(s);
    return v;
  }

  // Unit most implicated in the remaining violations: the largest subject
  // inside the worst split.
  const SubjectUnit& blocking_unit() const {
    std::size_t worst = 0;
    for (std::size_t s = 1; s < kSplitCount; ++s)
      if (split_violation(s) > split_violation(worst)) worst = s;
    std::optional<std::size_t> best;
    for (std::size_t u = 0; u < units_.size(); ++u) {
      if (where_[u] != worst) continue;
      if (!best || units_[u].videos.size() > units_[*best].videos.size()) best = u;
    }
    return units_[best.value_or(0)];
  }

  const std::vector<SubjectUnit>& units() const { return units_; }

 private:
  struct Totals {
    int videos = 0;
    std::array<int, kCategoryCount> category{};
    int female = 0;
    long frames = 0;
  };

  static double over(double deviation, double tolerance) { return std::max(0.0, std::abs(deviation) - tolerance); }

  double split_violation(std::size_t s) const {
    const Totals& t = totals_[s];
    double v = std::abs(t.videos - static_cast<double>(report_.sizes[s]));
    for (std::size_t c = 0; c < kCategoryCount; ++c) v += over(t.category[c] - report_.category_target[c][s], opt_.category_tolerance);
    v += over(t.female - report_.female_target[s], opt_.gender_tolerance);
    return v;
  }

  // Hard violations dominate; squared target deviations and the frame-share
  // mismatch break ties between feasible assignments.
  double split_cost(std::size_t s) const {
    const Totals& t = totals_[s];
    double soft = 0.0;
    for (std::size_t c = 0; c < kCategoryCount; ++c) {
      const double d = t.category[c] - report_.category_target[c][s];
      soft += d * d;
    }
    const double dg = t.female - report_.female_target[s];
    soft += 0.25 * dg * dg;
    if (total_frames_ > 0) {
      const double n = static_cast<double>(report_.sizes[0] + report_.sizes[1] + report_.sizes[2]);
      const double df = static_cast<double>(t.frames) / total_frames_ - static_cast<double>(report_.sizes[s]) / n;
      soft += 10.0 * df * df;
    }
    return 1000.0 * split_violation(s) + soft;
  }

  double cost() const {
    double c = 0.0;
    for (std::size_t s = 0; s < kSplitCount; ++s) c += split_cost(s);
    return c;
  }

  void apply(std::size_t u, std::size_t s, int sign) {
    const auto& unit = units_[u];
    Totals& t = totals_[s];
    t.videos += sign * static_cast<int>(unit.videos.size());
    for (std::size_t c = 0; c < kCategoryCount; ++c) t.category[c] += sign * unit.category[c];
    t.female += sign * unit.female;
    t.frames += sign * unit.frames;
  }

  void move(std::size_t u, std::size_t s) {
    apply(u, where_[u], -1);
    where_[u] = s;
    apply(u, s, +1);
  }

  void greedy() {
    std::vector<std::size_t> order(units_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return units_[a].videos.size() > units_[b].videos.size(); });
    for (auto u : order) {
      std::optional<std::size_t> best;
      double best_delta = 0.0;
      for (std::size_t s = 0; s < kSplitCount; ++s) {
        if (report_.sizes[s] == 0) continue;
        const double before = split_cost(s);
        apply(u, s, +1);
        const double delta = split_cost(s) - before;
        apply(u, s, -1);
        if (!best || delta < best_delta) {
          best = s;
          best_delta = delta;
        }
      }
      where_[u] = *best;
      apply(u, *best, +1);
    }
  }

  void place(const std::vector<std::size_t>& where) {
    for (std::size_t u = 0; u < units_.size(); ++u)
      if (where_[u] != where[u]) move(u, where[u]);
  }

  // Random single moves and pairwise swaps. With temperature 0 only
  // non-worsening steps are kept; otherwise worse steps pass with
  // probability exp(-delta / T) and T decays linearly to zero.
  void improve(std::mt19937_64& rng, double temperature) {
    if (units_.size() < 2) return;
    std::uniform_int_distribution<std::size_t> pick_unit(0, units_.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_split(0, kSplitCount - 1);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    double current = cost();
    double best = current;
    std::vector<std::size_t> best_where = where_;
    auto accept = [&](double c, std::size_t it) {
      if (c <= current) return true;
      const double t = temperature * (1.0 - static_cast<double>(it) / static_cast<double>(opt_.iterations));
      return t > 0.0 && coin(rng) < std::exp(-(c - current) / t);
    };
    for (std::size_t it = 0; it < opt_.iterations; ++it) {
      const std::size_t a = pick_unit(rng);
      const std::size_t from = where_[a];
      if (rng() & 1) {
        const std::size_t to = pick_split(rng);
        if (to == from || report_.sizes[to] == 0) continue;
        move(a, to);
        const double c = cost();
        if (accept(c, it)) current = c;
        else move(a, from);
      } else {
        const std::size_t b = pick_unit(rng);
        if (where_[b] == from) continue;
        const std::size_t other = where_[b];
        move(a, other);
        move(b, from);
        const double c = cost();
        if (accept(c, it)) {
          current = c;
        } else {
          move(b, other);
          move(a, from);
        }
      }
      if (current < best) {
        best = current;
        best_where = where_;
      }
    }
    place(best_where);
  }

  static constexpr std::size_t kRestarts = 8;

  PartitionOptions opt_;
  PartitionReport report_;
  std::vector<SubjectUnit> units_;
  std::vector<std::size_t> where_;
  std::array<Totals, kSplitCount> totals_{};
  double total_frames_ = 0.0;
};

}  // namespace detail

/// Assigns every video to train/validation/test. Videos of one subject stay
/// together; split sizes are exact; per-category counts stay within one of
/// their proportional targets and the female count within two. Throws when
/// no assignment satisfying those rules is found, naming a blocking subject.
inline std::vector<VideoMeta> partition(std::vector<VideoMeta> videos, const PartitionOptions& opt = {}) {
  if (videos.empty()) throw ContractError("partition: no videos");
  for (const auto& v : videos)
    if (!v.category) throw ContractError("partition: video " + v.id + " has no category");
  detail::PartitionSearch search(videos, opt);
  const auto where = search.solve();
  if (search.violation() > 1e-9) {
    const auto& u = search.blocking_unit();
    throw ContractError("partition: constraints unsatisfiable; blocking subject " + u.subject + " (" + std::to_string(u.videos.size()) +
                        " videos)");
  }
  for (std::size_t u = 0; u < where.size(); ++u)
    for (auto i : search.units()[u].videos) videos[i].split = static_cast<Split>(where[u]);
  return videos;
}

inline void write_split_manifest(const std::filesystem::path& path, const std::vector<VideoMeta>& videos) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "video_id,split\n";
  for (const auto& v : videos) out << v.id << ',' << (v.split ? split_name(*v.split) : "") << '\n';
}

}  // namespace vaffect::corpus
