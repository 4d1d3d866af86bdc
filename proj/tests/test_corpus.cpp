#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "support/partition_fixture.hpp"
#include "vaffect/corpus/annotation.hpp"
#include "vaffect/corpus/histogram.hpp"
#include "vaffect/corpus/partition.hpp"
#include "vaffect/corpus/stats.hpp"
#include "vaffect/corpus/synth.hpp"

using namespace vaffect;
using namespace vaffect::corpus;
namespace fs = std::filesystem;

namespace {

AnnotationTrack table_track() {
  AnnotationTrack t;
  const double times[] = {0.010, 0.030, 0.041, 0.057, 0.089, 0.102, 0.119};
  for (int i = 0; i < 7; ++i) t.samples.push_back({times[i], 121 + i});
  return t;
}

// Linear scan over every entry; strict < keeps the earliest on ties.
std::vector<int> brute_force_match(const AnnotationTrack& t, std::size_t frames, double interval) {
  std::vector<int> out;
  for (std::size_t k = 1; k <= frames; ++k) {
    const double ft = static_cast<double>(k) * interval;
    std::size_t best = 0;
    for (std::size_t i = 1; i < t.samples.size(); ++i)
      if (std::abs(t.samples[i].time - ft) < std::abs(t.samples[best].time - ft)) best = i;
    out.push_back(t.samples[best].value);
  }
  return out;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("vaffect_corpus_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Image random_image(std::mt19937_64& rng, std::size_t h = 8, std::size_t w = 8) {
  Image img(h, w);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() & 0xff);
  return img;
}

}  // namespace

// ---------------------------------------------------------------------------
// Matching

TEST(MatchTrack, TableExampleFrameTwo) {
  const auto v = match_track(table_track(), 3);
  EXPECT_EQ(v[1], 124);
  EXPECT_EQ(v[0], 122);  // t = 0.03333 is nearest to 0.030
  EXPECT_EQ(v[2], 126);  // t = 0.09999 is nearest to 0.102
}

TEST(MatchTrack, SingleEntryFillsEveryFrame) {
  AnnotationTrack t;
  t.samples.push_back({1.5, -42});
  for (int v : match_track(t, 20)) EXPECT_EQ(v, -42);
}

TEST(MatchTrack, EmptyTrackThrows) { EXPECT_THROW(match_track(AnnotationTrack{}, 3), ContractError); }

TEST(MatchTrack, TiesGoToEarlierSample) {
  AnnotationTrack t;
  t.samples = {{0.25, 1}, {0.75, 2}};
  EXPECT_EQ(match_track(t, 1, 0.5)[0], 1);
}

TEST(MatchTrack, EqualsBruteForceOnRandomTracks) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    AnnotationTrack t;
    double time = std::uniform_real_distribution<double>(0, 0.2)(rng);
    const std::size_t n = 1 + rng() % 60;
    for (std::size_t i = 0; i < n; ++i) {
      // Millisecond grid makes exact ties between neighbours common.
      t.samples.push_back({std::round(time * 1000) / 1000, static_cast<int>(rng() % 2001) - 1000});
      time += 0.001 * static_cast<double>(1 + rng() % 80);
    }
    const std::size_t frames = 1 + rng() % 120;
    const double interval = trial % 2 ? kFrameInterval : 0.005 * static_cast<double>(1 + rng() % 10);
    ASSERT_EQ(match_track(t, frames, interval), brute_force_match(t, frames, interval)) << "trial " << trial;
  }
}

TEST(AnnotationTrack, ParseAndValidate) {
  std::istringstream ok("0.010 121\n\n0.030 -1000\n");
  const auto t = parse_track(ok, Dimension::Arousal);
  ASSERT_EQ(t.samples.size(), 2u);
  EXPECT_EQ(t.samples[1].value, -1000);
  std::istringstream out_of_range("0.01 1001\n");
  EXPECT_THROW(parse_track(out_of_range, Dimension::Valence), FormatError);
  std::istringstream non_monotone("0.02 1\n0.02 2\n");
  EXPECT_THROW(parse_track(non_monotone, Dimension::Valence), FormatError);
  std::istringstream garbage("0.02 1 extra\n");
  EXPECT_THROW(parse_track(garbage, Dimension::Valence), FormatError);
}

TEST(AnnotationTrack, WriteReadRoundTrip) {
  TempDir dir;
  const auto t = table_track();
  write_track(dir.path / "v.txt", t);
  const auto back = read_track(dir.path / "v.txt", Dimension::Valence);
  ASSERT_EQ(back.samples.size(), t.samples.size());
  for (std::size_t i = 0; i < t.samples.size(); ++i) {
    EXPECT_EQ(back.samples[i].time, t.samples[i].time);
    EXPECT_EQ(back.samples[i].value, t.samples[i].value);
  }
}

// ---------------------------------------------------------------------------
// Merging

TEST(Merge, RowsPerFrame) {
  const auto rows = merge(std::vector<int>(7, 1), std::vector<int>(7, 2));
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows.front(), (MergedRow{1, 1, 2}));
  EXPECT_EQ(rows.back(), (MergedRow{7, 1, 2}));
}

TEST(Merge, CountMismatchThrows) { EXPECT_THROW(merge(std::vector<int>(7), std::vector<int>(6)), ContractError); }

TEST(Merge, GoldenThreeFrameFile) {
  TempDir dir;
  write_merged(dir.path / "m.txt", merge({124, -3, 1000}, {-1000, 0, 57}));
  std::ifstream in(dir.path / "m.txt", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(bytes, "1\t124\t-1000\n2\t-3\t0\n3\t1000\t57\n");
  EXPECT_EQ(read_merged(dir.path / "m.txt"), merge({124, -3, 1000}, {-1000, 0, 57}));
}

// ---------------------------------------------------------------------------
// Histogram filtering

TEST(Histogram, CountsSumToPixelCount) {
  std::mt19937_64 rng(2);
  const auto img = random_image(rng, 5, 7);
  for (std::size_t bins : {2, 16, 256}) {
    const auto h = histogram(img, bins);
    for (std::size_t c = 0; c < 3; ++c) {
      double total = 0;
      for (double v : h.channel(c)) total += v;
      EXPECT_EQ(total, 35.0);
    }
  }
  EXPECT_THROW(histogram(img, 1), ContractError);
}

TEST(Histogram, IdenticalImagesAreFullySimilar) {
  std::mt19937_64 rng(3);
  const auto img = random_image(rng);
  EXPECT_NEAR(similarity(histogram(img, 32), histogram(img, 32)), 1.0, 1e-12);
}

TEST(Histogram, BlackVersusWhiteIsDissimilar) {
  const double s = similarity(histogram(Image(4, 4, 0), 256), histogram(Image(4, 4, 255), 256));
  EXPECT_LT(s, 0.1);
  // Two disjoint one-hot histograms per channel: correlation -1/(bins-1).
  EXPECT_NEAR(s, -1.0 / 255.0, 1e-12);
}

TEST(Histogram, SimilarityMatchesDirectFormula) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t bins = 2 + rng() % 60;
    const auto a = histogram(random_image(rng, 6, 5), bins), b = histogram(random_image(rng, 4, 9), bins);
    // Normalise per channel then correlate, in extended precision.
    std::vector<long double> x, y;
    for (std::size_t c = 0; c < 3; ++c) {
      long double ta = 0, tb = 0;
      for (std::size_t i = 0; i < bins; ++i) {
        ta += a.counts[c * bins + i];
        tb += b.counts[c * bins + i];
      }
      for (std::size_t i = 0; i < bins; ++i) {
        x.push_back(a.counts[c * bins + i] / ta);
        y.push_back(b.counts[c * bins + i] / tb);
      }
    }
    const long double n = static_cast<long double>(x.size());
    long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      sx += x[i];
      sy += y[i];
      sxx += x[i] * x[i];
      syy += y[i] * y[i];
      sxy += x[i] * y[i];
    }
    const long double r = (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
    EXPECT_NEAR(similarity(a, b), static_cast<double>(r), 1e-9);
  }
}

TEST(Histogram, BinMismatchThrows) {
  Image img(2, 2, 10);
  EXPECT_THROW(similarity(histogram(img, 8), histogram(img, 16)), ContractError);
}

TEST(PickFace, FindsReferenceAmongCandidates) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Image> cands;
    const std::size_t n = 1 + rng() % 6;
    for (std::size_t i = 0; i < n; ++i) cands.push_back(random_image(rng));
    const auto ref = random_image(rng);
    const std::size_t pos = rng() % (n + 1);
    cands.insert(cands.begin() + static_cast<long>(pos), ref);
    EXPECT_EQ(pick_face(cands, ref), pos);
  }
}

TEST(PickFace, SingleCandidateAndEmpty) {
  std::mt19937_64 rng(6);
  std::vector<Image> one{random_image(rng)};
  EXPECT_EQ(pick_face(one, random_image(rng)), 0u);
  EXPECT_THROW(pick_face(std::vector<Image>{}, one[0]), ContractError);
}

TEST(PickFace, MatchesBruteForceArgmaxOnEngineeredCandidates) {
  // Candidates blend the reference with noise at increasing strength, then
  // get shuffled; the argmax must agree with scoring every candidate.
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ref = random_image(rng, 12, 12);
    std::vector<Image> cands;
    for (int k = 0; k < 5; ++k) {
      Image c = ref;
      for (auto& p : c.pixels)
        if (rng() % 5 < static_cast<unsigned>(k + 1)) p = static_cast<std::uint8_t>(rng() & 0xff);
      cands.push_back(c);
    }
    std::shuffle(cands.begin(), cands.end(), rng);
    std::size_t best = 0;
    double best_s = -2;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const double s = similarity(histogram(cands[i], 32), histogram(ref, 32));
      if (s > best_s) best_s = s, best = i;
    }
    EXPECT_EQ(pick_face(cands, ref), best);
  }
}

TEST(PickFace, TiesGoToLowestIndex) {
  Image a(2, 2, 40);
  std::vector<Image> cands{Image(2, 2, 200), a, a};
  EXPECT_EQ(pick_face(cands, a), 1u);
}

// ---------------------------------------------------------------------------
// Categorisation

TEST(Categorize, Examples) {
  EXPECT_EQ(categorize(std::vector<int>(10, 500)), Category::MainlyPositive);
  EXPECT_EQ(categorize(std::vector<int>(10, -500)), Category::MainlyNegative);
  EXPECT_EQ(categorize(std::vector<int>(10, 0)), Category::Neutral);
  std::vector<int> half(10, 500);
  std::fill(half.begin() + 5, half.end(), -500);
  EXPECT_EQ(categorize(half), Category::BothValence);
  EXPECT_THROW(categorize(std::vector<int>{}), ContractError);
}

TEST(Categorize, ThresholdsAreStrict) {
  // 100 is not "above 100".
  EXPECT_EQ(categorize(std::vector<int>(4, 100)), Category::Neutral);
  EXPECT_EQ(categorize(std::vector<int>(4, 101)), Category::MainlyPositive);
  // p = 0.5, q = 0.2 -> not mainly positive, and both-valence applies.
  EXPECT_EQ(categorize(std::vector<int>{500, 500, 500, 500, 500, -500, -500, 0, 0, 0}), Category::BothValence);
}

TEST(Categorize, PermutationInvariant) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> v(1 + rng() % 40);
    for (auto& x : v) x = static_cast<int>(rng() % 2001) - 1000;
    const auto c = categorize(v);
    std::shuffle(v.begin(), v.end(), rng);
    EXPECT_EQ(categorize(v), c);
  }
}

// ---------------------------------------------------------------------------
// Partition

TEST(Partition, SingleVideoGoesToTrain) {
  VideoMeta v;
  v.id = "only";
  v.subject = "s";
  v.category = Category::Neutral;
  const auto out = partition({v});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].split, Split::Train);
}

TEST(Partition, CensusFixtureMatchesTable) {
  const auto fixture = fixture::corpus_159();
  std::array<std::size_t, 4> census{};
  std::set<std::string> subjects;
  std::size_t female = 0;
  for (const auto& v : fixture) {
    ++census[static_cast<std::size_t>(*v.category)];
    subjects.insert(v.subject);
    female += v.gender == Gender::Female;
  }
  EXPECT_EQ(census, (std::array<std::size_t, 4>{43, 58, 46, 12}));
  EXPECT_EQ(subjects.size(), 135u);
  EXPECT_EQ(female, 80u);

  const auto out = partition(fixture);
  EXPECT_TRUE(check_partition(out).empty());
  const auto r = partition_report(out, {});
  EXPECT_EQ(r.sizes, (std::array<std::size_t, 3>{103, 25, 31}));
  const std::size_t table[3][4] = {{27, 38, 29, 9}, {7, 9, 8, 1}, {9, 11, 9, 2}};
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_EQ(r.tally[s].videos, r.sizes[s]);
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_LE(std::abs(static_cast<long>(r.tally[s].category[c]) - static_cast<long>(table[s][c])), 1) << s << "," << c;
  }
}

TEST(Partition, DeterministicForSeed) {
  const auto a = partition(fixture::corpus_159());
  const auto b = partition(fixture::corpus_159());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].split, b[i].split);
}

TEST(Partition, RandomFixturesSatisfyEveryConstraint) {
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    auto videos = fixture::random_40(seed);
    const bool feasible = fixture::exhaustive_feasible(videos);
    std::vector<VideoMeta> out;
    try {
      out = partition(videos);
    } catch (const ContractError& e) {
      EXPECT_FALSE(feasible) << "seed " << seed << ": solver gave up on a feasible instance: " << e.what();
      continue;
    }
    EXPECT_TRUE(feasible) << "seed " << seed;
    // Independent checks on top of check_partition.
    ASSERT_EQ(out.size(), videos.size());
    std::map<std::string, Split> subject;
    for (const auto& v : out) {
      ASSERT_TRUE(v.split.has_value());
      auto [it, fresh] = subject.emplace(v.subject, *v.split);
      EXPECT_TRUE(fresh || it->second == *v.split);
    }
    const auto viol = check_partition(out);
    EXPECT_TRUE(viol.empty()) << "seed " << seed << ": " << (viol.empty() ? "" : viol.front());
  }
}

TEST(Partition, CheckerFlagsViolations) {
  auto videos = partition(fixture::corpus_159());
  // Move one video of a two-video subject into another split.
  videos[0].split = videos[0].split == Split::Train ? Split::Test : Split::Train;
  EXPECT_FALSE(check_partition(videos).empty());
}

TEST(Partition, InfeasibleSubjectsNameTheBlocker) {
  // One subject owns 9 of 10 videos; train can only hold 7.
  std::vector<VideoMeta> v;
  for (int i = 0; i < 10; ++i) {
    VideoMeta m;
    m.id = "v" + std::to_string(i);
    m.subject = i < 9 ? "big" : "small";
    m.category = Category::Neutral;
    v.push_back(m);
  }
  try {
    partition(v);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("big"), std::string::npos) << e.what();
  }
}

TEST(Partition, MetaRoundTrip) {
  TempDir dir;
  const auto videos = fixture::random_40(3);
  write_meta(dir.path / "meta.csv", videos);
  const auto back = read_meta(dir.path / "meta.csv");
  ASSERT_EQ(back.size(), videos.size());
  for (std::size_t i = 0; i < videos.size(); ++i) {
    EXPECT_EQ(back[i].id, videos[i].id);
    EXPECT_EQ(back[i].frames, videos[i].frames);
    EXPECT_EQ(back[i].gender, videos[i].gender);
    EXPECT_EQ(back[i].subject, videos[i].subject);
    EXPECT_EQ(back[i].category, videos[i].category);
  }
}

TEST(Partition, MetaRejectsWrongFps) {
  TempDir dir;
  std::ofstream(dir.path / "m.csv") << "video_id,frames,fps,gender,subject_id,category\nv1,100,25,female,s1,\n";
  EXPECT_THROW(read_meta(dir.path / "m.csv"), FormatError);
}

// ---------------------------------------------------------------------------
// Statistics

TEST(Stats, AllZeroLabelsFillOneBin) {
  const auto h = label_histogram(std::vector<int>(17, 0));
  ASSERT_EQ(h.size(), 1u);
  EXPECT_EQ(h[0], (HistogramBin{0, 100, 17}));
}

TEST(Stats, HandCountedBins) {
  const std::vector<int> v{-1000, -999, -901, -900, -1, 0, 99, 100, 999, 1000};
  const auto h = label_histogram(v);
  const std::vector<HistogramBin> expected{{-1000, -900, 3}, {-900, -800, 1}, {-100, 0, 1}, {0, 100, 2}, {100, 200, 1}, {900, 1000, 2}};
  EXPECT_EQ(h, expected);
  std::size_t total = 0;
  for (const auto& b : h) total += b.count;
  EXPECT_EQ(total, v.size());
}

TEST(Stats, CsvFormat) {
  std::ostringstream os;
  write_histogram_csv(os, label_histogram(std::vector<int>{5, 250}, 250));
  EXPECT_EQ(os.str(), "bin_low,bin_high,count\n0,250,1\n250,500,1\n");
  EXPECT_THROW(label_histogram(std::vector<int>{1}, 300), ContractError);
}

// ---------------------------------------------------------------------------
// Images and the synthetic corpus

TEST(Ppm, RoundTrip) {
  TempDir dir;
  std::mt19937_64 rng(9);
  const auto img = random_image(rng, 5, 3);
  write_ppm(dir.path / "a.ppm", img);
  EXPECT_EQ(read_ppm(dir.path / "a.ppm"), img);
}

TEST(Synth, PlanIsDeterministic) {
  SynthOptions opt;
  opt.videos = 3;
  const auto a = plan_synthetic_corpus(opt), b = plan_synthetic_corpus(opt);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].spec.id, b[i].spec.id);
    EXPECT_EQ(a[i].spec.seed, b[i].spec.seed);
    const auto ta = trajectory(a[i].spec), tb = trajectory(b[i].spec);
    EXPECT_EQ(render_frame(a[i].spec, ta, 17), render_frame(b[i].spec, tb, 17));
  }
}

TEST(Synth, BrightnessTracksValence) {
  SynthOptions opt;
  opt.videos = 1;
  const auto spec = plan_synthetic_corpus(opt)[0].spec;
  const auto traj = trajectory(spec);
  std::vector<double> mean_level, valence;
  for (std::size_t k = 1; k <= spec.frames; k += 7) {
    const auto img = render_frame(spec, traj, k);
    double total = 0;
    for (auto p : img.pixels) total += p;
    mean_level.push_back(total / static_cast<double>(img.pixels.size()));
    valence.push_back(spec.valence_at_frame(k));
  }
  // Pearson correlation between frame brightness and valence.
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < valence.size(); ++i) mx += mean_level[i], my += valence[i];
  mx /= valence.size();
  my /= valence.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < valence.size(); ++i) {
    sxy += (mean_level[i] - mx) * (valence[i] - my);
    sxx += (mean_level[i] - mx) * (mean_level[i] - mx);
    syy += (valence[i] - my) * (valence[i] - my);
  }
  EXPECT_GT(sxy / std::sqrt(sxx * syy), 0.95);
}

TEST(Synth, SampledTracksAreValidAndCoverTheVideo) {
  std::mt19937_64 rng(10);
  const auto curve = LabelCurve::random(rng);
  const auto t = sample_track(curve, Dimension::Valence, 300, rng);
  EXPECT_NO_THROW(t.validate());
  EXPECT_GT(t.samples.back().time, 300 * kFrameInterval);
}
