#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <thread>

#include "support/run_fixture.hpp"
#include "vaffect/train/adam.hpp"
#include "vaffect/train/checkpoint.hpp"
#include "vaffect/train/evaluator.hpp"
#include "vaffect/train/trainer.hpp"

using namespace vaffect;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::map<std::string, Tensor<float>> values(const ParameterSet<float>& ps) {
  std::map<std::string, Tensor<float>> out;
  for (const auto& p : ps) out.emplace(p.name, p.value);
  return out;
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

// One synthetic corpus shared by the whole file: 3 short videos.
const std::vector<fs::path>& synth_corpus() {
  static const std::vector<fs::path> files = fixture::synth_records(fixture::scratch("train_corpus"), 3, 40);
  return files;
}

datapipe::SequenceLoader train_loader(const RunConfig& rc) {
  return datapipe::SequenceLoader(synth_corpus(), {.seq_length = rc.seq_length, .batch_size = rc.batch_size, .training = true, .seed = rc.seed});
}

}  // namespace

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, MatchesScalarReference) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  ParameterSet<double> ps;
  auto& a = ps.add("a", Tensor<double>({3}, {0.5, -1.0, 2.0}));
  auto& b = ps.add("b", Tensor<double>({2, 2}, {0.1, 0.2, 0.3, 0.4}));
  const AdamOptions opt{.learning_rate = 0.01};
  Adam<double> adam(opt);

  std::vector<double> theta{0.5, -1.0, 2.0, 0.1, 0.2, 0.3, 0.4}, m(7, 0.0), v(7, 0.0);
  for (int t = 1; t <= 100; ++t) {
    std::vector<double> g(7);
    for (auto& x : g) x = n(rng);
    for (std::size_t i = 0; i < 3; ++i) a.grad[i] = g[i];
    for (std::size_t i = 0; i < 4; ++i) b.grad[i] = g[3 + i];
    adam.step(ps);
    for (std::size_t i = 0; i < 7; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mhat = m[i] / (1 - std::pow(0.9, t)), vhat = v[i] / (1 - std::pow(0.999, t));
      theta[i] -= 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
    }
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.value[i], theta[i], 1e-10);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(b.value[i], theta[3 + i], 1e-10);
  EXPECT_EQ(adam.step_count(), 100u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterSet<double> ps;
  auto& p = ps.add("p", Tensor<double>({2}, {1.0, 1.0}));
  p.grad = Tensor<double>({2}, {3.0, -0.5});
  Adam<double> adam({.learning_rate = 0.1});
  adam.step(ps);
  EXPECT_NEAR(p.value[0], 0.9, 1e-7);
  EXPECT_NEAR(p.value[1], 1.1, 1e-7);
}

TEST(Adam, ZeroGradientsLeaveParametersAndAdvanceStep) {
  ParameterSet<double> ps;
  auto& p = ps.add("p", Tensor<double>({3}, {1, 2, 3}));
  Adam<double> adam;
  for (int k = 0; k < 5; ++k) adam.step(ps);
  EXPECT_EQ(p.value, Tensor<double>({3}, {1, 2, 3}));
  EXPECT_EQ(adam.step_count(), 5u);
}

TEST(Adam, SkipsFrozenAndStateParameters) {
  ParameterSet<double> ps;
  auto& frozen = ps.add("frozen", Tensor<double>({1}, {1.0}));
  auto& state = ps.add("state", Tensor<double>({1}, {2.0}));
  auto& live = ps.add("live", Tensor<double>({1}, {3.0}));
  frozen.trainable = false;
  state.is_state = true;
  for (auto* p : {&frozen, &state, &live}) p->grad[0] = 1.0;
  Adam<double> adam;
  adam.step(ps);
  EXPECT_EQ(frozen.value[0], 1.0);
  EXPECT_EQ(state.value[0], 2.0);
  EXPECT_NE(live.value[0], 3.0);
  EXPECT_EQ(adam.moments().size(), 1u);
}

TEST(Adam, ClipsAfterUpdate) {
  ParameterSet<double> ps;
  auto& p = ps.add("p", Tensor<double>({2}, {0.99, -0.99}));
  p.clip_abs = 1.0;
  p.grad = Tensor<double>({2}, {-1.0, 1.0});
  Adam<double> adam({.learning_rate = 0.5});
  adam.step(ps);
  EXPECT_EQ(p.value[0], 1.0);
  EXPECT_EQ(p.value[1], -1.0);
}

TEST(Adam, NonFiniteGradientThrowsBeforeAnyUpdate) {
  ParameterSet<double> ps;
  auto& a = ps.add("a", Tensor<double>({1}, {1.0}));
  auto& b = ps.add("b", Tensor<double>({1}, {1.0}));
  a.grad[0] = 1.0;
  b.grad[0] = std::nan("");
  Adam<double> adam;
  EXPECT_THROW(adam.step(ps), ContractError);
  EXPECT_EQ(a.value[0], 1.0);
  EXPECT_EQ(adam.step_count(), 0u);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

Checkpoint sample_checkpoint(std::uint64_t step) {
  ParameterSet<float> ps;
  std::mt19937_64 rng(step);
  std::normal_distribution<float> n;
  auto& w = ps.add("layer/weights", Tensor<float>({3, 2}));
  auto& s = ps.add("layer/mean", Tensor<float>({2}));
  s.is_state = true;
  for (auto& x : w.value.data()) x = n(rng);
  for (auto& x : w.grad.data()) x = n(rng);
  Adam<float> adam;
  adam.step(ps);
  return capture(ps, &adam, step);
}

}  // namespace

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const auto dir = fixture::scratch("ckpt_roundtrip");
  const auto c = sample_checkpoint(7);
  write_checkpoint(dir / "a.vack", c);
  const auto back = read_checkpoint(dir / "a.vack");
  EXPECT_EQ(back.step, 7u);
  EXPECT_EQ(back.params, c.params);
  EXPECT_EQ(back.adam, c.adam);
  EXPECT_EQ(back.adam_step, 1u);
  write_checkpoint(dir / "b.vack", back);
  EXPECT_EQ(file_bytes(dir / "a.vack"), file_bytes(dir / "b.vack"));
  fs::remove_all(dir);
}

TEST(Checkpoint, RestoreRebuildsParametersAndOptimizer) {
  const auto c = sample_checkpoint(3);
  ParameterSet<float> ps;
  ps.add("layer/weights", Tensor<float>({3, 2}));
  ps.add("layer/mean", Tensor<float>({2}));
  Adam<float> adam;
  restore(c, ps, &adam);
  EXPECT_EQ(ps.at("layer/weights").value, c.find("layer/weights")->value);
  EXPECT_EQ(adam.step_count(), 1u);
  EXPECT_EQ(adam.moments().size(), 1u);
  EXPECT_EQ(encode_checkpoint(capture(ps, &adam, 3)), encode_checkpoint(c));
}

TEST(Checkpoint, RestoreRejectsMismatches) {
  const auto c = sample_checkpoint(3);
  ParameterSet<float> wrong_shape;
  wrong_shape.add("layer/weights", Tensor<float>({2, 3}));
  wrong_shape.add("layer/mean", Tensor<float>({2}));
  EXPECT_THROW(restore(c, wrong_shape), ShapeError);
  ParameterSet<float> wrong_name;
  wrong_name.add("layer/w", Tensor<float>({3, 2}));
  wrong_name.add("layer/mean", Tensor<float>({2}));
  EXPECT_THROW(restore(c, wrong_name), ContractError);
  ParameterSet<float> partial;
  partial.add("layer/weights", Tensor<float>({3, 2}));
  partial.add("layer/missing", Tensor<float>({1}));
  EXPECT_EQ(restore_prefixes(c, partial, {"other/"}), 0u);
  EXPECT_THROW(restore_prefixes(c, partial, {"layer/"}), ContractError);
}

TEST(Checkpoint, CorruptionIsRejected) {
  auto bytes = encode_checkpoint(sample_checkpoint(1));
  auto flipped = bytes;
  flipped[20] ^= 0x10;
  EXPECT_THROW(decode_checkpoint(flipped), FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  EXPECT_THROW(decode_checkpoint(truncated), FormatError);
  EXPECT_THROW(decode_checkpoint({}), FormatError);
}

TEST(Checkpoint, FileNamesAndListing) {
  EXPECT_EQ(checkpoint_filename(42), "ckpt-0000000042.vack");
  EXPECT_EQ(checkpoint_step("dir/ckpt-0000000042.vack"), 42u);
  EXPECT_FALSE(checkpoint_step("ckpt-0000000042.vack.tmp"));
  EXPECT_FALSE(checkpoint_step("notes.txt"));

  const auto dir = fixture::scratch("ckpt_list");
  for (std::uint64_t s : {30, 10, 20}) write_checkpoint(dir / checkpoint_filename(s), sample_checkpoint(s));
  std::ofstream(dir / "ckpt-0000000040.vack.tmp") << "partial";
  const auto listed = list_checkpoints(dir);
  ASSERT_EQ(listed.size(), 3u);
  EXPECT_EQ(listed[0].first, 10u);
  EXPECT_EQ(listed[2].first, 30u);
  fs::remove_all(dir);
}

TEST(Checkpoint, FailedWriteLeavesNoTemporaryFile) {
  const auto dir = fixture::scratch("ckpt_fail");
  const auto path = dir / "x.vack";
  EXPECT_THROW(write_checkpoint(path, sample_checkpoint(1), [](const fs::path& tmp) { fs::remove(tmp); }), FormatError);
  EXPECT_FALSE(fs::exists(path));
  EXPECT_FALSE(fs::exists(dir / "x.vack.tmp"));
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Run configuration

TEST(RunConfig, JsonRoundTripAndFingerprint) {
  const auto dir = fixture::scratch("runcfg");
  auto rc = fixture::small_run(StrategyCase::LastConv, 9);
  write_run_config(dir, rc);
  const auto back = read_run_config(dir);
  EXPECT_EQ(to_json(back), to_json(rc));
  EXPECT_EQ(fingerprint(back), fingerprint(rc));

  auto other = rc;
  other.model.cell.hidden = 16;
  EXPECT_NE(fingerprint(other), fingerprint(rc));

  auto j = to_json(rc);
  j["model"]["hidden"] = 32;
  EXPECT_THROW(run_config_from_json(j), FormatError);
  EXPECT_THROW(parse_case(4), ContractError);
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Evaluation reports

TEST(Eval, PerfectPredictionsScoreOne) {
  EvalResult r;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 500; ++i) {
    const double v = u(rng), a = u(rng);
    r.valence.add(v, v);
    r.arousal.add(a, a);
  }
  const auto rep = make_report(r, 5, "validation");
  EXPECT_NEAR(rep.ccc_valence, 1.0, 1e-12);
  EXPECT_NEAR(rep.ccc_arousal, 1.0, 1e-12);
  EXPECT_EQ(rep.mse_valence, 0.0);
}

// A model whose head has zero weights predicts its bias everywhere: CCC is
// 0 and MSE is the label variance plus the squared bias error.
TEST(Eval, ConstantModelGivesVariancePlusBias) {
  auto rc = fixture::small_run();
  Model<float> model(model_config_for(rc));
  const float c = 0.25f;
  for (auto& p : model.parameters()) {
    if (!starts_with(p.name, "head/")) continue;
    for (auto& x : p.value.data()) x = p.value.rank() == 1 ? c : 0.0f;
  }
  auto data = datapipe::RecordSet::load(synth_corpus());
  datapipe::SequenceLoader loader(data, {.seq_length = rc.seq_length, .batch_size = rc.batch_size});
  const auto rep = make_report(evaluate(model, loader), 0, "validation");
  EXPECT_EQ(rep.ccc_valence, 0.0);
  EXPECT_EQ(rep.ccc_arousal, 0.0);

  // Independent pass over the same windows.
  datapipe::SequenceLoader again(data, {.seq_length = rc.seq_length, .batch_size = rc.batch_size});
  std::vector<double> v;
  while (auto b = again.next())
    for (std::size_t i = 0; i < b->rows * b->length; ++i) v.push_back(b->labels[2 * i]);
  double mean = 0, var = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  EXPECT_NEAR(rep.mse_valence, var + (mean - c) * (mean - c), 1e-6);
}

TEST(Eval, ReportFileRoundTrip) {
  const auto dir = fixture::scratch("report");
  const EvalReport a{10, 0.5, 0.25, 0.1, 0.2, "validation"}, b{20, 0.75, -0.125, 0.05, 0.3, "validation"};
  append_report(dir / "r.csv", a);
  append_report(dir / "r.csv", b);
  const auto back = read_reports(dir / "r.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].step, 20u);
  EXPECT_EQ(back[1].ccc_arousal, -0.125);
  std::ifstream in(dir / "r.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, kReportHeader);
  fs::remove_all(dir);
}

TEST(Eval, SelectBestPrefersEarliestOnTies) {
  std::vector<EvalReport> r{{30, 0.8, 0.1, 0, 0, "v"}, {10, 0.8, 0.4, 0, 0, "v"}, {20, 0.7, 0.4, 0, 0, "v"}};
  EXPECT_EQ(select_best(r, corpus::Dimension::Valence), 10u);
  EXPECT_EQ(select_best(r, corpus::Dimension::Arousal), 10u);
  r.push_back({40, 0.9, -1, 0, 0, "v"});
  EXPECT_EQ(select_best(r, corpus::Dimension::Valence), 40u);
  EXPECT_THROW(select_best({}, corpus::Dimension::Valence), ContractError);
}

TEST(Eval, SelectBestOnMonotoneAndSplitPeaks) {
  std::vector<EvalReport> rising;
  for (std::uint64_t s = 1; s <= 5; ++s) rising.push_back({s * 10, 0.1 * static_cast<double>(s), 0.05 * static_cast<double>(s), 0, 0, "v"});
  EXPECT_EQ(select_best(rising, corpus::Dimension::Valence), 50u);
  EXPECT_EQ(select_best(rising, corpus::Dimension::Arousal), 50u);
  const std::vector<EvalReport> split{{50, 0.3, 0.6, 0, 0, "v"}, {100, 0.7, 0.2, 0, 0, "v"}};
  EXPECT_EQ(select_best(split, corpus::Dimension::Valence), 100u);
  EXPECT_EQ(select_best(split, corpus::Dimension::Arousal), 50u);
}

TEST(Eval, SelectBestMatchesBruteForceArgmax) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<EvalReport> r;
    const std::size_t n = 1 + rng() % 30;
    std::vector<std::uint64_t> steps(n);
    for (std::size_t i = 0; i < n; ++i) steps[i] = 10 * (i + 1);
    std::shuffle(steps.begin(), steps.end(), rng);
    // Coarse values so ties are frequent.
    for (std::size_t i = 0; i < n; ++i)
      r.push_back({steps[i], static_cast<double>(rng() % 5) / 4, static_cast<double>(rng() % 5) / 4, 0, 0, "v"});
    for (auto dim : {corpus::Dimension::Valence, corpus::Dimension::Arousal}) {
      auto value = [&](const EvalReport& e) { return dim == corpus::Dimension::Valence ? e.ccc_valence : e.ccc_arousal; };
      double top = -2;
      for (const auto& e : r) top = std::max(top, value(e));
      std::uint64_t earliest = ~0ULL;
      for (const auto& e : r)
        if (value(e) == top) earliest = std::min(earliest, e.step);
      EXPECT_EQ(select_best(r, dim), earliest);
    }
  }
}

// ---------------------------------------------------------------------------
// Training

TEST(Train, LossDecreasesOnSyntheticData) {
  auto rc = fixture::small_run();
  Trainer trainer(rc);
  auto loader = train_loader(rc);
  const auto batch = *loader.next();
  // Fitting a single fixed batch must drive the loss down.
  double first = 0, last = 0;
  for (int step = 0; step < 200; ++step) {
    const double loss = trainer.train_step(batch);
    if (step < 20) first += loss;
    if (step >= 180) last += loss;
  }
  EXPECT_LT(last, 0.5 * first);
  EXPECT_EQ(trainer.step(), 200u);
}

TEST(Train, IdenticalRunsProduceIdenticalCheckpoints) {
  auto run = [](const fs::path& dir) {
    auto rc = fixture::small_run();
    Trainer trainer(rc);
    auto loader = train_loader(rc);
    TrainLoopOptions opt;
    opt.out_dir = dir;
    opt.max_steps = 6;
    opt.checkpoint_every = 3;
    opt.quiet = true;
    train_loop(trainer, loader, opt);
  };
  const auto a = fixture::scratch("same_a"), b = fixture::scratch("same_b");
  run(a);
  run(b);
  for (std::uint64_t s : {3, 6}) {
    const auto fa = file_bytes(a / checkpoint_filename(s)), fb = file_bytes(b / checkpoint_filename(s));
    ASSERT_FALSE(fa.empty());
    EXPECT_EQ(fa, fb) << s;
  }
  EXPECT_TRUE(fs::exists(a / kDoneMarker));
  EXPECT_EQ(file_bytes(a / kConfigFile), file_bytes(b / kConfigFile));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Train, ResumeContinuesIdentically) {
  auto rc = fixture::small_run();
  auto loader = train_loader(rc);
  std::vector<datapipe::SequenceBatch> batches;
  for (int k = 0; k < 4; ++k) batches.push_back(*loader.next());

  Trainer straight(rc);
  for (const auto& b : batches) straight.train_step(b);

  Trainer first(rc);
  first.train_step(batches[0]);
  first.train_step(batches[1]);
  const auto snap = decode_checkpoint(encode_checkpoint(first.snapshot()));
  Trainer second(rc);
  second.resume(snap);
  second.train_step(batches[2]);
  second.train_step(batches[3]);
  EXPECT_EQ(encode_checkpoint(second.snapshot()), encode_checkpoint(straight.snapshot()));
}

TEST(Strategy, FrozenBackboneIsUnchanged) {
  auto rc = fixture::small_run(StrategyCase::FrozenBackbone);
  Trainer trainer(rc);
  const auto before = values(trainer.model().parameters());
  auto loader = train_loader(rc);
  for (int k = 0; k < 10; ++k) trainer.train_step(*loader.next());
  std::size_t moved = 0;
  for (const auto& p : trainer.model().parameters()) {
    const bool same = p.value == before.at(p.name);
    if (starts_with(p.name, kBackbonePrefix)) EXPECT_TRUE(same) << p.name;
    else moved += !same;
  }
  EXPECT_GT(moved, 0u);
}

TEST(Strategy, LastConvOnlyMovesLastConvAndRecurrentParameters) {
  auto rc = fixture::small_run(StrategyCase::LastConv);
  Trainer trainer(rc);
  std::set<std::string> last_conv;
  for (auto* p : trainer.model().backbone().last_conv_parameters()) last_conv.insert(p->name);
  ASSERT_FALSE(last_conv.empty());
  const auto before = values(trainer.model().parameters());
  auto loader = train_loader(rc);
  for (int k = 0; k < 10; ++k) trainer.train_step(*loader.next());
  for (const auto& p : trainer.model().parameters()) {
    const bool same = p.value == before.at(p.name);
    if (starts_with(p.name, kBackbonePrefix) && !last_conv.count(p.name)) {
      EXPECT_TRUE(same) << p.name;
    } else if (!p.is_state) {
      EXPECT_FALSE(same) << p.name;
    }
  }
}

TEST(Strategy, FromRecurrentStartsFromSourceCheckpoint) {
  const auto dir = fixture::scratch("case3");
  auto src_rc = fixture::small_run(StrategyCase::FullyTrainable, 5);
  Trainer source(src_rc);
  auto loader = train_loader(src_rc);
  for (int k = 0; k < 3; ++k) source.train_step(*loader.next());
  write_checkpoint(dir / "src.vack", source.snapshot());

  auto rc = fixture::small_run(StrategyCase::FromRecurrent, 6);
  Trainer target(rc, {.backbone = std::nullopt, .recurrent = dir / "src.vack"});
  const auto src = values(source.model().parameters());
  std::size_t copied = 0;
  for (const auto& p : target.model().parameters()) {
    const bool recurrent = std::any_of(kRecurrentPrefixes.begin(), kRecurrentPrefixes.end(),
                                       [&](const std::string& pre) { return starts_with(p.name, pre); });
    if (recurrent) {
      EXPECT_EQ(p.value, src.at(p.name)) << p.name;
      ++copied;
    } else {
      EXPECT_TRUE(starts_with(p.name, kBackbonePrefix)) << p.name;
    }
  }
  EXPECT_GT(copied, 0u);
  EXPECT_EQ(target.step(), 0u);
  EXPECT_THROW(Trainer{rc}, ContractError);
  EXPECT_THROW((Trainer{src_rc, {.backbone = std::nullopt, .recurrent = dir / "src.vack"}}), ContractError);
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Watcher

TEST(Watcher, SkipsOutOfOrderAndUnreadableCheckpoints) {
  const auto dir = fixture::scratch("watch_order");
  auto rc = fixture::small_run();
  write_run_config(dir, rc);
  Trainer trainer(rc);
  auto snap = trainer.snapshot();
  snap.step = 20;
  write_checkpoint(dir / checkpoint_filename(20), snap);
  std::ofstream(dir / checkpoint_filename(30), std::ios::binary) << "not a checkpoint";
  std::ofstream(dir / kDoneMarker) << "30\n";

  std::vector<std::string> warnings;
  WatchOptions opt;
  opt.poll = std::chrono::milliseconds(5);
  opt.on_warning = [&](const std::string& w) { warnings.push_back(w); };
  auto data = datapipe::RecordSet::load(synth_corpus());
  auto rows = eval_loop(dir, data, dir / "eval.csv", opt);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].step, 20u);
  EXPECT_EQ(warnings.size(), 1u);

  // A checkpoint that appears after a later one was evaluated is skipped.
  fs::remove(dir / kDoneMarker);
  fs::remove(dir / checkpoint_filename(30));
  snap.step = 10;
  std::thread writer([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(200));
    write_checkpoint(dir / checkpoint_filename(10), snap);
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    std::ofstream(dir / kDoneMarker) << "done\n";
  });
  warnings.clear();
  rows = eval_loop(dir, data, dir / "eval2.csv", opt);
  writer.join();
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].step, 20u);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("older"), std::string::npos);
  EXPECT_EQ(read_reports(dir / "eval2.csv").size(), 1u);
  fs::remove_all(dir);
}

// Checkpoints that land in one poll in reverse order are evaluated in step
// order, and evaluation leaves every file untouched.
TEST(Watcher, ReportsInStepOrderAndIsReadOnly) {
  const auto dir = fixture::scratch("watch_same_poll");
  auto rc = fixture::small_run();
  write_run_config(dir, rc);
  Trainer trainer(rc);
  for (std::uint64_t s : {30, 10, 20}) {
    auto snap = trainer.snapshot();
    snap.step = s;
    write_checkpoint(dir / checkpoint_filename(s), snap);
  }
  std::ofstream(dir / kDoneMarker) << "30\n";
  std::map<fs::path, std::vector<std::uint8_t>> before;
  for (const auto& e : fs::directory_iterator(dir)) before[e.path()] = file_bytes(e.path());
  const auto containers = synth_corpus();
  std::map<fs::path, std::vector<std::uint8_t>> data_before;
  for (const auto& f : containers) data_before[f] = file_bytes(f);

  WatchOptions opt;
  opt.poll = std::chrono::milliseconds(5);
  const auto rows = eval_loop(dir, datapipe::RecordSet::load(containers), dir / "eval.csv", opt);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].step, 10u);
  EXPECT_EQ(rows[1].step, 20u);
  EXPECT_EQ(rows[2].step, 30u);
  for (const auto& [path, bytes] : before) EXPECT_EQ(file_bytes(path), bytes) << path;
  for (const auto& [path, bytes] : data_before) EXPECT_EQ(file_bytes(path), bytes) << path;
  fs::remove_all(dir);
}

// Training and evaluation run concurrently; every rename is delayed while
// the temporary file sits next to the real ones. The watcher must only ever
// evaluate complete checkpoints, each exactly once, and its numbers must
// match a later evaluation of the same file.
TEST(Watcher, NeverReadsPartialCheckpointsUnderDelayedRenames) {
  const auto dir = fixture::scratch("watch_delay");
  auto rc = fixture::small_run();
  auto data = datapipe::RecordSet::load(synth_corpus());
  std::atomic<int> renames{0};

  std::vector<std::string> warnings;
  std::vector<EvalReport> rows;
  std::thread watcher([&] {
    WatchOptions opt;
    opt.poll = std::chrono::milliseconds(2);
    opt.on_warning = [&](const std::string& w) { warnings.push_back(w); };
    opt.idle_timeout = std::chrono::seconds(60);
    // Wait until the trainer has created the directory contents.
    while (!fs::exists(dir / kConfigFile)) std::this_thread::sleep_for(std::chrono::milliseconds(1));
    rows = eval_loop(dir, data, dir / "eval.csv", opt);
  });

  Trainer trainer(rc);
  auto loader = train_loader(rc);
  TrainLoopOptions opt;
  opt.out_dir = dir;
  opt.max_steps = 12;
  opt.checkpoint_every = 2;
  opt.quiet = true;
  opt.before_rename = [&](const fs::path& tmp) {
    // Leave a half-written sibling too, as a crashed writer would.
    auto bytes = file_bytes(tmp);
    bytes.resize(bytes.size() / 2);
    std::ofstream(tmp.string() + ".partial", std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                                     static_cast<std::streamsize>(bytes.size()));
    std::this_thread::sleep_for(std::chrono::milliseconds(40));
    ++renames;
  };
  train_loop(trainer, loader, opt);
  watcher.join();

  EXPECT_EQ(renames.load(), 6);
  EXPECT_TRUE(warnings.empty()) << warnings.front();
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows.back().step, 12u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LT(rows[i - 1].step, rows[i].step);
  for (const auto& r : rows) {
    const auto again = evaluate_checkpoint(rc, dir / checkpoint_filename(r.step), data, "validation");
    EXPECT_EQ(again.ccc_valence, r.ccc_valence) << r.step;
    EXPECT_EQ(again.mse_arousal, r.mse_arousal) << r.step;
  }
  fs::remove_all(dir);
}
