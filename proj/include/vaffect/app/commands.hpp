#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "vaffect/corpus/annotation.hpp"
#include "vaffect/corpus/histogram.hpp"
#include "vaffect/corpus/partition.hpp"
#include "vaffect/corpus/stats.hpp"
#include "vaffect/corpus/synth.hpp"
#include "vaffect/datapipe/loader.hpp"
#include "vaffect/datapipe/record.hpp"
#include "vaffect/train/evaluator.hpp"
#include "vaffect/train/trainer.hpp"

// Workflows behind each CLI subcommand. Every function validates its paths
// before doing any work and throws on failure.
namespace vaffect::app {

namespace fs = std::filesystem;

inline void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw ContractError(std::string(what) + " not found: " + p.string());
}

inline void require_dir(const fs::path& p, const char* what) {
  if (!fs::is_directory(p)) throw ContractError(std::string(what) + " is not a directory: " + p.string());
}

inline void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

/// Expands directories to the *.vasq files they contain.
inline std::vector<fs::path> expand_records(const std::vector<fs::path>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      for (const auto& e : fs::directory_iterator(in))
        if (e.path().extension() == ".vasq") out.push_back(e.path());
    } else {
      require_file(in, "record container");
      out.push_back(in);
    }
  }
  if (out.empty()) throw ContractError("no record containers given");
  std::sort(out.begin(), out.end());
  return out;
}

// match ----------------------------------------------------------------------

struct MatchArgs {
  std::optional<fs::path> valence;
  std::optional<fs::path> arousal;
  std::size_t frames = 0;
  fs::path out;
};

/// With both dimensions writes the merged "frame, valence, arousal" table;
/// with one writes "frame<TAB>value". Returns the per-frame values written.
inline std::vector<corpus::MergedRow> cmd_match(const MatchArgs& a) {
  if (!a.valence && !a.arousal) throw ContractError("match: give at least one annotation file");
  if (a.frames == 0) throw ContractError("match: frame count must be positive");
  if (a.valence) require_file(*a.valence, "valence annotation");
  if (a.arousal) require_file(*a.arousal, "arousal annotation");
  std::vector<int> v, ar;
  if (a.valence) v = corpus::match_track(corpus::read_track(*a.valence, corpus::Dimension::Valence), a.frames);
  if (a.arousal) ar = corpus::match_track(corpus::read_track(*a.arousal, corpus::Dimension::Arousal), a.frames);
  ensure_parent(a.out);
  if (a.valence && a.arousal) {
    auto rows = corpus::merge(v, ar);
    corpus::write_merged(a.out, rows);
    return rows;
  }
  const auto& only = a.valence ? v : ar;
  std::ofstream out(a.out);
  if (!out) throw FormatError("cannot write " + a.out.string());
  std::vector<corpus::MergedRow> rows;
  for (std::size_t k = 0; k < only.size(); ++k) {
    out << k + 1 << '\t' << only[k] << '\n';
    rows.push_back({static_cast<int>(k + 1), a.valence ? only[k] : 0, a.arousal ? only[k] : 0});
  }
  return rows;
}

// filter ---------------------------------------------------------------------

struct FilterArgs {
  fs::path candidates_dir;
  fs::path reference;
  std::size_t bins = 32;
  fs::path out;
};

struct FilterChoice {
  std::string group;
  std::size_t index;
  std::string file;
};

namespace detail {

inline std::vector<fs::path> sorted_images(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  // Numeric stems sort numerically, others lexically.
  std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
    const auto sa = a.stem().string(), sb = b.stem().string();
    const bool na = !sa.empty() && std::all_of(sa.begin(), sa.end(), ::isdigit);
    const bool nb = !sb.empty() && std::all_of(sb.begin(), sb.end(), ::isdigit);
    if (na && nb && sa.size() != sb.size()) return sa.size() < sb.size();
    return sa < sb;
  });
  return files;
}

}  // namespace detail

/// Each subdirectory of candidates_dir (or the directory itself when it
/// holds images directly) is one frame's set of detections; the detection
/// closest in colour histogram to the reference is chosen. Manifest rows:
/// "group,index,file".
inline std::vector<FilterChoice> cmd_filter(const FilterArgs& a) {
  require_dir(a.candidates_dir, "candidates dir");
  require_file(a.reference, "reference image");
  const Image ref = read_ppm(a.reference);
  std::vector<std::pair<std::string, fs::path>> groups;
  if (!detail::sorted_images(a.candidates_dir).empty()) groups.emplace_back(".", a.candidates_dir);
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(a.candidates_dir))
    if (e.is_directory()) subdirs.push_back(e.path());
  std::sort(subdirs.begin(), subdirs.end());
  for (const auto& d : subdirs) groups.emplace_back(d.filename().string(), d);
  std::vector<FilterChoice> out;
  for (const auto& [name, dir] : groups) {
    const auto files = detail::sorted_images(dir);
    if (files.empty()) continue;
    std::vector<Image> imgs;
    for (const auto& f : files) imgs.push_back(read_ppm(f));
    const std::size_t i = corpus::pick_face(imgs, ref, a.bins);
    out.push_back({name, i, files[i].filename().string()});
  }
  ensure_parent(a.out);
  std::ofstream m(a.out);
  if (!m) throw FormatError("cannot write " + a.out.string());
  m << "group,index,file\n";
  for (const auto& c : out) m << c.group << ',' << c.index << ',' << c.file << '\n';
  return out;
}

// partition ------------------------------------------------------------------

struct PartitionArgs {
  fs::path meta;
  std::optional<fs::path> merged_dir;  // <id>.txt or <id>/merged.txt per video, used to fill categories
  std::uint64_t seed = 0;
  fs::path out;
};

inline std::vector<corpus::VideoMeta> cmd_partition(const PartitionArgs& a) {
  require_file(a.meta, "meta file");
  if (a.merged_dir) require_dir(*a.merged_dir, "merged annotation dir");
  auto videos = corpus::read_meta(a.meta);
  for (auto& v : videos) {
    if (v.category) continue;
    if (!a.merged_dir) throw ContractError("partition: " + v.id + " has no category; pass the merged annotation dir");
    fs::path p = *a.merged_dir / (v.id + ".txt");
    if (!fs::exists(p)) p = *a.merged_dir / v.id / "merged.txt";
    require_file(p, "merged annotation");
    std::vector<int> val;
    for (const auto& r : corpus::read_merged(p)) val.push_back(r.valence);
    v.category = corpus::categorize(val);
  }
  corpus::PartitionOptions opt;
  opt.seed = a.seed;
  videos = corpus::partition(std::move(videos), opt);
  ensure_parent(a.out);
  corpus::write_split_manifest(a.out, videos);
  return videos;
}

// pack -----------------------------------------------------------------------

struct PackArgs {
  fs::path merged;
  fs::path frames_dir;
  std::string video;  // defaults to the merged file's parent dir name
  fs::path out;
};

inline std::size_t cmd_pack(const PackArgs& a) {
  require_file(a.merged, "merged annotation");
  require_dir(a.frames_dir, "frames dir");
  const std::string video = a.video.empty() ? fs::absolute(a.merged).parent_path().filename().string() : a.video;
  const auto records = datapipe::build_records(video, corpus::read_merged(a.merged), a.frames_dir);
  ensure_parent(a.out);
  datapipe::write_container(a.out, records);
  return records.size();
}

// synth ----------------------------------------------------------------------

struct SynthArgs {
  std::size_t videos = 8;
  std::size_t frames = 300;
  std::uint64_t seed = 1;
  fs::path out;
  // Also match the tracks and pack each video into out/records/<id>.vasq.
  bool pack = true;
};

inline std::vector<corpus::SynthVideoInfo> cmd_synth(const SynthArgs& a) {
  if (a.videos == 0 || a.frames == 0) throw ContractError("synth: need at least one video and one frame");
  corpus::SynthOptions so;
  so.videos = a.videos;
  so.frames = a.frames;
  so.seed = a.seed;
  auto plan = corpus::write_synthetic_corpus(a.out, so);
  if (a.pack) {
    fs::create_directories(a.out / "records");
    for (const auto& info : plan) {
      const auto dir = a.out / "videos" / info.spec.id;
      cmd_match({dir / "valence.txt", dir / "arousal.txt", info.spec.frames, dir / "merged.txt"});
      cmd_pack({dir / "merged.txt", dir / "frames", info.spec.id, a.out / "records" / (info.spec.id + ".vasq")});
    }
  }
  return plan;
}

// pretrain -------------------------------------------------------------------

struct PretrainArgs {
  RunConfig run;
  PretrainOptions options;
  fs::path out;
};

inline double cmd_pretrain(const PretrainArgs& a) {
  Model<float> model(model_config_for(a.run));
  const double acc = pretrain_backbone(model, a.options);
  ensure_parent(a.out);
  write_checkpoint(a.out, capture<float>(model.parameters(), nullptr, 0));
  return acc;
}

// train ----------------------------------------------------------------------

struct TrainArgs {
  RunConfig run;
  std::vector<fs::path> records;
  fs::path out_dir;
  TrainInit init;
  std::uint64_t steps = 1000;
  std::uint64_t checkpoint_every = 100;
  std::uint64_t log_every = 10;
  // In-process validation: every eval_every steps score eval_records and
  // stop once both CCCs reach target_ccc.
  std::vector<fs::path> eval_records;
  std::uint64_t eval_every = 0;
  std::optional<double> target_ccc;
  bool quiet = false;
};

struct TrainOutcome {
  std::uint64_t steps = 0;
  std::optional<std::uint64_t> reached_target_at;
  std::vector<EvalReport> reports;
};

inline TrainOutcome cmd_train(const TrainArgs& a) {
  if (a.init.backbone) require_file(*a.init.backbone, "backbone checkpoint");
  if (a.init.recurrent) require_file(*a.init.recurrent, "recurrent init checkpoint");
  if (a.target_ccc && (a.eval_every == 0 || a.eval_records.empty())) {
    throw ContractError("train: a target CCC needs --eval-records and --eval-every");
  }
  const auto train_files = expand_records(a.records);
  std::shared_ptr<const datapipe::RecordSet> eval_data;
  if (!a.eval_records.empty()) eval_data = datapipe::RecordSet::load(expand_records(a.eval_records));

  Trainer trainer(a.run, a.init);
  datapipe::LoaderConfig lc;
  lc.seq_length = a.run.seq_length;
  lc.batch_size = a.run.batch_size;
  lc.training = true;
  lc.seed = a.run.seed;
  datapipe::SequenceLoader loader(train_files, lc);

  TrainOutcome outcome;
  TrainLoopOptions opt;
  opt.out_dir = a.out_dir;
  opt.max_steps = a.steps;
  opt.checkpoint_every = a.checkpoint_every;
  opt.log_every = a.log_every;
  opt.quiet = a.quiet;
  if (eval_data && a.eval_every) {
    opt.on_step = [&](Trainer& t, std::uint64_t step, double) {
      if (step % a.eval_every != 0) return false;
      datapipe::LoaderConfig ec = lc;
      ec.training = false;
      datapipe::SequenceLoader el(eval_data, ec);
      EvalReport r = make_report(evaluate(t.model(), el), step, "validation");
      append_report(a.out_dir / "train_eval.csv", r);
      outcome.reports.push_back(r);
      if (!a.quiet) {
        std::fprintf(stderr, "eval step %llu ccc valence %.4f arousal %.4f\n", static_cast<unsigned long long>(step), r.ccc_valence,
                     r.ccc_arousal);
      }
      if (a.target_ccc && r.ccc_valence >= *a.target_ccc && r.ccc_arousal >= *a.target_ccc) {
        outcome.reached_target_at = step;
        return true;
      }
      return false;
    };
  }
  fs::create_directories(a.out_dir);
  if (fs::exists(a.out_dir / "train_eval.csv")) fs::remove(a.out_dir / "train_eval.csv");
  outcome.steps = train_loop(trainer, loader, opt);
  return outcome;
}

// eval / test ----------------------------------------------------------------

struct EvalArgs {
  fs::path ckpt_dir;
  std::vector<fs::path> records;
  fs::path report;
  WatchOptions watch;
};

inline std::vector<EvalReport> cmd_eval(const EvalArgs& a) {
  require_dir(a.ckpt_dir, "checkpoint dir");
  auto data = datapipe::RecordSet::load(expand_records(a.records));
  ensure_parent(a.report);
  return eval_loop(a.ckpt_dir, data, a.report, a.watch);
}

struct TestArgs {
  fs::path ckpt;
  std::optional<fs::path> config_dir;  // defaults to the checkpoint's directory
  std::vector<fs::path> records;
  fs::path report;
  std::optional<fs::path> predictions;
};

inline EvalReport cmd_test(const TestArgs& a) {
  require_file(a.ckpt, "checkpoint");
  const fs::path cfg_dir = a.config_dir ? *a.config_dir : fs::absolute(a.ckpt).parent_path();
  const RunConfig rc = read_run_config(cfg_dir);
  auto data = datapipe::RecordSet::load(expand_records(a.records));
  std::vector<FramePrediction> preds;
  EvalReport r = evaluate_checkpoint(rc, a.ckpt, data, "test", a.predictions ? &preds : nullptr);
  ensure_parent(a.report);
  append_report(a.report, r);
  if (a.predictions) {
    ensure_parent(*a.predictions);
    write_predictions(*a.predictions, preds);
  }
  return r;
}

// stats ----------------------------------------------------------------------

struct StatsArgs {
  std::vector<fs::path> records;
  fs::path out_dir;
  int bin_width = 100;
  std::size_t scatter_stride = 1;
};

inline std::size_t cmd_stats(const StatsArgs& a) {
  const auto files = expand_records(a.records);
  std::vector<int> v, ar;
  for (const auto& f : files)
    for (const auto& r : datapipe::read_container(f)) {
      v.push_back(r.valence);
      ar.push_back(r.arousal);
    }
  if (v.empty()) throw ContractError("stats: no records");
  fs::create_directories(a.out_dir);
  corpus::write_histogram_csv(a.out_dir / "valence_hist.csv", corpus::label_histogram(v, a.bin_width));
  corpus::write_histogram_csv(a.out_dir / "arousal_hist.csv", corpus::label_histogram(ar, a.bin_width));
  corpus::write_scatter_csv(a.out_dir / "scatter.csv", v, ar, a.scatter_stride);
  return v.size();
}

}  // namespace vaffect::app
