#pragma once

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "vaffect/datapipe/loader.hpp"
#include "vaffect/metrics/ccc.hpp"
#include "vaffect/train/checkpoint.hpp"
#include "vaffect/train/config.hpp"
#include "vaffect/train/trainer.hpp"

namespace vaffect {

struct EvalReport {
  std::uint64_t step = 0;
  double ccc_valence = 0.0;
  double ccc_arousal = 0.0;
  double mse_valence = 0.0;
  double mse_arousal = 0.0;
  std::string split = "validation";
};

/// One prediction per evaluated frame, in raw label units.
struct FramePrediction {
  std::string id;
  double valence = 0.0;
  double arousal = 0.0;
};

struct EvalResult {
  metrics::StreamingMoments valence;
  metrics::StreamingMoments arousal;
  std::vector<FramePrediction> predictions;
};

/// Streams every batch of an evaluation loader through the model in
/// inference mode and accumulates metrics over the whole split.
inline EvalResult evaluate(const Model<float>& model, datapipe::SequenceLoader& loader, bool keep_predictions = false) {
  if (loader.config().training) throw ContractError("evaluate: loader must be in evaluation mode");
  EvalResult r;
  while (auto batch = loader.next()) {
    Graph<float> g;
    const Tensor<float>& pred = model.forward(g, batch->images, false).value();
    const std::size_t n = batch->rows * batch->length;
    for (std::size_t i = 0; i < n; ++i) {
      r.valence.add(pred[2 * i], batch->labels[2 * i]);
      r.arousal.add(pred[2 * i + 1], batch->labels[2 * i + 1]);
      if (keep_predictions) r.predictions.push_back({batch->ids[i], pred[2 * i] * 1000.0, pred[2 * i + 1] * 1000.0});
    }
  }
  return r;
}

inline EvalReport make_report(const EvalResult& r, std::uint64_t step, std::string split) {
  return {step, r.valence.ccc(), r.arousal.ccc(), r.valence.mse(), r.arousal.mse(), std::move(split)};
}

inline constexpr const char* kReportHeader = "step,ccc_valence,ccc_arousal,mse_valence,mse_arousal,split";

inline std::string format_report_row(const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%llu,%.9g,%.9g,%.9g,%.9g,%s", static_cast<unsigned long long>(r.step), r.ccc_valence, r.ccc_arousal,
                r.mse_valence, r.mse_arousal, r.split.c_str());
  return buf;
}

/// Appends one row, writing the header first when the file is new or empty.
inline void append_report(const std::filesystem::path& path, const EvalReport& r) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw FormatError("cannot append to " + path.string());
  if (fresh) out << kReportHeader << '\n';
  out << format_report_row(r) << '\n';
}

inline std::vector<EvalReport> read_reports(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open report " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kReportHeader) throw FormatError(path.string() + ": unexpected report header");
  std::vector<EvalReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[6];
    for (auto& x : f) std::getline(ss, x, ',');
    try {
      out.push_back({std::stoull(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), f[5]});
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": malformed report row '" + line + "'");
    }
  }
  return out;
}

/// Step of the report with the highest CCC on one dimension; ties go to the
/// earliest step.
inline std::uint64_t select_best(const std::vector<EvalReport>& reports, corpus::Dimension dim) {
  if (reports.empty()) throw ContractError("select_best: no reports");
  const EvalReport* best = nullptr;
  for (const auto& r : reports) {
    const double v = dim == corpus::Dimension::Valence ? r.ccc_valence : r.ccc_arousal;
    const double b = best ? (dim == corpus::Dimension::Valence ? best->ccc_valence : best->ccc_arousal) : 0.0;
    if (!best || v > b || (v == b && r.step < best->step)) best = &r;
  }
  return best->step;
}

/// Rebuilds the model described by a run directory and loads a checkpoint.
inline std::unique_ptr<Model<float>> load_model(const RunConfig& rc, const Checkpoint& c) {
  auto model = std::make_unique<Model<float>>(model_config_for(rc));
  restore(c, model->parameters());
  return model;
}

/// Scores one checkpoint file on a record set.
inline EvalReport evaluate_checkpoint(const RunConfig& rc, const std::filesystem::path& ckpt,
                                      std::shared_ptr<const datapipe::RecordSet> data, std::string split,
                                      std::vector<FramePrediction>* predictions = nullptr) {
  const Checkpoint c = read_checkpoint(ckpt);
  auto model = load_model(rc, c);
  datapipe::LoaderConfig lc;
  lc.seq_length = rc.seq_length;
  lc.batch_size = rc.batch_size;
  lc.training = false;
  datapipe::SequenceLoader loader(std::move(data), lc);
  EvalResult r = evaluate(*model, loader, predictions != nullptr);
  if (predictions) *predictions = std::move(r.predictions);
  return make_report(r, c.step, std::move(split));
}

struct WatchOptions {
  std::chrono::milliseconds poll{500};
  // Stop once train.done exists and every checkpoint has been handled.
  bool stop_when_done = true;
  std::optional<std::chrono::milliseconds> idle_timeout;
  std::function<void(const EvalReport&)> on_report;
  std::function<void(const std::string&)> on_warning;
  const std::atomic<bool>* cancel = nullptr;
};

/// Watches a checkpoint directory and evaluates each new checkpoint in step
/// order, appending rows to `report_path`. Only completed (renamed)
/// checkpoint files are considered. A checkpoint older than one already
/// evaluated is skipped so rows stay in step order; an unreadable one is
/// skipped with a warning. Returns the emitted rows.
inline std::vector<EvalReport> eval_loop(const std::filesystem::path& ckpt_dir, std::shared_ptr<const datapipe::RecordSet> data,
                                         const std::filesystem::path& report_path, const WatchOptions& opt = {}) {
  auto warn = [&](const std::string& m) {
    if (opt.on_warning) opt.on_warning(m);
    else std::fprintf(stderr, "warning: %s\n", m.c_str());
  };
  std::vector<EvalReport> out;
  std::set<std::filesystem::path> seen;
  std::optional<std::uint64_t> last_step;
  std::optional<RunConfig> rc;
  auto idle_since = std::chrono::steady_clock::now();
  for (;;) {
    if (opt.cancel && opt.cancel->load()) break;
    // Read the marker before listing so a checkpoint written just before it
    // is never missed.
    const bool done = std::filesystem::exists(ckpt_dir / kDoneMarker);
    bool progressed = false;
    for (const auto& [step, path] : list_checkpoints(ckpt_dir)) {
      if (!seen.insert(path).second) continue;
      progressed = true;
      if (last_step && step <= *last_step) {
        warn("skipping checkpoint " + path.filename().string() + ": older than the last evaluated step");
        continue;
      }
      try {
        if (!rc) rc = read_run_config(ckpt_dir);
        EvalReport r = evaluate_checkpoint(*rc, path, data, "validation");
        if (r.step != step) throw FormatError(path.string() + ": step field disagrees with file name");
        append_report(report_path, r);
        if (opt.on_report) opt.on_report(r);
        out.push_back(r);
        last_step = step;
      } catch (const FormatError& e) {
        warn(std::string("skipping unreadable checkpoint: ") + e.what());
      } catch (const ContractError& e) {
        warn(std::string("skipping incompatible checkpoint: ") + e.what());
      }
    }
    if (progressed) idle_since = std::chrono::steady_clock::now();
    if (opt.stop_when_done && done && !progressed) break;
    if (opt.idle_timeout && std::chrono::steady_clock::now() - idle_since > *opt.idle_timeout) break;
    std::this_thread::sleep_for(opt.poll);
  }
  return out;
}

inline void write_predictions(const std::filesystem::path& path, const std::vector<FramePrediction>& preds) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "video,frame,valence,arousal\n";
  for (const auto& p : preds) {
    const auto id = datapipe::parse_frame_id(p.id);
    out << id.video << ',' << id.frame << ',' << p.valence << ',' << p.arousal << '\n';
  }
}

}  // namespace vaffect
