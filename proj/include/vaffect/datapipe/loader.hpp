#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vaffect/autodiff/tensor.hpp"
#include "vaffect/datapipe/record.hpp"

namespace vaffect::datapipe {

struct LoaderConfig {
  std::size_t seq_length = 80;
  std::size_t batch_size = 2;
  std::size_t epochs = 1;  // ignored in training, which repeats forever
  bool training = false;
  std::uint64_t seed = 0;

  std::size_t buffer_size() const { return 10 * batch_size * seq_length; }
  std::size_t threshold() const { return 15 * seq_length; }

  void validate() const {
    if (seq_length < 1) throw ContractError("loader: sequence length must be >= 1");
    if (batch_size < 1) throw ContractError("loader: batch size must be >= 1");
    if (!training && epochs < 1) throw ContractError("loader: epochs must be >= 1");
  }
};

/// A window passes when its first and last frames come from the same video
/// and their frame numbers are at most `threshold` apart. Only the endpoints
/// are inspected.
inline bool check_consecutive(std::span<const std::string> ids, std::size_t threshold) {
  if (ids.empty()) throw ContractError("check_consecutive: empty window");
  const FrameId first = parse_frame_id(ids.front());
  const FrameId last = parse_frame_id(ids.back());
  if (first.video != last.video) return false;
  const long span = last.frame >= first.frame ? last.frame - first.frame : first.frame - last.frame;
  return static_cast<std::size_t>(span) <= threshold;
}

struct SequenceBatch {
  std::vector<std::string> ids;  // rows * L, row-major
  Tensor<float> images;          // rows x L x 96 x 96 x 3
  Tensor<float> labels;          // rows x L x 2
  std::size_t rows = 0;
  std::size_t length = 0;

  const std::string& id(std::size_t row, std::size_t t) const { return ids[row * length + t]; }
};

/// Records of every container, in sorted path order, held once in memory.
struct RecordSet {
  std::vector<FrameRecord> records;

  static std::shared_ptr<const RecordSet> load(std::vector<std::filesystem::path> paths) {
    std::sort(paths.begin(), paths.end());
    auto set = std::make_shared<RecordSet>();
    for (const auto& p : paths) {
      auto recs = read_container(p);
      std::move(recs.begin(), recs.end(), std::back_inserter(set->records));
    }
    return set;
  }

  static std::shared_ptr<const RecordSet> from(std::vector<FrameRecord> records) {
    auto set = std::make_shared<RecordSet>();
    set->records = std::move(records);
    return set;
  }
};

/// parse -> repeat -> non-overlapping length-L windows over the repeated
/// stream -> consecutiveness filter -> (training only) buffered shuffle ->
/// batches of B rows. Training drops a final partial batch; evaluation
/// emits it.
class SequenceLoader {
 public:
  SequenceLoader(std::shared_ptr<const RecordSet> data, LoaderConfig cfg)
      : data_(std::move(data)), cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
    if (!data_ || data_->records.empty()) throw ContractError("loader: no records");
    ids_.reserve(data_->records.size());
    for (const auto& r : data_->records) ids_.push_back(r.id);
    // The phase of the windowing relative to the stream repeats every L
    // passes, so checking that many passes decides whether any window can
    // ever be valid.
    const std::size_t passes = cfg_.training ? cfg_.seq_length : cfg_.epochs;
    const std::size_t total_windows = passes * ids_.size() / cfg_.seq_length;
    bool any = false;
    for (std::size_t w = 0; w < total_windows && !any; ++w) any = window_ok(w * cfg_.seq_length);
    if (!any) throw ContractError("loader: dataset yields no valid sequence");
  }

  SequenceLoader(const std::vector<std::filesystem::path>& paths, LoaderConfig cfg)
      : SequenceLoader(RecordSet::load(paths), cfg) {}

  const LoaderConfig& config() const { return cfg_; }

  std::optional<SequenceBatch> next() {
    std::vector<std::size_t> starts;
    while (starts.size() < cfg_.batch_size) {
      auto s = next_sequence();
      if (!s) break;
      starts.push_back(*s);
    }
    if (starts.empty() || (cfg_.training && starts.size() < cfg_.batch_size)) return std::nullopt;
    return assemble(starts);
  }

 private:
  const FrameRecord& record_at(std::size_t stream_pos) const { return data_->records[stream_pos % ids_.size()]; }

  bool window_ok(std::size_t start) const {
    const std::size_t n = ids_.size();
    std::array<std::string, 2> ends{ids_[start % n], ids_[(start + cfg_.seq_length - 1) % n]};
    return check_consecutive(ends, cfg_.threshold());
  }

  bool stream_has(std::size_t end) const { return cfg_.training || end <= cfg_.epochs * ids_.size(); }

  // Next filtered window start (position in the repeated stream).
  std::optional<std::size_t> next_window() {
    for (;;) {
      const std::size_t start = cursor_;
      if (!stream_has(start + cfg_.seq_length)) return std::nullopt;
      cursor_ += cfg_.seq_length;
      if (window_ok(start)) return start;
    }
  }

  std::optional<std::size_t> next_sequence() {
    if (!cfg_.training) return next_window();
    while (!exhausted_ && buffer_.size() < cfg_.buffer_size()) {
      auto w = next_window();
      if (!w) exhausted_ = true;
      else buffer_.push_back(*w);
    }
    if (buffer_.empty()) return std::nullopt;
    std::uniform_int_distribution<std::size_t> pick(0, buffer_.size() - 1);
    const std::size_t i = pick(rng_);
    const std::size_t out = buffer_[i];
    buffer_[i] = buffer_.back();
    buffer_.pop_back();
    return out;
  }

  SequenceBatch assemble(const std::vector<std::size_t>& starts) const {
    const std::size_t rows = starts.size(), L = cfg_.seq_length;
    SequenceBatch b;
    b.rows = rows;
    b.length = L;
    b.images = Tensor<float>({rows, L, kImageSide, kImageSide, 3});
    b.labels = Tensor<float>({rows, L, 2});
    b.ids.reserve(rows * L);
    float* img = b.images.ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t t = 0; t < L; ++t) {
        const FrameRecord& rec = record_at(starts[r] + t);
        b.ids.push_back(rec.id);
        for (std::size_t i = 0; i < kImageBytes; ++i) *img++ = scale_pixel(rec.image[i]);
        b.labels[(r * L + t) * 2] = scale_label(rec.valence);
        b.labels[(r * L + t) * 2 + 1] = scale_label(rec.arousal);
      }
      if (!check_consecutive(std::span<const std::string>(b.ids).subspan(r * L, L), cfg_.threshold())) {
        throw ContractError("loader: emitted a non-consecutive sequence");
      }
    }
    return b;
  }

  std::shared_ptr<const RecordSet> data_;
  LoaderConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<std::string> ids_;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> buffer_;
  bool exhausted_ = false;
};

}  // namespace vaffect::datapipe
