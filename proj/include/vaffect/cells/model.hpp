#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vaffect/cells/attention.hpp"
#include "vaffect/cells/backbone.hpp"
#include "vaffect/cells/recurrent.hpp"

namespace vaffect {

/// Two-neuron regression head: one output for valence, one for arousal.
/// Outputs are unbounded linear values.
template <class T>
struct HeadParams {
  Parameter<T>* weights;
  Parameter<T>* bias;

  static HeadParams create(ParameterSet<T>& ps, const std::string& prefix, std::size_t input, init::Rng& rng) {
    HeadParams h;
    h.weights = &ps.add(prefix + "weights", init::truncated_normal<T>({2, input}, 0.1, rng));
    h.bias = &ps.add(prefix + "bias", Tensor<T>({2}));
    return h;
  }
};

// features (B*L) x h -> predictions B x L x 2
template <class T>
Var<T> fc_head(Graph<T>& g, const HeadParams<T>& p, Var<T> features, std::size_t batch, std::size_t length) {
  if (features.value().rank() != 2 || features.dim(0) != batch * length) {
    throw ShapeError("fc_head: expected (B*L) x h features, got " + shape_str(features.shape()));
  }
  return reshape(dense(features, g.param(*p.weights), g.param(*p.bias)), {batch, length, 2});
}

struct ModelConfig {
  BackboneConfig backbone = BackboneConfig::toy(BackboneKind::VggStyle);
  CellOptions cell;
  bool attention = false;
  std::size_t attention_window = 30;
  std::size_t attention_projection = 0;  // 0 means equal to the hidden size
  std::uint64_t seed = 1;
};

/// Recurrent part only: an attention-wrapped or plain stack applied over a
/// (B*L) x d sequence laid out batch-major.
template <class T>
class SequenceModel {
 public:
  SequenceModel(ParameterSet<T>& ps, std::size_t input, const ModelConfig& cfg, init::Rng& rng)
      : stack_(ps, "rnn/", input, cfg.cell, rng) {
    if (cfg.attention) {
      const std::size_t proj = cfg.attention_projection ? cfg.attention_projection : cfg.cell.hidden;
      attention_ = AttentionParams<T>::create(ps, "attention/", input, stack_.hidden(), stack_.state_width(), proj,
                                              cfg.attention_window, rng);
    }
  }

  const RecurrentStack<T>& stack() const { return stack_; }
  const std::optional<AttentionParams<T>>& attention() const { return attention_; }
  std::size_t hidden() const { return stack_.hidden(); }

  /// Zero initial state; the output at step t depends on steps 0..t only.
  Var<T> unroll(Graph<T>& g, Var<T> sequence, std::size_t batch, std::size_t length) const {
    if (length == 0) throw ContractError("unroll: empty sequence");
    std::vector<Var<T>> outputs;
    outputs.reserve(length);
    if (attention_) {
      auto state = AttentionState<T>::initial(g, stack_, batch);
      for (std::size_t t = 0; t < length; ++t)
        outputs.push_back(attention_step(g, *attention_, stack_, time_step_rows(sequence, batch, length, t), state));
    } else {
      auto state = stack_.zero_state(g, batch);
      for (std::size_t t = 0; t < length; ++t) outputs.push_back(stack_.step(g, time_step_rows(sequence, batch, length, t), state));
    }
    return stack_time_steps(outputs);
  }

 private:
  RecurrentStack<T> stack_;
  std::optional<AttentionParams<T>> attention_;
};

/// CNN -> stacked RNN (optionally attention-wrapped) -> FC.
/// Parameter names are prefixed backbone/, rnn/, attention/ and head/.
template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg), rng_(cfg.seed), backbone_(params_, cfg.backbone, rng_),
        sequence_(params_, backbone_.feature_width(), cfg, rng_) {
    head_ = HeadParams<T>::create(params_, "head/", sequence_.hidden(), rng_);
  }
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }
  const SequenceModel<T>& sequence() const { return sequence_; }
  const HeadParams<T>& head() const { return head_; }

  /// images B x L x S x S x C in [-1, 1] -> predictions B x L x 2.
  Var<T> forward(Graph<T>& g, const Tensor<T>& images, bool training) const {
    if (images.rank() != 5) throw ShapeError("model: expected B x L x H x W x C images, got " + shape_str(images.shape()));
    const std::size_t batch = images.dim(0), length = images.dim(1);
    Var<T> frames = g.constant(images.reshaped({batch * length, images.dim(2), images.dim(3), images.dim(4)}));
    Var<T> features = backbone_.forward(g, frames, training);
    Var<T> hidden = sequence_.unroll(g, features, batch, length);
    return fc_head(g, head_, hidden, batch, length);
  }

 private:
  ModelConfig cfg_;
  init::Rng rng_;
  ParameterSet<T> params_;
  Backbone<T> backbone_;
  SequenceModel<T> sequence_;
  HeadParams<T> head_;
};

}  // namespace vaffect
