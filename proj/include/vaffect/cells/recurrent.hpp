#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "vaffect/autodiff/ops.hpp"
#include "vaffect/cells/init.hpp"

namespace vaffect {

enum class CellKind { Gru, Lstm, IndRnn };

inline const char* cell_name(CellKind k) {
  switch (k) {
    case CellKind::Gru: return "gru";
    case CellKind::Lstm: return "lstm";
    case CellKind::IndRnn: return "indrnn";
  }
  return "?";
}

inline CellKind parse_cell(const std::string& s) {
  if (s == "gru") return CellKind::Gru;
  if (s == "lstm") return CellKind::Lstm;
  if (s == "indrnn") return CellKind::IndRnn;
  throw ContractError("unknown cell kind: " + s);
}

// ---------------------------------------------------------------------------
// GRU
//   z = sigmoid(Wz x + bz + Uz h)
//   r = sigmoid(Wr x + br + Ur h)
//   h' = tanh(Wc x + r ⊙ (Uc h))
//   h_t = z ⊙ h + (1 - z) ⊙ h'

template <class T>
struct GruParams {
  Parameter<T>* update_input;
  Parameter<T>* update_recurrent;
  Parameter<T>* update_bias;
  Parameter<T>* reset_input;
  Parameter<T>* reset_recurrent;
  Parameter<T>* reset_bias;
  Parameter<T>* candidate_input;
  Parameter<T>* candidate_recurrent;

  static GruParams create(ParameterSet<T>& ps, const std::string& prefix, std::size_t input, std::size_t hidden,
                          init::Rng& rng) {
    auto in = [&](const char* n) { return &ps.add(prefix + n, init::fan_in_uniform<T>({hidden, input}, input, rng)); };
    auto rec = [&](const char* n) { return &ps.add(prefix + n, init::fan_in_uniform<T>({hidden, hidden}, hidden, rng)); };
    auto bias = [&](const char* n) { return &ps.add(prefix + n, Tensor<T>({hidden})); };
    GruParams p;
    p.update_input = in("update_input");
    p.update_recurrent = rec("update_recurrent");
    p.update_bias = bias("update_bias");
    p.reset_input = in("reset_input");
    p.reset_recurrent = rec("reset_recurrent");
    p.reset_bias = bias("reset_bias");
    p.candidate_input = in("candidate_input");
    p.candidate_recurrent = rec("candidate_recurrent");
    return p;
  }
};

template <class T>
Var<T> gru_step(Graph<T>& g, const GruParams<T>& p, Var<T> x, Var<T> h_prev) {
  Var<T> z = sigmoid(add(dense(x, g.param(*p.update_input), g.param(*p.update_bias)), linear(h_prev, g.param(*p.update_recurrent))));
  Var<T> r = sigmoid(add(dense(x, g.param(*p.reset_input), g.param(*p.reset_bias)), linear(h_prev, g.param(*p.reset_recurrent))));
  Var<T> cand = tanh(add(linear(x, g.param(*p.candidate_input)), mul(r, linear(h_prev, g.param(*p.candidate_recurrent)))));
  return add(mul(z, h_prev), mul(one_minus(z), cand));
}

// ---------------------------------------------------------------------------
// LSTM with optional peephole connections
//   i = sigmoid(Wi x + bi + Ui h + wic ⊙ c_prev)
//   f = sigmoid(Wf x + bf + Uf h + wfc ⊙ c_prev)
//   g = tanh(Wg x + bg + Ug h)
//   c = f ⊙ c_prev + i ⊙ g
//   o = sigmoid(Wo x + bo + Uo h + woc ⊙ c)
//   h = o ⊙ tanh(c)

template <class T>
struct LstmParams {
  Parameter<T>* input_gate_input;
  Parameter<T>* input_gate_recurrent;
  Parameter<T>* input_gate_bias;
  Parameter<T>* forget_gate_input;
  Parameter<T>* forget_gate_recurrent;
  Parameter<T>* forget_gate_bias;
  Parameter<T>* candidate_input;
  Parameter<T>* candidate_recurrent;
  Parameter<T>* candidate_bias;
  Parameter<T>* output_gate_input;
  Parameter<T>* output_gate_recurrent;
  Parameter<T>* output_gate_bias;
  // Diagonal peephole weights; null when peepholes are disabled.
  Parameter<T>* input_peephole = nullptr;
  Parameter<T>* forget_peephole = nullptr;
  Parameter<T>* output_peephole = nullptr;

  static LstmParams create(ParameterSet<T>& ps, const std::string& prefix, std::size_t input, std::size_t hidden,
                           bool peepholes, init::Rng& rng) {
    auto in = [&](const char* n) { return &ps.add(prefix + n, init::fan_in_uniform<T>({hidden, input}, input, rng)); };
    auto rec = [&](const char* n) { return &ps.add(prefix + n, init::fan_in_uniform<T>({hidden, hidden}, hidden, rng)); };
    auto bias = [&](const char* n) { return &ps.add(prefix + n, Tensor<T>({hidden})); };
    auto peep = [&](const char* n) { return &ps.add(prefix + n, init::fan_in_uniform<T>({hidden}, hidden, rng)); };
    LstmParams p;
    p.input_gate_input = in("input_gate_input");
    p.input_gate_recurrent = rec("input_gate_recurrent");
    p.input_gate_bias = bias("input_gate_bias");
    p.forget_gate_input = in("forget_gate_input");
    p.forget_gate_recurrent = rec("forget_gate_recurrent");
    p.forget_gate_bias = bias("forget_gate_bias");
    p.candidate_input = in("candidate_input");
    p.candidate_recurrent = rec("candidate_recurrent");
    p.candidate_bias = bias("candidate_bias");
    p.output_gate_input = in("output_gate_input");
    p.output_gate_recurrent = rec("output_gate_recurrent");
    p.output_gate_bias = bias("output_gate_bias");
    if (peepholes) {
      p.input_peephole = peep("input_peephole");
      p.forget_peephole = peep("forget_peephole");
      p.output_peephole = peep("output_peephole");
    }
    return p;
  }
};

template <class T>
struct LstmState {
  Var<T> h;
  Var<T> c;
};

template <class T>
LstmState<T> lstm_step(Graph<T>& g, const LstmParams<T>& p, Var<T> x, LstmState<T> prev) {
  auto pre = [&](Parameter<T>* w, Parameter<T>* b, Parameter<T>* u) {
    return add(dense(x, g.param(*w), g.param(*b)), linear(prev.h, g.param(*u)));
  };
  auto peek = [&](Var<T> acc, Parameter<T>* peephole, Var<T> cell) {
    return peephole ? add(acc, mul_vec(cell, g.param(*peephole))) : acc;
  };
  Var<T> i = sigmoid(peek(pre(p.input_gate_input, p.input_gate_bias, p.input_gate_recurrent), p.input_peephole, prev.c));
  Var<T> f = sigmoid(peek(pre(p.forget_gate_input, p.forget_gate_bias, p.forget_gate_recurrent), p.forget_peephole, prev.c));
  Var<T> cand = tanh(pre(p.candidate_input, p.candidate_bias, p.candidate_recurrent));
  Var<T> c = add(mul(f, prev.c), mul(i, cand));
  Var<T> o = sigmoid(peek(pre(p.output_gate_input, p.output_gate_bias, p.output_gate_recurrent), p.output_peephole, c));
  return {mul(o, tanh(c)), c};
}

// ---------------------------------------------------------------------------
// IndRNN: h_t = relu(W x + b + u ⊙ h_prev), |u_i| clipped to recurrent_max.

template <class T>
struct IndRnnParams {
  Parameter<T>* input;
  Parameter<T>* recurrent;  // vector, one weight per neuron
  Parameter<T>* bias;

  // recurrent_max = 2^(1/time_steps)
  static T recurrent_max(std::size_t time_steps) { return static_cast<T>(std::pow(2.0, 1.0 / static_cast<double>(time_steps))); }

  static IndRnnParams create(ParameterSet<T>& ps, const std::string& prefix, std::size_t input, std::size_t hidden,
                             std::size_t time_steps, init::Rng& rng) {
    IndRnnParams p;
    p.input = &ps.add(prefix + "input", init::fan_in_uniform<T>({hidden, input}, input, rng));
    const T rmax = recurrent_max(time_steps);
    p.recurrent = &ps.add(prefix + "recurrent", init::uniform<T>({hidden}, 0.0, static_cast<double>(rmax), rng));
    p.recurrent->clip_abs = rmax;
    p.bias = &ps.add(prefix + "bias", Tensor<T>({hidden}));
    return p;
  }
};

template <class T>
Var<T> indrnn_step(Graph<T>& g, const IndRnnParams<T>& p, Var<T> x, Var<T> h_prev) {
  return relu(add(dense(x, g.param(*p.input), g.param(*p.bias)), mul_vec(h_prev, g.param(*p.recurrent))));
}

// ---------------------------------------------------------------------------
// Runtime-selected layer and stacking

struct CellOptions {
  CellKind kind = CellKind::Gru;
  std::size_t hidden = 128;
  std::size_t layers = 2;
  bool peepholes = true;       // LSTM only
  std::size_t time_steps = 80; // IndRNN clip bound
};

/// One recurrent layer. State is a flat list of B x hidden nodes; for LSTM it
/// is (c, h), matching the order the attention query concatenates.
template <class T>
class RecurrentLayer {
 public:
  RecurrentLayer(ParameterSet<T>& ps, const std::string& prefix, std::size_t input, const CellOptions& opt, init::Rng& rng)
      : kind_(opt.kind), hidden_(opt.hidden) {
    switch (kind_) {
      case CellKind::Gru: gru_ = GruParams<T>::create(ps, prefix, input, hidden_, rng); break;
      case CellKind::Lstm: lstm_ = LstmParams<T>::create(ps, prefix, input, hidden_, opt.peepholes, rng); break;
      case CellKind::IndRnn: indrnn_ = IndRnnParams<T>::create(ps, prefix, input, hidden_, opt.time_steps, rng); break;
    }
  }

  CellKind kind() const { return kind_; }
  std::size_t hidden() const { return hidden_; }

  std::vector<Var<T>> zero_state(Graph<T>& g, std::size_t batch) const {
    const std::size_t parts = kind_ == CellKind::Lstm ? 2 : 1;
    std::vector<Var<T>> s;
    for (std::size_t i = 0; i < parts; ++i) s.push_back(g.constant(Tensor<T>({batch, hidden_})));
    return s;
  }

  // Advances `state` in place and returns the layer output.
  Var<T> step(Graph<T>& g, Var<T> x, std::vector<Var<T>>& state) const {
    switch (kind_) {
      case CellKind::Gru: state[0] = gru_step(g, gru_, x, state[0]); return state[0];
      case CellKind::IndRnn: state[0] = indrnn_step(g, indrnn_, x, state[0]); return state[0];
      case CellKind::Lstm: {
        auto next = lstm_step(g, lstm_, x, LstmState<T>{state[1], state[0]});
        state[0] = next.c;
        state[1] = next.h;
        return next.h;
      }
    }
    throw ContractError("unreachable cell kind");
  }

  const GruParams<T>& gru() const { return gru_; }
  const LstmParams<T>& lstm() const { return lstm_; }
  const IndRnnParams<T>& indrnn() const { return indrnn_; }

 private:
  CellKind kind_;
  std::size_t hidden_;
  GruParams<T> gru_{};
  LstmParams<T> lstm_{};
  IndRnnParams<T> indrnn_{};
};

/// Layers applied in sequence at each time step; layer k+1 consumes the
/// output of layer k.
template <class T>
class RecurrentStack {
 public:
  using State = std::vector<std::vector<Var<T>>>;

  RecurrentStack(ParameterSet<T>& ps, const std::string& prefix, std::size_t input, const CellOptions& opt, init::Rng& rng) {
    if (opt.layers == 0) throw ContractError("recurrent stack needs at least one layer");
    std::size_t in = input;
    for (std::size_t l = 0; l < opt.layers; ++l) {
      layers_.emplace_back(ps, prefix + "layer" + std::to_string(l) + "/", in, opt, rng);
      in = opt.hidden;
    }
  }

  std::size_t hidden() const { return layers_.back().hidden(); }
  std::size_t depth() const { return layers_.size(); }
  const RecurrentLayer<T>& layer(std::size_t i) const { return layers_.at(i); }

  State zero_state(Graph<T>& g, std::size_t batch) const {
    State s;
    for (const auto& l : layers_) s.push_back(l.zero_state(g, batch));
    return s;
  }

  Var<T> step(Graph<T>& g, Var<T> x, State& state) const {
    Var<T> out = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) out = layers_[l].step(g, out, state[l]);
    return out;
  }

  // Width of every state part concatenated layer by layer.
  std::size_t state_width() const {
    std::size_t w = 0;
    for (const auto& l : layers_) w += l.hidden() * (l.kind() == CellKind::Lstm ? 2 : 1);
    return w;
  }

  static std::vector<Var<T>> flatten(const State& s) {
    std::vector<Var<T>> out;
    for (const auto& layer : s) out.insert(out.end(), layer.begin(), layer.end());
    return out;
  }

 private:
  std::vector<RecurrentLayer<T>> layers_;
};

}  // namespace vaffect
