#pragma once

#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "vaffect/cells/recurrent.hpp"

namespace vaffect {

/// Windowed attention wrapped around a recurrent stack.
///
/// Per step, with `prev` the attention vector of the previous step:
///   in    = Wi [x ; prev] + bi                     (input mixing, width of x)
///   out   = stack(in), c = concat(stack state)
///   s_i   = v . tanh(W1 out_i + W2 c + b2)          for out_i in the history
///   p     = softmax(s)
///   att   = sum_i p_i out_i                         (zeros when history is empty)
///   y     = Wo [out ; att] + bo                     (output mixing, width h)
/// and y is appended to the history, which keeps the last `window` outputs.
template <class T>
struct AttentionParams {
  std::size_t window = 30;
  std::size_t input_width = 0;
  std::size_t hidden = 0;
  std::size_t projection = 0;
  Parameter<T>* input_mix;
  Parameter<T>* input_mix_bias;
  Parameter<T>* history_proj;  // W1, projection x hidden
  Parameter<T>* query_proj;    // W2, projection x state width
  Parameter<T>* query_bias;
  Parameter<T>* score;         // v
  Parameter<T>* output_mix;
  Parameter<T>* output_mix_bias;

  static AttentionParams create(ParameterSet<T>& ps, const std::string& prefix, std::size_t input_width,
                                std::size_t hidden, std::size_t state_width, std::size_t projection, std::size_t window,
                                init::Rng& rng) {
    if (window == 0) throw ContractError("attention window must be positive");
    AttentionParams p;
    p.window = window;
    p.input_width = input_width;
    p.hidden = hidden;
    p.projection = projection;
    p.input_mix = &ps.add(prefix + "input_mix", init::fan_in_uniform<T>({input_width, input_width + hidden}, input_width + hidden, rng));
    p.input_mix_bias = &ps.add(prefix + "input_mix_bias", Tensor<T>({input_width}));
    p.history_proj = &ps.add(prefix + "history_proj", init::fan_in_uniform<T>({projection, hidden}, hidden, rng));
    p.query_proj = &ps.add(prefix + "query_proj", init::fan_in_uniform<T>({projection, state_width}, state_width, rng));
    p.query_bias = &ps.add(prefix + "query_bias", Tensor<T>({projection}));
    p.score = &ps.add(prefix + "score", init::fan_in_uniform<T>({projection}, projection, rng));
    p.output_mix = &ps.add(prefix + "output_mix", init::fan_in_uniform<T>({hidden, 2 * hidden}, 2 * hidden, rng));
    p.output_mix_bias = &ps.add(prefix + "output_mix_bias", Tensor<T>({hidden}));
    return p;
  }
};

template <class T>
struct AttentionState {
  typename RecurrentStack<T>::State inner;
  Var<T> previous;  // attention vector of the last step, B x hidden
  struct Entry {
    Var<T> output;     // B x hidden
    Var<T> projected;  // W1 output, B x projection
  };
  std::deque<Entry> history;
  // Softmax weights of the last step (B x history length); empty at t = 0.
  std::optional<Var<T>> weights;

  static AttentionState initial(Graph<T>& g, const RecurrentStack<T>& stack, std::size_t batch) {
    AttentionState s;
    s.inner = stack.zero_state(g, batch);
    s.previous = g.constant(Tensor<T>({batch, stack.hidden()}));
    return s;
  }
};

template <class T>
Var<T> attention_step(Graph<T>& g, const AttentionParams<T>& p, const RecurrentStack<T>& stack, Var<T> x,
                      AttentionState<T>& state) {
  const std::size_t batch = x.dim(0);
  Var<T> mixed_in = dense(concat<T>({x, state.previous}), g.param(*p.input_mix), g.param(*p.input_mix_bias));
  Var<T> out = stack.step(g, mixed_in, state.inner);

  Var<T> att;
  if (state.history.empty()) {
    att = g.constant(Tensor<T>({batch, p.hidden}));
    state.weights.reset();
  } else {
    Var<T> query = concat(RecurrentStack<T>::flatten(state.inner));
    Var<T> q = dense(query, g.param(*p.query_proj), g.param(*p.query_bias));
    Var<T> v = g.param(*p.score);
    std::vector<Var<T>> scores;
    for (const auto& e : state.history) scores.push_back(row_dot(tanh(add(e.projected, q)), v));
    Var<T> weights = softmax(scores.size() == 1 ? scores[0] : concat(scores));
    std::optional<Var<T>> acc;
    for (std::size_t i = 0; i < state.history.size(); ++i) {
      Var<T> term = mul_rows(state.history[i].output, slice_last(weights, i, i + 1));
      acc = acc ? add(*acc, term) : term;
    }
    att = *acc;
    state.weights = weights;
  }

  Var<T> y = dense(concat<T>({out, att}), g.param(*p.output_mix), g.param(*p.output_mix_bias));
  state.history.push_back({y, linear(y, g.param(*p.history_proj))});
  if (state.history.size() > p.window) state.history.pop_front();
  state.previous = att;
  return y;
}

}  // namespace vaffect
