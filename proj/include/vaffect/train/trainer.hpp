#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vaffect/cells/model.hpp"
#include "vaffect/corpus/synth.hpp"
#include "vaffect/datapipe/loader.hpp"
#include "vaffect/metrics/ccc.hpp"
#include "vaffect/train/adam.hpp"
#include "vaffect/train/checkpoint.hpp"
#include "vaffect/train/config.hpp"

namespace vaffect {

inline constexpr const char* kBackbonePrefix = "backbone/";
// Parameters carried over from a Case 2 checkpoint in Case 3.
inline const std::vector<std::string> kRecurrentPrefixes{"rnn/", "attention/", "head/"};

inline ModelConfig model_config_for(const RunConfig& rc) {
  ModelConfig m = rc.model;
  m.seed = rc.seed;
  m.backbone.trainability = trainability_for(rc.strategy);
  return m;
}

struct TrainInit {
  std::optional<std::filesystem::path> backbone;  // pretrained backbone checkpoint
  std::optional<std::filesystem::path> recurrent; // Case 3 source checkpoint
};

/// Owns the model and optimizer for one run and applies steps.
class Trainer {
 public:
  Trainer(const RunConfig& rc, const TrainInit& init = {})
      : rc_(rc), model_(model_config_for(rc)), adam_(AdamOptions{rc.learning_rate}) {
    if (init.backbone) restore_prefixes(read_checkpoint(*init.backbone), model_.parameters(), {kBackbonePrefix});
    if (rc.strategy == StrategyCase::FromRecurrent) {
      if (!init.recurrent) throw ContractError("case 3 requires an init checkpoint for the recurrent layers");
      restore_prefixes(read_checkpoint(*init.recurrent), model_.parameters(), kRecurrentPrefixes);
    } else if (init.recurrent) {
      throw ContractError("an init checkpoint for the recurrent layers is only used by case 3");
    }
    model_.backbone().set_trainability(trainability_for(rc.strategy));
  }

  const RunConfig& config() const { return rc_; }
  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  Adam<float>& optimizer() { return adam_; }
  std::uint64_t step() const { return step_; }

  /// One gradient step on the CCC loss of a batch; returns the loss.
  double train_step(const datapipe::SequenceBatch& batch) {
    Graph<float> g;
    Var<float> pred = model_.forward(g, batch.images, true);
    Var<float> loss = metrics::ccc_loss(pred, g.constant(batch.labels));
    g.backward(loss);
    adam_.step(model_.parameters());
    ++step_;
    return loss.value()[0];
  }

  Checkpoint snapshot() const { return capture(model_.parameters(), &adam_, step_); }

  void resume(const Checkpoint& c) {
    restore(c, model_.parameters(), &adam_);
    step_ = c.step;
  }

 private:
  RunConfig rc_;
  Model<float> model_;
  Adam<float> adam_;
  std::uint64_t step_ = 0;
};

struct TrainLoopOptions {
  std::filesystem::path out_dir;
  std::uint64_t max_steps = 1000;
  std::uint64_t checkpoint_every = 100;
  std::uint64_t log_every = 10;
  bool quiet = false;
  // Called after every step with (step, loss); returning true stops training.
  std::function<bool(Trainer&, std::uint64_t, double)> on_step;
  BeforeRename before_rename;
};

/// Runs until max_steps or until on_step asks to stop. Writes config.json
/// first, a checkpoint every `checkpoint_every` steps plus one at the end,
/// and finally the train.done marker.
inline std::uint64_t train_loop(Trainer& trainer, datapipe::SequenceLoader& loader, const TrainLoopOptions& opt) {
  if (!loader.config().training) throw ContractError("train_loop: loader must be in training mode");
  std::filesystem::create_directories(opt.out_dir);
  std::filesystem::remove(opt.out_dir / kDoneMarker);
  write_run_config(opt.out_dir, trainer.config());
  std::uint64_t last_saved = ~0ULL;
  auto save = [&] {
    write_checkpoint(opt.out_dir / checkpoint_filename(trainer.step()), trainer.snapshot(), opt.before_rename);
    last_saved = trainer.step();
  };
  double running = 0.0;
  std::uint64_t since_log = 0;
  while (trainer.step() < opt.max_steps) {
    auto batch = loader.next();
    if (!batch) throw ContractError("train_loop: training stream ended");
    const double loss = trainer.train_step(*batch);
    running += loss;
    ++since_log;
    const auto step = trainer.step();
    if (!opt.quiet && opt.log_every && step % opt.log_every == 0) {
      std::fprintf(stderr, "step %llu loss %.4f\n", static_cast<unsigned long long>(step), running / static_cast<double>(since_log));
      running = 0.0;
      since_log = 0;
    }
    if (opt.checkpoint_every && step % opt.checkpoint_every == 0) save();
    if (opt.on_step && opt.on_step(trainer, step, loss)) break;
  }
  if (last_saved != trainer.step()) save();
  std::ofstream(opt.out_dir / kDoneMarker) << trainer.step() << '\n';
  return trainer.step();
}

struct PretrainOptions {
  std::uint64_t steps = 400;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 11;
  bool quiet = false;
};

/// Trains the backbone on the auxiliary texture task through a temporary
/// linear classifier. Returns the running accuracy over the last steps.
inline double pretrain_backbone(Model<float>& model, const PretrainOptions& opt) {
  auto& bb = model.backbone();
  bb.set_trainability(Trainability::All);
  const std::size_t side = bb.config().image_size;
  if (bb.config().channels != 3) throw ContractError("pretrain: backbone must take RGB input");
  ParameterSet<float> classifier;
  init::Rng rng(opt.seed);
  auto& w = classifier.add("weights", init::truncated_normal<float>({corpus::kTextureClasses, bb.feature_width()}, 0.1, rng));
  auto& b = classifier.add("bias", Tensor<float>({corpus::kTextureClasses}));
  Adam<float> backbone_opt(AdamOptions{opt.learning_rate});
  Adam<float> classifier_opt(AdamOptions{opt.learning_rate});
  // Only backbone parameters move; recurrent and head weights stay as built.
  ParameterSet<float>& params = model.parameters();
  std::vector<std::pair<Parameter<float>*, bool>> saved;
  for (auto& p : params) {
    saved.emplace_back(&p, p.trainable);
    if (p.name.rfind(kBackbonePrefix, 0) != 0) p.trainable = false;
  }
  std::mt19937_64 sample_rng(opt.seed);
  double accuracy = 0.0;
  const std::size_t px = side * side * 3;
  for (std::uint64_t step = 1; step <= opt.steps; ++step) {
    Tensor<float> x({opt.batch_size, side, side, 3});
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < opt.batch_size; ++i) {
      auto s = corpus::texture_sample(sample_rng, side);
      labels.push_back(s.label);
      for (std::size_t j = 0; j < px; ++j) x[i * px + j] = datapipe::scale_pixel(s.image.pixels[j]);
    }
    Graph<float> g;
    Var<float> logits = dense(bb.forward(g, g.constant(std::move(x)), true), g.param(w), g.param(b));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < opt.batch_size; ++i) {
      const float* row = logits.value().ptr() + i * corpus::kTextureClasses;
      correct += static_cast<std::size_t>(std::max_element(row, row + corpus::kTextureClasses) - row) == labels[i];
    }
    accuracy = 0.95 * accuracy + 0.05 * static_cast<double>(correct) / static_cast<double>(opt.batch_size);
    Var<float> loss = softmax_cross_entropy(logits, labels);
    g.backward(loss);
    backbone_opt.step(params);
    classifier_opt.step(classifier);
    if (!opt.quiet && step % 50 == 0) {
      std::fprintf(stderr, "pretrain step %llu loss %.4f accuracy %.2f\n", static_cast<unsigned long long>(step), loss.value()[0], accuracy);
    }
  }
  for (auto [p, t] : saved) p->trainable = t;
  return accuracy;
}

}  // namespace vaffect
