#pragma once

#include <string>
#include <vector>

#include "vaffect/autodiff/ops.hpp"
#include "vaffect/cells/init.hpp"

namespace vaffect {

enum class BackboneKind { VggStyle, ResNetBottleneck, DenseBlockNet };

inline const char* backbone_name(BackboneKind k) {
  switch (k) {
    case BackboneKind::VggStyle: return "vgg";
    case BackboneKind::ResNetBottleneck: return "resnet";
    case BackboneKind::DenseBlockNet: return "dense";
  }
  return "?";
}

inline BackboneKind parse_backbone(const std::string& s) {
  if (s == "vgg") return BackboneKind::VggStyle;
  if (s == "resnet") return BackboneKind::ResNetBottleneck;
  if (s == "dense") return BackboneKind::DenseBlockNet;
  throw ContractError("unknown backbone: " + s);
}

enum class Trainability { Frozen, LastConvOnly, All };

struct VggBlock {
  std::size_t convs;
  std::size_t filters;
};

struct ResNetStage {
  std::size_t blocks;
  std::size_t width;  // bottleneck width; stage output is width * expansion
};

/// Layer tables for the three feature extractors at 96 x 96 input.
///
/// All variants keep every spatial extent integral: 3x3 convolutions are
/// stride 1 with padding 1, and downsampling is done by 2x2 stride-2 pooling.
/// ResNet and DenseNet reach 24 x 24 after the stem (conv + two pools) and
/// end with global average pooling; VGG flattens its final 3 x 3 map.
struct BackboneConfig {
  BackboneKind kind = BackboneKind::VggStyle;
  std::size_t image_size = 96;
  std::size_t channels = 3;

  std::vector<VggBlock> vgg_blocks;

  std::size_t stem_filters = 0;
  std::vector<ResNetStage> resnet_stages;
  std::size_t expansion = 4;

  std::vector<std::size_t> dense_layers;
  std::size_t growth = 32;
  std::size_t bottleneck_factor = 4;
  double compression = 0.5;

  Trainability trainability = Trainability::All;

  /// Desk-scale tables with the same topology as the published networks.
  static BackboneConfig toy(BackboneKind kind) {
    BackboneConfig c;
    c.kind = kind;
    switch (kind) {
      case BackboneKind::VggStyle: c.vgg_blocks = {{1, 4}, {1, 8}, {1, 16}, {1, 16}, {1, 32}}; break;
      case BackboneKind::ResNetBottleneck:
        c.stem_filters = 8;
        c.resnet_stages = {{1, 4}, {1, 8}, {1, 8}, {1, 16}};
        c.expansion = 2;
        break;
      case BackboneKind::DenseBlockNet:
        c.stem_filters = 8;
        c.dense_layers = {2, 2, 2, 2};
        c.growth = 4;
        c.bottleneck_factor = 2;
        break;
    }
    return c;
  }

  /// VGG-Face (2,2,3,3,3 convs; 64..512 filters), ResNet-50 bottlenecks
  /// (3,4,6,3) and DenseNet-121 blocks (6,12,24,16; k = 32).
  static BackboneConfig published(BackboneKind kind) {
    BackboneConfig c;
    c.kind = kind;
    switch (kind) {
      case BackboneKind::VggStyle: c.vgg_blocks = {{2, 64}, {2, 128}, {3, 256}, {3, 512}, {3, 512}}; break;
      case BackboneKind::ResNetBottleneck:
        c.stem_filters = 64;
        c.resnet_stages = {{3, 64}, {4, 128}, {6, 256}, {3, 512}};
        c.expansion = 4;
        break;
      case BackboneKind::DenseBlockNet:
        c.stem_filters = 64;
        c.dense_layers = {6, 12, 24, 16};
        c.growth = 32;
        c.bottleneck_factor = 4;
        break;
    }
    return c;
  }
};

template <class T>
class Backbone {
 public:
  Backbone(ParameterSet<T>& ps, const BackboneConfig& cfg, init::Rng& rng, const std::string& prefix = "backbone/")
      : cfg_(cfg), ps_(ps), prefix_(prefix) {
    switch (cfg.kind) {
      case BackboneKind::VggStyle: build_vgg(rng); break;
      case BackboneKind::ResNetBottleneck: build_resnet(rng); break;
      case BackboneKind::DenseBlockNet: build_dense(rng); break;
    }
    set_trainability(cfg.trainability);
  }

  const BackboneConfig& config() const { return cfg_; }
  std::size_t feature_width() const { return features_; }

  void set_trainability(Trainability t) {
    cfg_.trainability = t;
    const std::size_t first_trainable = t == Trainability::All ? 0
                                        : t == Trainability::Frozen ? groups_.size()
                                                                    : last_conv_group_;
    group_trainable_.assign(groups_.size(), false);
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      group_trainable_[gi] = gi >= first_trainable;
      for (auto* p : groups_[gi]) {
        if (!p->is_state) p->trainable = group_trainable_[gi];
      }
    }
  }

  /// Parameters updated under "last conv only" (last conv unit and anything after it).
  std::vector<Parameter<T>*> last_conv_parameters() const {
    std::vector<Parameter<T>*> out;
    for (std::size_t gi = last_conv_group_; gi < groups_.size(); ++gi) out.insert(out.end(), groups_[gi].begin(), groups_[gi].end());
    return out;
  }

  std::vector<Parameter<T>*> parameters() const {
    std::vector<Parameter<T>*> out;
    for (const auto& g : groups_) out.insert(out.end(), g.begin(), g.end());
    return out;
  }

  /// images: N x S x S x C, already scaled to [-1, 1]. Returns N x features.
  /// Batchnorm uses batch statistics only when `training` is set and the
  /// owning unit is trainable.
  Var<T> forward(Graph<T>& g, Var<T> images, bool training) const {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != cfg_.image_size || s[2] != cfg_.image_size || s[3] != cfg_.channels) {
      throw ShapeError("backbone: expected N x " + std::to_string(cfg_.image_size) + " x " + std::to_string(cfg_.image_size) +
                       " x " + std::to_string(cfg_.channels) + ", got " + shape_str(s));
    }
    switch (cfg_.kind) {
      case BackboneKind::VggStyle: return forward_vgg(g, images);
      case BackboneKind::ResNetBottleneck: return forward_resnet(g, images, training);
      case BackboneKind::DenseBlockNet: return forward_dense(g, images, training);
    }
    throw ContractError("unreachable backbone kind");
  }

 private:
  struct Norm {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;
    Parameter<T>* mean = nullptr;
    Parameter<T>* var = nullptr;
  };
  struct Conv {
    ConvSpec spec;
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
    std::size_t group = 0;
  };
  struct Bottleneck {
    Conv reduce, spatial, expand;
    Norm reduce_norm, spatial_norm, expand_norm;
    bool projected = false;
    Conv shortcut;
    Norm shortcut_norm;
    std::size_t group = 0;
  };
  struct DenseLayer {
    Norm norm1, norm2;
    Conv reduce, spatial;
    std::size_t group = 0;
  };
  struct Transition {
    Norm norm;
    Conv conv;
    std::size_t group = 0;
  };

  std::size_t new_group() {
    groups_.emplace_back();
    return groups_.size() - 1;
  }

  Parameter<T>& add_param(const std::string& name, Tensor<T> v, std::size_t group) {
    auto& p = ps_.add(prefix_ + name, std::move(v));
    groups_[group].push_back(&p);
    return p;
  }

  Conv make_conv(const std::string& name, ConvSpec spec, std::size_t group, init::Rng& rng) {
    Conv c;
    c.spec = spec;
    c.group = group;
    const std::size_t fan_in = spec.filter * spec.filter * spec.in_depth;
    c.w = &add_param(name + "/weights", init::he_uniform<T>({spec.filter, spec.filter, spec.in_depth, spec.out_depth}, fan_in, rng), group);
    c.b = &add_param(name + "/bias", Tensor<T>({spec.out_depth}), group);
    last_conv_group_ = group;
    return c;
  }

  Norm make_norm(const std::string& name, std::size_t channels, std::size_t group) {
    Norm n;
    n.gamma = &add_param(name + "/gamma", Tensor<T>({channels}, T{1}), group);
    n.beta = &add_param(name + "/beta", Tensor<T>({channels}), group);
    n.mean = &add_param(name + "/running_mean", Tensor<T>({channels}), group);
    n.var = &add_param(name + "/running_var", Tensor<T>({channels}, T{1}), group);
    n.mean->is_state = n.var->is_state = true;
    n.mean->trainable = n.var->trainable = false;
    return n;
  }

  Var<T> conv(Graph<T>& g, Var<T> x, const Conv& c) const { return conv2d(x, c.spec, g.param(*c.w), g.param(*c.b)); }

  Var<T> norm(Graph<T>& g, Var<T> x, const Norm& n, std::size_t group, bool training) const {
    BatchNormOptions opt;
    opt.training = training && group_trainable_[group];
    return batchnorm(x, g.param(*n.gamma), g.param(*n.beta), *n.mean, *n.var, opt);
  }

  // VGG ---------------------------------------------------------------------
  void build_vgg(init::Rng& rng) {
    std::size_t depth = cfg_.channels, size = cfg_.image_size;
    for (std::size_t b = 0; b < cfg_.vgg_blocks.size(); ++b) {
      for (std::size_t k = 0; k < cfg_.vgg_blocks[b].convs; ++k) {
        const std::size_t gi = new_group();
        vgg_convs_.push_back(make_conv("block" + std::to_string(b + 1) + "/conv" + std::to_string(k + 1),
                                       ConvSpec::same3x3(depth, cfg_.vgg_blocks[b].filters), gi, rng));
        depth = cfg_.vgg_blocks[b].filters;
      }
      vgg_block_ends_.push_back(vgg_convs_.size());
      size = pool_extent(size, 2, 2, "backbone");
    }
    features_ = size * size * depth;
  }

  Var<T> forward_vgg(Graph<T>& g, Var<T> x) const {
    std::size_t k = 0;
    for (std::size_t end : vgg_block_ends_) {
      for (; k < end; ++k) x = relu(conv(g, x, vgg_convs_[k]));
      x = maxpool2d(x, 2, 2);
    }
    return reshape(x, {x.dim(0), features_});
  }

  // ResNet ------------------------------------------------------------------
  void build_resnet(init::Rng& rng) {
    std::size_t size = cfg_.image_size;
    const std::size_t gs = new_group();
    stem_ = make_conv("stem/conv", ConvSpec::same3x3(cfg_.channels, cfg_.stem_filters), gs, rng);
    stem_norm_ = make_norm("stem/bn", cfg_.stem_filters, gs);
    size = pool_extent(pool_extent(size, 2, 2, "backbone"), 2, 2, "backbone");
    std::size_t depth = cfg_.stem_filters;
    for (std::size_t s = 0; s < cfg_.resnet_stages.size(); ++s) {
      if (s > 0) size = pool_extent(size, 2, 2, "backbone");
      resnet_stage_starts_.push_back(blocks_.size());
      for (std::size_t b = 0; b < cfg_.resnet_stages[s].blocks; ++b) {
        const std::string name = "stage" + std::to_string(s + 1) + "/block" + std::to_string(b + 1);
        const std::size_t width = cfg_.resnet_stages[s].width, out = width * cfg_.expansion;
        Bottleneck bl;
        bl.group = new_group();
        bl.reduce = make_conv(name + "/reduce", ConvSpec::pointwise(depth, width), bl.group, rng);
        bl.reduce_norm = make_norm(name + "/reduce_bn", width, bl.group);
        bl.spatial = make_conv(name + "/spatial", ConvSpec::same3x3(width, width), bl.group, rng);
        bl.spatial_norm = make_norm(name + "/spatial_bn", width, bl.group);
        bl.expand = make_conv(name + "/expand", ConvSpec::pointwise(width, out), bl.group, rng);
        bl.expand_norm = make_norm(name + "/expand_bn", out, bl.group);
        if (depth != out) {
          bl.projected = true;
          bl.shortcut = make_conv(name + "/shortcut", ConvSpec::pointwise(depth, out), bl.group, rng);
          bl.shortcut_norm = make_norm(name + "/shortcut_bn", out, bl.group);
        }
        blocks_.push_back(bl);
        depth = out;
      }
    }
    (void)size;
    features_ = depth;
  }

  Var<T> forward_resnet(Graph<T>& g, Var<T> x, bool training) const {
    x = relu(norm(g, conv(g, x, stem_), stem_norm_, stem_.group, training));
    x = maxpool2d(maxpool2d(x, 2, 2), 2, 2);
    for (std::size_t s = 0; s < resnet_stage_starts_.size(); ++s) {
      if (s > 0) x = maxpool2d(x, 2, 2);
      const std::size_t end = s + 1 < resnet_stage_starts_.size() ? resnet_stage_starts_[s + 1] : blocks_.size();
      for (std::size_t b = resnet_stage_starts_[s]; b < end; ++b) {
        const Bottleneck& bl = blocks_[b];
        Var<T> y = relu(norm(g, conv(g, x, bl.reduce), bl.reduce_norm, bl.group, training));
        y = relu(norm(g, conv(g, y, bl.spatial), bl.spatial_norm, bl.group, training));
        y = norm(g, conv(g, y, bl.expand), bl.expand_norm, bl.group, training);
        Var<T> shortcut = bl.projected ? norm(g, conv(g, x, bl.shortcut), bl.shortcut_norm, bl.group, training) : x;
        x = relu(add(y, shortcut));
      }
    }
    return global_avg_pool(x);
  }

  // DenseNet ----------------------------------------------------------------
  void build_dense(init::Rng& rng) {
    const std::size_t gs = new_group();
    stem_ = make_conv("stem/conv", ConvSpec::same3x3(cfg_.channels, cfg_.stem_filters), gs, rng);
    stem_norm_ = make_norm("stem/bn", cfg_.stem_filters, gs);
    std::size_t depth = cfg_.stem_filters;
    std::size_t size = pool_extent(pool_extent(cfg_.image_size, 2, 2, "backbone"), 2, 2, "backbone");
    for (std::size_t b = 0; b < cfg_.dense_layers.size(); ++b) {
      dense_block_starts_.push_back(dense_.size());
      for (std::size_t l = 0; l < cfg_.dense_layers[b]; ++l) {
        const std::string name = "dense" + std::to_string(b + 1) + "/layer" + std::to_string(l + 1);
        const std::size_t inner = cfg_.bottleneck_factor * cfg_.growth;
        DenseLayer dl;
        dl.group = new_group();
        dl.norm1 = make_norm(name + "/bn1", depth, dl.group);
        dl.reduce = make_conv(name + "/reduce", ConvSpec::pointwise(depth, inner), dl.group, rng);
        dl.norm2 = make_norm(name + "/bn2", inner, dl.group);
        dl.spatial = make_conv(name + "/spatial", ConvSpec::same3x3(inner, cfg_.growth), dl.group, rng);
        dense_.push_back(dl);
        depth += cfg_.growth;
      }
      if (b + 1 < cfg_.dense_layers.size()) {
        const std::string name = "transition" + std::to_string(b + 1);
        const auto out = static_cast<std::size_t>(static_cast<double>(depth) * cfg_.compression);
        Transition tr;
        tr.group = new_group();
        tr.norm = make_norm(name + "/bn", depth, tr.group);
        tr.conv = make_conv(name + "/conv", ConvSpec::pointwise(depth, out), tr.group, rng);
        transitions_.push_back(tr);
        depth = out;
        size = pool_extent(size, 2, 2, "backbone");
      }
    }
    final_group_ = new_group();
    final_norm_ = make_norm("final_bn", depth, final_group_);
    features_ = depth;
  }

  Var<T> forward_dense(Graph<T>& g, Var<T> x, bool training) const {
    x = relu(norm(g, conv(g, x, stem_), stem_norm_, stem_.group, training));
    x = maxpool2d(maxpool2d(x, 2, 2), 2, 2);
    for (std::size_t b = 0; b < dense_block_starts_.size(); ++b) {
      const std::size_t end = b + 1 < dense_block_starts_.size() ? dense_block_starts_[b + 1] : dense_.size();
      for (std::size_t l = dense_block_starts_[b]; l < end; ++l) {
        const DenseLayer& dl = dense_[l];
        Var<T> y = conv(g, relu(norm(g, x, dl.norm1, dl.group, training)), dl.reduce);
        y = conv(g, relu(norm(g, y, dl.norm2, dl.group, training)), dl.spatial);
        x = concat<T>({x, y});
      }
      if (b < transitions_.size()) {
        const Transition& tr = transitions_[b];
        x = avgpool2d(conv(g, relu(norm(g, x, tr.norm, tr.group, training)), tr.conv), 2, 2);
      }
    }
    return global_avg_pool(relu(norm(g, x, final_norm_, final_group_, training)));
  }

  BackboneConfig cfg_;
  ParameterSet<T>& ps_;
  std::string prefix_;
  std::vector<std::vector<Parameter<T>*>> groups_;
  std::vector<bool> group_trainable_;
  std::size_t last_conv_group_ = 0;
  std::size_t features_ = 0;

  std::vector<Conv> vgg_convs_;
  std::vector<std::size_t> vgg_block_ends_;

  Conv stem_;
  Norm stem_norm_;
  std::vector<Bottleneck> blocks_;
  std::vector<std::size_t> resnet_stage_starts_;

  std::vector<DenseLayer> dense_;
  std::vector<std::size_t> dense_block_starts_;
  std::vector<Transition> transitions_;
  Norm final_norm_;
  std::size_t final_group_ = 0;
};

}  // namespace vaffect
