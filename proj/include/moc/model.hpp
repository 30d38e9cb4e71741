#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "moc/adamw.hpp"
#include "moc/cim.hpp"
#include "moc/cssm.hpp"
#include "moc/nn.hpp"
#include "moc/ops.hpp"

namespace moc {

/// Rows of the component ablation: backbone + FPN-style merge only, plus the
/// cross-scale interaction module, plus context scans in the head blocks.
enum class Ablation { kBaseline, kCim, kFull };

inline const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kBaseline: return "baseline";
    case Ablation::kCim: return "cim";
    case Ablation::kFull: return "full";
  }
  return "full";
}

inline Ablation parse_ablation(const std::string& s) {
  if (s == "baseline") return Ablation::kBaseline;
  if (s == "cim") return Ablation::kCim;
  if (s == "full") return Ablation::kFull;
  throw ConfigError("unknown ablation '" + s + "' (expected baseline|cim|full)");
}

struct ModelConfig {
  int base_channels = 32;
  int state_size = 16;
  int num_categories = 6;
  std::array<int, 3> depths = {2, 2, 2};
  Ablation ablation = Ablation::kFull;
  std::uint64_t seed = 0;
  // The predictor works in density units multiplied by this factor; the map
  // it returns is divided back, so counts and losses stay in true units.
  double density_scale = 100.0;
  // Kaiming init of the 1x1 output layer is multiplied by this. At full scale
  // the first AdamW steps push most output cells below zero, and the final
  // ReLU then stops their gradient for good.
  double output_init_scale = 0.1;

  bool uses_cim() const { return ablation != Ablation::kBaseline; }
  bool uses_context() const { return ablation == Ablation::kFull; }

  void validate() const {
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (state_size < 1) throw ConfigError("state_size must be >= 1");
    if (num_categories < 1) throw ConfigError("num_categories must be >= 1");
    for (int d : depths) {
      if (d < 0) throw ConfigError("stage depths must be >= 0");
    }
    if (!(density_scale > 0.0) || !std::isfinite(density_scale)) throw ConfigError("density_scale must be > 0");
    if (!(output_init_scale >= 0.0) || !std::isfinite(output_init_scale)) {
      throw ConfigError("output_init_scale must be >= 0");
    }
  }

  nlohmann::json to_json() const {
    return {{"base_channels", base_channels},
            {"state_size", state_size},
            {"num_categories", num_categories},
            {"depths", depths},
            {"ablation", ablation_name(ablation)},
            {"seed", seed},
            {"density_scale", density_scale},
            {"output_init_scale", output_init_scale}};
  }

  static ModelConfig from_json(const nlohmann::json& j) { return from_json(j, ModelConfig()); }

  /// Fields absent from `j` keep the values already in `base`.
  static ModelConfig from_json(const nlohmann::json& j, ModelConfig base) {
    try {
      if (j.contains("base_channels")) base.base_channels = j.at("base_channels").get<int>();
      if (j.contains("state_size")) base.state_size = j.at("state_size").get<int>();
      if (j.contains("num_categories")) base.num_categories = j.at("num_categories").get<int>();
      if (j.contains("depths")) base.depths = j.at("depths").get<std::array<int, 3>>();
      if (j.contains("ablation")) base.ablation = parse_ablation(j.at("ablation").get<std::string>());
      if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
      if (j.contains("density_scale")) base.density_scale = j.at("density_scale").get<double>();
      if (j.contains("output_init_scale")) base.output_init_scale = j.at("output_init_scale").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("model config: ") + e.what());
    }
    base.validate();
    return base;
  }
};

/// Tiny VMamba-style encoder: 4x4 patch embedding, three stages of VSS blocks
/// joined by 2x2 stride-2 downsampling.
template <class T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const ModelConfig& cfg, Rng& rng)
      : embed_(3, cfg.base_channels, 4, rng, 4, 1, Padding::kValid),
        embed_norm_(cfg.base_channels) {
    for (std::size_t s = 0; s < 3; ++s) {
      const int width = cfg.base_channels << s;
      if (s > 0) {
        down_[s - 1] = Conv2d<T>(width / 2, width, 2, rng, 2, 1, Padding::kValid);
        down_norm_[s - 1] = LayerNorm<T>(width);
      }
      for (int b = 0; b < cfg.depths[s]; ++b) {
        stages_[s].emplace_back(width, cfg.state_size, false, rng);
      }
    }
  }

  FeaturePyramid<T> operator()(const BasicVar<T>& image) const {
    if (image.value().rank() != 3 || image.dim(2) != 3) {
      throw ShapeError("backbone: expected H x W x 3 image, got " + shape_str(image.shape()));
    }
    if (image.dim(0) % 16 != 0 || image.dim(1) % 16 != 0 || image.dim(0) == 0 || image.dim(1) == 0) {
      throw ShapeError("backbone: image extents " + std::to_string(image.dim(0)) + "x" +
                       std::to_string(image.dim(1)) + " must be positive multiples of 16");
    }
    FeaturePyramid<T> p;
    auto x = embed_norm_(embed_(image));
    for (std::size_t s = 0; s < 3; ++s) {
      if (s > 0) x = down_norm_[s - 1](down_[s - 1](x));
      for (const auto& block : stages_[s]) x = block(x);
      p.level(s) = x;
    }
    return p;
  }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    embed_.collect(out, prefix + ".patch_embed");
    embed_norm_.collect(out, prefix + ".patch_norm");
    for (std::size_t s = 0; s < 3; ++s) {
      const std::string stage = prefix + ".stage" + std::to_string(s + 1);
      if (s > 0) {
        down_[s - 1].collect(out, stage + ".downsample");
        down_norm_[s - 1].collect(out, stage + ".downsample_norm");
      }
      for (std::size_t b = 0; b < stages_[s].size(); ++b) {
        stages_[s][b].collect(out, stage + ".block" + std::to_string(b));
      }
    }
  }

 private:
  Conv2d<T> embed_;
  LayerNorm<T> embed_norm_;
  std::array<Conv2d<T>, 2> down_;
  std::array<LayerNorm<T>, 2> down_norm_;
  std::array<std::vector<StateSpaceBlock<T>>, 3> stages_;
};

/// Stride-4 density map (H/4 x W/4 x K) and its per-channel sums.
template <class T>
struct DensityPrediction {
  BasicVar<T> map;
  std::vector<double> counts;
};

template <class T>
std::vector<double> channel_sums(const BasicTensor<T>& map) {
  if (map.rank() != 3) throw ShapeError("channel_sums: expected HWC map");
  const int k = map.dim(2);
  std::vector<double> sums(static_cast<std::size_t>(k), 0.0);
  for (std::size_t i = 0; i < map.size(); ++i) sums[i % static_cast<std::size_t>(k)] += map[i];
  return sums;
}

/// Backbone -> (CIM) -> top-down merge into stride 4 -> two head blocks
/// (CSS, or VSS when context is ablated) -> conv predictor with a final ReLU.
template <class T>
class MambaMoc {
 public:
  explicit MambaMoc(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const int c = cfg_.base_channels;
    backbone_ = Backbone<T>(cfg_, rng);
    if (cfg_.uses_cim()) cim_ = CrossScaleInteraction<T>(c, cfg_.state_size, rng);
    for (std::size_t i = 0; i < 3; ++i) lateral_[i] = Linear<T>(c << i, c, rng);
    for (auto& block : heads_) block = StateSpaceBlock<T>(c, cfg_.state_size, cfg_.uses_context(), rng);
    predictor1_ = Conv2d<T>(c, c, 3, rng);
    predictor2_ = Conv2d<T>(c, c, 3, rng);
    predictor_out_ = Linear<T>(c, cfg_.num_categories, rng);
    for (auto& w : predictor_out_.weight.mutable_value().storage()) w *= static_cast<T>(cfg_.output_init_scale);
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const Backbone<T>& backbone() const noexcept { return backbone_; }
  Linear<T>& predictor_out() { return predictor_out_; }

  FeaturePyramid<T> enhanced_pyramid(const BasicVar<T>& image) const {
    auto p = backbone_(image);
    return cfg_.uses_cim() ? cim_(p) : p;
  }

  DensityPrediction<T> operator()(const BasicVar<T>& image) const {
    auto p = enhanced_pyramid(image);
    BasicVar<T> merged;
    for (std::size_t i = 0; i < 3; ++i) {
      auto lvl = upsample_bilinear(lateral_[i](p.level(i)), 1 << i);
      merged = merged.defined() ? add(merged, lvl) : lvl;
    }
    for (const auto& block : heads_) merged = block(merged);
    auto x = relu(predictor1_(merged));
    x = relu(predictor2_(x));
    DensityPrediction<T> out;
    out.map = scale(relu(predictor_out_(x)), static_cast<T>(1.0 / cfg_.density_scale));
    out.counts = channel_sums(out.map.value());
    return out;
  }

  DensityPrediction<T> operator()(const BasicTensor<T>& image) const { return (*this)(constant(image)); }

  NamedParams<T> named_parameters() const {
    NamedParams<T> out;
    backbone_.collect(out, "backbone");
    if (cfg_.uses_cim()) cim_.collect(out, "cim");
    for (std::size_t i = 0; i < 3; ++i) lateral_[i].collect(out, "merge.lateral" + std::to_string(i + 1));
    for (std::size_t b = 0; b < heads_.size(); ++b) heads_[b].collect(out, "head.block" + std::to_string(b));
    predictor1_.collect(out, "predictor.conv1");
    predictor2_.collect(out, "predictor.conv2");
    predictor_out_.collect(out, "predictor.out");
    return out;
  }

  std::size_t parameter_count() const { return moc::parameter_count(named_parameters()); }

 private:
  ModelConfig cfg_;
  Backbone<T> backbone_;
  CrossScaleInteraction<T> cim_;
  std::array<Linear<T>, 3> lateral_;
  std::array<StateSpaceBlock<T>, 2> heads_;
  Conv2d<T> predictor1_;
  Conv2d<T> predictor2_;
  Linear<T> predictor_out_;
};

/// Pixel MSE between the predicted stride-4 map and a ground-truth density
/// already sum-pooled to the same resolution. Both sides are multiplied by
/// `density_scale` first; raw densities are ~1e-2 per cell, which leaves
/// gradients small enough for the AdamW epsilon to dominate.
template <class T>
BasicVar<T> density_loss(const BasicVar<T>& pred, const BasicTensor<T>& gt, double density_scale = 1.0) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("density_loss: prediction " + shape_str(pred.shape()) + " vs ground truth " +
                     shape_str(gt.shape()));
  }
  const T s = static_cast<T>(density_scale);
  BasicTensor<T> target = gt;
  for (auto& v : target.storage()) v *= s;
  return mse_loss(scale(pred, s), constant(target));
}

template <class T>
struct TrainSample {
  BasicTensor<T> image;    // H x W x 3
  BasicTensor<T> density;  // H/4 x W/4 x K
};

/// Forward + backward over the batch (loss averaged over images), then one
/// optimizer step. Returns the pre-step mean loss.
template <class T>
double train_step(const MambaMoc<T>& model, AdamW<T>& optimizer, std::span<const TrainSample<T>> batch) {
  if (batch.empty()) throw ArgumentError("train_step: empty batch");
  optimizer.zero_grad();
  const T weight = T(1) / static_cast<T>(batch.size());
  double total = 0.0;
  for (const auto& sample : batch) {
    if (sample.image.shape() != batch.front().image.shape()) {
      throw ShapeError("train_step: inconsistent image shapes within batch");
    }
    auto pred = model(sample.image);
    auto loss = density_loss(pred.map, sample.density, model.config().density_scale);
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericError("train_step: non-finite loss");
    total += value;
    backward(scale(loss, weight));
  }
  for (const auto& [name, p] : optimizer.params()) {
    if (!p.grad().all_finite()) throw NumericError("train_step: non-finite gradient in " + name);
  }
  optimizer.step();
  return total / static_cast<double>(batch.size());
}

}  // namespace moc
