#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "medvit/blocks.hpp"

namespace medvit {

/// One stage: L groups of (N LFP blocks + optional GFP block).
struct StageSpec {
  std::size_t channels = 96;
  std::size_t lfp_per_group = 1;  // N
  std::size_t groups = 1;         // L
  bool has_gfp = true;
  std::size_t reduction = 1;  // E-MHSA spatial reduction
  std::size_t dilation = 1;

  /// Table notation of the stage: "C" (LFP only), "HN" (LFP×N + GFP), "T"
  /// (GFP only), or "-" when the stage is empty.
  std::string notation() const;
  /// e.g. "(LFP×2+GFP×1)×2"
  std::string pattern() const;
  /// Block kinds in order, e.g. "LLGLLG".
  std::string block_kinds() const;
};

struct ModelConfig {
  std::string name = "custom";
  std::size_t in_channels = 3;
  std::vector<std::size_t> stem_channels{64, 32, 64, 64};
  std::vector<std::size_t> stem_strides{2, 1, 1, 2};
  std::vector<StageSpec> stages;
  std::size_t k = 3;
  std::size_t head_dim = 32;
  double shrink = 0.75;
  std::size_t lffn_expansion = 3;
  std::size_t kan_expansion = 2;
  std::size_t kan_centers = 8;
  KanProjection kan_projection = KanProjection::Rswaf;
  std::size_t num_classes = 2;
  std::size_t resolution = 224;

  /// "T", "S", "B", "L" or "micro".
  static ModelConfig variant(const std::string& name);
  static std::vector<std::string> variant_names();

  /// Spatial side of each stage's feature map at `resolution`.
  std::vector<std::size_t> stage_extents() const;
  /// Overall input side divisor.
  std::size_t downsampling() const;
  /// Throws on zero classes, bad resolution, or infeasible dilation.
  void validate() const;
  /// Space-separated stage notation, e.g. "C HN HN T".
  std::string stage_pattern() const;
};

/// conv3×3 → BN → ReLU
class ConvBnRelu : public nn::Module {
 public:
  ConvBnRelu(std::size_t in, std::size_t out, std::size_t stride, Rng& rng);
  Tensor forward(const Tensor& x);

  nn::Conv2d conv;
  nn::BatchNorm2d bn;
};

/// Optional 2×2 average pool, then pointwise conv and BN.
class PatchEmbed : public nn::Module {
 public:
  PatchEmbed(std::size_t in, std::size_t out, bool downsample, Rng& rng);
  Tensor forward(const Tensor& x);

  bool downsample;
  nn::Conv2d conv;
  nn::BatchNorm2d bn;
};

class Stage : public nn::Module {
 public:
  Stage(std::size_t in_channels, const StageSpec& spec, bool downsample, const ModelConfig& cfg, Rng& rng);

  StageSpec spec;
  PatchEmbed embed;
  std::vector<std::unique_ptr<Block>> blocks;
};

/// Named intermediate activations recorded during a forward pass.
using ActivationTaps = std::map<std::string, Tensor>;

class MedViTModel : public nn::Module {
 public:
  explicit MedViTModel(const ModelConfig& cfg, std::uint64_t seed = 0);

  /// Pre-softmax scores [B, num_classes]. When `taps` is given it receives
  /// "stem", "stageI", "stageI.blockJ" and "norm" activations.
  Tensor logits(const Tensor& x, ActivationTaps* taps = nullptr);
  /// Softmax probabilities [B, num_classes].
  Tensor forward(const Tensor& x);

  /// Names accepted as taps, in forward order.
  std::vector<std::string> tap_names() const;
  /// Block kinds actually instantiated, per non-empty stage, e.g.
  /// "LL|LG|LLGLLG|G".
  std::string block_sequence() const;
  std::string stage_pattern() const;
  std::vector<Block*> all_blocks() const;

  const ModelConfig& config() const { return config_; }
  std::vector<std::unique_ptr<ConvBnRelu>> stem;
  std::vector<std::unique_ptr<Stage>> stages;
  std::vector<std::size_t> stage_index;  // config stage index of each built stage
  std::unique_ptr<nn::BatchNorm2d> norm;
  std::unique_ptr<nn::Linear> head;

 private:
  ModelConfig config_;
};

std::unique_ptr<MedViTModel> build_model(const ModelConfig& cfg, std::uint64_t seed = 0);

/// Exact count of trainable scalars.
std::uint64_t count_params(const MedViTModel& model);
/// Multiply-accumulate count for one sample at the given square resolution.
std::uint64_t count_flops(const MedViTModel& model, std::size_t resolution);

}  // namespace medvit
