#pragma once

#include <cstdint>

#include "medvit/attention.hpp"
#include "medvit/kan.hpp"

namespace medvit {

/// Common interface of the stage blocks.
class Block : public nn::Module {
 public:
  virtual Tensor forward(const Tensor& z) = 0;
  /// Zeroes every branch-final projection, turning the block into the
  /// identity map.
  virtual void zero_branches() = 0;
  /// Multiply-accumulate count for one sample on an H×W map.
  virtual std::uint64_t macs(std::size_t height, std::size_t width) const = 0;
  /// 'L' for LFP, 'G' for GFP.
  virtual char kind() const = 0;
};

/// conv1×1 (C→eC) → BN → ReLU → DW conv3×3 → BN → ReLU → conv1×1 (eC→C).
class Lffn : public nn::Module {
 public:
  Lffn(std::size_t channels, std::size_t expansion, Rng& rng);
  Tensor forward(const Tensor& x);
  std::uint64_t macs(std::size_t height, std::size_t width) const;

  std::size_t channels, hidden;
  nn::Conv2d conv1;
  nn::BatchNorm2d bn1;
  nn::Conv2d dwconv;
  nn::BatchNorm2d bn2;
  nn::Conv2d conv2;
};

/// z̃ = z + DiNA(LN(z)); out = z̃ + LFFN(LN(z̃)).
class LfpBlock : public Block {
 public:
  LfpBlock(std::size_t channels, const AttentionConfig& attn, std::size_t lffn_expansion, Rng& rng);
  Tensor forward(const Tensor& z) override;
  void zero_branches() override;
  std::uint64_t macs(std::size_t height, std::size_t width) const override;
  char kind() const override { return 'L'; }

  std::size_t channels;
  nn::LayerNorm norm1;
  DinaAttention attn;
  nn::LayerNorm norm2;
  Lffn lffn;
};

struct GfpOptions {
  double shrink = 0.75;
  std::size_t head_dim = 32;
  std::size_t reduction = 1;
  std::size_t kan_expansion = 2;
  RswafOptions kan;
  KanProjection kan_projection = KanProjection::Rswaf;
};

/// Width of the attention branch: shrink·C rounded to a multiple of head_dim
/// (never below 90% of the exact value) and leaving at least one head for the
/// convolutional branch.
std::size_t gfp_attention_width(std::size_t channels, double shrink, std::size_t head_dim);

/// Splits z into an attention part a (C1 channels) and a convolutional part
/// b (C - C1 channels):
///   z̃ = a + E-MHSA(LN(a))
///   ĥ = b + MHCA(P(z̃))        P: pointwise C1 → C2
///   y = Concat(z̃, ĥ);  out = y + KAN(y)
class GfpBlock : public Block {
 public:
  GfpBlock(std::size_t channels, const GfpOptions& opts, Rng& rng);
  Tensor forward(const Tensor& z) override;
  void zero_branches() override;
  std::uint64_t macs(std::size_t height, std::size_t width) const override;
  char kind() const override { return 'G'; }

  std::size_t channels, attn_width, conv_width;
  GfpOptions options;
  nn::LayerNorm norm1;
  EMhsa emhsa;
  nn::Conv2d branch_proj;
  Mhca mhca;
  KanFeedForward kan;
};

/// MACs of a 2-D convolution: C_out·C_in/g·kh·kw·H'·W' per sample.
std::uint64_t conv2d_macs(const Shape& input, const Shape& weight, ops::Conv2dOptions opts);
/// Per-position cost of one RSWAF layer: every edge evaluates N scaled
/// basis functions and their weighted sum plus its base branch, and every
/// input its silu.
std::uint64_t rswaf_layer_macs(std::size_t in, std::size_t out, std::size_t centers);

}  // namespace medvit
