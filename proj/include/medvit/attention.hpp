#pragma once

#include <cstddef>
#include <vector>

#include "medvit/nn.hpp"

namespace medvit {

/// Raised when a neighborhood of k tokens with dilation δ does not fit in
/// the feature map.
class FeasibilityError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AttentionConfig {
  std::size_t k = 3;
  std::size_t dilation = 1;
  std::size_t dim = 32;
  std::size_t head_dim = 32;

  std::size_t n_heads() const { return dim / head_dim; }
  /// Checks k odd, δ ≥ 1, dim divisible by head_dim.
  void validate() const;
  /// Kernel extent along an axis of the given length. A single-row map
  /// attends along its row only.
  std::size_t kernel_along(std::size_t extent) const { return extent == 1 ? 1 : k; }
  /// Throws FeasibilityError unless k·δ fits along every non-singleton axis.
  void check_feasible(std::size_t height, std::size_t width) const;
};

/// The k positions along one axis that share i's residue modulo δ and lie
/// nearest to i, ordered by distance then by position. Windows near a border
/// shift inward so exactly k positions are always returned.
std::vector<std::size_t> neighbor_indices(std::size_t i, std::size_t extent, std::size_t k,
                                          std::size_t dilation);

/// Flattened 2-D neighborhood of token (y, x) on an H×W map: the Cartesian
/// product of per-axis selections, ordered by squared distance then by flat
/// index.
std::vector<std::size_t> neighbor_indices_2d(std::size_t y, std::size_t x, std::size_t height,
                                             std::size_t width, std::size_t kh, std::size_t kw,
                                             std::size_t dilation);

/// Precomputed gather table for one map geometry. For each query token the
/// kh·kw neighbor token indices and the matching relative-bias slots.
struct NeighborhoodTable {
  std::size_t tokens = 0;
  std::size_t span = 0;  // neighbors per token
  std::vector<std::size_t> neighbor;
  std::vector<std::size_t> bias_slot;  // index into a (2k-1)x(2k-1) table

  static NeighborhoodTable build(std::size_t height, std::size_t width, const AttentionConfig& cfg);
};

namespace ops {

/// Neighborhood attention core. qkv is [B,N,3C] laid out as (q | k | v) with
/// head h owning channels [h·hd, (h+1)·hd) of each part; bias is
/// [heads, 2k-1, 2k-1]. Logits are (q·k + bias)/√hd. Returns [B,N,C].
Tensor neighborhood_attention(const Tensor& qkv, const Tensor& bias, const NeighborhoodTable& table,
                              std::size_t heads);

/// Scaled dot-product attention over all keys, composed from primitives.
/// q [B,N,C], k and v [B,M,C] -> [B,N,C].
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

}  // namespace ops

/// Dilated neighborhood attention with its qkv and output projections.
class DinaAttention : public nn::Module {
 public:
  DinaAttention(const AttentionConfig& cfg, Rng& rng);
  /// x: [B, H·W, C] tokens of an H×W map.
  Tensor forward(const Tensor& x, std::size_t height, std::size_t width) const;

  AttentionConfig config;
  nn::Linear qkv;
  nn::Linear proj;
  Tensor& rel_bias;
};

/// Global multi-head self-attention with the same projection layout as
/// DinaAttention, so weights can be shared between the two.
class FullAttention : public nn::Module {
 public:
  FullAttention(std::size_t dim, std::size_t heads, Rng& rng);
  Tensor forward(const Tensor& x) const;

  std::size_t dim, heads;
  nn::Linear qkv;
  nn::Linear proj;
};

/// Efficient multi-head self-attention: keys and values come from the map
/// average-pooled by the reduction ratio.
class EMhsa : public nn::Module {
 public:
  EMhsa(std::size_t dim, std::size_t head_dim, std::size_t reduction, Rng& rng);
  /// [B,C,H,W] -> [B,C,H,W]; no residual.
  Tensor forward(const Tensor& x) const;

  std::size_t dim, head_dim, reduction;
  nn::Linear q;
  nn::Linear kv;
  nn::Linear proj;
};

/// Multi-head convolutional attention: grouped 3×3 conv with one group per
/// head, batchnorm, relu, then a pointwise projection.
class Mhca : public nn::Module {
 public:
  Mhca(std::size_t dim, std::size_t head_dim, Rng& rng);
  Tensor forward(const Tensor& x);

  std::size_t dim, head_dim;
  nn::Conv2d group_conv;
  nn::BatchNorm2d norm;
  nn::Conv2d projection;
};

}  // namespace medvit
