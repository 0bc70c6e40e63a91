#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <vector>

#include "medvit/nn.hpp"

namespace medvit {

/// Uniform knot vector for B-splines of a given order: `intervals` cells on
/// [lo, hi] extended by `order` knots on each side.
struct SplineGrid {
  std::vector<double> knots;
  std::size_t order = 3;

  static SplineGrid uniform(std::size_t intervals = 5, double lo = -1.0, double hi = 1.0,
                            std::size_t order = 3);
  std::size_t num_basis() const { return knots.size() - order - 1; }
  double support_lo() const { return knots.front(); }
  double support_hi() const { return knots.back(); }
};

struct BasisValues {
  std::vector<double> values;
  /// False when x lies outside the extended grid; values are then all zero.
  bool in_support = true;
};

/// Cox–de Boor evaluation of every basis function of the grid's order at x.
BasisValues bspline_basis(double x, const SplineGrid& grid);
/// d/dx of each basis function at x.
std::vector<double> bspline_basis_derivative(double x, const SplineGrid& grid);

/// 1 - tanh²(r/h). Throws std::domain_error for h ≤ 0.
double rswaf_eval(double r, double h);

/// A layer mapping the last axis from in_features to out_features.
class KanLayer : public nn::Module {
 public:
  KanLayer(std::size_t in, std::size_t out) : in_features(in), out_features(out) {}
  virtual Tensor forward(const Tensor& x) const = 0;
  /// Zeroes every weight that feeds the output so the layer maps to 0.
  virtual void zero_output() = 0;

  std::size_t in_features, out_features;
};

/// φ(x) = w_b silu(x) + w_s Σ_i c_i B_i(x) on every (input, output) edge.
class SplineKanLayer : public KanLayer {
 public:
  SplineKanLayer(std::size_t in, std::size_t out, Rng& rng, SplineGrid grid = SplineGrid::uniform());
  Tensor forward(const Tensor& x) const override;
  void zero_output() override;

  SplineGrid grid;
  Tensor& coef;      // [out, in, num_basis]
  Tensor& w_base;    // [out, in]
  Tensor& w_spline;  // [out, in]
};

struct RswafOptions {
  std::size_t centers = 8;
  double lo = -2.0;
  double hi = 2.0;
  double width = 1.0;
  bool input_norm = true;
};

/// φ(x) = w_b silu(x) + w_s Σ_i w_i (1 - tanh²((x - c_i)/h)) on every edge,
/// after an input layernorm. Centers and the width h are shared by all edges
/// and learnable.
class RswafKanLayer : public KanLayer {
 public:
  RswafKanLayer(std::size_t in, std::size_t out, Rng& rng, RswafOptions opts = {});
  Tensor forward(const Tensor& x) const override;
  /// The layer without its input normalisation.
  Tensor forward_normalized(const Tensor& u) const;
  void zero_output() override;

  RswafOptions options;
  std::optional<nn::LayerNorm> norm;
  Tensor& centers;  // [N]
  Tensor& width;    // [1]
  Tensor& weight;   // [out, in, N]
  Tensor& w_base;   // [out, in]
  Tensor& w_scale;  // [out, in]
};

namespace ops {

/// Fused spline-KAN edge sum; x [..., in] -> [..., out].
Tensor spline_kan(const Tensor& x, const SplineGrid& grid, const Tensor& coef, const Tensor& w_base,
                  const Tensor& w_spline);

/// Fused RSWAF-KAN edge sum on already normalised inputs.
Tensor rswaf_kan(const Tensor& u, const Tensor& centers, const Tensor& width, const Tensor& weight,
                 const Tensor& w_base, const Tensor& w_scale);

}  // namespace ops

/// Composition Φ_{L-1} ∘ … ∘ Φ_0.
class KanStack : public nn::Module {
 public:
  explicit KanStack(std::vector<std::unique_ptr<KanLayer>> layers);
  Tensor forward(const Tensor& x) const;
  std::size_t size() const { return layers_.size(); }
  KanLayer& layer(std::size_t i) { return *layers_.at(i); }

 private:
  std::vector<std::unique_ptr<KanLayer>> layers_;
};

enum class KanProjection { Rswaf, Linear };

/// Per-position KAN on a [B,C,H,W] map: RSWAF C -> e·C, then a projection
/// e·C -> C that is either another RSWAF layer or a linear map.
class KanFeedForward : public nn::Module {
 public:
  KanFeedForward(std::size_t channels, std::size_t expansion, Rng& rng, RswafOptions opts = {},
                 KanProjection projection = KanProjection::Rswaf);
  Tensor forward(const Tensor& x) const;
  /// Forward on [..., C] tokens.
  Tensor forward_tokens(const Tensor& t) const;
  void zero_output();

  std::size_t channels, hidden;
  KanProjection projection_kind;
  RswafKanLayer expand;
  std::unique_ptr<RswafKanLayer> project_kan;
  std::unique_ptr<nn::Linear> project_linear;
};

}  // namespace medvit
