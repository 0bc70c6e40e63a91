#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "medvit/model.hpp"

namespace medvit::analysis {

enum class RfPattern { Full, Neighborhood, Dilated };

/// Receptive field after each layer on a line of n tokens. `dilations` has one
/// entry per layer; it is ignored for Full and treated as all ones for
/// Neighborhood.
std::vector<std::size_t> analytic_rf_profile(RfPattern pattern, std::size_t k,
                                             const std::vector<std::size_t>& dilations, std::size_t n);
/// Final entry of analytic_rf_profile.
std::size_t analytic_rf(RfPattern pattern, std::size_t k, const std::vector<std::size_t>& dilations,
                        std::size_t n);
/// k^ℓ, the growth bound of any dilation schedule.
std::uint64_t rf_upper_bound(std::size_t k, std::size_t layers);

struct ReceptiveFieldReport {
  RfPattern pattern = RfPattern::Dilated;
  std::size_t k = 3;
  std::size_t tokens = 0;
  std::vector<std::size_t> dilations;
  std::vector<std::size_t> analytic;   // per layer
  std::vector<std::size_t> empirical;  // per layer
  std::uint64_t upper_bound = 0;
};

/// Gradient-support extent of the probe token's output through a stack of
/// 1-D attention layers with random weights and zero relative bias. Throws
/// std::invalid_argument if the analytic field around the probe would reach
/// the line's ends.
std::size_t empirical_rf(RfPattern pattern, std::size_t k, const std::vector<std::size_t>& dilations,
                         std::size_t tokens, std::size_t probe, std::uint64_t seed = 0);

/// Analytic and empirical fields after every layer, probing the center.
ReceptiveFieldReport receptive_field_report(RfPattern pattern, std::size_t k,
                                            const std::vector<std::size_t>& dilations,
                                            std::size_t tokens = 200, std::uint64_t seed = 0);

/// Mean over all ordered channel pairs (diagonal included) of
/// (1 - cos(X_i, X_j)) / 2 for X [C,H,W] (or [1,C,H,W]). A pair involving a
/// zero-norm channel counts as 0.5; their number is written to
/// `degenerate_pairs` when given.
double feature_cosine_distance(const Tensor& x, std::size_t* degenerate_pairs = nullptr);

struct CosinePoint {
  std::string layer;
  double position = 0.0;  // layer index normalised to [0,1]
  double distance = 0.0;
};

/// Mean cosine distance of every block output over a batch of images.
std::vector<CosinePoint> cosine_profile(MedViTModel& model, const Tensor& images);
void write_cosine_csv(std::ostream& os, const std::vector<CosinePoint>& profile);

struct Heatmap {
  std::size_t height = 0, width = 0;
  std::size_t target = 0;
  std::vector<double> values;  // row-major, in [0,1]

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

/// ReLU(Σ_c w_c A_c) with w_c the spatial mean of the gradient, max-normalised.
/// activation and gradient are [C,H,W] or [1,C,H,W].
Heatmap grad_cam_from(const Tensor& activation, const Tensor& gradient);

/// Nearest-neighbour resize.
Heatmap upsample_nearest(const Heatmap& map, std::size_t height, std::size_t width);

/// Grad-CAM of the pre-softmax score of `target_class` with respect to the
/// named activation tap, upsampled to the input resolution. x is [1,C,H,W];
/// the model runs in eval mode for the pass.
Heatmap grad_cam(MedViTModel& model, const Tensor& x, std::size_t target_class, const std::string& layer);

/// Binary (P5) 8-bit portable graymap.
void write_pgm(const std::string& path, const Heatmap& map);

}  // namespace medvit::analysis
