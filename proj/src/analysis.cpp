#include "medvit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace medvit::analysis {

std::vector<std::size_t> analytic_rf_profile(RfPattern pattern, std::size_t k,
                                             const std::vector<std::size_t>& dilations, std::size_t n) {
  if (k == 0 || k % 2 == 0) throw std::invalid_argument("analytic_rf: k must be odd");
  if (dilations.empty()) throw std::invalid_argument("analytic_rf: need at least one layer");
  std::vector<std::size_t> out;
  std::size_t span = 1;
  for (std::size_t d : dilations) {
    if (pattern == RfPattern::Full) {
      out.push_back(n);
      continue;
    }
    const std::size_t step = pattern == RfPattern::Neighborhood ? 1 : d;
    if (step == 0) throw std::invalid_argument("analytic_rf: dilation must be positive");
    span += step * (k - 1);
    out.push_back(std::min(n, span));
  }
  return out;
}

std::size_t analytic_rf(RfPattern pattern, std::size_t k, const std::vector<std::size_t>& dilations,
                        std::size_t n) {
  return analytic_rf_profile(pattern, k, dilations, n).back();
}

std::uint64_t rf_upper_bound(std::size_t k, std::size_t layers) {
  std::uint64_t v = 1;
  for (std::size_t i = 0; i < layers; ++i) v *= k;
  return v;
}

namespace {

constexpr std::size_t kProbeDim = 8;

std::vector<std::size_t> support_extents(RfPattern pattern, std::size_t k,
                                         const std::vector<std::size_t>& dilations, std::size_t tokens,
                                         std::size_t probe, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::unique_ptr<DinaAttention>> local;
  std::vector<std::unique_ptr<FullAttention>> global;
  for (std::size_t d : dilations) {
    if (pattern == RfPattern::Full) {
      global.push_back(std::make_unique<FullAttention>(kProbeDim, 1, rng));
    } else {
      const std::size_t step = pattern == RfPattern::Neighborhood ? 1 : d;
      local.push_back(std::make_unique<DinaAttention>(AttentionConfig{k, step, kProbeDim, kProbeDim}, rng));
    }
  }
  Tensor x = Tensor::randn({1, tokens, kProbeDim}, rng);
  Tensor readout = Tensor::randn({1, 1, kProbeDim}, rng);
  std::vector<std::size_t> extents;
  for (std::size_t depth = 1; depth <= dilations.size(); ++depth) {
    Tensor input = x.detach();
    input.set_requires_grad(true);
    Tensor h = input;
    for (std::size_t l = 0; l < depth; ++l) {
      h = pattern == RfPattern::Full ? global[l]->forward(h) : local[l]->forward(h, 1, tokens);
    }
    ops::sum(ops::mul(ops::slice(h, 1, probe, 1), readout)).backward();
    std::size_t lo = tokens, hi = 0;
    const auto g = input.grad();
    for (std::size_t t = 0; t < tokens; ++t) {
      bool nonzero = false;
      for (std::size_t c = 0; c < kProbeDim; ++c) nonzero = nonzero || g[t * kProbeDim + c] != 0.0;
      if (nonzero) {
        lo = std::min(lo, t);
        hi = std::max(hi, t);
      }
    }
    extents.push_back(lo > hi ? 0 : hi - lo + 1);
  }
  return extents;
}

void check_probe(RfPattern pattern, std::size_t k, const std::vector<std::size_t>& dilations,
                 std::size_t tokens, std::size_t probe) {
  if (probe >= tokens) throw std::invalid_argument("empirical_rf: probe outside the token line");
  if (pattern == RfPattern::Full) return;
  const std::size_t span = analytic_rf(pattern, k, dilations, std::numeric_limits<std::size_t>::max());
  const std::size_t half = span / 2;
  if (probe < half || probe + half >= tokens) {
    throw std::invalid_argument("empirical_rf: probe " + std::to_string(probe) +
                                " is within the receptive half-width " + std::to_string(half) +
                                " of the line boundary");
  }
}

}  // namespace

std::size_t empirical_rf(RfPattern pattern, std::size_t k, const std::vector<std::size_t>& dilations,
                         std::size_t tokens, std::size_t probe, std::uint64_t seed) {
  if (dilations.empty()) throw std::invalid_argument("empirical_rf: need at least one layer");
  check_probe(pattern, k, dilations, tokens, probe);
  return support_extents(pattern, k, dilations, tokens, probe, seed).back();
}

ReceptiveFieldReport receptive_field_report(RfPattern pattern, std::size_t k,
                                            const std::vector<std::size_t>& dilations, std::size_t tokens,
                                            std::uint64_t seed) {
  if (dilations.empty()) throw std::invalid_argument("receptive_field_report: need at least one layer");
  const std::size_t probe = tokens / 2;
  check_probe(pattern, k, dilations, tokens, probe);
  ReceptiveFieldReport r;
  r.pattern = pattern;
  r.k = k;
  r.tokens = tokens;
  r.dilations = dilations;
  r.analytic = analytic_rf_profile(pattern, k, dilations, tokens);
  r.empirical = support_extents(pattern, k, dilations, tokens, probe, seed);
  r.upper_bound = pattern == RfPattern::Full ? tokens : rf_upper_bound(k, dilations.size());
  return r;
}

double feature_cosine_distance(const Tensor& x, std::size_t* degenerate_pairs) {
  std::size_t C = 0, hw = 0;
  if (x.rank() == 3) {
    C = x.dim(0);
    hw = x.dim(1) * x.dim(2);
  } else if (x.rank() == 4 && x.dim(0) == 1) {
    C = x.dim(1);
    hw = x.dim(2) * x.dim(3);
  } else {
    throw ShapeError("feature_cosine_distance: expected [C,H,W], got " + to_string(x.shape()));
  }
  if (C == 0) throw ShapeError("feature_cosine_distance: no channels");
  const double* d = x.data();
  std::vector<double> norms(C);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t t = 0; t < hw; ++t) s += d[c * hw + t] * d[c * hw + t];
    norms[c] = std::sqrt(s);
  }
  double total = 0.0;
  std::size_t degenerate = 0;
  for (std::size_t i = 0; i < C; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      if (norms[i] == 0.0 || norms[j] == 0.0) {
        total += 0.5;
        ++degenerate;
        continue;
      }
      double dot = 0.0;
      for (std::size_t t = 0; t < hw; ++t) dot += d[i * hw + t] * d[j * hw + t];
      const double cosine = std::clamp(dot / (norms[i] * norms[j]), -1.0, 1.0);
      total += (1.0 - cosine) / 2.0;
    }
  }
  if (degenerate_pairs) *degenerate_pairs = degenerate;
  return total / static_cast<double>(C * C);
}

std::vector<CosinePoint> cosine_profile(MedViTModel& model, const Tensor& images) {
  if (images.rank() != 4 || images.dim(0) == 0) {
    throw ShapeError("cosine_profile: expected a nonempty [N,C,H,W] batch");
  }
  NoGradGuard guard;
  ActivationTaps taps;
  model.logits(images, &taps);
  std::vector<std::string> layers;
  for (const auto& name : model.tap_names()) {
    if (name.find(".group") != std::string::npos) layers.push_back(name);
  }
  std::vector<CosinePoint> out;
  const std::size_t n = images.dim(0);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Tensor& a = taps.at(layers[l]);
    const std::size_t per = a.numel() / n;
    double sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      Tensor one({a.dim(1), a.dim(2), a.dim(3)},
                 std::vector<double>(a.data() + s * per, a.data() + (s + 1) * per));
      sum += feature_cosine_distance(one);
    }
    const double pos = layers.size() > 1 ? static_cast<double>(l) / static_cast<double>(layers.size() - 1) : 0.0;
    out.push_back({layers[l], pos, sum / static_cast<double>(n)});
  }
  return out;
}

void write_cosine_csv(std::ostream& os, const std::vector<CosinePoint>& profile) {
  os << "layer_index_normalized,distance,layer\n";
  for (const auto& p : profile) os << p.position << "," << p.distance << "," << p.layer << "\n";
}

namespace {

std::pair<std::size_t, Shape> spatial_view(const Tensor& t, const char* what) {
  if (t.rank() == 3) return {t.dim(0), {t.dim(1), t.dim(2)}};
  if (t.rank() == 4 && t.dim(0) == 1) return {t.dim(1), {t.dim(2), t.dim(3)}};
  throw ShapeError(std::string("grad_cam: ") + what + " " + to_string(t.shape()) +
                   " is not a single spatial map");
}

}  // namespace

Heatmap grad_cam_from(const Tensor& activation, const Tensor& gradient) {
  const auto [C, hw_shape] = spatial_view(activation, "activation");
  if (activation.numel() != gradient.numel()) {
    throw ShapeError("grad_cam: gradient " + to_string(gradient.shape()) + " does not match activation " +
                     to_string(activation.shape()));
  }
  const std::size_t H = hw_shape[0], W = hw_shape[1], hw = H * W;
  Heatmap map;
  map.height = H;
  map.width = W;
  map.values.assign(hw, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double w = 0.0;
    for (std::size_t t = 0; t < hw; ++t) w += gradient.data()[c * hw + t];
    w /= static_cast<double>(hw);
    for (std::size_t t = 0; t < hw; ++t) map.values[t] += w * activation.data()[c * hw + t];
  }
  double mx = 0.0;
  for (auto& v : map.values) {
    v = std::max(v, 0.0);
    mx = std::max(mx, v);
  }
  if (mx > 0.0) {
    for (auto& v : map.values) v /= mx;
  }
  return map;
}

Heatmap upsample_nearest(const Heatmap& map, std::size_t height, std::size_t width) {
  Heatmap out;
  out.height = height;
  out.width = width;
  out.target = map.target;
  out.values.resize(height * width);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = y * map.height / height;
    for (std::size_t x = 0; x < width; ++x) out.values[y * width + x] = map.at(sy, x * map.width / width);
  }
  return out;
}

Heatmap grad_cam(MedViTModel& model, const Tensor& x, std::size_t target_class, const std::string& layer) {
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("grad_cam: expected a single image [1,C,H,W]");
  if (target_class >= model.config().num_classes) {
    throw std::invalid_argument("grad_cam: target class " + std::to_string(target_class) + " out of range");
  }
  const auto names = model.tap_names();
  if (std::find(names.begin(), names.end(), layer) == names.end()) {
    throw std::invalid_argument("grad_cam: unknown layer '" + layer + "'");
  }
  const bool was_training = model.training();
  model.set_training(false);
  ActivationTaps taps;
  Tensor scores = model.logits(x, &taps);
  model.set_training(was_training);
  const Tensor& act = taps.at(layer);
  if (act.rank() != 4) throw ShapeError("grad_cam: layer '" + layer + "' is not spatial");
  ops::sum(ops::slice(scores, 1, target_class, 1)).backward();
  Tensor grad = act.has_grad() ? Tensor(act.shape(), std::vector<double>(act.grad().begin(), act.grad().end()))
                               : Tensor::zeros(act.shape());
  Heatmap map = grad_cam_from(act, grad);
  map.target = target_class;
  for (auto& p : model.parameters()) p.tensor.zero_grad();
  return upsample_nearest(map, x.dim(2), x.dim(3));
}

void write_pgm(const std::string& path, const Heatmap& map) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm: cannot open '" + path + "'");
  out << "P5\n" << map.width << " " << map.height << "\n255\n";
  for (double v : map.values) {
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  if (!out) throw std::runtime_error("write_pgm: failed writing '" + path + "'");
}

}  // namespace medvit::analysis
