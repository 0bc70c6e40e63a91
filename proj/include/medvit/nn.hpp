#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "medvit/ops.hpp"
#include "medvit/tensor.hpp"

namespace medvit::nn {

/// Base for layers with named parameters, buffers and submodules.
///
/// Modules register children by address, so they are neither copyable nor
/// movable; hold them by value inside their owner or by unique_ptr.
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  /// Trainable tensors with dotted names relative to this module.
  ParameterList parameters(const std::string& prefix = "") const;
  /// Non-trainable state (batchnorm running statistics).
  ParameterList buffers(const std::string& prefix = "") const;
  /// Both of the above; the checkpoint view of a module.
  ParameterList state(const std::string& prefix = "") const;

  void set_training(bool training);
  bool training() const { return training_; }
  std::size_t num_parameters() const;

 protected:
  Tensor& register_parameter(std::string name, Tensor value);
  Tensor& register_buffer(std::string name, Tensor value);
  void register_module(std::string name, Module& child);

 private:
  // unique_ptr keeps the returned references stable across registrations
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
  bool training_ = true;
};

class Linear : public Module {
 public:
  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true);
  /// Applied along the last axis.
  Tensor forward(const Tensor& x) const { return ops::linear(x, weight, bias); }

  std::size_t in_features, out_features;
  Tensor& weight;
  Tensor bias;
};

class Conv2d : public Module {
 public:
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng, ops::Conv2dOptions opts = {},
         bool bias = true);
  Tensor forward(const Tensor& x) const { return ops::conv2d(x, weight, bias, options); }

  std::size_t in_channels, out_channels, kernel;
  ops::Conv2dOptions options;
  Tensor& weight;
  Tensor bias;
};

class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(std::size_t channels, double eps = 1e-5, double momentum = 0.1);
  Tensor forward(const Tensor& x);

  std::size_t channels;
  ops::NormParams params;
};

/// Normalises the last axis.
class LayerNorm : public Module {
 public:
  explicit LayerNorm(std::size_t features, double eps = 1e-5);
  Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta, eps); }
  /// Normalises a [B,C,H,W] map over C at every position.
  Tensor forward_nchw(const Tensor& x) const;

  std::size_t features;
  double eps;
  Tensor& gamma;
  Tensor& beta;
};

/// Zeroes a tensor in place, keeping its graph identity.
void fill_zero(Tensor& t);

}  // namespace medvit::nn
