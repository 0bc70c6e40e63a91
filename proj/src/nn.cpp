#include "medvit/nn.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace medvit::nn {

namespace {

std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}

}  // namespace

ParameterList Module::parameters(const std::string& prefix) const {
  ParameterList out;
  for (const auto& [name, t] : params_) out.push_back({join(prefix, name), *t, true});
  for (const auto& [name, child] : children_) {
    auto sub = child->parameters(join(prefix, name));
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

ParameterList Module::buffers(const std::string& prefix) const {
  ParameterList out;
  for (const auto& [name, t] : buffers_) out.push_back({join(prefix, name), *t, false});
  for (const auto& [name, child] : children_) {
    auto sub = child->buffers(join(prefix, name));
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

ParameterList Module::state(const std::string& prefix) const {
  ParameterList out = parameters(prefix);
  auto b = buffers(prefix);
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

void Module::set_training(bool training) {
  training_ = training;
  for (auto& [name, child] : children_) child->set_training(training);
}

std::size_t Module::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

Tensor& Module::register_parameter(std::string name, Tensor value) {
  value.set_requires_grad(true);
  params_.emplace_back(std::move(name), std::make_unique<Tensor>(std::move(value)));
  return *params_.back().second;
}

Tensor& Module::register_buffer(std::string name, Tensor value) {
  buffers_.emplace_back(std::move(name), std::make_unique<Tensor>(std::move(value)));
  return *buffers_.back().second;
}

void Module::register_module(std::string name, Module& child) {
  children_.emplace_back(std::move(name), &child);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias)
    : in_features(in),
      out_features(out),
      weight(register_parameter("weight", fan_in_uniform({out, in}, in, rng))) {
  if (with_bias) bias = register_parameter("bias", fan_in_uniform({out}, in, rng));
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t k, Rng& rng, ops::Conv2dOptions opts,
               bool with_bias)
    : in_channels(in),
      out_channels(out),
      kernel(k),
      options(opts),
      weight(register_parameter(
          "weight", fan_in_uniform({out, in / std::max<std::size_t>(opts.groups, 1), k, k},
                                   in / std::max<std::size_t>(opts.groups, 1) * k * k, rng))) {
  if (opts.groups == 0 || in % opts.groups != 0 || out % opts.groups != 0) {
    throw ShapeError("Conv2d: channels " + std::to_string(in) + "->" + std::to_string(out) +
                     " not divisible by groups " + std::to_string(opts.groups));
  }
  if (with_bias) {
    bias = register_parameter("bias", fan_in_uniform({out}, in / opts.groups * k * k, rng));
  }
}

BatchNorm2d::BatchNorm2d(std::size_t c, double eps, double momentum) : channels(c) {
  params.gamma = register_parameter("weight", Tensor::ones({c}));
  params.beta = register_parameter("bias", Tensor::zeros({c}));
  params.running_mean = register_buffer("running_mean", Tensor::zeros({c}));
  params.running_var = register_buffer("running_var", Tensor::ones({c}));
  params.eps = eps;
  params.momentum = momentum;
}

Tensor BatchNorm2d::forward(const Tensor& x) {
  params.training = training();
  return ops::batch_norm2d(x, params);
}

LayerNorm::LayerNorm(std::size_t f, double e)
    : features(f),
      eps(e),
      gamma(register_parameter("weight", Tensor::ones({f}))),
      beta(register_parameter("bias", Tensor::zeros({f}))) {}

Tensor LayerNorm::forward_nchw(const Tensor& x) const {
  if (x.rank() != 4) throw ShapeError("LayerNorm: expected [B,C,H,W], got " + to_string(x.shape()));
  return ops::tokens_to_nchw(forward(ops::nchw_to_tokens(x)), x.dim(2), x.dim(3));
}

void fill_zero(Tensor& t) {
  for (auto& v : t.values()) v = 0.0;
}

}  // namespace medvit::nn
