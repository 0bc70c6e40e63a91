#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "medvit/tensor.hpp"

/// Differentiable forward primitives. Every op records its backward pass on
/// the graph when grad mode is on; layouts are row-major and contiguous.
namespace medvit::ops {

// Elementwise (operands must have identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Shape manipulation. All of these copy; there are no strided views.
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);

/// [B,C,H,W] -> [B,H*W,C]
Tensor nchw_to_tokens(const Tensor& x);
/// [B,H*W,C] -> [B,C,H,W]
Tensor tokens_to_nchw(const Tensor& t, std::size_t height, std::size_t width);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched product over a leading batch axis: [B,m,k] x [B,k,n] -> [B,m,n],
/// with optional transposition of the trailing matrices.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
/// y = x W^T + b applied along the last axis. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// x: [B,C_in,H,W], weight: [C_out,C_in/groups,kh,kw], bias: [C_out] or
/// undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts = {});
Shape conv2d_output_shape(const Shape& x, const Shape& weight, Conv2dOptions opts);

Tensor avgpool2d(const Tensor& x, std::size_t window, std::size_t stride);
/// [B,C,H,W] -> [B,C]
Tensor global_avg_pool(const Tensor& x);

// Normalisation.
enum class NormKind { BatchNorm2d, LayerNorm };

struct NormParams {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;
  // BatchNorm only; updated in place during training.
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  bool training = true;
};

/// BatchNorm2d normalises [B,C,H,W] per channel over (B,H,W); LayerNorm
/// normalises over the last axis at every leading position.
Tensor normalize(const Tensor& x, NormKind kind, NormParams& params);
Tensor batch_norm2d(const Tensor& x, NormParams& params);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Activations.
enum class Activation { ReLU, SiLU, Tanh };
Tensor activation(const Tensor& x, Activation mode);
inline Tensor relu(const Tensor& x) { return activation(x, Activation::ReLU); }
inline Tensor silu(const Tensor& x) { return activation(x, Activation::SiLU); }
inline Tensor tanh(const Tensor& x) { return activation(x, Activation::Tanh); }

Tensor softmax(const Tensor& x, std::size_t axis);

/// Mean cross-entropy of logits [B,K] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace medvit::ops
