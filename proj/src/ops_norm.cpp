#include <cmath>

#include "medvit/ops.hpp"

namespace medvit::ops {

Tensor batch_norm2d(const Tensor& x, NormParams& params) {
  if (x.rank() != 4) throw ShapeError("batch_norm2d: expected [B,C,H,W], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  const Shape ch{C};
  if (params.gamma.shape() != ch || params.beta.shape() != ch) {
    throw ShapeError("batch_norm2d: affine parameters must have shape " + to_string(ch));
  }
  const bool training = params.training;
  if (training && B == 1) {
    throw ShapeError("batch_norm2d: batch of size 1 gives degenerate statistics in training mode");
  }
  if (!training && (!params.running_mean.defined() || params.running_mean.shape() != ch ||
                    !params.running_var.defined() || params.running_var.shape() != ch)) {
    throw ShapeError("batch_norm2d: eval mode needs running statistics of shape " + to_string(ch));
  }
  const std::size_t count = B * hw;
  std::vector<double> mu(C), inv_std(C);
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = x.data() + (b * C + c) * hw;
        for (std::size_t t = 0; t < hw; ++t) s += p[t];
      }
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = x.data() + (b * C + c) * hw;
        for (std::size_t t = 0; t < hw; ++t) v += (p[t] - m) * (p[t] - m);
      }
      v /= static_cast<double>(count);
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(v + params.eps);
      if (params.running_mean.defined()) {
        const double unbiased = count > 1 ? v * static_cast<double>(count) / static_cast<double>(count - 1) : v;
        double& rm = params.running_mean.data()[c];
        double& rv = params.running_var.data()[c];
        rm = (1.0 - params.momentum) * rm + params.momentum * m;
        rv = (1.0 - params.momentum) * rv + params.momentum * unbiased;
      }
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = params.running_mean.data()[c];
      inv_std[c] = 1.0 / std::sqrt(params.running_var.data()[c] + params.eps);
    }
  }
  std::vector<double> xhat(x.numel()), out(x.numel());
  const double* gamma = params.gamma.data();
  const double* beta = params.beta.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (b * C + c) * hw;
      for (std::size_t t = 0; t < hw; ++t) {
        const double h = (x.data()[off + t] - mu[c]) * inv_std[c];
        xhat[off + t] = h;
        out[off + t] = gamma[c] * h + beta[c];
      }
    }
  }
  return make_result(x.shape(), std::move(out), {x, params.gamma, params.beta}, "batch_norm2d",
                     [xhat = std::move(xhat), inv_std, B, C, hw, training](Node& self) {
                       const double* gy = self.grad.data();
                       const auto& gamma = self.inputs[1]->data;
                       std::vector<double> sum_g(C, 0.0), sum_gh(C, 0.0);
                       for (std::size_t b = 0; b < B; ++b) {
                         for (std::size_t c = 0; c < C; ++c) {
                           const std::size_t off = (b * C + c) * hw;
                           for (std::size_t t = 0; t < hw; ++t) {
                             sum_g[c] += gy[off + t];
                             sum_gh[c] += gy[off + t] * xhat[off + t];
                           }
                         }
                       }
                       if (self.inputs[1]->requires_grad) {
                         auto& g = self.inputs[1]->grad_buffer();
                         for (std::size_t c = 0; c < C; ++c) g[c] += sum_gh[c];
                       }
                       if (self.inputs[2]->requires_grad) {
                         auto& g = self.inputs[2]->grad_buffer();
                         for (std::size_t c = 0; c < C; ++c) g[c] += sum_g[c];
                       }
                       if (!self.inputs[0]->requires_grad) return;
                       auto& gx = self.inputs[0]->grad_buffer();
                       const double n = static_cast<double>(B * hw);
                       for (std::size_t b = 0; b < B; ++b) {
                         for (std::size_t c = 0; c < C; ++c) {
                           const std::size_t off = (b * C + c) * hw;
                           const double k = gamma[c] * inv_std[c];
                           for (std::size_t t = 0; t < hw; ++t) {
                             if (training) {
                               gx[off + t] += k * (gy[off + t] - sum_g[c] / n -
                                                   xhat[off + t] * sum_gh[c] / n);
                             } else {
                               gx[off + t] += k * gy[off + t];
                             }
                           }
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  const Shape feat{d};
  if (gamma.shape() != feat || beta.shape() != feat) {
    throw ShapeError("layer_norm: affine parameters must have shape " + to_string(feat) +
                     " for input " + to_string(x.shape()));
  }
  if (d == 0) throw ShapeError("layer_norm: empty feature axis");
  const std::size_t rows = x.numel() / d;
  std::vector<double> xhat(x.numel()), out(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = x.data() + r * d;
    double m = 0.0;
    for (std::size_t i = 0; i < d; ++i) m += p[i];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::size_t i = 0; i < d; ++i) v += (p[i] - m) * (p[i] - m);
    v /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(v + eps);
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (p[i] - m) * inv_std[r];
      xhat[r * d + i] = h;
      out[r * d + i] = gamma.data()[i] * h + beta.data()[i];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](Node& self) {
                       const double* gy = self.grad.data();
                       const auto& gam = self.inputs[1]->data;
                       if (self.inputs[1]->requires_grad) {
                         auto& g = self.inputs[1]->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t i = 0; i < d; ++i) g[i] += gy[r * d + i] * xhat[r * d + i];
                         }
                       }
                       if (self.inputs[2]->requires_grad) {
                         auto& g = self.inputs[2]->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t i = 0; i < d; ++i) g[i] += gy[r * d + i];
                         }
                       }
                       if (!self.inputs[0]->requires_grad) return;
                       auto& gx = self.inputs[0]->grad_buffer();
                       const double n = static_cast<double>(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t i = 0; i < d; ++i) {
                           const double gh = gy[r * d + i] * gam[i];
                           s1 += gh;
                           s2 += gh * xhat[r * d + i];
                         }
                         for (std::size_t i = 0; i < d; ++i) {
                           const double gh = gy[r * d + i] * gam[i];
                           gx[r * d + i] += inv_std[r] * (gh - s1 / n - xhat[r * d + i] * s2 / n);
                         }
                       }
                     });
}

Tensor normalize(const Tensor& x, NormKind kind, NormParams& params) {
  if (kind == NormKind::BatchNorm2d) return batch_norm2d(x, params);
  return layer_norm(x, params.gamma, params.beta, params.eps);
}

}  // namespace medvit::ops
