#include <algorithm>

#include "gemm.hpp"
#include "medvit/ops.hpp"

namespace medvit::ops {

namespace {

struct ConvGeom {
  std::size_t batch, c_in, h, w;
  std::size_t c_out, kh, kw;
  std::size_t oh, ow;
  std::size_t stride, pad, groups;
  std::size_t cin_g() const { return c_in / groups; }
  std::size_t cout_g() const { return c_out / groups; }
  std::size_t patch() const { return cin_g() * kh * kw; }
  std::size_t out_hw() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  bool depthwise() const { return cin_g() == 1 && cout_g() == 1; }
};

ConvGeom make_geom(const Shape& x, const Shape& wt, Conv2dOptions opts) {
  if (x.size() != 4 || wt.size() != 4) {
    throw ShapeError("conv2d: expected rank-4 input and weight, got " + to_string(x) + " and " +
                     to_string(wt));
  }
  if (opts.groups == 0 || opts.stride == 0) throw ShapeError("conv2d: groups and stride must be positive");
  if (x[1] % opts.groups != 0 || wt[0] % opts.groups != 0) {
    throw ShapeError("conv2d: channels " + std::to_string(x[1]) + "->" + std::to_string(wt[0]) +
                     " not divisible by groups " + std::to_string(opts.groups));
  }
  if (wt[1] != x[1] / opts.groups) {
    throw ShapeError("conv2d: weight " + to_string(wt) + " does not match input channels " +
                     std::to_string(x[1]) + " with groups " + std::to_string(opts.groups));
  }
  const std::size_t ph = x[2] + 2 * opts.padding, pw = x[3] + 2 * opts.padding;
  if (wt[2] > ph || wt[3] > pw) {
    throw ShapeError("conv2d: kernel " + to_string(wt) + " larger than padded input " + to_string(x));
  }
  ConvGeom g{};
  g.batch = x[0];
  g.c_in = x[1];
  g.h = x[2];
  g.w = x[3];
  g.c_out = wt[0];
  g.kh = wt[2];
  g.kw = wt[3];
  g.stride = opts.stride;
  g.pad = opts.padding;
  g.groups = opts.groups;
  g.oh = (ph - g.kh) / g.stride + 1;
  g.ow = (pw - g.kw) / g.stride + 1;
  return g;
}

// col[(c*kh + i)*kw + j][oy*ow + ox] = x[c][oy*s + i - p][ox*s + j - p]
void im2col(const double* x, const ConvGeom& g, double* col) {
  const std::size_t n = g.out_hw();
  for (std::size_t c = 0; c < g.cin_g(); ++c) {
    const double* xc = x + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = col + ((c * g.kh + i) * g.kw + j) * n;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill_n(dst, g.ow, 0.0);
            continue;
          }
          const double* src = xc + iy * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeom& g, double* x) {
  const std::size_t n = g.out_hw();
  for (std::size_t c = 0; c < g.cin_g(); ++c) {
    double* xc = x + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = col + ((c * g.kh + i) * g.kw + j) * n;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = xc + iy * g.w;
          const double* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void depthwise_forward(const double* x, const double* wt, const ConvGeom& g, double* out) {
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t c = 0; c < g.c_in; ++c) {
      const double* xc = x + (b * g.c_in + c) * g.h * g.w;
      const double* k = wt + c * g.kh * g.kw;
      double* oc = out + (b * g.c_out + c) * g.out_hw();
      for (std::size_t oy = 0; oy < g.oh; ++oy) {
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          double acc = 0.0;
          for (std::size_t i = 0; i < g.kh; ++i) {
            const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t j = 0; j < g.kw; ++j) {
              const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              acc += k[i * g.kw + j] * xc[iy * g.w + ix];
            }
          }
          oc[oy * g.ow + ox] += acc;
        }
      }
    }
  }
}

void depthwise_backward(const double* x, const double* wt, const double* gout, const ConvGeom& g,
                        double* gx, double* gw) {
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t c = 0; c < g.c_in; ++c) {
      const std::size_t xoff = (b * g.c_in + c) * g.h * g.w;
      const double* k = wt + c * g.kh * g.kw;
      const double* go = gout + (b * g.c_out + c) * g.out_hw();
      for (std::size_t oy = 0; oy < g.oh; ++oy) {
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          const double d = go[oy * g.ow + ox];
          if (d == 0.0) continue;
          for (std::size_t i = 0; i < g.kh; ++i) {
            const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t j = 0; j < g.kw; ++j) {
              const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              const std::size_t p = xoff + iy * g.w + ix;
              if (gx) gx[p] += d * k[i * g.kw + j];
              if (gw) gw[c * g.kh * g.kw + i * g.kw + j] += d * x[p];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Shape conv2d_output_shape(const Shape& x, const Shape& weight, Conv2dOptions opts) {
  const ConvGeom g = make_geom(x, weight, opts);
  return {g.batch, g.c_out, g.oh, g.ow};
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts) {
  const ConvGeom g = make_geom(x.shape(), weight.shape(), opts);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.c_out)) {
    throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " does not match " +
                     std::to_string(g.c_out) + " output channels");
  }
  const std::size_t n = g.out_hw();
  std::vector<double> out(g.batch * g.c_out * n, 0.0);
  if (bias.defined()) {
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t c = 0; c < g.c_out; ++c) {
        std::fill_n(out.data() + (b * g.c_out + c) * n, n, bias.data()[c]);
      }
    }
  }
  if (g.depthwise() && !g.pointwise()) {
    depthwise_forward(x.data(), weight.data(), g, out.data());
  } else {
    std::vector<double> col(g.pointwise() ? 0 : g.patch() * n);
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        const double* xg = x.data() + (b * g.c_in + grp * g.cin_g()) * g.h * g.w;
        const double* src = xg;
        if (!g.pointwise()) {
          im2col(xg, g, col.data());
          src = col.data();
        }
        detail::gemm(false, false, g.cout_g(), n, g.patch(), 1.0,
                     weight.data() + grp * g.cout_g() * g.patch(), src, 1.0,
                     out.data() + (b * g.c_out + grp * g.cout_g()) * n);
      }
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result({g.batch, g.c_out, g.oh, g.ow}, std::move(out), inputs, "conv2d", [g](Node& self) {
    const auto& X = self.inputs[0]->data;
    const auto& W = self.inputs[1]->data;
    const bool need_x = self.inputs[0]->requires_grad;
    const bool need_w = self.inputs[1]->requires_grad;
    const std::size_t n = g.out_hw();
    const double* gout = self.grad.data();
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      auto& gb = self.inputs[2]->grad_buffer();
      for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t c = 0; c < g.c_out; ++c) {
          const double* p = gout + (b * g.c_out + c) * n;
          double s = 0.0;
          for (std::size_t t = 0; t < n; ++t) s += p[t];
          gb[c] += s;
        }
      }
    }
    if (!need_x && !need_w) return;
    double* gx = need_x ? self.inputs[0]->grad_buffer().data() : nullptr;
    double* gw = need_w ? self.inputs[1]->grad_buffer().data() : nullptr;
    if (g.depthwise() && !g.pointwise()) {
      depthwise_backward(X.data(), W.data(), gout, g, gx, gw);
      return;
    }
    std::vector<double> col(g.pointwise() ? 0 : g.patch() * n);
    std::vector<double> dcol(g.pointwise() || !need_x ? 0 : g.patch() * n);
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        const std::size_t xoff = (b * g.c_in + grp * g.cin_g()) * g.h * g.w;
        const double* go = gout + (b * g.c_out + grp * g.cout_g()) * n;
        const double* wg = W.data() + grp * g.cout_g() * g.patch();
        if (need_w) {
          const double* src = X.data() + xoff;
          if (!g.pointwise()) {
            im2col(X.data() + xoff, g, col.data());
            src = col.data();
          }
          detail::gemm(false, true, g.cout_g(), g.patch(), n, 1.0, go, src, 1.0,
                       gw + grp * g.cout_g() * g.patch());
        }
        if (need_x) {
          if (g.pointwise()) {
            detail::gemm(true, false, g.patch(), n, g.cout_g(), 1.0, wg, go, 1.0, gx + xoff);
          } else {
            detail::gemm(true, false, g.patch(), n, g.cout_g(), 1.0, wg, go, 0.0, dcol.data());
            col2im(dcol.data(), g, gx + xoff);
          }
        }
      }
    }
  });
}

Tensor avgpool2d(const Tensor& x, std::size_t window, std::size_t stride) {
  if (x.rank() != 4) throw ShapeError("avgpool2d: expected rank 4, got " + to_string(x.shape()));
  if (window == 0 || stride == 0) throw ShapeError("avgpool2d: window and stride must be positive");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window > H || window > W) {
    throw ShapeError("avgpool2d: window " + std::to_string(window) + " exceeds input " +
                     to_string(x.shape()));
  }
  const std::size_t oh = (H - window) / stride + 1, ow = (W - window) / stride + 1;
  const double inv = 1.0 / static_cast<double>(window * window);
  std::vector<double> out(B * C * oh * ow);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* src = x.data() + bc * H * W;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) s += src[(oy * stride + i) * W + ox * stride + j];
        }
        out[(bc * oh + oy) * ow + ox] = s * inv;
      }
    }
  }
  return make_result({B, C, oh, ow}, std::move(out), {x}, "avgpool2d",
                     [=](Node& self) {
                       auto& g = self.inputs[0]->grad_buffer();
                       for (std::size_t bc = 0; bc < B * C; ++bc) {
                         double* dst = g.data() + bc * H * W;
                         for (std::size_t oy = 0; oy < oh; ++oy) {
                           for (std::size_t ox = 0; ox < ow; ++ox) {
                             const double d = self.grad[(bc * oh + oy) * ow + ox] * inv;
                             for (std::size_t i = 0; i < window; ++i) {
                               for (std::size_t j = 0; j < window; ++j) {
                                 dst[(oy * stride + i) * W + ox * stride + j] += d;
                               }
                             }
                           }
                         }
                       }
                     });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: expected rank 4, got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  std::vector<double> out(B * C);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* src = x.data() + bc * hw;
    double s = 0.0;
    for (std::size_t t = 0; t < hw; ++t) s += src[t];
    out[bc] = s / static_cast<double>(hw);
  }
  return make_result({B, C}, std::move(out), {x}, "global_avg_pool", [B, C, hw](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const double d = self.grad[bc] * inv;
      for (std::size_t t = 0; t < hw; ++t) g[bc * hw + t] += d;
    }
  });
}

}  // namespace medvit::ops
