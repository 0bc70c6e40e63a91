#include "medvit/kan.hpp"

#include <cmath>
#include <stdexcept>

#include "activation_math.hpp"
#include "gemm.hpp"

namespace medvit {

namespace {

using detail::silu_grad;
double silu_value(double x) { return detail::silu(x); }

// Basis values of every order up to `order`; table[p][i] = B_{i,p}(x).
std::vector<std::vector<double>> cox_de_boor(double x, const std::vector<double>& t, std::size_t order) {
  const std::size_t m = t.size();
  std::vector<std::vector<double>> table(order + 1);
  table[0].assign(m - 1, 0.0);
  for (std::size_t i = 0; i + 1 < m; ++i) table[0][i] = (t[i] <= x && x < t[i + 1]) ? 1.0 : 0.0;
  for (std::size_t p = 1; p <= order; ++p) {
    const auto& prev = table[p - 1];
    auto& cur = table[p];
    cur.assign(m - 1 - p, 0.0);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      double v = 0.0;
      const double left = t[i + p] - t[i];
      const double right = t[i + p + 1] - t[i + 1];
      if (left > 0.0) v += (x - t[i]) / left * prev[i];
      if (right > 0.0) v += (t[i + p + 1] - x) / right * prev[i + 1];
      cur[i] = v;
    }
  }
  return table;
}

Tensor xavier(Shape shape, std::size_t in, std::size_t out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}

void check_last_axis(const char* op, const Tensor& x, std::size_t in) {
  if (x.rank() == 0 || x.shape().back() != in) {
    throw ShapeError(std::string(op) + ": input " + to_string(x.shape()) + " does not end in " +
                     std::to_string(in) + " features");
  }
}

}  // namespace

SplineGrid SplineGrid::uniform(std::size_t intervals, double lo, double hi, std::size_t order) {
  if (intervals == 0 || !(hi > lo)) throw std::invalid_argument("SplineGrid: need a nonempty interval");
  SplineGrid g;
  g.order = order;
  const double step = (hi - lo) / static_cast<double>(intervals);
  for (std::size_t j = 0; j <= intervals + 2 * order; ++j) {
    g.knots.push_back(lo + step * (static_cast<double>(j) - static_cast<double>(order)));
  }
  return g;
}

BasisValues bspline_basis(double x, const SplineGrid& grid) {
  BasisValues out;
  if (!(x >= grid.support_lo() && x < grid.support_hi())) {
    out.values.assign(grid.num_basis(), 0.0);
    out.in_support = false;
    return out;
  }
  out.values = cox_de_boor(x, grid.knots, grid.order)[grid.order];
  return out;
}

std::vector<double> bspline_basis_derivative(double x, const SplineGrid& grid) {
  const std::size_t p = grid.order;
  std::vector<double> d(grid.num_basis(), 0.0);
  if (p == 0 || !(x >= grid.support_lo() && x < grid.support_hi())) return d;
  const auto table = cox_de_boor(x, grid.knots, p);
  const auto& lower = table[p - 1];
  const auto& t = grid.knots;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double left = t[i + p] - t[i];
    const double right = t[i + p + 1] - t[i + 1];
    if (left > 0.0) d[i] += static_cast<double>(p) / left * lower[i];
    if (right > 0.0) d[i] -= static_cast<double>(p) / right * lower[i + 1];
  }
  return d;
}

double rswaf_eval(double r, double h) {
  if (!(h > 0.0)) throw std::domain_error("rswaf_eval: width h must be positive");
  const double t = std::tanh(r / h);
  return 1.0 - t * t;
}

namespace ops {

Tensor spline_kan(const Tensor& x, const SplineGrid& grid, const Tensor& coef, const Tensor& w_base,
                  const Tensor& w_spline) {
  const std::size_t out_f = w_base.dim(0), in = w_base.dim(1), nb = grid.num_basis();
  check_last_axis("spline_kan", x, in);
  if (coef.shape() != Shape{out_f, in, nb} || w_spline.shape() != w_base.shape()) {
    throw ShapeError("spline_kan: parameter shapes disagree");
  }
  const std::size_t rows = x.numel() / in;
  std::vector<double> basis(rows * in * nb), out(rows * out_f, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t q = 0; q < in; ++q) {
      const auto b = bspline_basis(x.data()[r * in + q], grid);
      std::copy(b.values.begin(), b.values.end(), basis.begin() + (r * in + q) * nb);
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t p = 0; p < out_f; ++p) {
      double acc = 0.0;
      for (std::size_t q = 0; q < in; ++q) {
        const double* b = basis.data() + (r * in + q) * nb;
        const double* c = coef.data() + (p * in + q) * nb;
        double s = 0.0;
        for (std::size_t i = 0; i < nb; ++i) s += c[i] * b[i];
        acc += w_base.data()[p * in + q] * silu_value(x.data()[r * in + q]) + w_spline.data()[p * in + q] * s;
      }
      out[r * out_f + p] = acc;
    }
  }
  Shape shape = x.shape();
  shape.back() = out_f;
  return make_result(shape, std::move(out), {x, coef, w_base, w_spline}, "spline_kan",
                     [grid, basis = std::move(basis), rows, in, out_f, nb](Node& self) {
                       const auto& X = self.inputs[0]->data;
                       const auto& C = self.inputs[1]->data;
                       const auto& WB = self.inputs[2]->data;
                       const auto& WS = self.inputs[3]->data;
                       double* gx = self.inputs[0]->requires_grad ? self.inputs[0]->grad_buffer().data() : nullptr;
                       double* gc = self.inputs[1]->requires_grad ? self.inputs[1]->grad_buffer().data() : nullptr;
                       double* gwb = self.inputs[2]->requires_grad ? self.inputs[2]->grad_buffer().data() : nullptr;
                       double* gws = self.inputs[3]->requires_grad ? self.inputs[3]->grad_buffer().data() : nullptr;
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t q = 0; q < in; ++q) {
                           const double xv = X[r * in + q];
                           const double* b = basis.data() + (r * in + q) * nb;
                           const auto db = gx ? bspline_basis_derivative(xv, grid) : std::vector<double>();
                           for (std::size_t p = 0; p < out_f; ++p) {
                             const double g = self.grad[r * out_f + p];
                             if (g == 0.0) continue;
                             const std::size_t e = p * in + q;
                             const double* c = C.data() + e * nb;
                             double s = 0.0;
                             for (std::size_t i = 0; i < nb; ++i) s += c[i] * b[i];
                             if (gwb) gwb[e] += g * silu_value(xv);
                             if (gws) gws[e] += g * s;
                             if (gc) {
                               for (std::size_t i = 0; i < nb; ++i) gc[e * nb + i] += g * WS[e] * b[i];
                             }
                             if (gx) {
                               double ds = 0.0;
                               for (std::size_t i = 0; i < nb; ++i) ds += c[i] * db[i];
                               gx[r * in + q] += g * (WB[e] * silu_grad(xv) + WS[e] * ds);
                             }
                           }
                         }
                       }
                     });
}

Tensor rswaf_kan(const Tensor& u, const Tensor& centers, const Tensor& width, const Tensor& weight,
                 const Tensor& w_base, const Tensor& w_scale) {
  if (weight.rank() != 3) throw ShapeError("rswaf_kan: weight must be [out, in, N]");
  const std::size_t out_f = weight.dim(0), in = weight.dim(1), N = weight.dim(2);
  check_last_axis("rswaf_kan", u, in);
  if (centers.shape() != Shape{N} || width.numel() != 1 || w_base.shape() != Shape{out_f, in} ||
      w_scale.shape() != Shape{out_f, in}) {
    throw ShapeError("rswaf_kan: parameter shapes disagree with weight " + to_string(weight.shape()));
  }
  const double h = width.data()[0];
  if (!(h > 0.0)) throw std::domain_error("rswaf_kan: width h must be positive");
  const std::size_t rows = u.numel() / in, K = in * (N + 1);
  // Features per input: [silu(u), φ(u - c_0), ..., φ(u - c_{N-1})]
  std::vector<double> feat(rows * K), tanh_z(rows * in * N);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t q = 0; q < in; ++q) {
      const double x = u.data()[r * in + q];
      double* f = feat.data() + r * K + q * (N + 1);
      double* t = tanh_z.data() + (r * in + q) * N;
      f[0] = silu_value(x);
      for (std::size_t i = 0; i < N; ++i) {
        t[i] = std::tanh((x - centers.data()[i]) / h);
        f[1 + i] = 1.0 - t[i] * t[i];
      }
    }
  }
  std::vector<double> w_eff(out_f * K);
  for (std::size_t e = 0; e < out_f * in; ++e) {
    double* dst = w_eff.data() + e * (N + 1);
    dst[0] = w_base.data()[e];
    for (std::size_t i = 0; i < N; ++i) dst[1 + i] = w_scale.data()[e] * weight.data()[e * N + i];
  }
  std::vector<double> out(rows * out_f, 0.0);
  detail::gemm(false, true, rows, out_f, K, 1.0, feat.data(), w_eff.data(), 0.0, out.data());
  Shape shape = u.shape();
  shape.back() = out_f;
  return make_result(
      shape, std::move(out), {u, centers, width, weight, w_base, w_scale}, "rswaf_kan",
      [feat = std::move(feat), tanh_z = std::move(tanh_z), w_eff = std::move(w_eff), rows, in, out_f, N,
       K, h](Node& self) {
        const auto& U = self.inputs[0]->data;
        const auto& Cn = self.inputs[1]->data;
        const auto& Wt = self.inputs[3]->data;
        const auto& WS = self.inputs[5]->data;
        const bool need_w = self.inputs[3]->requires_grad || self.inputs[4]->requires_grad ||
                            self.inputs[5]->requires_grad;
        if (need_w) {
          std::vector<double> gw_eff(out_f * K, 0.0);
          detail::gemm(true, false, out_f, K, rows, 1.0, self.grad.data(), feat.data(), 0.0, gw_eff.data());
          for (std::size_t e = 0; e < out_f * in; ++e) {
            const double* g = gw_eff.data() + e * (N + 1);
            if (self.inputs[4]->requires_grad) self.inputs[4]->grad_buffer()[e] += g[0];
            if (self.inputs[3]->requires_grad) {
              auto& gw = self.inputs[3]->grad_buffer();
              for (std::size_t i = 0; i < N; ++i) gw[e * N + i] += g[1 + i] * WS[e];
            }
            if (self.inputs[5]->requires_grad) {
              double s = 0.0;
              for (std::size_t i = 0; i < N; ++i) s += g[1 + i] * Wt[e * N + i];
              self.inputs[5]->grad_buffer()[e] += s;
            }
          }
        }
        const bool need_u = self.inputs[0]->requires_grad;
        const bool need_c = self.inputs[1]->requires_grad;
        const bool need_h = self.inputs[2]->requires_grad;
        if (!need_u && !need_c && !need_h) return;
        std::vector<double> gfeat(rows * K, 0.0);
        detail::gemm(false, false, rows, K, out_f, 1.0, self.grad.data(), w_eff.data(), 0.0, gfeat.data());
        double* gu = need_u ? self.inputs[0]->grad_buffer().data() : nullptr;
        double* gc = need_c ? self.inputs[1]->grad_buffer().data() : nullptr;
        double gh = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t q = 0; q < in; ++q) {
            const double x = U[r * in + q];
            const double* gf = gfeat.data() + r * K + q * (N + 1);
            const double* t = tanh_z.data() + (r * in + q) * N;
            double du = gf[0] * silu_grad(x);
            for (std::size_t i = 0; i < N; ++i) {
              // dφ/dz with z = (x - c)/h
              const double dz = gf[1 + i] * (-2.0 * t[i] * (1.0 - t[i] * t[i]));
              du += dz / h;
              if (gc) gc[i] -= dz / h;
              gh -= dz * (x - Cn[i]) / (h * h);
            }
            if (gu) gu[r * in + q] += du;
          }
        }
        if (need_h) self.inputs[2]->grad_buffer()[0] += gh;
      });
}

}  // namespace ops

SplineKanLayer::SplineKanLayer(std::size_t in, std::size_t out, Rng& rng, SplineGrid g)
    : KanLayer(in, out),
      grid(std::move(g)),
      coef(register_parameter("coef", Tensor::zeros({out, in, grid.num_basis()}))),
      w_base(register_parameter("w_base", xavier({out, in}, in, out, rng))),
      w_spline(register_parameter("w_spline", Tensor::ones({out, in}))) {}

Tensor SplineKanLayer::forward(const Tensor& x) const {
  return ops::spline_kan(x, grid, coef, w_base, w_spline);
}

void SplineKanLayer::zero_output() {
  nn::fill_zero(coef);
  nn::fill_zero(w_base);
}

namespace {

Tensor linspace(double lo, double hi, std::size_t n) {
  Tensor t({n});
  for (std::size_t i = 0; i < n; ++i) {
    t.data()[i] = n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  return t;
}

}  // namespace

RswafKanLayer::RswafKanLayer(std::size_t in, std::size_t out, Rng& rng, RswafOptions opts)
    : KanLayer(in, out),
      options((opts.centers == 0 ? throw std::invalid_argument("RswafKanLayer: need at least one center")
                                 : opts)),
      centers(register_parameter("centers", linspace(opts.lo, opts.hi, opts.centers))),
      width(register_parameter("width", Tensor({1}, opts.width))),
      weight(register_parameter("weight", Tensor::randn({out, in, opts.centers}, rng, 0.1))),
      w_base(register_parameter("w_base", xavier({out, in}, in, out, rng))),
      w_scale(register_parameter("w_scale", Tensor::ones({out, in}))) {
  if (opts.input_norm) {
    norm.emplace(in);
    register_module("norm", *norm);
  }
}

Tensor RswafKanLayer::forward_normalized(const Tensor& u) const {
  return ops::rswaf_kan(u, centers, width, weight, w_base, w_scale);
}

Tensor RswafKanLayer::forward(const Tensor& x) const {
  check_last_axis("RswafKanLayer", x, in_features);
  return forward_normalized(norm ? norm->forward(x) : x);
}

void RswafKanLayer::zero_output() {
  nn::fill_zero(weight);
  nn::fill_zero(w_base);
}

KanStack::KanStack(std::vector<std::unique_ptr<KanLayer>> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ShapeError("KanStack: needs at least one layer");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (i > 0 && layers_[i - 1]->out_features != layers_[i]->in_features) {
      throw ShapeError("KanStack: layer " + std::to_string(i - 1) + " emits " +
                       std::to_string(layers_[i - 1]->out_features) + " features but layer " +
                       std::to_string(i) + " expects " + std::to_string(layers_[i]->in_features));
    }
    register_module("layers." + std::to_string(i), *layers_[i]);
  }
}

Tensor KanStack::forward(const Tensor& x) const {
  Tensor z = x;
  for (const auto& layer : layers_) z = layer->forward(z);
  return z;
}

KanFeedForward::KanFeedForward(std::size_t c, std::size_t expansion, Rng& rng, RswafOptions opts,
                               KanProjection projection)
    : channels(c), hidden(c * expansion), projection_kind(projection), expand(c, c * expansion, rng, opts) {
  if (expansion == 0) throw ShapeError("KanFeedForward: expansion must be positive");
  register_module("expand", expand);
  if (projection == KanProjection::Rswaf) {
    project_kan = std::make_unique<RswafKanLayer>(hidden, c, rng, opts);
    register_module("project", *project_kan);
  } else {
    project_linear = std::make_unique<nn::Linear>(hidden, c, rng);
    register_module("project", *project_linear);
  }
}

Tensor KanFeedForward::forward_tokens(const Tensor& t) const {
  Tensor hdn = expand.forward(t);
  return project_kan ? project_kan->forward(hdn) : project_linear->forward(hdn);
}

Tensor KanFeedForward::forward(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != channels) {
    throw ShapeError("KanFeedForward: expected [B," + std::to_string(channels) + ",H,W], got " +
                     to_string(x.shape()));
  }
  return ops::tokens_to_nchw(forward_tokens(ops::nchw_to_tokens(x)), x.dim(2), x.dim(3));
}

void KanFeedForward::zero_output() {
  if (project_kan) {
    project_kan->zero_output();
  } else {
    nn::fill_zero(project_linear->weight);
    nn::fill_zero(project_linear->bias);
  }
}

}  // namespace medvit
