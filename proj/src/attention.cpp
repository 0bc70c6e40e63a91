#include "medvit/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace medvit {

void AttentionConfig::validate() const {
  if (k == 0 || k % 2 == 0) throw ShapeError("attention: kernel size must be odd, got " + std::to_string(k));
  if (dilation == 0) throw ShapeError("attention: dilation must be at least 1");
  if (head_dim == 0 || dim % head_dim != 0) {
    throw ShapeError("attention: dim " + std::to_string(dim) + " not divisible by head_dim " +
                     std::to_string(head_dim));
  }
}

void AttentionConfig::check_feasible(std::size_t height, std::size_t width) const {
  for (std::size_t extent : {height, width}) {
    if (extent != 1 && k * dilation > extent) {
      throw FeasibilityError("attention: k*dilation = " + std::to_string(k * dilation) +
                             " exceeds feature extent " + std::to_string(extent));
    }
  }
}

std::vector<std::size_t> neighbor_indices(std::size_t i, std::size_t extent, std::size_t k,
                                          std::size_t dilation) {
  if (k == 0 || dilation == 0) throw FeasibilityError("neighbor_indices: k and dilation must be positive");
  if (k * dilation > extent) {
    throw FeasibilityError("neighbor_indices: k*dilation = " + std::to_string(k * dilation) +
                           " exceeds extent " + std::to_string(extent));
  }
  if (i >= extent) throw ShapeError("neighbor_indices: position out of range");
  const std::size_t residue = i % dilation;
  const std::size_t lattice = (extent - residue + dilation - 1) / dilation;
  const std::size_t p = i / dilation;
  const std::size_t half = k / 2;
  std::size_t start = p > half ? p - half : 0;
  start = std::min(start, lattice - k);
  std::vector<std::size_t> out(k);
  for (std::size_t j = 0; j < k; ++j) out[j] = residue + (start + j) * dilation;
  std::sort(out.begin(), out.end(), [i](std::size_t a, std::size_t b) {
    const std::size_t da = a > i ? a - i : i - a, db = b > i ? b - i : i - b;
    return da != db ? da < db : a < b;
  });
  return out;
}

namespace {

std::vector<std::size_t> axis_neighbors(std::size_t i, std::size_t extent, std::size_t k,
                                        std::size_t dilation) {
  if (k == 1) return {i};
  return neighbor_indices(i, extent, k, dilation);
}

long diff(std::size_t a, std::size_t b) { return static_cast<long>(a) - static_cast<long>(b); }

}  // namespace

std::vector<std::size_t> neighbor_indices_2d(std::size_t y, std::size_t x, std::size_t height,
                                             std::size_t width, std::size_t kh, std::size_t kw,
                                             std::size_t dilation) {
  const auto ys = axis_neighbors(y, height, kh, dilation);
  const auto xs = axis_neighbors(x, width, kw, dilation);
  std::vector<std::size_t> out;
  out.reserve(ys.size() * xs.size());
  for (auto ny : ys) {
    for (auto nx : xs) out.push_back(ny * width + nx);
  }
  auto dist = [&](std::size_t t) {
    const long dy = diff(t / width, y), dx = diff(t % width, x);
    return dy * dy + dx * dx;
  };
  std::sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) {
    const long da = dist(a), db = dist(b);
    return da != db ? da < db : a < b;
  });
  return out;
}

NeighborhoodTable NeighborhoodTable::build(std::size_t height, std::size_t width,
                                           const AttentionConfig& cfg) {
  cfg.validate();
  cfg.check_feasible(height, width);
  const std::size_t kh = cfg.kernel_along(height), kw = cfg.kernel_along(width);
  const long k = static_cast<long>(cfg.k), d = static_cast<long>(cfg.dilation);
  NeighborhoodTable table;
  table.tokens = height * width;
  table.span = kh * kw;
  table.neighbor.reserve(table.tokens * table.span);
  table.bias_slot.reserve(table.tokens * table.span);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (auto t : neighbor_indices_2d(y, x, height, width, kh, kw, cfg.dilation)) {
        const long oy = diff(t / width, y) / d + k - 1;
        const long ox = diff(t % width, x) / d + k - 1;
        table.neighbor.push_back(t);
        table.bias_slot.push_back(static_cast<std::size_t>(oy * (2 * k - 1) + ox));
      }
    }
  }
  return table;
}

namespace ops {

Tensor neighborhood_attention(const Tensor& qkv, const Tensor& bias, const NeighborhoodTable& table,
                              std::size_t heads) {
  if (qkv.rank() != 3 || qkv.dim(1) != table.tokens || heads == 0 || qkv.dim(2) % (3 * heads) != 0) {
    throw ShapeError("neighborhood_attention: qkv " + to_string(qkv.shape()) +
                     " incompatible with " + std::to_string(table.tokens) + " tokens and " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t B = qkv.dim(0), N = table.tokens, C = qkv.dim(2) / 3, hd = C / heads;
  const std::size_t span = table.span;
  const std::size_t slots = bias.rank() == 3 ? bias.dim(1) * bias.dim(2) : 0;
  if (bias.rank() != 3 || bias.dim(0) != heads || bias.dim(1) != bias.dim(2) ||
      *std::max_element(table.bias_slot.begin(), table.bias_slot.end()) >= slots) {
    throw ShapeError("neighborhood_attention: bias table " + to_string(bias.shape()) +
                     " does not cover the neighborhood offsets");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> probs(B * heads * N * span);
  std::vector<double> out(B * N * C, 0.0);
  const double* src = qkv.data();
  const double* bt = bias.data();
  for (std::size_t b = 0; b < B; ++b) {
    const double* base = src + b * N * 3 * C;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < N; ++i) {
        const double* q = base + i * 3 * C + h * hd;
        const std::size_t* nb = table.neighbor.data() + i * span;
        const std::size_t* slot = table.bias_slot.data() + i * span;
        double* p = probs.data() + ((b * heads + h) * N + i) * span;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < span; ++j) {
          const double* kk = base + nb[j] * 3 * C + C + h * hd;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += q[c] * kk[c];
          p[j] = (s + bt[h * slots + slot[j]]) * scale;
          mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < span; ++j) {
          p[j] = std::exp(p[j] - mx);
          z += p[j];
        }
        double* o = out.data() + (b * N + i) * C + h * hd;
        for (std::size_t j = 0; j < span; ++j) {
          p[j] /= z;
          const double* v = base + nb[j] * 3 * C + 2 * C + h * hd;
          for (std::size_t c = 0; c < hd; ++c) o[c] += p[j] * v[c];
        }
      }
    }
  }
  return make_result(
      {B, N, C}, std::move(out), {qkv, bias}, "neighborhood_attention",
      [probs = std::move(probs), neighbor = table.neighbor, bias_slot = table.bias_slot, B, N, C, hd,
       heads, span, slots, scale](Node& self) {
        const double* src = self.inputs[0]->data.data();
        const bool need_x = self.inputs[0]->requires_grad;
        const bool need_b = self.inputs[1]->requires_grad;
        double* gx = need_x ? self.inputs[0]->grad_buffer().data() : nullptr;
        double* gb = need_b ? self.inputs[1]->grad_buffer().data() : nullptr;
        std::vector<double> dlogit(span);
        for (std::size_t b = 0; b < B; ++b) {
          const double* base = src + b * N * 3 * C;
          double* gbase = gx ? gx + b * N * 3 * C : nullptr;
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < N; ++i) {
              const double* go = self.grad.data() + (b * N + i) * C + h * hd;
              const std::size_t* nb = neighbor.data() + i * span;
              const std::size_t* slot = bias_slot.data() + i * span;
              const double* p = probs.data() + ((b * heads + h) * N + i) * span;
              double dot = 0.0;
              for (std::size_t j = 0; j < span; ++j) {
                const double* v = base + nb[j] * 3 * C + 2 * C + h * hd;
                double dp = 0.0;
                for (std::size_t c = 0; c < hd; ++c) dp += go[c] * v[c];
                dlogit[j] = dp;
                dot += p[j] * dp;
                if (gbase) {
                  double* gv = gbase + nb[j] * 3 * C + 2 * C + h * hd;
                  for (std::size_t c = 0; c < hd; ++c) gv[c] += p[j] * go[c];
                }
              }
              for (std::size_t j = 0; j < span; ++j) dlogit[j] = p[j] * (dlogit[j] - dot) * scale;
              if (gb) {
                for (std::size_t j = 0; j < span; ++j) gb[h * slots + slot[j]] += dlogit[j];
              }
              if (!gbase) continue;
              const double* q = base + i * 3 * C + h * hd;
              double* gq = gbase + i * 3 * C + h * hd;
              for (std::size_t j = 0; j < span; ++j) {
                const double* kk = base + nb[j] * 3 * C + C + h * hd;
                double* gk = gbase + nb[j] * 3 * C + C + h * hd;
                for (std::size_t c = 0; c < hd; ++c) {
                  gq[c] += dlogit[j] * kk[c];
                  gk[c] += dlogit[j] * q[c];
                }
              }
            }
          }
        }
      });
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(0) != k.dim(0) ||
      q.dim(2) != k.dim(2)) {
    throw ShapeError("multihead_attention: incompatible q " + to_string(q.shape()) + ", k " +
                     to_string(k.shape()) + ", v " + to_string(v.shape()));
  }
  const std::size_t B = q.dim(0), N = q.dim(1), M = k.dim(1), C = q.dim(2);
  if (heads == 0 || C % heads != 0) {
    throw ShapeError("multihead_attention: dim " + std::to_string(C) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t hd = C / heads;
  auto split = [&](const Tensor& t, std::size_t len) {
    return reshape(permute(reshape(t, {B, len, heads, hd}), {0, 2, 1, 3}), {B * heads, len, hd});
  };
  Tensor qh = split(q, N), kh = split(k, M), vh = split(v, M);
  Tensor scores = scale(bmm(qh, kh, false, true), 1.0 / std::sqrt(static_cast<double>(hd)));
  Tensor out = bmm(softmax(scores, 2), vh);
  return reshape(permute(reshape(out, {B, heads, N, hd}), {0, 2, 1, 3}), {B, N, C});
}

}  // namespace ops

DinaAttention::DinaAttention(const AttentionConfig& cfg, Rng& rng)
    : config((cfg.validate(), cfg)),
      qkv(cfg.dim, 3 * cfg.dim, rng),
      proj(cfg.dim, cfg.dim, rng),
      rel_bias(register_parameter("rpb", Tensor::zeros({cfg.n_heads(), 2 * cfg.k - 1, 2 * cfg.k - 1}))) {
  register_module("qkv", qkv);
  register_module("proj", proj);
}

Tensor DinaAttention::forward(const Tensor& x, std::size_t height, std::size_t width) const {
  if (x.rank() != 3 || x.dim(1) != height * width || x.dim(2) != config.dim) {
    throw ShapeError("DinaAttention: input " + to_string(x.shape()) + " is not [B," +
                     std::to_string(height * width) + "," + std::to_string(config.dim) + "]");
  }
  const auto table = NeighborhoodTable::build(height, width, config);
  return proj.forward(ops::neighborhood_attention(qkv.forward(x), rel_bias, table, config.n_heads()));
}

FullAttention::FullAttention(std::size_t d, std::size_t h, Rng& rng)
    : dim(d), heads(h), qkv(d, 3 * d, rng), proj(d, d, rng) {
  if (h == 0 || d % h != 0) {
    throw ShapeError("FullAttention: dim " + std::to_string(d) + " not divisible by " +
                     std::to_string(h) + " heads");
  }
  register_module("qkv", qkv);
  register_module("proj", proj);
}

Tensor FullAttention::forward(const Tensor& x) const {
  Tensor t = qkv.forward(x);
  Tensor q = ops::slice(t, 2, 0, dim);
  Tensor k = ops::slice(t, 2, dim, dim);
  Tensor v = ops::slice(t, 2, 2 * dim, dim);
  return proj.forward(ops::multihead_attention(q, k, v, heads));
}

EMhsa::EMhsa(std::size_t d, std::size_t hd, std::size_t r, Rng& rng)
    : dim(d), head_dim(hd), reduction(r), q(d, d, rng), kv(d, 2 * d, rng), proj(d, d, rng) {
  if (hd == 0 || d % hd != 0) {
    throw ShapeError("EMhsa: dim " + std::to_string(d) + " not divisible by head_dim " + std::to_string(hd));
  }
  if (r == 0) throw ShapeError("EMhsa: reduction ratio must be positive");
  register_module("q", q);
  register_module("kv", kv);
  register_module("proj", proj);
}

Tensor EMhsa::forward(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != dim) {
    throw ShapeError("EMhsa: expected [B," + std::to_string(dim) + ",H,W], got " + to_string(x.shape()));
  }
  const std::size_t H = x.dim(2), W = x.dim(3);
  if (H % reduction != 0 || W % reduction != 0) {
    throw ShapeError("EMhsa: map " + std::to_string(H) + "x" + std::to_string(W) +
                     " not divisible by reduction ratio " + std::to_string(reduction));
  }
  Tensor pooled = reduction > 1 ? ops::avgpool2d(x, reduction, reduction) : x;
  Tensor kvt = kv.forward(ops::nchw_to_tokens(pooled));
  Tensor keys = ops::slice(kvt, 2, 0, dim);
  Tensor values = ops::slice(kvt, 2, dim, dim);
  Tensor out = ops::multihead_attention(q.forward(ops::nchw_to_tokens(x)), keys, values, dim / head_dim);
  return ops::tokens_to_nchw(proj.forward(out), H, W);
}

Mhca::Mhca(std::size_t d, std::size_t hd, Rng& rng)
    : dim(d),
      head_dim(hd),
      group_conv(d, d, 3, rng, {1, 1, hd == 0 ? 0 : d / hd}, false),
      norm(d),
      projection(d, d, 1, rng, {}, false) {
  if (hd == 0 || d % hd != 0) {
    throw ShapeError("Mhca: dim " + std::to_string(d) + " not divisible by head_dim " + std::to_string(hd));
  }
  register_module("group_conv", group_conv);
  register_module("norm", norm);
  register_module("projection", projection);
}

Tensor Mhca::forward(const Tensor& x) {
  return projection.forward(ops::relu(norm.forward(group_conv.forward(x))));
}

}  // namespace medvit
