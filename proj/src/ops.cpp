#include "medvit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "activation_math.hpp"
#include "gemm.hpp"

namespace medvit::ops {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <typename Fn>
void accumulate(const NodePtr& in, Fn&& fn) {
  if (in->requires_grad) fn(in->grad_buffer());
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// out[j] = in[src(j)] for a permutation of axes.
void permute_copy(const double* in, const Shape& in_shape, const std::vector<std::size_t>& axes,
                  double* out) {
  const std::size_t rank = in_shape.size();
  const auto in_strides = strides_of(in_shape);
  Shape out_shape(rank);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    step[i] = in_strides[axes[i]];
  }
  const std::size_t n = shape_numel(in_shape);
  if (n == 0) return;
  if (rank == 0) {
    out[0] = in[0];
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  const std::size_t last = rank - 1;
  const std::size_t inner = out_shape[last];
  const std::size_t inner_step = step[last];
  for (std::size_t j = 0; j < n; j += inner) {
    const double* p = in + src;
    for (std::size_t t = 0; t < inner; ++t) out[j + t] = p[t * inner_step];
    // advance odometer over the leading axes
    for (std::size_t ax = last; ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) {
        src += step[ax];
        break;
      }
      src -= step[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, "add", [](Node& self) {
    for (auto& in : self.inputs) {
      accumulate(in, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      });
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, "sub", [](Node& self) {
    accumulate(self.inputs[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    accumulate(self.inputs[1], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, "mul", [](Node& self) {
    const auto& x = self.inputs[0]->data;
    const auto& y = self.inputs[1]->data;
    accumulate(self.inputs[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i];
    });
    accumulate(self.inputs[1], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x[i];
    });
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result(a.shape(), std::move(out), {a}, "scale", [factor](Node& self) {
    accumulate(self.inputs[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
  });
}

Tensor add_scalar(const Tensor& a, double offset) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + offset;
  return make_result(a.shape(), std::move(out), {a}, "add_scalar", [](Node& self) {
    accumulate(self.inputs[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  });
}

Tensor sum(const Tensor& a) {
  const double s = std::accumulate(a.values().begin(), a.values().end(), 0.0);
  return make_result({}, {s}, {a}, "sum", [](Node& self) {
    accumulate(self.inputs[0], [&](std::vector<double>& g) {
      for (auto& v : g) v += self.grad[0];
    });
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result(std::move(shape), std::move(out), {a}, "reshape", [](Node& self) {
    accumulate(self.inputs[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t rank = a.rank();
  if (axes.size() != rank) throw ShapeError("permute: axes count does not match rank");
  std::vector<bool> seen(rank, false);
  for (auto ax : axes) {
    if (ax >= rank || seen[ax]) throw ShapeError("permute: invalid axis permutation");
    seen[ax] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = a.shape()[axes[i]];
  std::vector<double> out(a.numel());
  permute_copy(a.data(), a.shape(), axes, out.data());
  return make_result(out_shape, std::move(out), {a}, "permute", [axes, out_shape](Node& self) {
    accumulate(self.inputs[0], [&](std::vector<double>& g) {
      std::vector<std::size_t> inverse(axes.size());
      for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = i;
      std::vector<double> back(g.size());
      permute_copy(self.grad.data(), out_shape, inverse, back.data());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += back[i];
    });
  });
}

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: empty input list");
  const Shape& ref = xs.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + to_string(ref));
  std::size_t total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
    if (!ok) {
      throw ShapeError("concat: off-axis mismatch " + to_string(ref) + " vs " + to_string(s));
    }
    total += s[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t w = x.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.data() + o * w, w, out.data() + o * total * inner + offset);
    }
    widths.push_back(w);
    offset += w;
  }
  return make_result(out_shape, std::move(out), xs, "concat",
                     [widths, outer, row = total * inner](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                         const std::size_t w = widths[i];
                         accumulate(self.inputs[i], [&](std::vector<double>& g) {
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* src = self.grad.data() + o * row + off;
                             for (std::size_t t = 0; t < w; ++t) g[o * w + t] += src[t];
                           }
                         });
                         off += w;
                       }
                     });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  if (axis >= s.size() || start + length > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + length) + ") out of bounds for " + to_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape[axis] = length;
  const std::size_t row = s[axis] * inner, w = length * inner, off = start * inner;
  std::vector<double> out(outer * w);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(a.data() + o * row + off, w, out.data() + o * w);
  return make_result(out_shape, std::move(out), {a}, "slice", [outer, row, w, off](Node& self) {
    accumulate(self.inputs[0], [&](std::vector<double>& g) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t t = 0; t < w; ++t) g[o * row + off + t] += self.grad[o * w + t];
      }
    });
  });
}

Tensor nchw_to_tokens(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("nchw_to_tokens: expected rank 4, got " + to_string(x.shape()));
  const auto& s = x.shape();
  return reshape(permute(x, {0, 2, 3, 1}), {s[0], s[2] * s[3], s[1]});
}

Tensor tokens_to_nchw(const Tensor& t, std::size_t height, std::size_t width) {
  if (t.rank() != 3 || t.dim(1) != height * width) {
    throw ShapeError("tokens_to_nchw: " + to_string(t.shape()) + " is not [B," +
                     std::to_string(height * width) + ",C]");
  }
  return permute(reshape(t, {t.dim(0), height, width, t.dim(2)}), {0, 3, 1, 2});
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: dimension mismatch " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm(false, false, m, n, k, 1.0, a.data(), b.data(), 0.0, out.data());
  return make_result({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
    const auto& A = self.inputs[0]->data;
    const auto& B = self.inputs[1]->data;
    accumulate(self.inputs[0], [&](std::vector<double>& g) {
      detail::gemm(false, true, m, k, n, 1.0, self.grad.data(), B.data(), 1.0, g.data());
    });
    accumulate(self.inputs[1], [&](std::vector<double>& g) {
      detail::gemm(true, false, k, n, m, 1.0, A.data(), self.grad.data(), 1.0, g.data());
    });
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw ShapeError("bmm: expected matching [B,.,.] operands, got " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  }
  const std::size_t batch = a.dim(0);
  const std::size_t m = ta ? a.dim(2) : a.dim(1);
  const std::size_t k = ta ? a.dim(1) : a.dim(2);
  const std::size_t kb = tb ? b.dim(2) : b.dim(1);
  const std::size_t n = tb ? b.dim(1) : b.dim(2);
  if (k != kb) {
    throw ShapeError("bmm: inner dimension mismatch " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(ta, tb, m, n, k, 1.0, a.data() + i * m * k, b.data() + i * k * n, 0.0,
                 out.data() + i * m * n);
  }
  return make_result({batch, m, n}, std::move(out), {a, b}, "bmm",
                     [batch, m, k, n, ta, tb](Node& self) {
                       const auto& A = self.inputs[0]->data;
                       const auto& B = self.inputs[1]->data;
                       accumulate(self.inputs[0], [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < batch; ++i) {
                           const double* G = self.grad.data() + i * m * n;
                           const double* Bi = B.data() + i * k * n;
                           double* gA = g.data() + i * m * k;
                           // C = A' B' ; dA' = G B'^T
                           if (!ta) detail::gemm(false, !tb, m, k, n, 1.0, G, Bi, 1.0, gA);
                           else detail::gemm(tb, true, k, m, n, 1.0, Bi, G, 1.0, gA);
                         }
                       });
                       accumulate(self.inputs[1], [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < batch; ++i) {
                           const double* G = self.grad.data() + i * m * n;
                           const double* Ai = A.data() + i * m * k;
                           double* gB = g.data() + i * k * n;
                           // dB' = A'^T G
                           if (!tb) detail::gemm(!ta, false, k, n, m, 1.0, Ai, G, 1.0, gB);
                           else detail::gemm(true, ta, n, k, m, 1.0, G, Ai, 1.0, gB);
                         }
                       });
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() == 0 || x.shape().back() != weight.dim(1)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(weight.shape()));
  }
  const std::size_t in = weight.dim(1), out_f = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f)) {
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " does not match " +
                     std::to_string(out_f) + " outputs");
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  std::vector<double> out(rows * out_f, 0.0);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(bias.data(), out_f, out.data() + r * out_f);
  }
  detail::gemm(false, true, rows, out_f, in, 1.0, x.data(), weight.data(), bias.defined() ? 1.0 : 0.0,
               out.data());
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(out_shape, std::move(out), inputs, "linear", [rows, in, out_f](Node& self) {
    const auto& X = self.inputs[0]->data;
    const auto& W = self.inputs[1]->data;
    accumulate(self.inputs[0], [&](std::vector<double>& g) {
      detail::gemm(false, false, rows, in, out_f, 1.0, self.grad.data(), W.data(), 1.0, g.data());
    });
    accumulate(self.inputs[1], [&](std::vector<double>& g) {
      detail::gemm(true, false, out_f, in, rows, 1.0, self.grad.data(), X.data(), 1.0, g.data());
    });
    if (self.inputs.size() > 2) {
      accumulate(self.inputs[2], [&](std::vector<double>& g) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t o = 0; o < out_f; ++o) g[o] += self.grad[r * out_f + o];
        }
      });
    }
  });
}

Tensor activation(const Tensor& x, Activation mode) {
  std::vector<double> out(x.numel());
  const double* in = x.data();
  switch (mode) {
    case Activation::ReLU:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    case Activation::SiLU:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::silu(in[i]);
      break;
    case Activation::Tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(in[i]);
      break;
  }
  const char* name = mode == Activation::ReLU ? "relu" : mode == Activation::SiLU ? "silu" : "tanh";
  return make_result(x.shape(), std::move(out), {x}, name, [mode](Node& self) {
    const auto& X = self.inputs[0]->data;
    accumulate(self.inputs[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        double d = 0.0;
        switch (mode) {
          case Activation::ReLU:
            // subgradient 0 at the kink
            d = X[i] > 0.0 ? 1.0 : 0.0;
            break;
          case Activation::SiLU:
            d = detail::silu_grad(X[i]);
            break;
          case Activation::Tanh:
            d = 1.0 - self.data[i] * self.data[i];
            break;
        }
        g[i] += self.grad[i] * d;
      }
    });
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size() || s[axis] == 0) {
    throw ShapeError("softmax: empty or missing axis " + std::to_string(axis) + " in " + to_string(s));
  }
  std::size_t outer = 1, inner = 1;
  const std::size_t len = s[axis];
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  std::vector<double> out(x.numel());
  const double* in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = in[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  return make_result(s, std::move(out), {x}, "softmax", [outer, inner, len](Node& self) {
    accumulate(self.inputs[0], [&](std::vector<double>& g) {
      const auto& y = self.data;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += self.grad[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t p = base + j * inner;
            g[p] += y[p] * (self.grad[p] - dot);
          }
        }
      }
    });
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  std::vector<double> probs(batch * classes);
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ShapeError("cross_entropy: label " + std::to_string(label) + " outside [0," +
                       std::to_string(classes) + ")");
    }
    const double* row = logits.data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - mx) / z;
    loss += -(row[label] - mx - std::log(z));
  }
  loss /= static_cast<double>(batch);
  std::vector<int> saved(labels.begin(), labels.end());
  return make_result({}, {loss}, {logits}, "cross_entropy",
                     [probs = std::move(probs), saved, batch, classes](Node& self) {
                       accumulate(self.inputs[0], [&](std::vector<double>& g) {
                         const double s = self.grad[0] / static_cast<double>(batch);
                         for (std::size_t b = 0; b < batch; ++b) {
                           for (std::size_t c = 0; c < classes; ++c) {
                             double d = probs[b * classes + c];
                             if (static_cast<int>(c) == saved[b]) d -= 1.0;
                             g[b * classes + c] += s * d;
                           }
                         }
                       });
                     });
}

}  // namespace medvit::ops
