#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace oracle {

std::vector<double> full_attention(const std::vector<double>& q, const std::vector<double>& k,
                                   const std::vector<double>& v, std::size_t batch, std::size_t n,
                                   std::size_t m, std::size_t channels, std::size_t heads) {
  const std::size_t hd = channels / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> out(batch * n * channels, 0.0);
  std::vector<double> logits(m);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < m; ++j) {
          double s = 0.0;
          for (std::size_t d = 0; d < hd; ++d) {
            s += q[(b * n + i) * channels + h * hd + d] * k[(b * m + j) * channels + h * hd + d];
          }
          logits[j] = s * scale;
          mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (std::size_t j = 0; j < m; ++j) {
          for (std::size_t d = 0; d < hd; ++d) {
            out[(b * n + i) * channels + h * hd + d] += logits[j] / z * v[(b * m + j) * channels + h * hd + d];
          }
        }
      }
    }
  }
  return out;
}

std::vector<std::size_t> brute_neighbors(std::size_t i, std::size_t extent, std::size_t k, std::size_t dilation) {
  std::vector<std::size_t> lattice;
  for (std::size_t j = i % dilation; j < extent; j += dilation) lattice.push_back(j);
  if (lattice.size() < k) return {};
  std::vector<std::size_t> best;
  std::size_t best_cost = std::numeric_limits<std::size_t>::max();
  for (std::size_t start = 0; start + k <= lattice.size(); ++start) {
    std::vector<std::size_t> run(lattice.begin() + static_cast<long>(start),
                                 lattice.begin() + static_cast<long>(start + k));
    if (std::find(run.begin(), run.end(), i) == run.end()) continue;
    std::size_t cost = 0;
    for (auto j : run) cost += j > i ? j - i : i - j;
    if (cost < best_cost) {
      best_cost = cost;
      best = run;
    }
  }
  std::stable_sort(best.begin(), best.end(), [i](std::size_t a, std::size_t b) {
    const std::size_t da = a > i ? a - i : i - a, db = b > i ? b - i : i - b;
    return da != db ? da < db : a < b;
  });
  return best;
}

std::vector<std::size_t> dependency_set(std::size_t probe, std::size_t extent, std::size_t k,
                                        const std::vector<std::size_t>& dilations) {
  std::vector<bool> live(extent, false);
  live[probe] = true;
  for (auto it = dilations.rbegin(); it != dilations.rend(); ++it) {
    std::vector<bool> next(extent, false);
    for (std::size_t i = 0; i < extent; ++i) {
      if (!live[i]) continue;
      for (auto j : brute_neighbors(i, extent, k, *it)) next[j] = true;
    }
    live = next;
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < extent; ++i) {
    if (live[i]) out.push_back(i);
  }
  return out;
}

std::vector<double> neighborhood_attention(const std::vector<double>& qkv, const std::vector<double>& bias,
                                           std::size_t batch, std::size_t height, std::size_t width,
                                           std::size_t channels, std::size_t heads, std::size_t k,
                                           std::size_t dilation) {
  const std::size_t n = height * width, hd = channels / heads, side = 2 * k - 1;
  const std::size_t kh = height == 1 ? 1 : k;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> out(batch * n * channels, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const auto ny = brute_neighbors(y, height, kh, dilation);
        const auto nx = brute_neighbors(x, width, k, dilation);
        const std::size_t i = y * width + x;
        for (std::size_t h = 0; h < heads; ++h) {
          std::vector<double> logits;
          std::vector<std::size_t> keys;
          for (auto yy : ny) {
            for (auto xx : nx) {
              const std::size_t j = yy * width + xx;
              double s = 0.0;
              for (std::size_t d = 0; d < hd; ++d) {
                s += qkv[(b * n + i) * 3 * channels + h * hd + d] *
                     qkv[(b * n + j) * 3 * channels + channels + h * hd + d];
              }
              const long dy = (static_cast<long>(yy) - static_cast<long>(y)) / static_cast<long>(dilation);
              const long dx = (static_cast<long>(xx) - static_cast<long>(x)) / static_cast<long>(dilation);
              const auto row = static_cast<std::size_t>(dy + static_cast<long>(k) - 1);
              const auto col = static_cast<std::size_t>(dx + static_cast<long>(k) - 1);
              logits.push_back((s + bias[(h * side + row) * side + col]) * scale);
              keys.push_back(j);
            }
          }
          const double mx = *std::max_element(logits.begin(), logits.end());
          double z = 0.0;
          for (auto& l : logits) z += (l = std::exp(l - mx));
          for (std::size_t t = 0; t < keys.size(); ++t) {
            for (std::size_t d = 0; d < hd; ++d) {
              out[(b * n + i) * channels + h * hd + d] +=
                  logits[t] / z * qkv[(b * n + keys[t]) * 3 * channels + 2 * channels + h * hd + d];
            }
          }
        }
      }
    }
  }
  return out;
}

std::vector<double> conv2d(const std::vector<double>& x, const std::vector<double>& w, const std::vector<double>& b,
                           std::size_t batch, std::size_t cin, std::size_t height, std::size_t width,
                           std::size_t cout, std::size_t kh, std::size_t kw, std::size_t stride,
                           std::size_t padding, std::size_t groups) {
  const std::size_t ho = (height + 2 * padding - kh) / stride + 1, wo = (width + 2 * padding - kw) / stride + 1;
  const std::size_t cin_g = cin / groups, cout_g = cout / groups;
  std::vector<double> out(batch * cout * ho * wo, 0.0);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      const std::size_t g = co / cout_g;
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double s = b.empty() ? 0.0 : b[co];
          for (std::size_t ci = 0; ci < cin_g; ++ci) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(height) || ix >= static_cast<long>(width)) continue;
                s += w[((co * cin_g + ci) * kh + ky) * kw + kx] *
                     x[((n * cin + g * cin_g + ci) * height + static_cast<std::size_t>(iy)) * width +
                       static_cast<std::size_t>(ix)];
              }
            }
          }
          out[((n * cout + co) * ho + oy) * wo + ox] = s;
        }
      }
    }
  }
  return out;
}

std::vector<long double> bspline(long double x, std::size_t intervals, long double lo, long double hi,
                                 std::size_t order) {
  const long double step = (hi - lo) / static_cast<long double>(intervals);
  std::vector<long double> t;
  for (long j = -static_cast<long>(order); j <= static_cast<long>(intervals + order); ++j) {
    t.push_back(lo + static_cast<long double>(j) * step);
  }
  // degree 0: indicator of [t_i, t_{i+1})
  std::vector<long double> basis(t.size() - 1);
  for (std::size_t i = 0; i + 1 < t.size(); ++i) basis[i] = (x >= t[i] && x < t[i + 1]) ? 1.0L : 0.0L;
  for (std::size_t p = 1; p <= order; ++p) {
    std::vector<long double> next(t.size() - 1 - p);
    for (std::size_t i = 0; i < next.size(); ++i) {
      next[i] = (x - t[i]) / (t[i + p] - t[i]) * basis[i] + (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * basis[i + 1];
    }
    basis = std::move(next);
  }
  return basis;
}

long double rswaf(long double r, long double h) {
  const long double t = std::tanh(r / h);
  return 1.0L - t * t;
}

double concordance_auc(const std::vector<double>& scores, const std::vector<int>& positive) {
  double num = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positive[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (positive[j]) continue;
      pairs += 1.0;
      num += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
    }
  }
  return num / pairs;
}

std::vector<long double> adamw_trace(long double theta, const std::vector<long double>& grads, long double lr,
                                     long double beta1, long double beta2, long double eps, long double wd) {
  long double m = 0.0L, v = 0.0L;
  std::vector<long double> out;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const long double g = grads[t - 1];
    m = beta1 * m + (1.0L - beta1) * g;
    v = beta2 * v + (1.0L - beta2) * g * g;
    const long double mh = m / (1.0L - std::pow(beta1, static_cast<long double>(t)));
    const long double vh = v / (1.0L - std::pow(beta2, static_cast<long double>(t)));
    theta = theta - lr * wd * theta - lr * mh / (std::sqrt(vh) + eps);
    out.push_back(theta);
  }
  return out;
}

}  // namespace oracle
