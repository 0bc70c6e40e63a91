#pragma once

// Reference implementations used only by tests. They are written from the
// mathematical definitions with plain loops and share no code with the
// library beyond the Tensor container.

#include <cstddef>
#include <cstdint>
#include <vector>

namespace oracle {

/// Softmax attention over all keys. q [B,N,C], k and v [B,M,C], heads split
/// C into contiguous blocks. Returns [B,N,C].
std::vector<double> full_attention(const std::vector<double>& q, const std::vector<double>& k,
                                   const std::vector<double>& v, std::size_t batch, std::size_t n,
                                   std::size_t m, std::size_t channels, std::size_t heads);

/// Neighbors of position i on a line by enumeration: every contiguous run of
/// k lattice points (same residue mod δ) that contains i is scored by its
/// total distance to i and the best run wins. Sorted by (|d|, index). Empty
/// when the lattice holds fewer than k points.
std::vector<std::size_t> brute_neighbors(std::size_t i, std::size_t extent, std::size_t k, std::size_t dilation);

/// Set of input tokens the probe's output depends on after a stack of 1-D
/// neighborhood layers, propagated from the last layer back to the input.
std::vector<std::size_t> dependency_set(std::size_t probe, std::size_t extent, std::size_t k,
                                        const std::vector<std::size_t>& dilations);

/// Attention of every token over its 2-D neighborhood (product of the
/// per-axis brute neighbors) with bias[h][dy/δ + k-1][dx/δ + k-1], where
/// dy, dx are the offsets of the key from the query. qkv [B,N,3C].
std::vector<double> neighborhood_attention(const std::vector<double>& qkv, const std::vector<double>& bias,
                                           std::size_t batch, std::size_t height, std::size_t width,
                                           std::size_t channels, std::size_t heads, std::size_t k,
                                           std::size_t dilation);

/// Direct convolution with zero padding. x [B,Ci,H,W], w [Co,Ci/g,kh,kw].
std::vector<double> conv2d(const std::vector<double>& x, const std::vector<double>& w, const std::vector<double>& b,
                           std::size_t batch, std::size_t cin, std::size_t height, std::size_t width,
                           std::size_t cout, std::size_t kh, std::size_t kw, std::size_t stride,
                           std::size_t padding, std::size_t groups);

/// Cox–de Boor recursion in long double on the uniform grid of `intervals`
/// cells over [lo, hi] extended by `order` cells each side.
std::vector<long double> bspline(long double x, std::size_t intervals, long double lo, long double hi,
                                 std::size_t order);

/// 1 - tanh²(r/h) in long double.
long double rswaf(long double r, long double h);

/// Fraction of (positive, negative) pairs ordered correctly, ties 1/2.
double concordance_auc(const std::vector<double>& scores, const std::vector<int>& positive);

/// Scalar AdamW trajectory in long double; returns θ after each step.
std::vector<long double> adamw_trace(long double theta, const std::vector<long double>& grads, long double lr,
                                     long double beta1, long double beta2, long double eps, long double wd);

}  // namespace oracle
