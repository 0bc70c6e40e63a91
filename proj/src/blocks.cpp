#include "medvit/blocks.hpp"

#include <cmath>

namespace medvit {

namespace {

void check_map(const char* who, const Tensor& z, std::size_t channels) {
  if (z.rank() != 4 || z.dim(1) != channels) {
    throw ShapeError(std::string(who) + ": expected [B," + std::to_string(channels) + ",H,W], got " +
                     to_string(z.shape()));
  }
}

}  // namespace

std::uint64_t conv2d_macs(const Shape& input, const Shape& weight, ops::Conv2dOptions opts) {
  const Shape out = ops::conv2d_output_shape(input, weight, opts);
  return static_cast<std::uint64_t>(weight[0]) * weight[1] * weight[2] * weight[3] * out[2] * out[3];
}

std::uint64_t rswaf_layer_macs(std::size_t in, std::size_t out, std::size_t centers) {
  return static_cast<std::uint64_t>(in) * out * (3 * centers + 1) + in;
}

Lffn::Lffn(std::size_t c, std::size_t expansion, Rng& rng)
    : channels(c),
      hidden(c * expansion),
      conv1(c, c * expansion, 1, rng),
      bn1(c * expansion),
      dwconv(c * expansion, c * expansion, 3, rng, {1, 1, c * expansion}),
      bn2(c * expansion),
      conv2(c * expansion, c, 1, rng) {
  register_module("conv1", conv1);
  register_module("bn1", bn1);
  register_module("dwconv", dwconv);
  register_module("bn2", bn2);
  register_module("conv2", conv2);
}

Tensor Lffn::forward(const Tensor& x) {
  check_map("Lffn", x, channels);
  Tensor h = ops::relu(bn1.forward(conv1.forward(x)));
  h = ops::relu(bn2.forward(dwconv.forward(h)));
  return conv2.forward(h);
}

std::uint64_t Lffn::macs(std::size_t height, std::size_t width) const {
  const std::uint64_t n = static_cast<std::uint64_t>(height) * width;
  return n * (2ull * channels * hidden + 9ull * hidden);
}

LfpBlock::LfpBlock(std::size_t c, const AttentionConfig& attn_cfg, std::size_t lffn_expansion, Rng& rng)
    : channels(c),
      norm1(c),
      attn([&] {
        AttentionConfig cfg = attn_cfg;
        cfg.dim = c;
        return cfg;
      }(), rng),
      norm2(c),
      lffn(c, lffn_expansion, rng) {
  register_module("norm1", norm1);
  register_module("attn", attn);
  register_module("norm2", norm2);
  register_module("lffn", lffn);
}

Tensor LfpBlock::forward(const Tensor& z) {
  check_map("LfpBlock", z, channels);
  const std::size_t H = z.dim(2), W = z.dim(3);
  Tensor t = ops::nchw_to_tokens(z);
  t = ops::add(t, attn.forward(norm1.forward(t), H, W));
  Tensor z1 = ops::tokens_to_nchw(t, H, W);
  return ops::add(z1, lffn.forward(ops::tokens_to_nchw(norm2.forward(t), H, W)));
}

void LfpBlock::zero_branches() {
  nn::fill_zero(attn.proj.weight);
  nn::fill_zero(attn.proj.bias);
  nn::fill_zero(lffn.conv2.weight);
  nn::fill_zero(lffn.conv2.bias);
}

std::uint64_t LfpBlock::macs(std::size_t height, std::size_t width) const {
  const std::uint64_t n = static_cast<std::uint64_t>(height) * width, d = channels;
  const std::uint64_t span = attn.config.kernel_along(height) * attn.config.kernel_along(width);
  return 3 * n * d * d + 2 * n * d * span + n * d * d + lffn.macs(height, width);
}

std::size_t gfp_attention_width(std::size_t channels, double shrink, std::size_t head_dim) {
  if (head_dim == 0 || channels % head_dim != 0 || channels < 2 * head_dim) {
    throw ShapeError("GfpBlock: channels " + std::to_string(channels) +
                     " must be a multiple of head_dim " + std::to_string(head_dim) +
                     " with room for two branches");
  }
  if (!(shrink > 0.0 && shrink < 1.0)) throw ShapeError("GfpBlock: shrink ratio must lie in (0,1)");
  const double exact = shrink * static_cast<double>(channels);
  const double hd = static_cast<double>(head_dim);
  std::size_t width = static_cast<std::size_t>((exact + hd / 2.0) / hd) * head_dim;
  width = std::max(width, head_dim);
  if (static_cast<double>(width) < 0.9 * exact) width += head_dim;
  return std::min(width, channels - head_dim);
}

GfpBlock::GfpBlock(std::size_t c, const GfpOptions& opts, Rng& rng)
    : channels(c),
      attn_width(gfp_attention_width(c, opts.shrink, opts.head_dim)),
      conv_width(c - attn_width),
      options(opts),
      norm1(attn_width),
      emhsa(attn_width, opts.head_dim, opts.reduction, rng),
      branch_proj(attn_width, conv_width, 1, rng),
      mhca(conv_width, opts.head_dim, rng),
      kan(c, opts.kan_expansion, rng, opts.kan, opts.kan_projection) {
  register_module("norm1", norm1);
  register_module("emhsa", emhsa);
  register_module("branch_proj", branch_proj);
  register_module("mhca", mhca);
  register_module("kan", kan);
}

Tensor GfpBlock::forward(const Tensor& z) {
  check_map("GfpBlock", z, channels);
  Tensor a = ops::slice(z, 1, 0, attn_width);
  Tensor b = ops::slice(z, 1, attn_width, conv_width);
  Tensor t = ops::add(a, emhsa.forward(norm1.forward_nchw(a)));
  Tensor h = ops::add(b, mhca.forward(branch_proj.forward(t)));
  Tensor y = ops::concat({t, h}, 1);
  return ops::add(y, kan.forward(y));
}

void GfpBlock::zero_branches() {
  nn::fill_zero(emhsa.proj.weight);
  nn::fill_zero(emhsa.proj.bias);
  nn::fill_zero(mhca.projection.weight);
  kan.zero_output();
}

std::uint64_t GfpBlock::macs(std::size_t height, std::size_t width) const {
  const std::uint64_t n = static_cast<std::uint64_t>(height) * width;
  const std::uint64_t r = options.reduction;
  const std::uint64_t m = (height / r) * (width / r);
  const std::uint64_t c1 = attn_width, c2 = conv_width;
  std::uint64_t total = 2 * n * c1 * c1 + 2 * m * c1 * c1 + 2 * n * m * c1;  // q, proj, kv, attention
  total += n * c1 * c2;                                                  // branch projection
  total += n * (c2 * options.head_dim * 9 + c2 * c2);                    // mhca
  const std::size_t N = options.kan.centers;
  total += n * rswaf_layer_macs(channels, kan.hidden, N);
  total += n * (kan.project_kan ? rswaf_layer_macs(kan.hidden, channels, N)
                                : static_cast<std::uint64_t>(kan.hidden) * channels);
  return total;
}

}  // namespace medvit
