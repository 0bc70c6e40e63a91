#include "medvit/model.hpp"

#include <sstream>

namespace medvit {

std::string StageSpec::notation() const {
  if (groups == 0) return "-";
  if (!has_gfp) return "C";
  if (lfp_per_group == 0) return "T";
  return "H" + std::to_string(lfp_per_group);
}

std::string StageSpec::pattern() const {
  std::ostringstream os;
  os << "(";
  if (lfp_per_group > 0) os << "LFP×" << lfp_per_group;
  if (lfp_per_group > 0 && has_gfp) os << "+";
  if (has_gfp) os << "GFP×1";
  os << ")×" << groups;
  return os.str();
}

std::string StageSpec::block_kinds() const {
  std::string group(lfp_per_group, 'L');
  if (has_gfp) group += 'G';
  std::string out;
  for (std::size_t g = 0; g < groups; ++g) out += group;
  return out;
}

namespace {

StageSpec stage(std::size_t c, std::size_t n, std::size_t l, bool gfp, std::size_t r, std::size_t d) {
  StageSpec s;
  s.channels = c;
  s.lfp_per_group = n;
  s.groups = l;
  s.has_gfp = gfp;
  s.reduction = r;
  s.dilation = d;
  return s;
}

std::size_t conv_out(std::size_t extent, std::size_t stride) { return (extent - 1) / stride + 1; }

}  // namespace

std::vector<std::string> ModelConfig::variant_names() { return {"T", "S", "B", "L", "micro"}; }

ModelConfig ModelConfig::variant(const std::string& name) {
  ModelConfig cfg;
  cfg.name = name;
  std::vector<std::size_t> ch;
  std::size_t last_groups = 2;
  if (name == "T") {
    ch = {96, 128, 192, 384};
    last_groups = 1;
  } else if (name == "S") {
    ch = {96, 128, 256, 512};
  } else if (name == "B") {
    ch = {96, 192, 384, 768};
  } else if (name == "L") {
    ch = {96, 256, 512, 1024};
  } else if (name == "micro") {
    cfg.stem_channels = {8, 8, 16, 16};
    cfg.stem_strides = {1, 1, 1, 1};
    cfg.head_dim = 8;
    cfg.resolution = 32;
    cfg.stages = {stage(32, 1, 1, false, 8, 1), stage(32, 1, 1, true, 4, 2), stage(64, 1, 1, true, 2, 2),
                  stage(64, 0, 1, true, 1, 1)};
    return cfg;
  } else {
    throw std::invalid_argument("unknown model variant '" + name + "'");
  }
  cfg.stages = {stage(ch[0], 2, 1, false, 8, 8), stage(ch[1], 1, 1, true, 4, 4), stage(ch[2], 2, 2, true, 2, 2),
                stage(ch[3], 0, last_groups, true, 1, 1)};
  return cfg;
}

std::vector<std::size_t> ModelConfig::stage_extents() const {
  std::size_t e = resolution;
  for (auto s : stem_strides) e = conv_out(e, s);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].groups > 0 && i > 0) e /= 2;
    out.push_back(e);
  }
  return out;
}

std::size_t ModelConfig::downsampling() const {
  std::size_t f = 1;
  for (auto s : stem_strides) f *= s;
  for (std::size_t i = 1; i < stages.size(); ++i) {
    if (stages[i].groups > 0) f *= 2;
  }
  return f;
}

void ModelConfig::validate() const {
  if (num_classes == 0) throw std::invalid_argument("model config: num_classes must be positive");
  if (stem_channels.size() != stem_strides.size() || stem_channels.empty()) {
    throw std::invalid_argument("model config: stem channels and strides must pair up");
  }
  for (auto s : stem_strides) {
    if (s == 0) throw std::invalid_argument("model config: stem stride must be positive");
  }
  if (resolution == 0 || resolution % downsampling() != 0) {
    throw ShapeError("model config: resolution " + std::to_string(resolution) +
                     " is not a multiple of the downsampling factor " + std::to_string(downsampling()));
  }
  const auto extents = stage_extents();
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    if (s.groups == 0) continue;
    if (s.channels == 0) throw std::invalid_argument("model config: stage channels must be positive");
    if (s.lfp_per_group > 0) {
      AttentionConfig a{k, s.dilation, s.channels, head_dim};
      a.validate();
      a.check_feasible(extents[i], extents[i]);
    }
    if (s.has_gfp && (s.reduction == 0 || extents[i] % s.reduction != 0)) {
      throw ShapeError("model config: stage " + std::to_string(i + 1) + " extent " +
                       std::to_string(extents[i]) + " not divisible by reduction " +
                       std::to_string(s.reduction));
    }
  }
}

std::string ModelConfig::stage_pattern() const {
  std::string out;
  for (const auto& s : stages) {
    if (s.groups == 0) continue;
    if (!out.empty()) out += ' ';
    out += s.notation();
  }
  return out;
}

ConvBnRelu::ConvBnRelu(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
    : conv(in, out, 3, rng, {stride, 1, 1}), bn(out) {
  register_module("conv", conv);
  register_module("bn", bn);
}

Tensor ConvBnRelu::forward(const Tensor& x) { return ops::relu(bn.forward(conv.forward(x))); }

PatchEmbed::PatchEmbed(std::size_t in, std::size_t out, bool ds, Rng& rng)
    : downsample(ds), conv(in, out, 1, rng), bn(out) {
  register_module("conv", conv);
  register_module("bn", bn);
}

Tensor PatchEmbed::forward(const Tensor& x) {
  Tensor h = downsample ? ops::avgpool2d(x, 2, 2) : x;
  return bn.forward(conv.forward(h));
}

Stage::Stage(std::size_t in_channels, const StageSpec& s, bool downsample, const ModelConfig& cfg, Rng& rng)
    : spec(s), embed(in_channels, s.channels, downsample, rng) {
  register_module("embed", embed);
  AttentionConfig attn{cfg.k, s.dilation, s.channels, cfg.head_dim};
  GfpOptions gfp;
  gfp.shrink = cfg.shrink;
  gfp.head_dim = cfg.head_dim;
  gfp.reduction = s.reduction;
  gfp.kan_expansion = cfg.kan_expansion;
  gfp.kan.centers = cfg.kan_centers;
  gfp.kan_projection = cfg.kan_projection;
  for (std::size_t g = 0; g < s.groups; ++g) {
    const std::string group = "group" + std::to_string(g);
    for (std::size_t j = 0; j < s.lfp_per_group; ++j) {
      blocks.push_back(std::make_unique<LfpBlock>(s.channels, attn, cfg.lffn_expansion, rng));
      register_module(group + ".lfp" + std::to_string(j), *blocks.back());
    }
    if (s.has_gfp) {
      blocks.push_back(std::make_unique<GfpBlock>(s.channels, gfp, rng));
      register_module(group + ".gfp", *blocks.back());
    }
  }
}

namespace {

std::vector<std::string> block_names(const StageSpec& s) {
  std::vector<std::string> out;
  for (std::size_t g = 0; g < s.groups; ++g) {
    const std::string group = "group" + std::to_string(g);
    for (std::size_t j = 0; j < s.lfp_per_group; ++j) out.push_back(group + ".lfp" + std::to_string(j));
    if (s.has_gfp) out.push_back(group + ".gfp");
  }
  return out;
}

}  // namespace

MedViTModel::MedViTModel(const ModelConfig& cfg, std::uint64_t seed) : config_(cfg) {
  config_.validate();
  Rng rng(seed);
  std::size_t c = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.stem_channels.size(); ++i) {
    stem.push_back(std::make_unique<ConvBnRelu>(c, cfg.stem_channels[i], cfg.stem_strides[i], rng));
    register_module("stem." + std::to_string(i), *stem.back());
    c = cfg.stem_channels[i];
  }
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    if (cfg.stages[i].groups == 0) continue;
    stages.push_back(std::make_unique<Stage>(c, cfg.stages[i], i > 0, cfg, rng));
    stage_index.push_back(i);
    register_module("stage" + std::to_string(i + 1), *stages.back());
    c = cfg.stages[i].channels;
  }
  norm = std::make_unique<nn::BatchNorm2d>(c);
  register_module("norm", *norm);
  head = std::make_unique<nn::Linear>(c, cfg.num_classes, rng);
  register_module("head", *head);
}

Tensor MedViTModel::logits(const Tensor& x, ActivationTaps* taps) {
  if (x.rank() != 4 || x.dim(1) != config_.in_channels) {
    throw ShapeError("model: expected input [B," + std::to_string(config_.in_channels) + ",H,W], got " +
                     to_string(x.shape()));
  }
  const std::size_t f = config_.downsampling();
  if (x.dim(2) % f != 0 || x.dim(3) % f != 0) {
    throw ShapeError("model: input " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                     " is not a multiple of the downsampling factor " + std::to_string(f));
  }
  auto record = [&](const std::string& name, const Tensor& t) {
    if (taps) (*taps)[name] = t;
  };
  Tensor h = x;
  for (auto& layer : stem) h = layer->forward(h);
  record("stem", h);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string prefix = "stage" + std::to_string(stage_index[s] + 1);
    h = stages[s]->embed.forward(h);
    const auto names = block_names(stages[s]->spec);
    for (std::size_t b = 0; b < stages[s]->blocks.size(); ++b) {
      h = stages[s]->blocks[b]->forward(h);
      record(prefix + "." + names[b], h);
    }
    record(prefix, h);
  }
  h = norm->forward(h);
  record("norm", h);
  return head->forward(ops::global_avg_pool(h));
}

Tensor MedViTModel::forward(const Tensor& x) { return ops::softmax(logits(x), 1); }

std::vector<std::string> MedViTModel::tap_names() const {
  std::vector<std::string> out{"stem"};
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string prefix = "stage" + std::to_string(stage_index[s] + 1);
    for (const auto& n : block_names(stages[s]->spec)) out.push_back(prefix + "." + n);
    out.push_back(prefix);
  }
  out.push_back("norm");
  return out;
}

std::string MedViTModel::block_sequence() const {
  std::string out;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (s) out += '|';
    for (const auto& b : stages[s]->blocks) out += b->kind();
  }
  return out;
}

std::string MedViTModel::stage_pattern() const {
  // Derived from the instantiated blocks rather than the config.
  std::string out;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    std::size_t lfp = 0, gfp = 0;
    for (const auto& b : stages[s]->blocks) (b->kind() == 'L' ? lfp : gfp) += 1;
    if (s) out += ' ';
    if (gfp == 0) {
      out += "C";
    } else if (lfp == 0) {
      out += "T";
    } else {
      out += "H" + std::to_string(lfp / gfp);
    }
  }
  return out;
}

std::vector<Block*> MedViTModel::all_blocks() const {
  std::vector<Block*> out;
  for (const auto& s : stages) {
    for (const auto& b : s->blocks) out.push_back(b.get());
  }
  return out;
}

std::unique_ptr<MedViTModel> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  return std::make_unique<MedViTModel>(cfg, seed);
}

std::uint64_t count_params(const MedViTModel& model) {
  std::uint64_t n = 0;
  for (const auto& p : model.parameters()) n += p.tensor.numel();
  return n;
}

std::uint64_t count_flops(const MedViTModel& model, std::size_t resolution) {
  const auto& cfg = model.config();
  std::uint64_t total = 0;
  std::size_t e = resolution;
  std::size_t c = cfg.in_channels;
  for (const auto& layer : model.stem) {
    const auto& conv = layer->conv;
    total += conv2d_macs({1, c, e, e}, conv.weight.shape(), conv.options);
    e = conv_out(e, conv.options.stride);
    c = conv.out_channels;
  }
  for (const auto& stage : model.stages) {
    if (stage->embed.downsample) e /= 2;
    total += conv2d_macs({1, c, e, e}, stage->embed.conv.weight.shape(), {});
    c = stage->spec.channels;
    for (const auto& b : stage->blocks) total += b->macs(e, e);
  }
  total += static_cast<std::uint64_t>(c) * cfg.num_classes;
  return total;
}

}  // namespace medvit
