#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "helpers.hpp"
#include "medvit/blocks.hpp"
#include "medvit/grad_check.hpp"
#include "medvit/model.hpp"

using namespace medvit;
using testing_support::max_abs_diff;
using testing_support::projection_loss;
using testing_support::random_tensor;

namespace {

std::size_t enumerate(const nn::Module& m) {
  std::size_t n = 0;
  for (const auto& p : m.parameters()) n += p.tensor.numel();
  return n;
}

GradCheckOptions check_opts(std::size_t probes = 0) {
  GradCheckOptions o;
  o.tolerance = 1e-4;
  o.max_probes = probes;
  o.seed = 99;
  return o;
}

ModelConfig tiny_config() {
  ModelConfig cfg = ModelConfig::variant("micro");
  cfg.num_classes = 3;
  return cfg;
}

}  // namespace

TEST(Lffn, ShapeAndClosedFormParameters) {
  Rng rng(1);
  for (std::size_t c : {4u, 6u, 16u}) {
    Lffn f(c, 3, rng);
    const std::size_t h = 3 * c;
    EXPECT_EQ(f.num_parameters(), c * h + h + h * 9 + h + h * c + c + 2 * h + 2 * h);
    EXPECT_EQ(f.num_parameters(), enumerate(f));
    Tensor x = random_tensor({2, c, 3, 5}, rng);
    EXPECT_EQ(f.forward(x).shape(), x.shape());
  }
}

TEST(Lffn, GradientCheck) {
  Rng rng(2);
  Lffn f(3, 3, rng);
  Tensor x = random_tensor({2, 3, 3, 3}, rng);
  auto loss = projection_loss(x.shape(), 3);
  auto params = f.parameters();
  params.push_back({"x", x});
  const auto r = grad_check([&] { return loss(f.forward(x)); }, params, check_opts(200));
  EXPECT_TRUE(r.passed()) << r.summary();
}

TEST(LfpBlock, ZeroBranchesGiveIdentity) {
  Rng rng(4);
  for (std::size_t dil : {1u, 2u}) {
    LfpBlock block(16, {3, dil, 16, 8}, 3, rng);
    block.zero_branches();
    Tensor z = random_tensor({2, 16, 6, 7}, rng, -3, 3);
    const Tensor out = block.forward(z);
    EXPECT_EQ(out.shape(), z.shape());
    EXPECT_EQ(max_abs_diff(out.values(), z.values()), 0.0);
  }
}

TEST(LfpBlock, ParameterCountClosedForm) {
  Rng rng(5);
  const std::size_t c = 16, heads = 2, k = 3;
  LfpBlock block(c, {k, 1, c, 8}, 3, rng);
  const std::size_t h = 3 * c;
  const std::size_t lffn = c * h + h + 9 * h + h + h * c + c + 4 * h;
  const std::size_t attn = c * 3 * c + 3 * c + c * c + c + heads * (2 * k - 1) * (2 * k - 1);
  EXPECT_EQ(block.num_parameters(), 4 * c + attn + lffn);
}

TEST(LfpBlock, InfeasibleMapThrows) {
  Rng rng(6);
  LfpBlock block(8, {3, 3, 8, 4}, 3, rng);
  EXPECT_THROW(block.forward(Tensor({2, 8, 8, 8}, 0.0)), FeasibilityError);
  EXPECT_THROW(block.forward(Tensor({2, 4, 9, 9}, 0.0)), ShapeError);
}

TEST(LfpBlock, GradientCheck) {
  Rng rng(7);
  LfpBlock block(8, {3, 1, 8, 4}, 2, rng);
  for (auto& v : block.attn.rel_bias.values()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  Tensor z = random_tensor({2, 8, 3, 4}, rng);
  auto loss = projection_loss(z.shape(), 8);
  auto params = block.parameters();
  params.push_back({"z", z});
  const auto r = grad_check([&] { return loss(block.forward(z)); }, params, check_opts(300));
  EXPECT_TRUE(r.passed()) << r.summary();
}

TEST(GfpBlock, BranchWidths) {
  EXPECT_EQ(gfp_attention_width(128, 0.75, 32), 96u);
  EXPECT_EQ(gfp_attention_width(192, 0.75, 32), 160u);
  EXPECT_EQ(gfp_attention_width(256, 0.75, 32), 192u);
  EXPECT_EQ(gfp_attention_width(384, 0.75, 32), 288u);
  EXPECT_EQ(gfp_attention_width(64, 0.75, 32), 32u);
  EXPECT_THROW(gfp_attention_width(100, 0.75, 32), ShapeError);
  EXPECT_THROW(gfp_attention_width(32, 0.75, 32), ShapeError);
  EXPECT_THROW(gfp_attention_width(128, 1.0, 32), ShapeError);
}

TEST(GfpBlock, ConservesChannels) {
  Rng rng(9);
  GfpOptions opts;
  opts.reduction = 2;
  for (std::size_t c : {128u, 192u, 256u}) {
    GfpBlock block(c, opts, rng);
    EXPECT_EQ(block.attn_width + block.conv_width, c);
    Tensor z = random_tensor({2, c, 4, 4}, rng);
    EXPECT_EQ(block.forward(z).shape(), z.shape());
  }
  GfpBlock block(128, opts, rng);
  EXPECT_EQ(block.attn_width, 96u);
  EXPECT_EQ(block.conv_width, 32u);
  EXPECT_THROW(block.forward(Tensor({2, 96, 4, 4}, 0.0)), ShapeError);
}

TEST(GfpBlock, ZeroBranchesGiveIdentity) {
  Rng rng(10);
  GfpOptions opts;
  opts.head_dim = 8;
  opts.reduction = 2;
  GfpBlock block(32, opts, rng);
  block.zero_branches();
  Tensor z = random_tensor({3, 32, 4, 6}, rng, -2, 2);
  EXPECT_EQ(max_abs_diff(block.forward(z).values(), z.values()), 0.0);
}

TEST(GfpBlock, GradientCheck) {
  Rng rng(11);
  GfpOptions opts;
  opts.head_dim = 4;
  opts.reduction = 2;
  opts.kan.centers = 4;
  GfpBlock block(16, opts, rng);
  Tensor z = random_tensor({2, 16, 4, 4}, rng);
  auto loss = projection_loss(z.shape(), 12);
  auto params = block.parameters();
  params.push_back({"z", z});
  const auto r = grad_check([&] { return loss(block.forward(z)); }, params, check_opts(300));
  EXPECT_TRUE(r.passed()) << r.summary();
}

TEST(ModelConfig, VariantChannels) {
  const std::vector<std::pair<std::string, std::vector<std::size_t>>> expect{
      {"T", {96, 128, 192, 384}}, {"S", {96, 128, 256, 512}}, {"B", {96, 192, 384, 768}}, {"L", {96, 256, 512, 1024}}};
  for (const auto& [name, channels] : expect) {
    const auto cfg = ModelConfig::variant(name);
    ASSERT_EQ(cfg.stages.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(cfg.stages[i].channels, channels[i]) << name;
    EXPECT_EQ(cfg.stages[0].dilation, 8u);
    EXPECT_EQ(cfg.stages[3].dilation, 1u);
    EXPECT_NO_THROW(cfg.validate());
  }
  EXPECT_THROW(ModelConfig::variant("XL"), std::invalid_argument);
}

TEST(ModelConfig, StagePatternsAndNotation) {
  const auto t = ModelConfig::variant("T");
  EXPECT_EQ(t.stages[0].pattern(), "(LFP×2)×1");
  EXPECT_EQ(t.stages[2].pattern(), "(LFP×2+GFP×1)×2");
  EXPECT_EQ(t.stages[3].pattern(), "(GFP×1)×1");
  EXPECT_EQ(t.stage_pattern(), "C H1 H2 T");
  EXPECT_EQ(ModelConfig::variant("S").stages[3].pattern(), "(GFP×1)×2");
  StageSpec empty;
  empty.groups = 0;
  EXPECT_EQ(empty.notation(), "-");
  EXPECT_EQ(empty.block_kinds(), "");
}

TEST(ModelConfig, ValidationErrors) {
  auto cfg = tiny_config();
  cfg.num_classes = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.resolution = 30;
  EXPECT_THROW(cfg.validate(), ShapeError);
  cfg = tiny_config();
  cfg.stages[1].dilation = 8;
  EXPECT_THROW(cfg.validate(), FeasibilityError);
  cfg = ModelConfig::variant("T");
  cfg.stages[3].lfp_per_group = 1;
  cfg.stages[3].dilation = 4;
  EXPECT_THROW(cfg.validate(), FeasibilityError);
}

TEST(Model, BlockSequenceMatchesConfig) {
  // Built at a small resolution: the sequence depends only on the stage plan.
  for (const std::string name : {"T", "S", "B"}) {
    auto cfg = ModelConfig::variant(name);
    std::string expect;
    for (const auto& s : cfg.stages) expect += (expect.empty() ? "" : "|") + s.block_kinds();
    EXPECT_EQ(expect, name == "T" ? "LL|LG|LLGLLG|G" : "LL|LG|LLGLLG|GG");
    auto model = build_model(cfg);
    EXPECT_EQ(model->block_sequence(), expect);
    EXPECT_EQ(model->stage_pattern(), cfg.stage_pattern());
    for (std::size_t s = 0; s < model->stages.size(); ++s) {
      EXPECT_EQ(model->stages[s]->blocks.size(), cfg.stages[s].block_kinds().size());
    }
  }
}

TEST(Model, ZeroBranchesMakeEveryBlockIdentity) {
  auto model = build_model(tiny_config(), 4);
  Rng rng(13);
  for (Block* b : model->all_blocks()) b->zero_branches();
  for (const auto& stage : model->stages) {
    const std::size_t c = stage->spec.channels;
    for (const auto& b : stage->blocks) {
      Tensor z = random_tensor({2, c, 8, 8}, rng, -2, 2);
      EXPECT_EQ(max_abs_diff(b->forward(z).values(), z.values()), 0.0);
    }
  }
}

TEST(Model, DegenerateConfigIsStemAndHead) {
  auto cfg = tiny_config();
  for (auto& s : cfg.stages) s.groups = 0;
  auto model = build_model(cfg);
  EXPECT_TRUE(model->stages.empty());
  EXPECT_EQ(model->block_sequence(), "");
  Rng rng(14);
  const Tensor p = model->forward(random_tensor({2, 3, 32, 32}, rng, 0, 1));
  EXPECT_EQ(p.shape(), (Shape{2, 3}));
}

TEST(Model, ProbabilitiesAndEvalDeterminism) {
  auto model = build_model(tiny_config(), 5);
  Rng rng(15);
  Tensor x = random_tensor({4, 3, 32, 32}, rng, 0, 1);
  {
    const Tensor p = model->forward(x);
    for (std::size_t b = 0; b < 4; ++b) {
      EXPECT_NEAR(p.at({b, 0}) + p.at({b, 1}) + p.at({b, 2}), 1.0, 1e-12);
    }
  }
  model->set_training(false);
  NoGradGuard guard;
  const Tensor a = model->forward(x);
  const Tensor b = model->forward(x);
  EXPECT_EQ(max_abs_diff(a.values(), b.values()), 0.0);

  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Tensor xp({4, 3, 32, 32}, 0.0);
  const std::size_t per = 3 * 32 * 32;
  for (std::size_t i = 0; i < 4; ++i) {
    std::copy_n(x.data() + perm[i] * per, per, xp.data() + i * per);
  }
  const Tensor c = model->forward(xp);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(c.at({i, k}), a.at({perm[i], k}), 1e-12);
  }
}

TEST(Model, TapsCoverEveryNamedActivation) {
  auto model = build_model(tiny_config(), 6);
  Rng rng(16);
  ActivationTaps taps;
  model->logits(random_tensor({2, 3, 32, 32}, rng, 0, 1), &taps);
  for (const auto& name : model->tap_names()) EXPECT_TRUE(taps.count(name)) << name;
  EXPECT_EQ(model->tap_names().front(), "stem");
  EXPECT_EQ(model->tap_names().back(), "norm");
}

TEST(Model, SameSeedSameWeights) {
  auto a = build_model(tiny_config(), 21);
  auto b = build_model(tiny_config(), 21);
  auto c = build_model(tiny_config(), 22);
  const auto pa = a->parameters(), pb = b->parameters(), pc = c->parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_EQ(max_abs_diff(pa[i].tensor.values(), pb[i].tensor.values()), 0.0);
    differs |= max_abs_diff(pa[i].tensor.values(), pc[i].tensor.values()) > 0.0;
  }
  EXPECT_TRUE(differs);
}

TEST(Counting, ParamsAreRegistryWalk) {
  Rng rng(17);
  nn::Conv2d conv(2, 3, 1, rng);
  EXPECT_EQ(conv.num_parameters(), 9u);
  auto model = build_model(tiny_config());
  EXPECT_EQ(count_params(*model), enumerate(*model));
  std::size_t blocks = 0;
  for (Block* b : model->all_blocks()) blocks += b->num_parameters();
  EXPECT_LT(blocks, count_params(*model));
}

TEST(Counting, ConvMacs) {
  EXPECT_EQ(conv2d_macs({1, 1, 4, 4}, {1, 1, 3, 3}, {1, 1, 1}), 144u);
  EXPECT_EQ(conv2d_macs({1, 1, 6, 6}, {1, 1, 3, 3}, {1, 0, 1}), 144u);
  EXPECT_EQ(conv2d_macs({1, 8, 8, 8}, {8, 1, 3, 3}, {1, 1, 8}), 8u * 9 * 64);
  EXPECT_EQ(conv2d_macs({1, 4, 8, 8}, {6, 4, 1, 1}, {2, 0, 1}), 6u * 4 * 16);
}

TEST(Counting, BlockMacsLinearInTokens) {
  Rng rng(18);
  LfpBlock lfp(16, {3, 2, 16, 8}, 3, rng);
  EXPECT_EQ(lfp.macs(8, 16), 2 * lfp.macs(8, 8));
  EXPECT_EQ(lfp.macs(12, 12), 4 * lfp.macs(6, 6));
  const std::uint64_t n = 64, c = 16;
  EXPECT_EQ(lfp.macs(8, 8), 4 * n * c * c + 2 * n * c * 9 + lfp.lffn.macs(8, 8));
  EXPECT_EQ(lfp.lffn.macs(8, 8), n * (2 * c * 48 + 9 * 48));
}

TEST(Counting, FlopsSumStemBlocksAndHead) {
  auto model = build_model(tiny_config());
  const auto& cfg = model->config();
  std::uint64_t blocks = 0;
  const auto extents = cfg.stage_extents();
  for (std::size_t s = 0; s < model->stages.size(); ++s) {
    const std::size_t e = extents[model->stage_index[s]];
    for (const auto& b : model->stages[s]->blocks) blocks += b->macs(e, e);
  }
  const std::uint64_t total = count_flops(*model, 32);
  EXPECT_GT(total, blocks);
  EXPECT_EQ(count_flops(*model, 32), total);
}

TEST(Model, EndToEndGradientCheck) {
  auto cfg = tiny_config();
  cfg.num_classes = 2;
  auto model = build_model(cfg, 7);
  Rng rng(19);
  Tensor x = random_tensor({2, 3, 32, 32}, rng, 0, 1);
  const std::vector<int> labels{0, 1};
  auto params = model->parameters();
  const auto r = grad_check([&] { return ops::cross_entropy(model->logits(x), labels); }, params, check_opts(200));
  EXPECT_TRUE(r.passed()) << r.summary();
  EXPECT_GE(r.probes - r.excluded, 190u);
}
