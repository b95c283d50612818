#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "cadg/model.hpp"
#include "cadg/optim.hpp"
#include "oracle.hpp"

using namespace cadg;
using cadg::testing::bit_equal;
using cadg::testing::random_tensor;

namespace {

// 4x4 single-channel images cut into 2x2 patches: four patch tokens plus the class token.
ModelConfig tiny(std::size_t d = 8, std::size_t heads = 1, std::size_t layers = 2,
                 std::size_t classes = 3) {
  ModelConfig cfg;
  cfg.patch = PatchConfig{4, 4, 1, 2, d, heads};
  cfg.layers = layers;
  cfg.mlp_hidden = 2 * d;
  cfg.classes = classes;
  return cfg;
}

Tensor images(std::size_t b, const ModelConfig& cfg, std::mt19937_64& rng) {
  return random_tensor({b, cfg.patch.image_height, cfg.patch.image_width, cfg.patch.channels}, rng,
                       false, 0.0, 1.0);
}

std::vector<int> labels(std::size_t b, std::size_t k, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dist(0, static_cast<int>(k) - 1);
  std::vector<int> y(b);
  for (auto& v : y) v = dist(rng);
  return y;
}

}  // namespace

TEST(CadgWeights, SingleParameterSet) {
  const auto cfg = tiny(8, 2, 3, 5);
  auto w = CadgWeights::init(cfg, 1);
  const std::size_t d = 8, h = 16, n = 4, pd = 4, k = 5;
  const std::size_t embed = pd * d + d + d + (n + 1) * d;
  const std::size_t layer = 2 * d + 4 * d * d + d + 2 * d + d * h + h + h * d + d;
  EXPECT_EQ(w.parameter_count(), embed + 3 * layer + 2 * d + d * k + k);
  EXPECT_EQ(w.parameters().size(), 4 + 3 * 13 + 4);
}

TEST(CadgWeights, InitIsSeedDeterministic) {
  const auto cfg = tiny();
  auto a = CadgWeights::init(cfg, 7), b = CadgWeights::init(cfg, 7), c = CadgWeights::init(cfg, 8);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(bit_equal(pa[i], pb[i]));
    any_diff = any_diff || !bit_equal(pa[i], pc[i]);
  }
  EXPECT_TRUE(any_diff);
}

TEST(CadgWeights, CloneIsDeepAndAssignChecksNames) {
  auto w = CadgWeights::init(tiny(), 3);
  auto copy = w.clone();
  copy.classifier_b.data()[0] += 1.0;
  EXPECT_NE(copy.classifier_b[0], w.classifier_b[0]);

  auto named = w.named_parameters();
  copy.assign(named);
  EXPECT_TRUE(bit_equal(copy.classifier_b, w.classifier_b));
  named.pop_back();
  EXPECT_THROW(copy.assign(named), FormatError);
}

TEST(CadgLayer, SelfPairIdentityAtEveryLayer) {
  std::mt19937_64 rng(21);
  for (std::size_t heads : {1u, 2u, 4u}) {
    auto w = CadgWeights::init(tiny(8, heads, 3), heads);
    auto x = images(5, w.config, rng);
    std::vector<BranchStates> trace;
    run_streams(x, x.detach(), w, &trace);
    ASSERT_EQ(trace.size(), 3u);
    for (const auto& st : trace) {
      EXPECT_TRUE(bit_equal(st.c1, st.s1));
      EXPECT_TRUE(bit_equal(st.c2, st.s2));
      EXPECT_TRUE(bit_equal(st.s1, st.s2));
    }
  }
}

TEST(CadgLayer, SwapSymmetry) {
  std::mt19937_64 rng(22);
  auto w = CadgWeights::init(tiny(8, 2, 2), 4);
  auto x1 = images(3, w.config, rng), x2 = images(3, w.config, rng);
  std::vector<BranchStates> a, b;
  run_streams(x1, x2, w, &a);
  run_streams(x2, x1, w, &b);
  for (std::size_t n = 0; n < a.size(); ++n) {
    EXPECT_TRUE(bit_equal(a[n].s1, b[n].s2));
    EXPECT_TRUE(bit_equal(a[n].s2, b[n].s1));
    EXPECT_TRUE(bit_equal(a[n].c1, b[n].c2));
    EXPECT_TRUE(bit_equal(a[n].c2, b[n].c1));
  }
  auto y = labels(3, 3, rng);
  EXPECT_EQ(forward(x1, x2, y, w).loss_total.item(), forward(x2, x1, y, w).loss_total.item());
}

// The class token is image-independent before the first layer, so with one
// layer c1's class row sees exactly what s2's does (and c2's what s1's does).
// Cross branches only contribute new readouts from the second layer on.
TEST(CadgLayer, SingleLayerCrossReadoutMatchesOtherSelfBranch) {
  std::mt19937_64 rng(35);
  auto x1 = images(4, tiny(), rng), x2 = images(4, tiny(), rng);
  const auto one = forward_logits(x1, x2, CadgWeights::init(tiny(8, 2, 1), 18));
  EXPECT_LT(cadg::testing::max_abs_diff(one.logits_c1, one.logits_s2), 1e-12);
  EXPECT_LT(cadg::testing::max_abs_diff(one.logits_c2, one.logits_s1), 1e-12);
  const auto two = forward_logits(x1, x2, CadgWeights::init(tiny(8, 2, 2), 18));
  EXPECT_GT(cadg::testing::max_abs_diff(two.logits_c1, two.logits_s2), 1e-6);
}

TEST(CadgLayer, ResidualOnlyPathKeepsEmbeddings) {
  std::mt19937_64 rng(23);
  auto w = CadgWeights::init(tiny(8, 2, 3), 5);
  for (auto& lw : w.layers) {
    for (Tensor* t : {&lw.attn.w_out, &lw.attn.b_out, &lw.mlp_w2, &lw.mlp_b2}) {
      std::fill(t->data().begin(), t->data().end(), 0.0);
    }
  }
  auto x1 = images(2, w.config, rng), x2 = images(2, w.config, rng);
  std::vector<BranchStates> trace;
  run_streams(x1, x2, w, &trace);
  const auto e1 = embed_images(x1, w), e2 = embed_images(x2, w);
  for (const auto& st : trace) {
    EXPECT_TRUE(bit_equal(st.s1, e1));
    EXPECT_TRUE(bit_equal(st.c1, e1));
    EXPECT_TRUE(bit_equal(st.s2, e2));
    EXPECT_TRUE(bit_equal(st.c2, e2));
  }
}

TEST(CadgLayer, Errors) {
  auto w = CadgWeights::init(tiny(), 6);
  std::mt19937_64 rng(24);
  auto e = embed_images(images(2, w.config, rng), w);
  BranchStates st{e, e, e, e, {}, {}};
  EXPECT_NO_THROW(cadg_layer(1, st, w));
  EXPECT_THROW(cadg_layer(2, st, w), std::out_of_range);
  st.c2 = Tensor();
  EXPECT_THROW(cadg_layer(0, st, w), std::logic_error);
}

TEST(Forward, SelectingTheFirstLossGivesSingleStreamLoss) {
  std::mt19937_64 rng(25);
  auto w = CadgWeights::init(tiny(), 7);
  w.lambda = {1, 0, 0, 0};
  auto x1 = images(4, w.config, rng), x2 = images(4, w.config, rng);
  auto y = labels(4, 3, rng);
  const auto out = forward(x1, x2, y, w);
  EXPECT_EQ(out.loss_total.item(), cross_entropy(self_logits(x1, w), y).item());
  EXPECT_TRUE(bit_equal(out.logits_s1, self_logits(x1, w)));
}

TEST(Forward, LossCompositionAndSelfPairLosses) {
  std::mt19937_64 rng(26);
  auto w = CadgWeights::init(tiny(8, 2), 8);
  w.lambda = {0.1, 0.2, 0.3, 0.4};
  auto x1 = images(6, w.config, rng), x2 = images(6, w.config, rng);
  auto y = labels(6, 3, rng);
  auto out = forward(x1, x2, y, w);
  const double expected = 0.1 * out.loss_s1.item() + 0.2 * out.loss_s2.item() +
                          0.3 * out.loss_c1.item() + 0.4 * out.loss_c2.item();
  EXPECT_NEAR(out.loss_total.item(), expected, 1e-15 * std::abs(expected));

  w.lambda = {0.3, 0.2, 0.3, 0.2};
  out = forward(x1, x1.detach(), y, w);
  EXPECT_EQ(out.loss_c1.item(), out.loss_s1.item());
  EXPECT_EQ(out.loss_c2.item(), out.loss_s2.item());
}

TEST(Forward, Errors) {
  std::mt19937_64 rng(27);
  auto w = CadgWeights::init(tiny(), 9);
  auto x = images(3, w.config, rng);
  std::vector<int> y{0, 1, 2};
  EXPECT_THROW(forward(x, images(2, w.config, rng), y, w), DimensionError);
  EXPECT_THROW(forward(x, x, std::vector<int>{0, 1}, w), DimensionError);
  EXPECT_THROW(forward(x, x, std::vector<int>{0, 1, 3}, w), std::out_of_range);
  EXPECT_THROW(forward(random_tensor({3, 8, 8, 1}, rng), x, y, w), DimensionError);
  w.lambda.cross1 = -0.5;
  EXPECT_THROW(forward(x, x, y, w), ConfigError);
}

TEST(Forward, FullParameterGradient) {
  std::mt19937_64 rng(28);
  for (std::size_t heads : {1u, 2u}) {
    auto w = CadgWeights::init(tiny(8, heads, 2), 10 + heads);
    w.lambda = {0.4, 0.3, 0.2, 0.1};
    auto x1 = images(2, w.config, rng), x2 = images(2, w.config, rng);
    auto y = labels(2, 3, rng);
    EXPECT_LT(cadg::testing::gradient_error(w.parameters(),
                                            [&] { return forward(x1, x2, y, w).loss_total; }),
              1e-4);
  }
}

TEST(Forward, OneStepThroughCrossBranchesMovesSelfBranches) {
  std::mt19937_64 rng(29);
  auto w = CadgWeights::init(tiny(8, 2), 12);
  w.lambda = {0, 0, 1, 0};
  auto x1 = images(4, w.config, rng), x2 = images(4, w.config, rng);
  auto y = labels(4, 3, rng);
  const auto before = infer_logits(x1, w);
  auto params = w.parameters();
  auto opt = make_optimizer(params, 0.1, 0.0, 0.0);
  backward(forward(x1, x2, y, w).loss_total);
  sgd_step(params, opt);
  const auto after = infer_logits(x1, w);
  EXPECT_FALSE(bit_equal(before, after));
  const auto out = forward_logits(x1, x1.detach(), w);
  EXPECT_TRUE(bit_equal(out.logits_c1, after));
}

TEST(Infer, SelfAndSelfPairAgree) {
  std::mt19937_64 rng(30);
  auto w = CadgWeights::init(tiny(8, 2, 3, 4), 13);
  auto x = images(64, w.config, rng);
  const auto a = infer_logits(x, w, InferMode::self);
  const auto b = infer_logits(x, w, InferMode::self_pair);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15 * (1 + std::abs(a[i])));
  EXPECT_EQ(infer(x, w, InferMode::self), infer(x, w, InferMode::self_pair));
  EXPECT_FALSE(infer_logits(x, w).requires_grad());
}

TEST(Infer, RandomWeightsScoreChance) {
  std::mt19937_64 rng(31);
  const std::size_t k = 4, n = 2000;
  auto w = CadgWeights::init(tiny(8, 2, 2, k), 14);
  const auto pred = infer(images(n, w.config, rng), w);
  const auto y = labels(n, k, rng);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) hits += pred[i] == y[i];
  EXPECT_NEAR(static_cast<double>(hits) / n, 1.0 / k, 0.05);
}

TEST(Infer, OverfitsOneBatch) {
  std::mt19937_64 rng(32);
  auto w = CadgWeights::init(tiny(16, 2, 2, 4), 15);
  auto x = images(8, w.config, rng);
  const std::vector<int> y{0, 1, 2, 3, 3, 2, 1, 0};
  auto params = w.parameters();
  auto opt = make_optimizer(params, 0.05, 0.9, 0.0);
  double loss = 0;
  for (int step = 0; step < 300; ++step) {
    auto out = forward(x, x.detach(), y, w);
    loss = out.loss_total.item();
    backward(out.loss_total);
    sgd_step(params, opt);
    zero_grads(params);
  }
  EXPECT_LT(loss, 0.05);
  EXPECT_EQ(infer(x, w), y);
}

TEST(AlignmentMap, RowsSumToOneAndSwapRoles) {
  std::mt19937_64 rng(33);
  auto w = CadgWeights::init(tiny(8, 2, 3), 16);
  auto x1 = images(3, w.config, rng), x2 = images(3, w.config, rng);
  for (std::size_t layer = 0; layer < 3; ++layer) {
    auto a = alignment_map(x1, x2, w, layer);
    auto b = alignment_map(x2, x1, w, layer);
    ASSERT_EQ(a.cross1.shape(), (Shape{3, 2, 5, 5}));
    for (const Tensor* m : {&a.cross1, &a.cross2}) {
      for (std::size_t r = 0; r < m->size() / 5; ++r) {
        double total = 0;
        for (std::size_t j = 0; j < 5; ++j) total += (*m)[r * 5 + j];
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
    }
    EXPECT_TRUE(bit_equal(a.cross1, b.cross2));
    EXPECT_TRUE(bit_equal(a.cross2, b.cross1));
  }
  EXPECT_THROW(alignment_map(x1, x2, w, 3), std::out_of_range);
}

TEST(AlignmentMap, DominantOrthogonalKeysGiveDiagonalMap) {
  std::mt19937_64 rng(34);
  const std::size_t d = 16;
  auto w = CadgWeights::init(tiny(d, 1, 1), 17);
  // Nearly one-hot tokens: each position owns one coordinate, patch content is a small perturbation.
  for (auto& v : w.embed.patch_proj.data()) v *= 0.01;
  std::fill(w.embed.position.data().begin(), w.embed.position.data().end(), 0.0);
  for (std::size_t t = 0; t < 5; ++t) w.embed.position.data()[t * d + t] = 10.0;
  std::fill(w.embed.class_token.data().begin(), w.embed.class_token.data().end(), 0.0);
  for (Tensor* m : {&w.layers[0].attn.w_q, &w.layers[0].attn.w_k}) {
    std::fill(m->data().begin(), m->data().end(), 0.0);
    for (std::size_t i = 0; i < d; ++i) m->data()[i * d + i] = 2.0;
  }
  auto x = images(2, w.config, rng);
  auto maps = alignment_map(x, x.detach(), w, 0);
  for (const Tensor* m : {&maps.cross1, &maps.cross2}) {
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t i = 0; i < 5; ++i) EXPECT_GT((*m)[(b * 5 + i) * 5 + i], 0.99);
    }
  }
}

TEST(AlignmentMap, CsvLayout) {
  Tensor map(Shape{1, 2, 2, 3}, {0.1, 0.2, 0.7, 0.3, 0.3, 0.4, 1, 0, 0, 0.5, 0.25, 0.25});
  std::ostringstream os;
  write_alignment_csv(os, map, 2);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "layer,head,query_index,key_index,weight");
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 12u);
  EXPECT_NE(os.str().find("2,1,1,2,0.25\n"), std::string::npos);
  EXPECT_THROW(write_alignment_csv(os, map, 0, 1), std::out_of_range);
}
