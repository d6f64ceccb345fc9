#include <cstring>
#include <set>
#include <sstream>

#include "test_util.hpp"

namespace metaloop {
namespace {

using testing::random_tensor;

BackboneConfig small_convnet() {
  BackboneConfig c;
  c.depth = 2;
  c.base_channels = 3;
  c.input = {1, 8, 8};
  c.num_classes = 3;
  return c;
}

BackboneConfig small_resnet(bool disconnect) {
  BackboneConfig c;
  c.family = Family::miniresnet;
  c.depth = 2;
  c.base_channels = 2;
  c.input = {3, 8, 8};
  c.num_classes = 3;
  c.disconnect_last_skip = disconnect;
  return c;
}

TEST(Build, SameSeedIsBitIdentical) {
  const auto cfg = small_convnet();
  EXPECT_TRUE(bit_identical(build<float>(cfg, 5), build<float>(cfg, 5)));
  EXPECT_FALSE(bit_identical(build<float>(cfg, 5), build<float>(cfg, 6)));
}

TEST(Build, HeadShapeFollowsSpatialArithmetic) {
  BackboneConfig c;
  c.depth = 4;
  c.base_channels = 64;
  c.input = {3, 84, 84};
  c.num_classes = 5;
  EXPECT_EQ(feature_dim(c), 1600u);  // 84 -> 42 -> 21 -> 10 -> 5
  const auto p = build<float>(c, 1);
  EXPECT_EQ(p.at("head.weight").shape(), (Shape{5, 1600}));
  EXPECT_EQ(p.at("head.bias").shape(), (Shape{5}));
}

TEST(Build, RejectsInputTooSmallForDepth) {
  BackboneConfig c;
  c.depth = 4;
  c.input = {3, 8, 8};
  EXPECT_THROW(build<float>(c, 1), std::invalid_argument);
}

TEST(Build, DisconnectionRemovesOnlyTheLastSkip) {
  const auto specs = layer_specs(small_resnet(true));
  ASSERT_EQ(specs.size(), 3u);
  EXPECT_TRUE(specs[0].skip_enabled);
  EXPECT_FALSE(specs[1].skip_enabled);
  EXPECT_EQ(specs[2].kind, LayerKind::linear_head);
  for (const auto& s : layer_specs(small_resnet(false))) {
    if (s.kind == LayerKind::residual_block) EXPECT_TRUE(s.skip_enabled);
  }
}

TEST(Build, InitializationFollowsDeclaredScheme) {
  BackboneConfig c;
  c.depth = 2;
  c.base_channels = 16;
  c.input = {3, 16, 16};
  const auto p = build<double>(c, 3);
  for (const auto& e : p.entries()) {
    const auto v = e.value.values();
    if (e.name.ends_with(".bias") || e.name.ends_with(".beta")) {
      for (double x : v) EXPECT_EQ(x, 0.0) << e.name;
    } else if (e.name.ends_with(".gamma")) {
      for (double x : v) EXPECT_EQ(x, 1.0) << e.name;
    } else if (e.name == "head.weight") {
      const double bound = 1.0 / std::sqrt(double(feature_dim(c)));
      for (double x : v) EXPECT_LE(std::abs(x), bound);
    } else {
      const std::size_t fan_in = e.value.dim(1) * e.value.dim(2) * e.value.dim(3);
      double ss = 0;
      for (double x : v) ss += x * x;
      const double sd = std::sqrt(ss / double(v.size()));
      EXPECT_NEAR(sd, std::sqrt(2.0 / double(fan_in)), 0.25 * std::sqrt(2.0 / double(fan_in))) << e.name;
    }
  }
}

TEST(Build, GroupsPartitionAllParameters) {
  const auto p = build<float>(small_resnet(false), 1);
  EXPECT_EQ(p.group_names(), (std::vector<std::string>{"block1", "block2", "head"}));
  EXPECT_EQ(p.body_groups(), (std::vector<std::string>{"block1", "block2"}));
  std::size_t total = 0;
  for (const auto& g : p.group_names()) {
    for (const auto& e : p.entries()) total += e.group == g;
  }
  EXPECT_EQ(total, p.size());
  std::set<std::string> names;
  for (const auto& e : p.entries()) EXPECT_TRUE(names.insert(e.name).second) << e.name;
}

TEST(Forward, ZeroHeadGivesUniformSoftmax) {
  const auto cfg = small_convnet();
  auto p = build<double>(cfg, 2);
  p = p.with_value("head.weight", Tensor<double>::zeros(p.at("head.weight").shape()));
  const auto out = forward(p, random_tensor(Shape{4, 1, 8, 8}, 3));
  const auto s = softmax(out.logits);
  for (double v : s.values()) EXPECT_NEAR(v, 1.0 / 3, 1e-15);
}

TEST(Forward, CaptureDimensionsAndOrder) {
  const auto cfg = small_convnet();
  const auto p = build<float>(cfg, 2);
  const auto x = random_tensor<float>(Shape{4, 1, 8, 8}, 3);
  const auto out = forward(p, x, {"conv2", "conv1"});
  ASSERT_EQ(out.captured.size(), 2u);
  EXPECT_EQ(out.captured[0].first, "conv1");
  EXPECT_EQ(out.captured[1].first, "conv2");
  EXPECT_EQ(out.representation("conv1").shape(), (Shape{4, 3 * 4 * 4}));
  EXPECT_EQ(out.representation("conv2").shape(), (Shape{4, feature_dim(cfg)}));
  EXPECT_THROW(forward(p, x, {"conv9"}), std::invalid_argument);
  try {
    forward(p, x, {"conv9"});
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("conv1, conv2"), std::string::npos) << e.what();
  }
}

TEST(Forward, CaptureDoesNotPerturbLogits) {
  const auto cfg = small_resnet(false);
  const auto p = build<float>(cfg, 2);
  const auto x = random_tensor<float>(Shape{4, 3, 8, 8}, 3);
  const auto a = forward(p, x).logits.to_vector();
  const auto b = forward(p, x, capture_names(cfg)).logits.to_vector();
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(float)));
}

TEST(Forward, MatchesComposedPrimitives) {
  BackboneConfig cfg = small_convnet();
  cfg.num_classes = 2;
  const auto p = build<double>(cfg, 9);
  const auto x = random_tensor(Shape{3, 1, 8, 8}, 4);
  auto module = [&](const Tensor<double>& in, const std::string& n) {
    auto h = conv2d(in, p.at(n + ".weight"), 1, 1);
    h = bias_add(h, p.at(n + ".bias"));
    h = batch_norm(h, p.at(n + ".gamma"), p.at(n + ".beta"), 1e-5);
    return max_pool2d(relu(h), 2);
  };
  const auto f = flatten(module(module(x, "conv1"), "conv2"));
  const auto expect = add(matmul(f, p.at("head.weight"), false, true),
                          Tensor<double>(Shape{3, 2}, {p.at("head.bias").at(0), p.at("head.bias").at(1),
                                                       p.at("head.bias").at(0), p.at("head.bias").at(1),
                                                       p.at("head.bias").at(0), p.at("head.bias").at(1)}));
  const auto got = forward(p, x).logits;
  ASSERT_EQ(got.shape(), (Shape{3, 2}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(got.at(i), expect.at(i), 1e-12);
}

TEST(Forward, ResNetWithoutSkipsEqualsPlainStack) {
  auto cfg = small_resnet(false);
  cfg.depth = 1;
  cfg.disconnect_last_skip = true;  // the only block loses its skip
  const auto p = build<float>(cfg, 4);
  const auto x = random_tensor<float>(Shape{3, 3, 8, 8}, 5);
  auto h = x;
  for (int j = 1; j <= 3; ++j) {
    const auto c = "block1.conv" + std::to_string(j);
    const auto b = "block1.bn" + std::to_string(j);
    h = leaky_relu(batch_norm(bias_add(conv2d(h, p.at(c + ".weight"), 1, 1), p.at(c + ".bias")),
                              p.at(b + ".gamma"), p.at(b + ".beta"), 1e-5f),
                   0.01f);
  }
  const auto plain = linear(flatten(max_pool2d(h, 2)), p.at("head.weight"), p.at("head.bias")).to_vector();
  const auto got = forward(p, x).logits.to_vector();
  ASSERT_EQ(got.size(), plain.size());
  EXPECT_EQ(0, std::memcmp(got.data(), plain.data(), got.size() * sizeof(float)));
}

TEST(Forward, ResNetSkipUsesProjectionOnChannelChange) {
  const auto p = build<float>(small_resnet(false), 1);
  EXPECT_EQ(p.at("block1.skip.weight").shape(), (Shape{2, 3, 1, 1}));
  EXPECT_EQ(p.at("block2.skip.weight").shape(), (Shape{4, 2, 1, 1}));
  EXPECT_THROW(build<float>(small_resnet(true), 1).at("block2.skip.weight"), std::out_of_range);

  auto same = small_resnet(false);
  same.depth = 1;
  same.base_channels = 3;  // 3 -> 3: identity skip, no projection
  const auto q = build<double>(same, 1);
  EXPECT_THROW(q.at("block1.skip.weight"), std::out_of_range);
  const auto x = random_tensor(Shape{2, 3, 8, 8}, 2);
  auto r = x;
  for (int j = 1; j <= 3; ++j) {
    const auto c = "block1.conv" + std::to_string(j);
    const auto b = "block1.bn" + std::to_string(j);
    r = leaky_relu(batch_norm(bias_add(conv2d(r, q.at(c + ".weight"), 1, 1), q.at(c + ".bias")),
                              q.at(b + ".gamma"), q.at(b + ".beta"), 1e-5),
                   0.01);
  }
  const auto expect = linear(flatten(max_pool2d(add(r, x), 2)), q.at("head.weight"), q.at("head.bias"));
  const auto got = forward(q, x).logits;
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got.at(i), expect.at(i), 1e-12);
}

TEST(Forward, RejectsWrongInputShape) {
  const auto p = build<float>(small_convnet(), 1);
  EXPECT_THROW(forward(p, random_tensor<float>(Shape{2, 3, 8, 8}, 1)), ShapeError);
}

Tensor<double> gram(const Tensor<double>& w) { return matmul(w, w, false, true); }

TEST(Head, OrthonormalizedRowsFormIdentityGram) {
  BackboneConfig c;
  c.depth = 2;
  c.base_channels = 4;
  c.input = {1, 16, 16};
  c.num_classes = 5;  // d = 4 * 4 * 4 = 64
  const auto p = orthonormalize_head(build<double>(c, 3));
  const auto g = gram(p.at("head.weight"));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(g.at(i * 5 + j), i == j ? 1.0 : 0.0, 1e-6);
  for (double b : p.at("head.bias").values()) EXPECT_EQ(b, 0.0);
}

TEST(Head, StandardBasisIsUnchanged) {
  BackboneConfig c = small_convnet();  // d = 3 * 2 * 2 = 12, n = 3
  auto p = build<double>(c, 1);
  std::vector<double> basis(3 * 12, 0.0);
  for (std::size_t i = 0; i < 3; ++i) basis[i * 12 + i] = 1.0;
  p = p.with_value("head.weight", Tensor<double>(Shape{3, 12}, basis));
  const auto q = orthonormalize_head(p);
  for (std::size_t i = 0; i < basis.size(); ++i) EXPECT_NEAR(std::abs(q.at("head.weight").at(i)), basis[i], 1e-15);
}

TEST(Head, OrthonormalizationPreservesRowSpace) {
  BackboneConfig c;
  c.depth = 1;
  c.base_channels = 3;
  c.input = {1, 2, 2};
  c.num_classes = 3;  // d = 3
  auto p = build<double>(c, 1);
  const Tensor<double> w(Shape{3, 3}, {2, 1, 0, 1, 3, 1, 0, 1, 4});
  const auto q = orthonormalize_head(p.with_value("head.weight", w)).at("head.weight");
  // full rank in R^3: the projector onto the row space is the identity for both
  const auto qq = matmul(q, q, true, false);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(qq.at(i * 3 + j), i == j ? 1.0 : 0.0, 1e-12);
  // and the first row keeps its direction (Gram-Schmidt in row order)
  const double n0 = std::sqrt(5.0);
  EXPECT_NEAR(q.at(0), 2 / n0, 1e-12);
  EXPECT_NEAR(q.at(1), 1 / n0, 1e-12);
}

TEST(Head, OrthonormalizationNeedsRowsAtMostDimension) {
  BackboneConfig c;
  c.depth = 1;
  c.base_channels = 1;
  c.input = {1, 2, 2};
  c.num_classes = 3;  // d = 1
  EXPECT_THROW(orthonormalize_head(build<double>(c, 1)), std::invalid_argument);
}

TEST(Head, RankDeficientHeadIsRedrawn) {
  auto p = build<double>(small_convnet(), 1);
  p = p.with_value("head.weight", Tensor<double>::filled(Shape{3, 12}, 1.0));
  const auto g = gram(orthonormalize_head(p, 7).at("head.weight"));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(g.at(i * 3 + j), i == j ? 1.0 : 0.0, 1e-9);
}

TEST(Head, CenteringArithmetic) {
  BackboneConfig c;
  c.depth = 1;
  c.base_channels = 2;
  c.input = {1, 2, 2};
  c.num_classes = 2;  // d = 2
  auto p = build<double>(c, 1).with_value("head.weight", Tensor<double>(Shape{2, 2}, {1, 1, 3, 3}));
  EXPECT_EQ(center_head(p).at("head.weight").to_vector(), (std::vector<double>{-1, -1, 1, 1}));
  const auto centered = center_head(p);
  EXPECT_TRUE(bit_identical(center_head(centered), centered));
}

TEST(Head, CenteredRowsHaveZeroMean) {
  const auto p = center_head(build<float>(small_convnet(), 8));
  const auto& w = p.at("head.weight");
  for (std::size_t t = 0; t < w.dim(1); ++t) {
    double m = 0;
    for (std::size_t i = 0; i < w.dim(0); ++i) m += w.at(i * w.dim(1) + t);
    EXPECT_LT(std::abs(m / double(w.dim(0))), 1e-7);
  }
}

TEST(Head, RowShiftLeavesSoftmaxUnchanged) {
  const auto cfg = small_convnet();
  const auto x = random_tensor(Shape{5, 1, 8, 8}, 12);
  const auto p = build<double>(cfg, 4);
  const auto shift = random_tensor(Shape{1, feature_dim(cfg)}, 13, -3, 3);
  auto w = p.at("head.weight").to_vector();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t t = 0; t < feature_dim(cfg); ++t) w[i * feature_dim(cfg) + t] += shift.at(t);
  const auto q = p.with_value("head.weight", Tensor<double>(p.at("head.weight").shape(), w));
  const auto a = softmax(forward(p, x).logits), b = softmax(forward(q, x).logits);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);

  const auto pf = build<float>(cfg, 4);
  const auto xf = cast<float>(x);
  const auto af = softmax(forward(pf, xf).logits), cf = softmax(forward(center_head(pf), xf).logits);
  for (std::size_t i = 0; i < af.numel(); ++i) EXPECT_NEAR(af.at(i), cf.at(i), 1e-6);
  EXPECT_EQ(argmax_rows(forward(pf, xf).logits), argmax_rows(forward(center_head(pf), xf).logits));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto cfg = small_resnet(true);
  const auto p = build<float>(cfg, 21);
  std::stringstream ss;
  checkpoint::write(ss, p);
  EXPECT_EQ(ss.str().substr(0, 4), "MLP1");
  const auto q = checkpoint::read<float>(ss, cfg);
  EXPECT_TRUE(bit_identical(p, q));
}

TEST(Checkpoint, BackboneMismatchIsAnError) {
  const auto p = build<float>(small_convnet(), 21);
  std::stringstream ss;
  checkpoint::write(ss, p);
  auto other = small_convnet();
  other.base_channels = 4;
  EXPECT_THROW(checkpoint::read<float>(ss, other), ArchiveError);
}

}  // namespace
}  // namespace metaloop
