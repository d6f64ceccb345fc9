#include "test_util.hpp"

namespace metaloop {
namespace {

using testing::random_episode;
using testing::random_tensor;

// Feature-space linear CKA with explicit loops, independent of the library form.
double cka_oracle(const Tensor<double>& x, const Tensor<double>& y) {
  const std::size_t n = x.dim(0), dx = x.dim(1), dy = y.dim(1);
  auto centered = [n](const Tensor<double>& m, std::size_t d) {
    std::vector<double> c(m.values().begin(), m.values().end());
    for (std::size_t j = 0; j < d; ++j) {
      double mu = 0;
      for (std::size_t i = 0; i < n; ++i) mu += c[i * d + j];
      mu /= double(n);
      for (std::size_t i = 0; i < n; ++i) c[i * d + j] -= mu;
    }
    return c;
  };
  const auto xc = centered(x, dx), yc = centered(y, dy);
  auto cross_fro2 = [n](const std::vector<double>& a, std::size_t da, const std::vector<double>& b, std::size_t db) {
    double s = 0;
    for (std::size_t p = 0; p < da; ++p) {
      for (std::size_t q = 0; q < db; ++q) {
        double v = 0;
        for (std::size_t i = 0; i < n; ++i) v += a[i * da + p] * b[i * db + q];
        s += v * v;
      }
    }
    return s;
  };
  return cross_fro2(yc, dy, xc, dx) / std::sqrt(cross_fro2(xc, dx, xc, dx) * cross_fro2(yc, dy, yc, dy));
}

TEST(Cosine, Examples) {
  EXPECT_DOUBLE_EQ(cosine(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0);
  EXPECT_DOUBLE_EQ(cosine(std::vector<double>{1, 1}, std::vector<double>{2, 2}), 1.0);
  EXPECT_DOUBLE_EQ(cosine(std::vector<double>{1, 0}, std::vector<double>{-3, 0}), -1.0);
  EXPECT_EQ(cosine(std::vector<double>{0, 0}, std::vector<double>{1, 2}), 0.0);
  EXPECT_THROW(cosine(std::vector<double>{1}, std::vector<double>{1, 2}), std::invalid_argument);
}

TEST(Similarity, IntraInterByHand) {
  // rows: e1, e1, e2, (e1+e2)
  const Tensor<double> r(Shape{4, 2}, {1, 0, 1, 0, 0, 1, 1, 1});
  const auto s = intra_inter_cosine(r, {0, 0, 1, 1});
  // intra pairs: (0,1) -> 1, (2,3) -> 1/sqrt2
  EXPECT_NEAR(s.intra, (1 + 1 / std::sqrt(2.0)) / 2, 1e-15);
  // inter pairs: (0,2)=0 (0,3)=1/sqrt2 (1,2)=0 (1,3)=1/sqrt2
  EXPECT_NEAR(s.inter, (2 / std::sqrt(2.0)) / 4, 1e-15);
  EXPECT_THROW(intra_inter_cosine(r, {0, 1}), std::invalid_argument);
  EXPECT_THROW(intra_inter_cosine(Tensor<double>(Shape{4}, {1, 2, 3, 4}), {0, 0, 1, 1}), ShapeError);
}

TEST(Cka, IdenticalInputsGiveExactlyOne) {
  const auto x = random_tensor(Shape{20, 7}, 1);
  EXPECT_EQ(cka_linear(x, x), 1.0);
  const auto xf = random_tensor<float>(Shape{75, 40}, 2);
  EXPECT_EQ(cka_linear(xf, xf), 1.0);
}

TEST(Cka, MatchesIndependentFormula) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto x = random_tensor(Shape{12, 5}, 10 + s);
    const auto y = random_tensor(Shape{12, 9}, 20 + s);
    const double c = cka_linear(x, y);
    EXPECT_NEAR(c, cka_oracle(x, y), 1e-12);
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0);
  }
}

TEST(Cka, InvariantToRotationScaleAndShift) {
  const auto x = random_tensor(Shape{15, 2}, 3);
  const double th = 0.7, a = std::cos(th), b = std::sin(th);
  std::vector<double> y(30);
  for (std::size_t i = 0; i < 15; ++i) {
    const double u = x.at(2 * i), v = x.at(2 * i + 1);
    y[2 * i] = 3.0 * (a * u - b * v) + 5.0;
    y[2 * i + 1] = 3.0 * (b * u + a * v) - 2.0;
  }
  EXPECT_NEAR(cka_linear(x, Tensor<double>(Shape{15, 2}, y)), 1.0, 1e-12);
}

TEST(Cka, RejectsMismatchedSamples) {
  EXPECT_THROW(cka_linear(random_tensor(Shape{4, 2}, 1), random_tensor(Shape{5, 2}, 1)), ShapeError);
}

TEST(Nil, TemplateClassifierByHand) {
  // support: class 0 around +x, class 1 around +y
  const Tensor<double> s(Shape{4, 2}, {1, 0.1, 1, -0.1, 0.1, 1, -0.1, 1});
  const Tensor<double> q(Shape{3, 2}, {2, 0.5, 0.2, 3, 1, 1});
  EXPECT_EQ(nil_predict(s, {0, 0, 1, 1}, q, 2), (std::vector<int>{0, 1, 0}));  // last row ties
  EXPECT_THROW(nil_predict(s, {0, 0, 1, 1}, Tensor<double>(Shape{1, 3}, {1, 2, 3}), 2), ShapeError);
}

TEST(Nil, MatchesManualTemplatesOnNetworkFeatures) {
  const auto cfg = testing::tiny_config(3);
  const auto p = build<double>(cfg, 4);
  const auto ep = random_episode<double>(cfg, 2, 3, 8);
  const auto sr = forward(p, ep.support.x, {"conv1"}).representation("conv1");
  const auto qr = forward(p, ep.query.x, {"conv1"}).representation("conv1");
  const std::size_t d = sr.dim(1);
  std::vector<std::vector<double>> tmpl(3, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < sr.dim(0); ++i)
    for (std::size_t t = 0; t < d; ++t) tmpl[ep.support.y[i]][t] += sr.at(i * d + t) / 2.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < qr.dim(0); ++i) {
    std::vector<double> row(qr.values().begin() + i * d, qr.values().begin() + (i + 1) * d);
    int best = 0;
    for (int c = 1; c < 3; ++c) {
      if (cosine(row, tmpl[c]) > cosine(row, tmpl[best])) best = c;
    }
    hit += best == ep.query.y[i];
  }
  EXPECT_DOUBLE_EQ(nil_test(p, ep, "conv1"), double(hit) / double(qr.dim(0)));
}

TEST(GradNorms, MatchDirectGradientAndSplitByRole) {
  const auto cfg = testing::tiny_config(2);
  const auto p = build<double>(cfg, 4);
  const auto ep = random_episode<double>(cfg, 2, 3, 8);
  const auto report = grad_norm_report(p, ep);
  ASSERT_EQ(report.size(), 2u);
  const auto leaves = p.requiring_grad();
  const auto g = gradient(softmax_cross_entropy(forward(leaves, ep.support.x).logits, ep.support.y),
                          leaves.tensors());
  auto norm2 = [&](std::initializer_list<const char*> names) {
    double s = 0;
    for (const char* n : names)
      for (double v : g[p.index_of(n)].values()) s += v * v;
    return std::sqrt(s);
  };
  EXPECT_EQ(report[0].group, "conv1");
  EXPECT_NEAR(report[0].weight_norm, norm2({"conv1.weight", "conv1.gamma"}), 1e-14);
  EXPECT_NEAR(report[0].bias_norm, norm2({"conv1.bias", "conv1.beta"}), 1e-14);
  EXPECT_NEAR(report[1].weight_norm, norm2({"head.weight"}), 1e-14);
  EXPECT_NEAR(report[1].bias_norm, norm2({"head.bias"}), 1e-14);
}

TEST(GradNorms, ZeroHeadSilencesTheBody) {
  const auto cfg = testing::tiny_config(2);
  auto p = build<double>(cfg, 4);
  p = p.with_value("head.weight", Tensor<double>::zeros(p.at("head.weight").shape()));
  const auto report = grad_norm_report(p, random_episode<double>(cfg, 2, 3, 8));
  EXPECT_EQ(report[0].weight_norm, 0.0);
  EXPECT_EQ(report[0].bias_norm, 0.0);
  EXPECT_GT(report[1].weight_norm, 0.0);
}

TEST(HeadGeometry, OrthonormalRowsGiveOneHalf) {
  std::vector<double> eye(5 * 8, 0.0);
  for (std::size_t i = 0; i < 5; ++i) eye[i * 8 + i] = 1.0;
  EXPECT_NEAR(head_gap_cosine(Tensor<double>(Shape{5, 8}, eye)), 0.5, 1e-15);
  // scaling and a common shift do not change the differences' angles
  for (std::size_t i = 0; i < eye.size(); ++i) eye[i] = 2.0 * eye[i] + 0.3;
  EXPECT_NEAR(head_gap_cosine(Tensor<double>(Shape{5, 8}, eye)), 0.5, 1e-15);
  EXPECT_THROW(head_gap_cosine(Tensor<double>(Shape{2, 8}, std::vector<double>(16, 1.0))), std::invalid_argument);
}

TEST(HeadGeometry, CollinearEquallySpacedRows) {
  // rows 0, 1, 2 on a line: triples (i,j,k) with k in the middle give -1, else +1
  const Tensor<double> h(Shape{3, 1}, {0, 1, 2});
  // k=0: (1,2),(2,1) -> +1,+1; k=1: -1,-1; k=2: +1,+1
  EXPECT_NEAR(head_gap_cosine(h), 1.0 / 3, 1e-15);
}

TEST(Reports, AnilLeavesBodyRepresentationsUnchanged) {
  const auto cfg = testing::tiny_config(3);
  const auto p = build<double>(cfg, 4);
  const auto ep = random_episode<double>(cfg, 2, 3, 8);
  const auto anil = adapt_for_analysis(p, ep, presets::anil(p.group_names(), 0.5));
  const auto maml = adapt_for_analysis(p, ep, presets::maml(p.group_names(), 0.5), 3);
  EXPECT_EQ(cka_report(p, anil, ep, {"conv1"})[0].cka, 1.0);
  EXPECT_LT(cka_report(p, maml, ep, {"conv1"})[0].cka, 1.0);
  const auto sim = similarity_report(p, anil, ep, {"conv1"});
  ASSERT_EQ(sim.size(), 2u);
  EXPECT_EQ(sim[0].state, "before");
  EXPECT_EQ(sim[1].state, "after");
  EXPECT_EQ(sim[0].intra, sim[1].intra);
  EXPECT_EQ(sim[0].inter, sim[1].inter);
  for (const auto& e : anil.entries()) EXPECT_FALSE(e.value.requires_grad());
}

TEST(Reports, DumpsRoundTrip) {
  const auto cfg = testing::tiny_config(2);
  const auto p = build<float>(cfg, 4);
  const auto ep = random_episode<float>(cfg, 2, 3, 8);
  const auto dir = testing::temp_dir("dumps");
  const auto files = dump_representations(p, p, ep, {"conv1"}, dir);
  ASSERT_EQ(files.size(), 3u);
  const auto before = archive::load_tensor(dir / "conv1.before.mlt");
  EXPECT_EQ(before.shape, (Shape{6, 2 * 2 * 2}));
  EXPECT_EQ(before.values, forward(p, ep.query.x, {"conv1"}).representation("conv1").to_vector());
  EXPECT_EQ(archive::load_tensor(dir / "labels.mlt").values, (std::vector<float>{0, 0, 0, 1, 1, 1}));
}

TEST(Reports, CsvRows) {
  std::ostringstream os;
  write_metric_csv(os, to_rows(CkaReport{{"conv1", 0.25}}));
  EXPECT_EQ(os.str(), "layer,state,metric,value\nconv1,before_vs_after,cka,0.25\n");
}

}  // namespace
}  // namespace metaloop
