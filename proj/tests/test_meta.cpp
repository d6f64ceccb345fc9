#include <cstring>

#include "test_util.hpp"

namespace metaloop {
namespace {

using testing::random_episode;
using testing::tiny_config;

bool same_values(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)) == 0;
}

TEST(Presets, RatesPerGroup) {
  const std::vector<std::string> g{"conv1", "conv2", "head"};
  EXPECT_EQ(presets::maml(g, 0.5).lr, (std::map<std::string, double>{{"conv1", 0.5}, {"conv2", 0.5}, {"head", 0.5}}));
  EXPECT_EQ(presets::anil(g, 0.5).lr, (std::map<std::string, double>{{"conv1", 0}, {"conv2", 0}, {"head", 0.5}}));
  EXPECT_EQ(presets::boil(g, 0.5).lr, (std::map<std::string, double>{{"conv1", 0.5}, {"conv2", 0.5}, {"head", 0}}));
  EXPECT_EQ(layer_subset_config(g, {"conv2"}, false, 0.1).lr,
            (std::map<std::string, double>{{"conv1", 0}, {"conv2", 0.1}, {"head", 0}}));
  EXPECT_THROW(layer_subset_config(g, {}, false, 0.1), std::invalid_argument);
  EXPECT_THROW(layer_subset_config(g, {"conv7"}, true, 0.1), std::invalid_argument);
  EXPECT_THROW(layer_subset_config(g, {"head"}, true, 0.1), std::invalid_argument);
}

TEST(Presets, ValidationRejectsBadGroupsAndRates) {
  const auto p = build<double>(tiny_config(), 1);
  InnerLoopConfig c;
  c.lr["conv9"] = 0.1;
  EXPECT_THROW(c.validate(p), std::invalid_argument);
  c.lr = {{"head", -0.1}};
  EXPECT_THROW(c.validate(p), std::invalid_argument);
  c.lr = {{"head", 0.1}};
  c.steps = 0;
  EXPECT_THROW(c.validate(p), std::invalid_argument);
}

TEST(InnerAdapt, OneStepIsPlainGradientDescent) {
  const auto cfg = tiny_config();
  const auto p = build<double>(cfg, 3);
  const auto ep = random_episode<double>(cfg, 3, 2, 5);
  const auto inner = presets::maml(p.group_names(), 0.4);
  const auto adapted = inner_adapt(p, ep.support, inner);

  const auto leaves = p.requiring_grad();
  const auto grads = gradient(softmax_cross_entropy(forward(leaves, ep.support.x).logits, ep.support.y),
                              leaves.tensors());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto theta = p[i].value.values();
    const auto g = grads[i].values();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      EXPECT_NEAR(adapted[i].value.at(j), theta[j] - 0.4 * g[j], 1e-14) << p[i].name;
    }
  }
}

TEST(InnerAdapt, FrozenGroupsAreUntouched) {
  const auto cfg = tiny_config();
  const auto p = build<double>(cfg, 3);
  const auto ep = random_episode<double>(cfg, 3, 2, 5);
  const auto anil = inner_adapt(p, ep.support, presets::anil(p.group_names(), 0.4));
  const auto boil = inner_adapt(p, ep.support, presets::boil(p.group_names(), 0.4));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool head = p[i].group == "head";
    EXPECT_EQ(same_values(anil[i].value, p[i].value), !head) << p[i].name;
    EXPECT_EQ(same_values(boil[i].value, p[i].value), head) << p[i].name;
  }
}

TEST(InnerAdapt, ZeroRatesReturnTheInput) {
  const auto cfg = tiny_config();
  const auto p = build<double>(cfg, 3);
  const auto ep = random_episode<double>(cfg, 3, 2, 5);
  EXPECT_TRUE(bit_identical(inner_adapt(p, ep.support, presets::maml(p.group_names(), 0.0)), p));
}

TEST(InnerAdapt, StepsComposeAndOverrideApplies) {
  const auto cfg = tiny_config();
  const auto p = build<double>(cfg, 3);
  const auto ep = random_episode<double>(cfg, 3, 2, 5);
  auto one = presets::maml(p.group_names(), 0.2);
  auto three = one;
  three.steps = 3;
  auto chained = p;
  for (int s = 0; s < 3; ++s) chained = inner_adapt(chained, ep.support, one);
  EXPECT_TRUE(bit_identical(inner_adapt(p, ep.support, three), chained));
  EXPECT_TRUE(bit_identical(inner_adapt(p, ep.support, one, 3), chained));
}

TEST(InnerAdapt, BoilWithZeroHeadCannotMove) {
  // logits do not depend on the body when the head weight is zero
  const auto cfg = tiny_config();
  auto p = build<double>(cfg, 3);
  p = p.with_value("head.weight", Tensor<double>::zeros(p.at("head.weight").shape()));
  const auto ep = random_episode<double>(cfg, 3, 2, 5);
  const auto adapted = inner_adapt(p, ep.support, presets::boil(p.group_names(), 0.5));
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = 0; j < p[i].value.numel(); ++j) EXPECT_EQ(adapted[i].value.at(j), p[i].value.at(j));
  }
}

TEST(InnerAdapt, RejectsBadSupport) {
  const auto cfg = tiny_config(3);
  const auto p = build<double>(cfg, 3);
  auto ep = random_episode<double>(cfg, 2, 2, 5);
  auto bad = ep.support;
  bad.y[0] = 3;
  EXPECT_THROW(inner_adapt(p, bad, presets::maml(p.group_names(), 0.1)), std::invalid_argument);
  bad = ep.support;
  for (auto& y : bad.y) y = y == 2 ? 1 : y;  // class 2 missing
  EXPECT_THROW(inner_adapt(p, bad, presets::maml(p.group_names(), 0.1)), std::invalid_argument);
}

// Meta-loss as a plain function of the flat pre-adaptation parameters.
double meta_loss_at(const ParameterSet<double>& like, const std::vector<double>& flat_theta,
                    const Episode<double>& ep, const InnerLoopConfig& inner) {
  const auto p = like.with_tensors(testing::unflatten(flat_theta, like.tensors()));
  const auto adapted = inner_adapt(p, ep.support, inner);
  return softmax_cross_entropy(forward(adapted, ep.query.x).logits, ep.query.y).item();
}

class MetaGradient : public ::testing::TestWithParam<std::tuple<std::string, std::size_t>> {};

TEST_P(MetaGradient, MatchesFiniteDifferences) {
  const auto [algo, steps] = GetParam();
  const auto cfg = tiny_config();
  const auto p = build<double>(cfg, 11);
  const auto ep = random_episode<double>(cfg, 3, 3, 17);
  auto inner = algo == "maml"   ? presets::maml(p.group_names(), 0.3)
               : algo == "anil" ? presets::anil(p.group_names(), 0.3)
                                : presets::boil(p.group_names(), 0.3);
  inner.steps = steps;
  const auto engine = detail::run_episode(p, ep, inner, false).grads;
  const auto numeric = testing::finite_difference(
      [&](const std::vector<double>& x) { return meta_loss_at(p, x, ep, inner); },
      testing::flat(p.tensors()));
  EXPECT_LT(testing::relative_error(testing::flat(engine), numeric), 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Algorithms, MetaGradient,
                         ::testing::Combine(::testing::Values("maml", "anil", "boil"),
                                            ::testing::Values(std::size_t{1}, std::size_t{2})),
                         [](const auto& info) {
                           return std::get<0>(info.param) + "_" + std::to_string(std::get<1>(info.param)) + "_steps";
                         });

TEST(MetaGradient, FirstOrderUsesQueryGradientAtAdaptedPoint) {
  const auto cfg = tiny_config();
  const auto p = build<double>(cfg, 11);
  const auto ep = random_episode<double>(cfg, 3, 3, 17);
  auto inner = presets::maml(p.group_names(), 0.3);
  inner.order = GradOrder::first;
  const auto engine = detail::run_episode(p, ep, inner, false).grads;

  const auto adapted = inner_adapt(p, ep.support, inner).detached().requiring_grad();
  const auto at_adapted = gradient(
      softmax_cross_entropy(forward(adapted, ep.query.x).logits, ep.query.y), adapted.tensors());
  EXPECT_LT(testing::relative_error(testing::flat(engine), testing::flat(at_adapted)), 1e-12);

  inner.order = GradOrder::second;
  const auto exact = detail::run_episode(p, ep, inner, false).grads;
  EXPECT_GT(testing::relative_error(testing::flat(engine), testing::flat(exact)), 1e-6);
}

OuterLoopConfig sgd(std::size_t batch, double beta) {
  OuterLoopConfig o;
  o.optimizer = OuterOptimizer::sgd;
  o.meta_batch_size = batch;
  o.beta = beta;
  return o;
}

TEST(MetaStep, SgdStepSubtractsSummedEpisodeGradients) {
  const auto cfg = tiny_config();
  const auto p = build<double>(cfg, 11);
  std::vector<Episode<double>> eps;
  for (std::uint64_t s = 0; s < 4; ++s) eps.push_back(random_episode<double>(cfg, 2, 2, 30 + s));
  const auto inner = presets::maml(p.group_names(), 0.3);
  OuterState<double> state;
  const auto step = meta_step(p, eps, inner, sgd(4, 0.01), state);

  std::vector<double> sum(p.num_scalars(), 0.0);
  double loss = 0.0;
  for (const auto& ep : eps) {
    const auto o = detail::run_episode(p, ep, inner, false);
    loss += o.loss;
    const auto g = testing::flat(o.grads);
    for (std::size_t i = 0; i < g.size(); ++i) sum[i] += g[i];
  }
  const auto before = testing::flat(p.tensors());
  const auto after = testing::flat(step.params.tensors());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(after[i], before[i] - 0.01 * sum[i], 1e-15);
  EXPECT_NEAR(step.report.meta_loss, loss, 1e-12);
  EXPECT_EQ(step.report.acc_before.size(), 4u);
  EXPECT_EQ(step.report.grad_norms.size(), p.group_names().size());
}

TEST(MetaStep, ZeroInnerRateGivesOrdinaryGradientStep) {
  const auto cfg = tiny_config();
  const auto p = build<double>(cfg, 11);
  const std::vector<Episode<double>> eps{random_episode<double>(cfg, 2, 2, 40)};
  OuterState<double> state;
  const auto step = meta_step(p, eps, presets::maml(p.group_names(), 0.0), sgd(1, 0.05), state);
  const auto leaves = p.requiring_grad();
  const auto g = gradient(softmax_cross_entropy(forward(leaves, eps[0].query.x).logits, eps[0].query.y),
                          leaves.tensors());
  const auto before = testing::flat(p.tensors()), after = testing::flat(step.params.tensors()), fg = testing::flat(g);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(after[i], before[i] - 0.05 * fg[i], 1e-15);
}

TEST(MetaStep, WrongBatchSizeIsAnError) {
  const auto cfg = tiny_config();
  const auto p = build<double>(cfg, 11);
  const std::vector<Episode<double>> eps{random_episode<double>(cfg, 2, 2, 40)};
  OuterState<double> state;
  EXPECT_THROW(meta_step(p, eps, presets::maml(p.group_names(), 0.1), sgd(4, 0.1), state),
               std::invalid_argument);
}

TEST(MetaStep, DeterministicAndThreadIndependent) {
  const auto cfg = tiny_config();
  const auto p = build<float>(cfg, 11);
  std::vector<Episode<float>> eps;
  for (std::uint64_t s = 0; s < 4; ++s) eps.push_back(random_episode<float>(cfg, 2, 2, 50 + s));
  const auto inner = presets::boil(p.group_names(), 0.3);
  OuterLoopConfig outer;
  outer.meta_batch_size = 4;
  OuterState<float> s1, s2, s3;
  const auto a = meta_step(p, eps, inner, outer, s1, 1);
  const auto b = meta_step(p, eps, inner, outer, s2, 1);
  const auto c = meta_step(p, eps, inner, outer, s3, 3);
  EXPECT_TRUE(bit_identical(a.params, b.params));
  EXPECT_TRUE(bit_identical(a.params, c.params));
  EXPECT_EQ(a.report, b.report);
  EXPECT_EQ(a.report, c.report);
}

TEST(MetaStep, AdamFirstStepMovesEachCoordinateByBeta) {
  const auto cfg = tiny_config();
  const auto p = build<double>(cfg, 11);
  const std::vector<Episode<double>> eps{random_episode<double>(cfg, 2, 2, 40)};
  OuterLoopConfig outer;
  outer.meta_batch_size = 1;
  outer.beta = 0.001;
  outer.adam_eps = 0.0;
  OuterState<double> state;
  const auto inner = presets::maml(p.group_names(), 0.2);
  const auto step = meta_step(p, eps, inner, outer, state);
  const auto g = testing::flat(detail::run_episode(p, eps[0], inner, false).grads);
  const auto before = testing::flat(p.tensors()), after = testing::flat(step.params.tensors());
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i] == 0.0) continue;
    EXPECT_NEAR(after[i], before[i] - 0.001 * (g[i] > 0 ? 1 : -1), 1e-12);
  }
  EXPECT_EQ(state.t, 1u);
}

TEST(MetaStep, FixVariantFreezesTheHead) {
  const auto cfg = tiny_config();
  const auto p = orthonormalize_head(build<double>(cfg, 11));
  const std::vector<Episode<double>> eps{random_episode<double>(cfg, 2, 2, 40)};
  auto outer = sgd(1, 0.1);
  outer.head_variant = HeadVariant::fix;
  OuterState<double> state;
  const auto step = meta_step(p, eps, presets::boil(p.group_names(), 0.3), outer, state);
  EXPECT_TRUE(same_values(step.params.at("head.weight"), p.at("head.weight")));
  EXPECT_TRUE(same_values(step.params.at("head.bias"), p.at("head.bias")));
  EXPECT_FALSE(same_values(step.params.at("conv1.weight"), p.at("conv1.weight")));
}

TEST(MetaStep, CenteringVariantKeepsRowsCentered) {
  const auto cfg = tiny_config(3);
  const auto p = center_head(build<double>(cfg, 11));
  const std::vector<Episode<double>> eps{random_episode<double>(cfg, 2, 2, 40)};
  auto outer = sgd(1, 0.5);
  outer.head_variant = HeadVariant::centering;
  OuterState<double> state;
  const auto step = meta_step(p, eps, presets::maml(p.group_names(), 0.3), outer, state);
  const auto& w = step.params.at("head.weight");
  for (std::size_t t = 0; t < w.dim(1); ++t) {
    double m = 0;
    for (std::size_t i = 0; i < w.dim(0); ++i) m += w.at(i * w.dim(1) + t);
    EXPECT_NEAR(m, 0.0, 1e-14);
  }
}

TEST(MetaStep, CenteringDoesNotChangeTheMetaLoss) {
  const auto cfg = tiny_config(3);
  const auto p = build<double>(cfg, 12);
  const auto ep = random_episode<double>(cfg, 2, 2, 41);
  for (const auto& make : {presets::maml, presets::anil, presets::boil}) {
    const auto inner = make(p.group_names(), 0.3);
    const double a = detail::run_episode(p, ep, inner, false).loss;
    const double b = detail::run_episode(center_head(p), ep, inner, false).loss;
    EXPECT_NEAR(a, b, 1e-12);
  }
}

TEST(MetaTest, ZeroHeadStartsAtChanceAndParamsStayPut) {
  const auto cfg = tiny_config(4);
  auto p = build<double>(cfg, 13);
  p = p.with_value("head.weight", Tensor<double>::zeros(p.at("head.weight").shape()));
  std::vector<Episode<double>> eps;
  for (std::uint64_t s = 0; s < 3; ++s) eps.push_back(random_episode<double>(cfg, 2, 5, 60 + s));
  const auto copy = p;
  const auto acc = meta_test(p, eps, presets::maml(p.group_names(), 0.5));
  ASSERT_EQ(acc.size(), 3u);
  for (const auto& a : acc) EXPECT_DOUBLE_EQ(a.before, 0.25);  // ties break to class 0
  EXPECT_TRUE(bit_identical(p, copy));
  for (const auto& e : p.entries()) EXPECT_FALSE(e.value.requires_grad());
}

TEST(MetaTest, AdaptStepsOverrideMatchesInnerLoop) {
  const auto cfg = tiny_config(2);
  const auto p = build<double>(cfg, 13);
  const std::vector<Episode<double>> eps{random_episode<double>(cfg, 3, 4, 70)};
  const auto inner = presets::maml(p.group_names(), 0.5);
  const auto acc = meta_test(p, eps, inner, std::size_t{4});
  NoGradGuard off;
  const auto adapted = inner_adapt(p, eps[0].support, inner, 4);
  EXPECT_DOUBLE_EQ(acc[0].after, accuracy(forward(adapted, eps[0].query.x).logits, eps[0].query.y));
}

TEST(Accuracy, CountsArgmaxHits) {
  const Tensor<double> z(Shape{4, 2}, {1, 0, 0, 1, 2, 2, 0.5, 0.1});
  EXPECT_DOUBLE_EQ(accuracy(z, {0, 1, 0, 1}), 0.75);
}

}  // namespace
}  // namespace metaloop
