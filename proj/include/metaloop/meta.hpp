// Copyright 2026 The Metaloop Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Inner/outer loop machinery. One InnerLoopConfig with per-group learning
// rates covers MAML (all groups), ANIL (head only), BOIL (body only) and any
// layer subset in between.

#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "metaloop/nn.hpp"
#include "metaloop/ops.hpp"
#include "metaloop/parallel.hpp"
#include "metaloop/tensor.hpp"

namespace metaloop {

template <typename T>
struct LabeledBatch {
  Tensor<T> x;  // (N, C, H, W)
  std::vector<int> y;

  std::size_t size() const { return y.size(); }
};

/// One n-way k-shot task. classes[label] is the original class id assigned
/// to episode label `label`.
template <typename T>
struct Episode {
  std::size_t n = 0, k = 0, q = 0;
  LabeledBatch<T> support;
  LabeledBatch<T> query;
  std::vector<int> classes;
  std::vector<std::uint32_t> support_instances;  // per-class instance index
  std::vector<std::uint32_t> query_instances;

  int label_of(int class_id) const {
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i] == class_id) return static_cast<int>(i);
    }
    throw std::out_of_range("episode: class " + std::to_string(class_id) + " not sampled");
  }

  void validate() const {
    if (support.size() != n * k || query.size() != n * q || classes.size() != n) {
      throw std::invalid_argument("episode: sizes do not match n=" + std::to_string(n) +
                                  ", k=" + std::to_string(k) + ", q=" + std::to_string(q));
    }
    auto count = [this](const std::vector<int>& y, std::size_t per, const char* which) {
      std::vector<std::size_t> c(n, 0);
      for (int label : y) {
        if (label < 0 || static_cast<std::size_t>(label) >= n) {
          throw std::invalid_argument(std::string("episode: ") + which + " label " +
                                      std::to_string(label) + " outside [0, n)");
        }
        ++c[label];
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (c[i] != per) {
          throw std::invalid_argument(std::string("episode: ") + which + " has " +
                                      std::to_string(c[i]) + " samples of label " +
                                      std::to_string(i) + ", expected " + std::to_string(per));
        }
      }
    };
    count(support.y, k, "support");
    count(query.y, q, "query");
  }
};

enum class GradOrder { second, first };

/// Per-group inner learning rates. Groups absent from the map have rate 0.
struct InnerLoopConfig {
  std::map<std::string, double> lr;
  std::size_t steps = 1;
  GradOrder order = GradOrder::second;

  double rate(const std::string& group) const {
    auto it = lr.find(group);
    return it == lr.end() ? 0.0 : it->second;
  }

  bool operator==(const InnerLoopConfig&) const = default;

  template <typename T>
  void validate(const ParameterSet<T>& params) const {
    if (steps == 0) throw std::invalid_argument("inner loop: steps must be at least 1");
    for (const auto& [group, rate] : lr) {
      if (!params.has_group(group)) {
        throw std::invalid_argument("inner loop: unknown parameter group '" + group + "'");
      }
      if (!(rate >= 0.0)) {
        throw std::invalid_argument("inner loop: negative learning rate " + std::to_string(rate) +
                                    " for group '" + group + "'");
      }
    }
  }
};

namespace presets {

/// alpha_b = alpha_h = alpha.
inline InnerLoopConfig maml(const std::vector<std::string>& groups, double alpha) {
  InnerLoopConfig cfg;
  for (const auto& g : groups) cfg.lr[g] = alpha;
  return cfg;
}

/// alpha_b = 0, alpha_h = alpha.
inline InnerLoopConfig anil(const std::vector<std::string>& groups, double alpha) {
  InnerLoopConfig cfg;
  for (const auto& g : groups) cfg.lr[g] = g == kHeadGroup ? alpha : 0.0;
  return cfg;
}

/// alpha_b = alpha, alpha_h = 0.
inline InnerLoopConfig boil(const std::vector<std::string>& groups, double alpha) {
  InnerLoopConfig cfg;
  for (const auto& g : groups) cfg.lr[g] = g == kHeadGroup ? 0.0 : alpha;
  return cfg;
}

}  // namespace presets

/// Inner config that adapts only the named body layers (and the head when
/// `learn_head`), all at rate `alpha`.
inline InnerLoopConfig layer_subset_config(const std::vector<std::string>& groups,
                                           const std::set<std::string>& learn, bool learn_head,
                                           double alpha) {
  if (learn.empty() && !learn_head) {
    throw std::invalid_argument("layer subset: nothing to learn (empty body set and frozen head)");
  }
  for (const auto& name : learn) {
    if (name == kHeadGroup || std::find(groups.begin(), groups.end(), name) == groups.end()) {
      throw std::invalid_argument("layer subset: '" + name + "' is not a body layer");
    }
  }
  InnerLoopConfig cfg;
  for (const auto& g : groups) {
    cfg.lr[g] = (g == kHeadGroup ? learn_head : learn.count(g) > 0) ? alpha : 0.0;
  }
  return cfg;
}

enum class HeadVariant { none, centering, fix };
enum class OuterOptimizer { sgd, adam };

inline std::string to_string(HeadVariant v) {
  switch (v) {
    case HeadVariant::none: return "none";
    case HeadVariant::centering: return "centering";
    case HeadVariant::fix: return "fix";
  }
  return "none";
}

inline HeadVariant parse_head_variant(std::string_view s) {
  if (s == "none") return HeadVariant::none;
  if (s == "centering") return HeadVariant::centering;
  if (s == "fix") return HeadVariant::fix;
  throw std::invalid_argument("unknown head variant '" + std::string(s) +
                              "' (expected none, centering or fix)");
}

struct OuterLoopConfig {
  double beta = 0.001;
  std::optional<double> beta_body;
  std::optional<double> beta_head;
  std::size_t meta_batch_size = 4;
  std::size_t steps = 2000;
  HeadVariant head_variant = HeadVariant::none;
  OuterOptimizer optimizer = OuterOptimizer::adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  /// Outer rate for a group; the head rate is zero under the fix variant.
  double rate(const std::string& group) const {
    if (group == kHeadGroup) {
      return head_variant == HeadVariant::fix ? 0.0 : beta_head.value_or(beta);
    }
    return beta_body.value_or(beta);
  }
};

/// Adam moments, one slot per parameter tensor.
template <typename T>
struct OuterState {
  std::vector<std::vector<T>> m, v;
  std::uint64_t t = 0;
};

struct MetaStepReport {
  double meta_loss = 0.0;
  std::vector<double> acc_before;
  std::vector<double> acc_after;
  std::vector<std::pair<std::string, double>> grad_norms;  // per group, outer gradient

  bool operator==(const MetaStepReport&) const = default;
};

template <typename T>
struct MetaStepResult {
  ParameterSet<T> params;
  MetaStepReport report;
};

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
template <typename T>
double accuracy(const Tensor<T>& logits, const std::vector<int>& labels) {
  const auto pred = argmax_rows(logits);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Task-specific adaptation: `steps` gradient steps on the support loss,
/// theta_g <- theta_g - alpha_g * grad_g, recomputing the loss each step.
/// Groups with alpha_g = 0 are returned as the very same tensors. With second
/// order the inner gradients are recorded, so the result is differentiable
/// with respect to every input parameter (including frozen ones through
/// their use in the support loss). Under a NoGradGuard the adaptation still
/// happens but the result carries no history.
template <typename T>
ParameterSet<T> inner_adapt(const ParameterSet<T>& params, const LabeledBatch<T>& support,
                            const InnerLoopConfig& cfg,
                            std::optional<std::size_t> steps_override = std::nullopt) {
  cfg.validate(params);
  if (support.size() == 0) throw std::invalid_argument("inner_adapt: empty support set");
  const std::size_t classes = params.config().num_classes;
  std::vector<std::size_t> per_class(classes, 0);
  for (int y : support.y) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::invalid_argument("inner_adapt: support label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(classes) + ")");
    }
    ++per_class[y];
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (per_class[c] == 0) {
      throw std::invalid_argument("inner_adapt: no support samples for class " +
                                  std::to_string(c));
    }
  }

  const std::size_t steps = steps_override.value_or(cfg.steps);
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (cfg.rate(params[i].group) > 0.0) active.push_back(i);
  }
  if (active.empty() || steps == 0) return params;

  bool tracked = false;
  std::vector<Tensor<T>> current = params.tensors();
  for (auto& t : current) tracked = tracked || t.requires_grad();
  for (std::size_t i : active) {
    if (!current[i].requires_grad()) current[i] = current[i].requiring_grad();
  }
  const bool caller_records = grad_enabled();
  const bool differentiable = cfg.order == GradOrder::second && tracked && caller_records;
  // The support-loss gradient is needed even when the caller disabled recording.
  EnableGradGuard record;

  ParameterSet<T> state = params.with_tensors(current);
  for (std::size_t s = 0; s < steps; ++s) {
    auto loss = softmax_cross_entropy(forward(state, support.x).logits, support.y);
    std::vector<Tensor<T>> wrt;
    for (std::size_t i : active) wrt.push_back(current[i]);
    auto grads = gradient(loss, wrt, differentiable);
    for (std::size_t j = 0; j < active.size(); ++j) {
      const std::size_t i = active[j];
      const T alpha = static_cast<T>(cfg.rate(params[i].group));
      current[i] = sub(current[i], scale(grads[j], alpha));
    }
    state = state.with_tensors(current);
  }
  return caller_records ? state : state.detached();
}

namespace detail {

template <typename T>
struct EpisodeOutcome {
  double loss = 0.0;
  double acc_before = 0.0;
  double acc_after = 0.0;
  std::vector<Tensor<T>> grads;
};

template <typename T>
EpisodeOutcome<T> run_episode(const ParameterSet<T>& params, const Episode<T>& ep,
                              const InnerLoopConfig& inner, bool measure_before) {
  EpisodeOutcome<T> out;
  if (measure_before) {
    NoGradGuard off;
    out.acc_before = accuracy(forward(params, ep.query.x).logits, ep.query.y);
  }
  auto leaves = params.requiring_grad();
  auto adapted = inner_adapt(leaves, ep.support, inner);
  auto logits = forward(adapted, ep.query.x).logits;
  auto loss = softmax_cross_entropy(logits, ep.query.y);
  out.loss = static_cast<double>(loss.item());
  out.acc_after = accuracy(logits, ep.query.y);
  out.grads = gradient(loss, leaves.tensors(), false);
  return out;
}

}  // namespace detail

/// Applies one outer update with `grads` (aligned with params) and the
/// configured optimizer. Groups with zero outer rate stay bit-identical.
template <typename T>
ParameterSet<T> outer_update(const ParameterSet<T>& params, const std::vector<Tensor<T>>& grads,
                             const OuterLoopConfig& outer, OuterState<T>& state) {
  std::vector<Tensor<T>> next = params.tensors();
  if (outer.optimizer == OuterOptimizer::adam && state.m.empty()) {
    for (const auto& e : params.entries()) {
      state.m.emplace_back(e.value.numel(), T(0));
      state.v.emplace_back(e.value.numel(), T(0));
    }
  }
  ++state.t;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double rate = outer.rate(params[i].group);
    if (rate == 0.0) continue;
    const auto g = grads[i].values();
    std::vector<T> v = next[i].to_vector();
    if (outer.optimizer == OuterOptimizer::sgd) {
      for (std::size_t j = 0; j < v.size(); ++j) v[j] -= static_cast<T>(rate) * g[j];
    } else {
      const double b1 = outer.adam_beta1, b2 = outer.adam_beta2;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
      auto& m = state.m[i];
      auto& s = state.v[i];
      for (std::size_t j = 0; j < v.size(); ++j) {
        m[j] = static_cast<T>(b1 * m[j] + (1.0 - b1) * g[j]);
        s[j] = static_cast<T>(b2 * s[j] + (1.0 - b2) * g[j] * g[j]);
        const double mh = m[j] / c1, sh = s[j] / c2;
        v[j] = static_cast<T>(v[j] - rate * mh / (std::sqrt(sh) + outer.adam_eps));
      }
    }
    next[i] = Tensor<T>(next[i].shape(), std::move(v));
  }
  auto updated = params.with_tensors(std::move(next));
  if (outer.head_variant == HeadVariant::centering) updated = center_head(updated);
  return updated;
}

/// One outer step on a meta-batch: the meta-loss is the sum over episodes of
/// the query loss at the adapted parameters, and its gradient with respect
/// to the pre-adaptation parameters drives the outer optimizer. With
/// `measure_before` false the pre-adaptation accuracies are reported as 0.
template <typename T>
MetaStepResult<T> meta_step(const ParameterSet<T>& params, std::span<const Episode<T>> episodes,
                            const InnerLoopConfig& inner, const OuterLoopConfig& outer,
                            OuterState<T>& state, std::size_t threads = 1,
                            bool measure_before = true) {
  if (episodes.size() != outer.meta_batch_size) {
    throw std::invalid_argument("meta_step: expected " + std::to_string(outer.meta_batch_size) +
                                " episodes, got " + std::to_string(episodes.size()));
  }
  inner.validate(params);
  auto outcomes = parallel_map(episodes.size(), threads, [&](std::size_t i) {
    return detail::run_episode(params, episodes[i], inner, measure_before);
  });

  MetaStepReport report;
  std::vector<std::vector<T>> total(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) total[i].assign(params[i].value.numel(), T(0));
  for (const auto& o : outcomes) {
    report.meta_loss += o.loss;
    report.acc_before.push_back(o.acc_before);
    report.acc_after.push_back(o.acc_after);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto g = o.grads[i].values();
      for (std::size_t j = 0; j < g.size(); ++j) total[i][j] += g[j];
    }
  }
  std::vector<Tensor<T>> grads;
  for (std::size_t i = 0; i < params.size(); ++i) {
    grads.emplace_back(params[i].value.shape(), std::move(total[i]));
  }
  for (const auto& group : params.group_names()) {
    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].group != group) continue;
      for (T g : grads[i].values()) sq += static_cast<double>(g) * g;
    }
    report.grad_norms.emplace_back(group, std::sqrt(sq));
  }
  return {outer_update(params, grads, outer, state), std::move(report)};
}

template <typename T>
MetaStepResult<T> meta_step(const ParameterSet<T>& params, const std::vector<Episode<T>>& episodes,
                            const InnerLoopConfig& inner, const OuterLoopConfig& outer,
                            OuterState<T>& state, std::size_t threads = 1,
                            bool measure_before = true) {
  return meta_step(params, std::span<const Episode<T>>(episodes), inner, outer, state, threads,
                   measure_before);
}

struct EpisodeAccuracy {
  double before = 0.0;
  double after = 0.0;
};

/// Query accuracy of each episode before and after adaptation on its support
/// set. Nothing escapes the call; `params` is unchanged.
template <typename T>
std::vector<EpisodeAccuracy> meta_test(const ParameterSet<T>& params,
                                       std::span<const Episode<T>> episodes,
                                       const InnerLoopConfig& inner,
                                       std::optional<std::size_t> adapt_steps = std::nullopt,
                                       std::size_t threads = 1) {
  auto frozen = params.detached();
  auto test_cfg = inner;
  test_cfg.order = GradOrder::first;
  return parallel_map(episodes.size(), threads, [&](std::size_t i) {
    const auto& ep = episodes[i];
    EpisodeAccuracy acc;
    {
      NoGradGuard off;
      acc.before = accuracy(forward(frozen, ep.query.x).logits, ep.query.y);
    }
    auto adapted = inner_adapt(frozen, ep.support, test_cfg, adapt_steps);
    NoGradGuard off;
    acc.after = accuracy(forward(adapted, ep.query.x).logits, ep.query.y);
    return acc;
  });
}

template <typename T>
std::vector<EpisodeAccuracy> meta_test(const ParameterSet<T>& params,
                                       const std::vector<Episode<T>>& episodes,
                                       const InnerLoopConfig& inner,
                                       std::optional<std::size_t> adapt_steps = std::nullopt,
                                       std::size_t threads = 1) {
  return meta_test(params, std::span<const Episode<T>>(episodes), inner, adapt_steps, threads);
}

}  // namespace metaloop
