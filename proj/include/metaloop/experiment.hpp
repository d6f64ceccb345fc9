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

// Experiment harness: JSON configuration, training with best-on-validation
// checkpointing, batched evaluation, cross-domain evaluation, ablations and
// the representation analysis driver. Everything here is seeded explicitly.

#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "metaloop/analysis.hpp"
#include "metaloop/meta.hpp"
#include "metaloop/nn.hpp"
#include "metaloop/parallel.hpp"
#include "metaloop/tasks.hpp"

namespace metaloop {

using json = nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Algorithm { maml, anil, boil, subset, custom };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::maml: return "maml";
    case Algorithm::anil: return "anil";
    case Algorithm::boil: return "boil";
    case Algorithm::subset: return "subset";
    case Algorithm::custom: return "custom";
  }
  return "maml";
}

inline Algorithm parse_algorithm(std::string_view s) {
  for (Algorithm a : {Algorithm::maml, Algorithm::anil, Algorithm::boil, Algorithm::subset,
                      Algorithm::custom}) {
    if (s == to_string(a)) return a;
  }
  throw ConfigError("unknown algorithm '" + std::string(s) +
                    "' (expected maml, anil, boil, subset or custom)");
}

struct InnerSettings {
  double alpha = 0.5;
  std::optional<double> alpha_head;    // presets: overrides the head rate
  std::set<std::string> learn;         // subset: body layers adapted
  bool learn_head = false;             // subset
  std::map<std::string, double> lr;    // custom: explicit per-group rates
  std::size_t steps = 1;
  GradOrder order = GradOrder::second;
};

struct EpisodeGeometry {
  std::size_t n = 5, k = 5, q = 15;
};

struct Seeds {
  std::uint64_t init = 1;   // parameter initialization
  std::uint64_t train = 2;  // training episode stream
  std::uint64_t val = 3;    // validation episodes
  std::uint64_t test = 4;   // evaluation batches (batch b uses test + b)
};

struct EvalSchedule {
  std::size_t every = 100;
  std::size_t val_episodes = 100;
  std::size_t test_batches = 5;
  std::size_t test_episodes = 200;
  std::optional<std::size_t> adapt_steps;  // meta-test inner steps (default: inner.steps)
};

struct ExperimentConfig {
  BackboneConfig backbone;
  Algorithm algorithm = Algorithm::boil;
  InnerSettings inner;
  OuterLoopConfig outer;
  DomainSpec domain;              // image shape follows backbone.input
  std::optional<double> target_severity;
  std::string dataset_root;       // non-empty: on-disk dataset replaces the synthetic domain
  EpisodeGeometry episodes;
  Seeds seeds;
  EvalSchedule eval;
};

// ----------------------------------------------------------------- JSON I/O

namespace detail {

// Reads keys of `j` into place; every key must be consumed.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <typename V>
  void get_optional(const char* key, std::optional<V>& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    try {
      out = it->template get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Parses a configuration document. Unknown keys are errors; absent keys take
/// defaults, with family-dependent defaults for the inner and outer rates.
inline ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig cfg;
  detail::ObjectReader root(doc, "config");
  std::string algorithm = "boil";
  root.get("algorithm", algorithm);
  cfg.algorithm = parse_algorithm(algorithm);
  root.get("dataset_root", cfg.dataset_root);

  std::optional<double> alpha, beta;
  if (const json* b = root.sub("backbone")) {
    detail::ObjectReader r(*b, "backbone");
    std::string family = "convnet";
    r.get("family", family);
    cfg.backbone.family = parse_family(family);
    r.get("depth", cfg.backbone.depth);
    r.get("base_channels", cfg.backbone.base_channels);
    std::vector<std::size_t> input{cfg.backbone.input[0], cfg.backbone.input[1], cfg.backbone.input[2]};
    r.get("input", input);
    if (input.size() != 3) throw ConfigError("backbone.input: expected [C, H, W]");
    cfg.backbone.input = {input[0], input[1], input[2]};
    r.get("disconnect_last_skip", cfg.backbone.disconnect_last_skip);
    r.get("leaky_slope", cfg.backbone.leaky_slope);
    r.get("bn_eps", cfg.backbone.bn_eps);
    r.finish();
  }
  if (const json* e = root.sub("episodes")) {
    detail::ObjectReader r(*e, "episodes");
    r.get("n", cfg.episodes.n);
    r.get("k", cfg.episodes.k);
    r.get("q", cfg.episodes.q);
    r.finish();
  }
  if (const json* i = root.sub("inner")) {
    detail::ObjectReader r(*i, "inner");
    r.get_optional("alpha", alpha);
    r.get_optional("alpha_head", cfg.inner.alpha_head);
    std::vector<std::string> learn;
    r.get("learn", learn);
    cfg.inner.learn = {learn.begin(), learn.end()};
    r.get("learn_head", cfg.inner.learn_head);
    r.get("lr", cfg.inner.lr);
    r.get("steps", cfg.inner.steps);
    std::string order = "second";
    r.get("order", order);
    if (order != "second" && order != "first") throw ConfigError("inner.order: expected second or first");
    cfg.inner.order = order == "second" ? GradOrder::second : GradOrder::first;
    r.finish();
  }
  if (const json* o = root.sub("outer")) {
    detail::ObjectReader r(*o, "outer");
    r.get_optional("beta", beta);
    r.get_optional("beta_body", cfg.outer.beta_body);
    r.get_optional("beta_head", cfg.outer.beta_head);
    r.get("meta_batch_size", cfg.outer.meta_batch_size);
    r.get("steps", cfg.outer.steps);
    std::string variant = "none", optimizer = "adam";
    r.get("head_variant", variant);
    cfg.outer.head_variant = parse_head_variant(variant);
    r.get("optimizer", optimizer);
    if (optimizer != "adam" && optimizer != "sgd") throw ConfigError("outer.optimizer: expected adam or sgd");
    cfg.outer.optimizer = optimizer == "adam" ? OuterOptimizer::adam : OuterOptimizer::sgd;
    r.get("adam_beta1", cfg.outer.adam_beta1);
    r.get("adam_beta2", cfg.outer.adam_beta2);
    r.get("adam_eps", cfg.outer.adam_eps);
    r.finish();
  }
  if (const json* d = root.sub("domain")) {
    detail::ObjectReader r(*d, "domain");
    auto& s = cfg.domain;
    r.get("seed", s.seed);
    r.get("train_classes", s.train_classes);
    r.get("val_classes", s.val_classes);
    r.get("test_classes", s.test_classes);
    r.get("freq_lo", s.freq_lo);
    r.get("freq_hi", s.freq_hi);
    r.get("contrast_lo", s.contrast_lo);
    r.get("contrast_hi", s.contrast_hi);
    r.get("channel_mixing", s.channel_mixing);
    r.get("max_translate", s.max_translate);
    r.get("max_phase", s.max_phase);
    r.get("noise_std", s.noise_std);
    r.get("instances_per_class", s.instances_per_class);
    r.finish();
  }
  if (const json* t = root.sub("target")) {
    detail::ObjectReader r(*t, "target");
    r.get_optional("severity", cfg.target_severity);
    r.finish();
  }
  if (const json* s = root.sub("seeds")) {
    detail::ObjectReader r(*s, "seeds");
    r.get("init", cfg.seeds.init);
    r.get("train", cfg.seeds.train);
    r.get("val", cfg.seeds.val);
    r.get("test", cfg.seeds.test);
    r.finish();
  }
  if (const json* e = root.sub("eval")) {
    detail::ObjectReader r(*e, "eval");
    r.get("every", cfg.eval.every);
    r.get("val_episodes", cfg.eval.val_episodes);
    r.get("test_batches", cfg.eval.test_batches);
    r.get("test_episodes", cfg.eval.test_episodes);
    r.get_optional("adapt_steps", cfg.eval.adapt_steps);
    r.finish();
  }
  root.finish();

  // Per-family defaults: convnet 0.5 / 0.001, miniresnet 0.3 / 0.0006.
  const bool resnet = cfg.backbone.family == Family::miniresnet;
  cfg.inner.alpha = alpha.value_or(resnet ? 0.3 : 0.5);
  cfg.outer.beta = beta.value_or(resnet ? 0.0006 : 0.001);
  cfg.backbone.num_classes = cfg.episodes.n;
  cfg.domain.image = cfg.backbone.input;
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(is, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(doc);
}

/// Fully explicit form of a configuration; parse_config(to_json(c)) == c.
inline json to_json(const ExperimentConfig& c) {
  json j;
  j["algorithm"] = to_string(c.algorithm);
  j["dataset_root"] = c.dataset_root;
  j["backbone"] = {{"family", to_string(c.backbone.family)},
                   {"depth", c.backbone.depth},
                   {"base_channels", c.backbone.base_channels},
                   {"input", {c.backbone.input[0], c.backbone.input[1], c.backbone.input[2]}},
                   {"disconnect_last_skip", c.backbone.disconnect_last_skip},
                   {"leaky_slope", c.backbone.leaky_slope},
                   {"bn_eps", c.backbone.bn_eps}};
  j["episodes"] = {{"n", c.episodes.n}, {"k", c.episodes.k}, {"q", c.episodes.q}};
  json inner = {{"alpha", c.inner.alpha},
                {"alpha_head", c.inner.alpha_head ? json(*c.inner.alpha_head) : json(nullptr)},
                {"learn", std::vector<std::string>(c.inner.learn.begin(), c.inner.learn.end())},
                {"learn_head", c.inner.learn_head},
                {"lr", c.inner.lr},
                {"steps", c.inner.steps},
                {"order", c.inner.order == GradOrder::second ? "second" : "first"}};
  j["inner"] = inner;
  j["outer"] = {{"beta", c.outer.beta},
                {"beta_body", c.outer.beta_body ? json(*c.outer.beta_body) : json(nullptr)},
                {"beta_head", c.outer.beta_head ? json(*c.outer.beta_head) : json(nullptr)},
                {"meta_batch_size", c.outer.meta_batch_size},
                {"steps", c.outer.steps},
                {"head_variant", to_string(c.outer.head_variant)},
                {"optimizer", c.outer.optimizer == OuterOptimizer::adam ? "adam" : "sgd"},
                {"adam_beta1", c.outer.adam_beta1},
                {"adam_beta2", c.outer.adam_beta2},
                {"adam_eps", c.outer.adam_eps}};
  const auto& d = c.domain;
  j["domain"] = {{"seed", d.seed},
                 {"train_classes", d.train_classes},
                 {"val_classes", d.val_classes},
                 {"test_classes", d.test_classes},
                 {"freq_lo", d.freq_lo},
                 {"freq_hi", d.freq_hi},
                 {"contrast_lo", d.contrast_lo},
                 {"contrast_hi", d.contrast_hi},
                 {"channel_mixing", d.channel_mixing},
                 {"max_translate", d.max_translate},
                 {"max_phase", d.max_phase},
                 {"noise_std", d.noise_std},
                 {"instances_per_class", d.instances_per_class}};
  j["target"] = {{"severity", c.target_severity ? json(*c.target_severity) : json(nullptr)}};
  j["seeds"] = {{"init", c.seeds.init}, {"train", c.seeds.train}, {"val", c.seeds.val}, {"test", c.seeds.test}};
  j["eval"] = {{"every", c.eval.every},
               {"val_episodes", c.eval.val_episodes},
               {"test_batches", c.eval.test_batches},
               {"test_episodes", c.eval.test_episodes},
               {"adapt_steps", c.eval.adapt_steps ? json(*c.eval.adapt_steps) : json(nullptr)}};
  return j;
}

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256: digest failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

inline std::string config_hash(const ExperimentConfig& c) { return sha256_hex(to_json(c).dump()); }

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// ------------------------------------------------------------ resolution

inline std::shared_ptr<const SampleSource> make_source(const ExperimentConfig& c) {
  if (!c.dataset_root.empty()) {
    auto d = load_dataset(c.dataset_root);
    const auto s = d->image_shape();
    if (s != c.backbone.input) {
      throw ConfigError("dataset images are " + shape_str(Shape(s.begin(), s.end())) +
                        " but backbone.input is " +
                        shape_str(Shape(c.backbone.input.begin(), c.backbone.input.end())));
    }
    return d;
  }
  return make_domain(c.domain);
}

template <typename T>
InnerLoopConfig make_inner(const ExperimentConfig& c, const ParameterSet<T>& params) {
  const auto groups = params.group_names();
  InnerLoopConfig out;
  switch (c.algorithm) {
    case Algorithm::maml: out = presets::maml(groups, c.inner.alpha); break;
    case Algorithm::anil: out = presets::anil(groups, c.inner.alpha); break;
    case Algorithm::boil: out = presets::boil(groups, c.inner.alpha); break;
    case Algorithm::subset:
      out = layer_subset_config(groups, c.inner.learn, c.inner.learn_head, c.inner.alpha);
      break;
    case Algorithm::custom: out.lr = c.inner.lr; break;
  }
  if (c.inner.alpha_head && c.algorithm != Algorithm::custom) out.lr[std::string(kHeadGroup)] = *c.inner.alpha_head;
  out.steps = c.inner.steps;
  out.order = c.inner.order;
  out.validate(params);
  return out;
}

/// Validates everything that can be checked before compute.
inline void validate(const ExperimentConfig& c) {
  layer_specs(c.backbone);
  if (c.episodes.n < 2 || c.episodes.k == 0 || c.episodes.q == 0) {
    throw ConfigError("episodes: need n >= 2 and positive k, q");
  }
  if (c.outer.meta_batch_size == 0) throw ConfigError("outer.meta_batch_size must be positive");
  if (!(c.outer.beta >= 0.0)) throw ConfigError("outer.beta must be non-negative");
  if (c.inner.steps == 0) throw ConfigError("inner.steps must be at least 1");
  if (c.eval.every == 0 || c.eval.val_episodes == 0) throw ConfigError("eval: every and val_episodes must be positive");
  if (c.eval.test_batches == 0 || c.eval.test_episodes == 0) throw ConfigError("eval: test_batches and test_episodes must be positive");
  if (c.target_severity && !(*c.target_severity >= 0.0 && *c.target_severity <= 1.0)) {
    throw ConfigError("target.severity must lie in [0, 1]");
  }
  if (c.dataset_root.empty()) {
    c.domain.validate();
    if (c.episodes.n > std::min({c.domain.train_classes, c.domain.val_classes, c.domain.test_classes})) {
      throw ConfigError("domain: every split needs at least n = " + std::to_string(c.episodes.n) + " classes");
    }
  }
  if (c.outer.head_variant == HeadVariant::fix && c.episodes.n > feature_dim(c.backbone)) {
    throw ConfigError("fix head variant needs n <= feature dimension");
  }
  const auto probe = build<float>(c.backbone, 0);
  make_inner(c, probe);
}

/// Initial parameters; the fix variant starts from an orthonormal head.
inline ParameterSet<float> initial_params(const ExperimentConfig& c) {
  auto p = build<float>(c.backbone, c.seeds.init);
  if (c.outer.head_variant == HeadVariant::fix) p = orthonormalize_head(p, c.seeds.init);
  return p;
}

// ------------------------------------------------------------- evaluation

struct EvalSummary {
  std::size_t adapt_steps = 1;
  double mean_before = 0.0, std_before = 0.0;
  double mean_after = 0.0, std_after = 0.0;
  std::vector<double> batch_before, batch_after;
};

namespace detail {

inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline double mean_of(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  return v.empty() ? 0.0 : m / static_cast<double>(v.size());
}

}  // namespace detail

/// Mean query accuracy before and after adaptation over `episodes`.
inline std::pair<double, double> mean_accuracy(const ParameterSet<float>& params,
                                               const std::vector<Episode<float>>& episodes,
                                               const InnerLoopConfig& inner,
                                               std::optional<std::size_t> adapt_steps,
                                               std::size_t threads) {
  const auto acc = meta_test(params, episodes, inner, adapt_steps, threads);
  double b = 0.0, a = 0.0;
  for (const auto& e : acc) {
    b += e.before;
    a += e.after;
  }
  const double n = static_cast<double>(acc.size());
  return {b / n, a / n};
}

/// `batches` independently seeded episode batches (batch i from seed + i);
/// the reported std is over batch means.
inline EvalSummary evaluate(const ParameterSet<float>& params, const ExperimentConfig& c,
                            const SampleSource& source, Split split, std::uint64_t seed,
                            std::size_t batches, std::size_t per_batch,
                            std::optional<std::size_t> adapt_steps, std::size_t threads) {
  const auto inner = make_inner(c, params);
  EvalSummary s;
  s.adapt_steps = adapt_steps.value_or(inner.steps);
  for (std::size_t b = 0; b < batches; ++b) {
    const auto eps = sample_episodes<float>(source, split, c.episodes.n, c.episodes.k,
                                            c.episodes.q, per_batch, seed + b);
    const auto [before, after] = mean_accuracy(params, eps, inner, s.adapt_steps, threads);
    s.batch_before.push_back(before);
    s.batch_after.push_back(after);
  }
  s.mean_before = detail::mean_of(s.batch_before);
  s.mean_after = detail::mean_of(s.batch_after);
  s.std_before = detail::sample_std(s.batch_before);
  s.std_after = detail::sample_std(s.batch_after);
  return s;
}

inline std::uint64_t split_seed(const Seeds& s, Split split) {
  switch (split) {
    case Split::train: return s.train;
    case Split::val: return s.val;
    case Split::test: return s.test;
  }
  return s.test;
}

/// Default evaluation protocol: test_batches x test_episodes on `split`.
inline EvalSummary evaluate(const ParameterSet<float>& params, const ExperimentConfig& c,
                            const SampleSource& source, Split split = Split::test,
                            std::optional<std::size_t> adapt_steps = std::nullopt,
                            std::size_t threads = 1) {
  return evaluate(params, c, source, split, split_seed(c.seeds, split), c.eval.test_batches,
                  c.eval.test_episodes, adapt_steps ? adapt_steps : c.eval.adapt_steps, threads);
}

// ---------------------------------------------------------------- training

struct MetricsRow {
  std::size_t step = 0;
  double meta_loss = 0.0;  // mean meta-loss over the steps since the previous row
  double val_acc_before = 0.0;
  double val_acc_after = 0.0;
};

struct TrainResult {
  ParameterSet<float> best;
  ParameterSet<float> final;
  std::size_t best_step = 0;
  double best_val_acc_before = 0.0;
  double best_val_acc_after = 0.0;
  std::vector<MetricsRow> rows;
};

struct TrainOptions {
  std::size_t threads = 1;
  std::ostream* log = nullptr;
};

/// Runs outer steps on training episodes. Validation runs at step 0 and then
/// every `eval.every` steps (and at the last step) on a fixed set of
/// validation episodes; the best validation after-adaptation accuracy wins,
/// earlier steps on ties.
inline TrainResult train(const ExperimentConfig& c, const SampleSource& source,
                         const TrainOptions& opt = {}) {
  validate(c);
  auto params = initial_params(c);
  const auto inner = make_inner(c, params);
  const auto val = sample_episodes<float>(source, Split::val, c.episodes.n, c.episodes.k,
                                          c.episodes.q, c.eval.val_episodes, c.seeds.val);
  const auto adapt_steps = c.eval.adapt_steps;

  TrainResult r;
  {
    const auto [b, a] = mean_accuracy(params, val, inner, adapt_steps, opt.threads);
    r.best = params;
    r.best_val_acc_before = b;
    r.best_val_acc_after = a;
  }
  OuterState<float> state;
  std::mt19937_64 rng(c.seeds.train);
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t step = 1; step <= c.outer.steps; ++step) {
    std::vector<Episode<float>> batch;
    batch.reserve(c.outer.meta_batch_size);
    for (std::size_t i = 0; i < c.outer.meta_batch_size; ++i) {
      batch.push_back(sample_episode<float>(source, Split::train, c.episodes.n, c.episodes.k,
                                            c.episodes.q, rng));
    }
    auto res = meta_step(params, batch, inner, c.outer, state, opt.threads, false);
    params = std::move(res.params);
    loss_sum += res.report.meta_loss;
    ++loss_count;
    if (step % c.eval.every == 0 || step == c.outer.steps) {
      const auto [b, a] = mean_accuracy(params, val, inner, adapt_steps, opt.threads);
      r.rows.push_back({step, loss_sum / static_cast<double>(loss_count), b, a});
      loss_sum = 0.0;
      loss_count = 0;
      if (a > r.best_val_acc_after) {
        r.best = params;
        r.best_step = step;
        r.best_val_acc_before = b;
        r.best_val_acc_after = a;
      }
      if (opt.log) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        *opt.log << "step " << step << " meta_loss " << r.rows.back().meta_loss << " val "
                 << b << " -> " << a << " (" << std::fixed << std::setprecision(1) << secs
                 << " s)" << std::defaultfloat << std::setprecision(6) << '\n';
      }
    }
  }
  r.final = params;
  return r;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "step,meta_loss,val_acc_before,val_acc_after\n" << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.step << ',' << r.meta_loss << ',' << r.val_acc_before << ',' << r.val_acc_after << '\n';
  }
}

/// Writes the resolved configuration snapshot before anything else.
inline void write_resolved_config(const std::filesystem::path& out, const ExperimentConfig& c) {
  std::filesystem::create_directories(out);
  write_json(out / "config.resolved.json", to_json(c));
}

inline json train_report_json(const ExperimentConfig& c, const TrainResult& r) {
  json j;
  j["command"] = "train";
  j["config_hash"] = config_hash(c);
  j["created_at"] = utc_timestamp();
  j["steps"] = c.outer.steps;
  j["best_step"] = r.best_step;
  j["best_val_acc_before"] = r.best_val_acc_before;
  j["best_val_acc_after"] = r.best_val_acc_after;
  if (!r.rows.empty()) {
    j["final_val_acc_before"] = r.rows.back().val_acc_before;
    j["final_val_acc_after"] = r.rows.back().val_acc_after;
  }
  return j;
}

/// train plus artifacts: config.resolved.json, metrics.csv, best.ckpt,
/// final.ckpt and report.json in `out`.
inline TrainResult run_train(const ExperimentConfig& c, const std::filesystem::path& out,
                             const TrainOptions& opt = {}) {
  write_resolved_config(out, c);
  validate(c);
  const auto source = make_source(c);
  auto r = train(c, *source, opt);
  write_metrics_csv(out / "metrics.csv", r.rows);
  checkpoint::save(out / "best.ckpt", r.best);
  checkpoint::save(out / "final.ckpt", r.final);
  write_json(out / "report.json", train_report_json(c, r));
  return r;
}

// ----------------------------------------------------------- cross-domain

struct CrossDomainRow {
  std::string label;
  double severity = 0.0;
  EvalSummary summary;
};

/// `base` with the inner-loop settings of the run that produced a checkpoint,
/// so each model meta-tests the way it was meta-trained.
inline ExperimentConfig with_inner_settings_of(const ExperimentConfig& base, const ExperimentConfig& trained) {
  if (trained.backbone != base.backbone) {
    throw ConfigError("checkpoint was trained with a different backbone than the evaluation config");
  }
  ExperimentConfig c = base;
  c.algorithm = trained.algorithm;
  c.inner = trained.inner;
  validate(c);
  return c;
}

/// Severities for crossdomain: the explicit list, else target.severity, else 0, 0.5, 1.
inline std::vector<double> default_severities(const ExperimentConfig& c, const std::vector<double>& given) {
  if (!given.empty()) return given;
  if (c.target_severity) return {*c.target_severity};
  return {0.0, 0.5, 1.0};
}

/// Evaluates on the meta-test classes of shift_domain(source, s) per severity.
inline std::vector<CrossDomainRow> crossdomain(const ParameterSet<float>& params,
                                               const ExperimentConfig& c,
                                               const std::vector<double>& severities,
                                               const std::string& label,
                                               std::optional<std::size_t> adapt_steps,
                                               std::size_t threads) {
  if (!c.dataset_root.empty()) throw ConfigError("crossdomain needs a synthetic source domain");
  std::vector<CrossDomainRow> rows;
  for (double s : severities) {
    const Domain target(shift_domain(c.domain, s));
    rows.push_back({label, s, evaluate(params, c, target, Split::test, adapt_steps, threads)});
  }
  return rows;
}

// ---------------------------------------------------------------- analysis

struct AnalysisResult {
  std::vector<MetricRow> similarity;   // layer, before|after, intra/inter
  std::vector<MetricRow> cka;          // layer, before_vs_after, cka
  std::vector<MetricRow> grad_norms;   // group, before, weight/bias norms
  std::vector<MetricRow> table;        // layer|head, before|after, accuracy with/without head
  double head_gap_cosine = 0.0;

  double value(std::string_view layer, std::string_view state, std::string_view metric) const {
    for (const auto* rows : {&similarity, &cka, &grad_norms, &table}) {
      for (const auto& r : *rows) {
        if (r.layer == layer && r.state == state && r.metric == metric) return r.value;
      }
    }
    throw std::out_of_range("analysis: no value for " + std::string(layer) + "/" +
                            std::string(state) + "/" + std::string(metric));
  }
};

namespace detail {

struct EpisodeAnalysis {
  SimilarityReport similarity;
  CkaReport cka;
  GradNormReport norms;
  double head_before = 0.0, head_after = 0.0;
  std::vector<double> nil_before, nil_after;  // per NIL layer
};

inline void accumulate(std::vector<MetricRow>& total, const std::vector<MetricRow>& rows) {
  if (total.empty()) {
    total = rows;
    return;
  }
  for (std::size_t i = 0; i < rows.size(); ++i) total[i].value += rows[i].value;
}

}  // namespace detail

/// Averages every instrument over `count` episodes of `split`. NIL testing is
/// reported at `nil_layers` (default: the last two body layers).
inline AnalysisResult analyze(const ParameterSet<float>& params, const ExperimentConfig& c,
                              const SampleSource& source, Split split, std::size_t count,
                              std::uint64_t seed, std::vector<std::string> layers,
                              std::vector<std::string> nil_layers, std::size_t threads) {
  const auto all = capture_names(c.backbone);
  if (layers.empty()) layers = all;
  if (nil_layers.empty()) {
    nil_layers.push_back(all.back());
    if (all.size() > 1) nil_layers.insert(nil_layers.begin(), all[all.size() - 2]);
  }
  const auto inner = make_inner(c, params);
  const auto frozen = params.detached();
  const auto episodes = sample_episodes<float>(source, split, c.episodes.n, c.episodes.k,
                                               c.episodes.q, count, seed);
  const auto steps = c.eval.adapt_steps;
  auto per = parallel_map(episodes.size(), threads, [&](std::size_t i) {
    const auto& ep = episodes[i];
    detail::EpisodeAnalysis a;
    const auto adapted = adapt_for_analysis(frozen, ep, inner, steps);
    a.similarity = similarity_report(frozen, adapted, ep, layers);
    a.cka = cka_report(frozen, adapted, ep, layers);
    a.norms = grad_norm_report(frozen, ep);
    {
      NoGradGuard off;
      a.head_before = accuracy(forward(frozen, ep.query.x).logits, ep.query.y);
      a.head_after = accuracy(forward(adapted, ep.query.x).logits, ep.query.y);
    }
    for (const auto& layer : nil_layers) {
      NoGradGuard off;
      auto nil = [&](const ParameterSet<float>& p) {
        const auto s = forward(p, ep.support.x, {layer}).representation(layer);
        const auto q = forward(p, ep.query.x, {layer}).representation(layer);
        const auto pred = nil_predict(s, ep.support.y, q, ep.n);
        std::size_t hit = 0;
        for (std::size_t j = 0; j < pred.size(); ++j) hit += pred[j] == ep.query.y[j];
        return static_cast<double>(hit) / static_cast<double>(pred.size());
      };
      a.nil_before.push_back(nil(frozen));
      a.nil_after.push_back(nil(adapted));
    }
    return a;
  });

  AnalysisResult r;
  std::vector<MetricRow> table;
  double hb = 0.0, ha = 0.0;
  std::vector<double> nb(nil_layers.size(), 0.0), na(nil_layers.size(), 0.0);
  for (const auto& a : per) {
    detail::accumulate(r.similarity, to_rows(a.similarity));
    detail::accumulate(r.cka, to_rows(a.cka));
    detail::accumulate(r.grad_norms, to_rows(a.norms));
    hb += a.head_before;
    ha += a.head_after;
    for (std::size_t l = 0; l < nil_layers.size(); ++l) {
      nb[l] += a.nil_before[l];
      na[l] += a.nil_after[l];
    }
  }
  const double n = static_cast<double>(per.size());
  for (auto* rows : {&r.similarity, &r.cka, &r.grad_norms}) {
    for (auto& row : *rows) row.value /= n;
  }
  r.table.push_back({"head", "before", "accuracy_with_head", hb / n});
  r.table.push_back({"head", "after", "accuracy_with_head", ha / n});
  for (std::size_t l = 0; l < nil_layers.size(); ++l) {
    r.table.push_back({nil_layers[l], "before", "accuracy_nil", nb[l] / n});
    r.table.push_back({nil_layers[l], "after", "accuracy_nil", na[l] / n});
  }
  if (c.episodes.n >= 3) r.head_gap_cosine = head_gap_cosine(params.at("head.weight"));
  return r;
}

// ---------------------------------------------------------------- ablation

enum class AblationAxis { head_lr, layers, head_variant };

inline AblationAxis parse_axis(std::string_view s) {
  if (s == "head_lr") return AblationAxis::head_lr;
  if (s == "layers") return AblationAxis::layers;
  if (s == "head_variant") return AblationAxis::head_variant;
  throw ConfigError("unknown ablation axis '" + std::string(s) +
                    "' (expected head_lr, layers or head_variant)");
}

struct AblationVariant {
  std::string label;
  ExperimentConfig config;
};

/// One configuration per axis value, all sharing the base seeds.
///   head_lr:      body at inner.alpha, head at the value (0 is BOIL, alpha is MAML)
///   layers:       '+'-joined body layer names, optionally with 'head'; 'none' adapts nothing
///   head_variant: none | centering | fix
inline std::vector<AblationVariant> ablation_variants(const ExperimentConfig& base, AblationAxis axis,
                                                      const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("ablation needs at least one value");
  std::vector<AblationVariant> out;
  for (const auto& v : values) {
    ExperimentConfig c = base;
    switch (axis) {
      case AblationAxis::head_lr: {
        double rate = 0.0;
        try {
          std::size_t used = 0;
          rate = std::stod(v, &used);
          if (used != v.size()) throw std::invalid_argument(v);
        } catch (const std::exception&) {
          throw ConfigError("head_lr value '" + v + "' is not a number");
        }
        if (!(rate >= 0.0)) throw ConfigError("head_lr values must be non-negative");
        c.algorithm = Algorithm::maml;
        c.inner.alpha_head = rate;
        break;
      }
      case AblationAxis::layers: {
        c.algorithm = Algorithm::subset;
        c.inner.learn.clear();
        c.inner.learn_head = false;
        if (v != "none") {
          std::stringstream ss(v);
          std::string tok;
          while (std::getline(ss, tok, '+')) {
            if (tok == kHeadGroup) {
              c.inner.learn_head = true;
            } else if (!tok.empty()) {
              c.inner.learn.insert(tok);
            }
          }
        }
        break;
      }
      case AblationAxis::head_variant:
        c.outer.head_variant = parse_head_variant(v);
        break;
    }
    validate(c);
    out.push_back({v, std::move(c)});
  }
  return out;
}

struct AblationRow {
  std::string label;
  std::size_t best_step = 0;
  double best_val_acc_after = 0.0;
  EvalSummary test;
  std::vector<MetricsRow> curve;
};

inline AblationRow run_variant(const AblationVariant& v, const TrainOptions& opt) {
  const auto source = make_source(v.config);
  const auto r = train(v.config, *source, opt);
  return {v.label, r.best_step, r.best_val_acc_after,
          evaluate(r.best, v.config, *source, Split::test, std::nullopt, opt.threads), r.rows};
}

inline void write_curves_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "variant,step,meta_loss,val_acc_before,val_acc_after\n" << std::setprecision(17);
  for (const auto& r : rows) {
    for (const auto& m : r.curve) {
      os << r.label << ',' << m.step << ',' << m.meta_loss << ',' << m.val_acc_before << ','
         << m.val_acc_after << '\n';
    }
  }
}

inline json to_json(const EvalSummary& s) {
  return {{"adapt_steps", s.adapt_steps},
          {"mean_before", s.mean_before},
          {"std_before", s.std_before},
          {"mean_after", s.mean_after},
          {"std_after", s.std_after},
          {"batch_before", s.batch_before},
          {"batch_after", s.batch_after}};
}

}  // namespace metaloop
