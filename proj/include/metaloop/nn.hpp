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

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "metaloop/archive.hpp"
#include "metaloop/ops.hpp"
#include "metaloop/tensor.hpp"

namespace metaloop {

enum class Family { convnet, miniresnet };

inline std::string to_string(Family f) {
  return f == Family::convnet ? "convnet" : "miniresnet";
}

inline Family parse_family(std::string_view s) {
  if (s == "convnet") return Family::convnet;
  if (s == "miniresnet") return Family::miniresnet;
  throw std::invalid_argument("unknown backbone family '" + std::string(s) +
                              "' (expected convnet or miniresnet)");
}

struct BackboneConfig {
  Family family = Family::convnet;
  std::size_t depth = 4;
  std::size_t base_channels = 32;
  std::array<std::size_t, 3> input{3, 32, 32};  // C, H, W
  std::size_t num_classes = 5;
  bool disconnect_last_skip = false;
  double leaky_slope = 0.01;
  double bn_eps = 1e-5;

  bool operator==(const BackboneConfig&) const = default;
};

enum class LayerKind { conv_module, residual_block, linear_head };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv_module;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  bool skip_enabled = false;
  std::size_t out_h = 0, out_w = 0;  // after pooling
};

inline constexpr std::string_view kHeadGroup = "head";

/// Body layers in forward order followed by the head.
inline std::vector<LayerSpec> layer_specs(const BackboneConfig& cfg) {
  if (cfg.depth == 0) throw std::invalid_argument("backbone: depth must be positive");
  if (cfg.base_channels == 0 || cfg.num_classes == 0 || cfg.input[0] == 0) {
    throw std::invalid_argument("backbone: channels, classes and input channels must be positive");
  }
  std::vector<LayerSpec> out;
  std::size_t c = cfg.input[0], h = cfg.input[1], w = cfg.input[2];
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    if (h < 2 || w < 2) {
      throw std::invalid_argument(
          "backbone: input " + std::to_string(cfg.input[1]) + "x" +
          std::to_string(cfg.input[2]) + " is too small for " + std::to_string(cfg.depth) +
          " 2x2 poolings");
    }
    LayerSpec spec;
    spec.in_channels = c;
    if (cfg.family == Family::convnet) {
      spec.name = "conv" + std::to_string(i + 1);
      spec.kind = LayerKind::conv_module;
      spec.out_channels = cfg.base_channels;
    } else {
      spec.name = "block" + std::to_string(i + 1);
      spec.kind = LayerKind::residual_block;
      spec.out_channels = cfg.base_channels << i;
      spec.skip_enabled = !(cfg.disconnect_last_skip && i + 1 == cfg.depth);
    }
    h /= 2;
    w /= 2;
    spec.out_h = h;
    spec.out_w = w;
    c = spec.out_channels;
    out.push_back(spec);
  }
  LayerSpec head;
  head.name = std::string(kHeadGroup);
  head.kind = LayerKind::linear_head;
  head.in_channels = c * h * w;
  head.out_channels = cfg.num_classes;
  out.push_back(head);
  return out;
}

/// Dimension d of the flattened body output.
inline std::size_t feature_dim(const BackboneConfig& cfg) {
  return layer_specs(cfg).back().in_channels;
}

enum class ParamRole { weight, bias };

template <typename T>
struct Parameter {
  std::string group;
  std::string name;  // fully qualified, "<group>.<local>"
  ParamRole role = ParamRole::weight;
  Tensor<T> value;
};

/// Ordered named parameters partitioned into body groups (one per layer) and
/// the head group. Values are immutable; updates produce new sets.
template <typename T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(BackboneConfig config, std::vector<Parameter<T>> entries)
      : config_(std::move(config)), entries_(std::move(entries)) {}

  const BackboneConfig& config() const { return config_; }
  const std::vector<Parameter<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  const Parameter<T>& operator[](std::size_t i) const { return entries_[i]; }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name == name) return i;
    }
    throw std::out_of_range("parameter '" + std::string(name) + "' not found");
  }
  const Tensor<T>& at(std::string_view name) const { return entries_[index_of(name)].value; }

  std::vector<std::string> group_names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
      if (out.empty() || out.back() != e.group) out.push_back(e.group);
    }
    return out;
  }

  std::vector<std::string> body_groups() const {
    auto all = group_names();
    std::erase(all, std::string(kHeadGroup));
    return all;
  }

  bool has_group(std::string_view g) const {
    for (const auto& e : entries_) {
      if (e.group == g) return true;
    }
    return false;
  }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.value);
    return out;
  }

  ParameterSet with_tensors(std::vector<Tensor<T>> values) const {
    if (values.size() != entries_.size()) {
      throw std::invalid_argument("parameter set: expected " + std::to_string(entries_.size()) +
                                  " tensors, got " + std::to_string(values.size()));
    }
    auto entries = entries_;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      require_same_shape_for(entries[i].name, entries[i].value.shape(), values[i].shape());
      entries[i].value = std::move(values[i]);
    }
    return ParameterSet(config_, std::move(entries));
  }

  ParameterSet with_value(std::string_view name, Tensor<T> value) const {
    auto entries = entries_;
    auto& e = entries[index_of(name)];
    require_same_shape_for(e.name, e.value.shape(), value.shape());
    e.value = std::move(value);
    return ParameterSet(config_, std::move(entries));
  }

  /// Value-identical leaves that gradients can be taken with respect to.
  ParameterSet requiring_grad() const {
    auto entries = entries_;
    for (auto& e : entries) e.value = e.value.requiring_grad();
    return ParameterSet(config_, std::move(entries));
  }

  ParameterSet detached() const {
    auto entries = entries_;
    for (auto& e : entries) e.value = e.value.detach();
    return ParameterSet(config_, std::move(entries));
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

 private:
  static void require_same_shape_for(const std::string& name, const Shape& a, const Shape& b) {
    if (a != b) {
      throw ShapeError("parameter '" + name + "': expected shape " + shape_str(a) + ", got " +
                       shape_str(b));
    }
  }

  BackboneConfig config_;
  std::vector<Parameter<T>> entries_;
};

/// True when both sets hold bit-identical values under identical names.
template <typename T>
bool bit_identical(const ParameterSet<T>& a, const ParameterSet<T>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].value.shape() != b[i].value.shape()) return false;
    const auto x = a[i].value.values();
    const auto y = b[i].value.values();
    if (!std::equal(x.begin(), x.end(), y.begin(), [](T p, T q) {
          return std::bit_cast<std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>(p) ==
                 std::bit_cast<std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>(q);
        })) {
      return false;
    }
  }
  return true;
}

namespace detail {

struct ParamLayout {
  std::string group, name;
  ParamRole role;
  Shape shape;
  enum class Init { he_normal, head_uniform, zeros, ones } init;
  std::size_t fan_in = 0;
};

inline std::vector<ParamLayout> param_layout(const BackboneConfig& cfg) {
  using Init = ParamLayout::Init;
  std::vector<ParamLayout> out;
  auto conv = [&](const std::string& group, const std::string& prefix, std::size_t cin,
                  std::size_t cout, std::size_t k, bool with_bias) {
    out.push_back({group, prefix + ".weight", ParamRole::weight, Shape{cout, cin, k, k},
                   Init::he_normal, cin * k * k});
    if (with_bias) {
      out.push_back({group, prefix + ".bias", ParamRole::bias, Shape{cout}, Init::zeros});
    }
  };
  auto bn = [&](const std::string& group, const std::string& prefix, std::size_t c) {
    out.push_back({group, prefix + ".gamma", ParamRole::weight, Shape{c}, Init::ones});
    out.push_back({group, prefix + ".beta", ParamRole::bias, Shape{c}, Init::zeros});
  };
  for (const auto& spec : layer_specs(cfg)) {
    switch (spec.kind) {
      case LayerKind::conv_module:
        conv(spec.name, spec.name, spec.in_channels, spec.out_channels, 3, true);
        bn(spec.name, spec.name, spec.out_channels);
        break;
      case LayerKind::residual_block:
        for (int j = 1; j <= 3; ++j) {
          const auto p = spec.name + ".conv" + std::to_string(j);
          conv(spec.name, p, j == 1 ? spec.in_channels : spec.out_channels, spec.out_channels, 3,
               true);
          bn(spec.name, spec.name + ".bn" + std::to_string(j), spec.out_channels);
        }
        if (spec.skip_enabled && spec.in_channels != spec.out_channels) {
          conv(spec.name, spec.name + ".skip", spec.in_channels, spec.out_channels, 1, false);
        }
        break;
      case LayerKind::linear_head:
        out.push_back({spec.name, spec.name + ".weight", ParamRole::weight,
                       Shape{spec.out_channels, spec.in_channels}, Init::head_uniform,
                       spec.in_channels});
        out.push_back({spec.name, spec.name + ".bias", ParamRole::bias, Shape{spec.out_channels},
                       Init::zeros});
        break;
    }
  }
  return out;
}

}  // namespace detail

/// Deterministic initialization: conv weights ~ N(0, 2/fan_in), head weights
/// ~ U[-1/sqrt(d), 1/sqrt(d)], biases and betas zero, gammas one.
template <typename T>
ParameterSet<T> build(const BackboneConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Parameter<T>> entries;
  for (const auto& l : detail::param_layout(config)) {
    const std::size_t n = shape_numel(l.shape);
    std::vector<T> v(n);
    using Init = detail::ParamLayout::Init;
    switch (l.init) {
      case Init::he_normal: {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(l.fan_in)));
        for (auto& x : v) x = static_cast<T>(dist(rng));
        break;
      }
      case Init::head_uniform: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(l.fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& x : v) x = static_cast<T>(dist(rng));
        break;
      }
      case Init::zeros:
        std::fill(v.begin(), v.end(), T(0));
        break;
      case Init::ones:
        std::fill(v.begin(), v.end(), T(1));
        break;
    }
    entries.push_back({l.group, l.name, l.role, Tensor<T>(l.shape, std::move(v))});
  }
  return ParameterSet<T>(config, std::move(entries));
}

/// Names accepted by forward's capture argument, in forward order.
inline std::vector<std::string> capture_names(const BackboneConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& s : layer_specs(cfg)) {
    if (s.kind != LayerKind::linear_head) out.push_back(s.name);
  }
  return out;
}

template <typename T>
struct ForwardOutput {
  Tensor<T> logits;
  Tensor<T> features;  // flattened body output, (N, d)
  std::vector<std::pair<std::string, Tensor<T>>> captured;  // (N, features) per layer

  const Tensor<T>& representation(std::string_view layer) const {
    for (const auto& [name, t] : captured) {
      if (name == layer) return t;
    }
    throw std::out_of_range("layer '" + std::string(layer) + "' was not captured");
  }
};

/// Runs the backbone and head on a batch of images. Batch normalization uses
/// the statistics of `x`. Captured representations are the flattened
/// post-module outputs (after pooling), returned in forward order.
template <typename T>
ForwardOutput<T> forward(const ParameterSet<T>& params, const Tensor<T>& x,
                         const std::vector<std::string>& capture = {}) {
  const auto& cfg = params.config();
  const auto specs = layer_specs(cfg);
  const auto valid = capture_names(cfg);
  for (const auto& name : capture) {
    if (std::find(valid.begin(), valid.end(), name) == valid.end()) {
      std::string list;
      for (const auto& v : valid) list += (list.empty() ? "" : ", ") + v;
      throw std::invalid_argument("forward: unknown capture layer '" + name +
                                  "'; valid layers: " + list);
    }
  }
  if (x.rank() != 4 || x.dim(1) != cfg.input[0] || x.dim(2) != cfg.input[1] ||
      x.dim(3) != cfg.input[2]) {
    throw ShapeError("forward: input " + shape_str(x.shape()) + " does not match backbone input " +
                     shape_str(Shape{cfg.input[0], cfg.input[1], cfg.input[2]}));
  }
  const T slope = static_cast<T>(cfg.leaky_slope);
  const T eps = static_cast<T>(cfg.bn_eps);
  auto p = [&](const std::string& name) -> const Tensor<T>& { return params.at(name); };
  auto conv_bn = [&](const Tensor<T>& in, const std::string& conv, const std::string& bn) {
    auto h = bias_add(conv2d(in, p(conv + ".weight"), 1, 1), p(conv + ".bias"));
    return batch_norm(h, p(bn + ".gamma"), p(bn + ".beta"), eps);
  };

  ForwardOutput<T> out;
  Tensor<T> h = x;
  for (const auto& spec : specs) {
    if (spec.kind == LayerKind::linear_head) break;
    if (spec.kind == LayerKind::conv_module) {
      // relu is monotone, so pooling first gives the same values and
      // gradients as relu-then-pool on a quarter of the elements.
      h = relu(max_pool2d(conv_bn(h, spec.name, spec.name), 2));
    } else {
      Tensor<T> r = h;
      for (int j = 1; j <= 3; ++j) {
        r = leaky_relu(conv_bn(r, spec.name + ".conv" + std::to_string(j),
                               spec.name + ".bn" + std::to_string(j)),
                       slope);
      }
      if (spec.skip_enabled) {
        Tensor<T> skip = spec.in_channels == spec.out_channels
                             ? h
                             : conv2d(h, p(spec.name + ".skip.weight"), 1, 0);
        r = residual_add(r, skip);
      }
      h = max_pool2d(r, 2);
    }
    if (std::find(capture.begin(), capture.end(), spec.name) != capture.end()) {
      out.captured.emplace_back(spec.name, flatten(h));
    }
  }
  out.features = flatten(h);
  out.logits = linear(out.features, p("head.weight"), p("head.bias"));
  // Report captures in declared layer order regardless of request order.
  std::stable_sort(out.captured.begin(), out.captured.end(), [&](const auto& a, const auto& b) {
    return std::find(valid.begin(), valid.end(), a.first) <
           std::find(valid.begin(), valid.end(), b.first);
  });
  return out;
}

/// Replaces the head weight rows with an orthonormal basis (modified
/// Gram-Schmidt over the current rows, in order) and zeroes the head bias.
/// A rank-deficient head is replaced by a random draw from `seed`, then
/// seed+1, ..., at most 8 times.
template <typename T>
ParameterSet<T> orthonormalize_head(const ParameterSet<T>& params, std::uint64_t seed = 0) {
  const auto& w = params.at("head.weight");
  const std::size_t n = w.dim(0), d = w.dim(1);
  if (n > d) {
    throw std::invalid_argument("orthonormalize_head: " + std::to_string(n) +
                                " rows cannot be orthonormal in dimension " + std::to_string(d));
  }
  auto gram_schmidt = [n, d](std::vector<double>& rows) {
    for (std::size_t i = 0; i < n; ++i) {
      double* ri = rows.data() + i * d;
      double original = 0;
      for (std::size_t t = 0; t < d; ++t) original += ri[t] * ri[t];
      original = std::sqrt(original);
      for (std::size_t j = 0; j < i; ++j) {
        const double* rj = rows.data() + j * d;
        double dot = 0;
        for (std::size_t t = 0; t < d; ++t) dot += ri[t] * rj[t];
        for (std::size_t t = 0; t < d; ++t) ri[t] -= dot * rj[t];
      }
      double norm = 0;
      for (std::size_t t = 0; t < d; ++t) norm += ri[t] * ri[t];
      norm = std::sqrt(norm);
      if (!(norm > 1e-8 * std::max(1.0, original))) return false;
      for (std::size_t t = 0; t < d; ++t) ri[t] /= norm;
    }
    return true;
  };
  std::vector<double> rows(w.values().begin(), w.values().end());
  bool ok = gram_schmidt(rows);
  for (int attempt = 0; !ok && attempt < 8; ++attempt) {
    std::mt19937_64 rng(seed + static_cast<std::uint64_t>(attempt));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : rows) v = dist(rng);
    ok = gram_schmidt(rows);
  }
  if (!ok) throw std::runtime_error("orthonormalize_head: rank-deficient head after 8 redraws");
  std::vector<T> out(rows.begin(), rows.end());
  return params.with_value("head.weight", Tensor<T>(w.shape(), std::move(out)))
      .with_value("head.bias", Tensor<T>::zeros(params.at("head.bias").shape()));
}

/// Subtracts the mean head row from every head weight row.
template <typename T>
ParameterSet<T> center_head(const ParameterSet<T>& params) {
  const auto& w = params.at("head.weight");
  const std::size_t n = w.dim(0), d = w.dim(1);
  std::vector<T> v = w.to_vector();
  for (std::size_t t = 0; t < d; ++t) {
    double m = 0;
    for (std::size_t i = 0; i < n; ++i) m += v[i * d + t];
    m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) v[i * d + t] = static_cast<T>(v[i * d + t] - m);
  }
  return params.with_value("head.weight", Tensor<T>(w.shape(), std::move(v)));
}

// ----------------------------------------------------------------- checkpoints
//
// "MLP1", u32 LE count, then per parameter: u32 LE name length, name bytes,
// tensor archive.

namespace checkpoint {

inline constexpr std::array<char, 4> kMagic{'M', 'L', 'P', '1'};

template <typename T>
void write(std::ostream& os, const ParameterSet<T>& params) {
  os.write(kMagic.data(), 4);
  archive::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    archive::put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    archive::write_tensor(os, e.value);
  }
  if (!os) throw ArchiveError("checkpoint: write failed");
}

/// Reads a checkpoint and validates it against the layout `config` builds.
template <typename T>
ParameterSet<T> read(std::istream& is, const BackboneConfig& config) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kMagic) {
    throw ArchiveError("checkpoint: bad magic, expected MLP1");
  }
  const auto layout = detail::param_layout(config);
  const auto count = archive::get_u32(is);
  if (count != layout.size()) {
    throw ArchiveError("checkpoint: holds " + std::to_string(count) + " tensors but the " +
                       to_string(config.family) + " backbone has " +
                       std::to_string(layout.size()));
  }
  std::vector<Parameter<T>> entries;
  for (const auto& l : layout) {
    const auto len = archive::get_u32(is);
    if (len > 4096) throw ArchiveError("checkpoint: implausible name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw ArchiveError("checkpoint: truncated name");
    if (name != l.name) {
      throw ArchiveError("checkpoint: expected parameter '" + l.name + "', found '" + name + "'");
    }
    auto a = archive::read_tensor(is);
    if (a.shape != l.shape) {
      throw ArchiveError("checkpoint: parameter '" + name + "' has shape " + shape_str(a.shape) +
                         ", backbone expects " + shape_str(l.shape));
    }
    entries.push_back({l.group, l.name, l.role, archive::to_tensor<T>(a)});
  }
  return ParameterSet<T>(config, std::move(entries));
}

template <typename T>
void save(const std::filesystem::path& path, const ParameterSet<T>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ArchiveError("checkpoint: cannot open " + path.string() + " for writing");
  write(os, params);
}

template <typename T>
ParameterSet<T> load(const std::filesystem::path& path, const BackboneConfig& config) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArchiveError("checkpoint: cannot open " + path.string());
  try {
    return read<T>(is, config);
  } catch (const ArchiveError& e) {
    throw ArchiveError(path.string() + ": " + e.what());
  }
}

}  // namespace checkpoint
}  // namespace metaloop
