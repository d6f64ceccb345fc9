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

// Few-shot task sources: seeded synthetic grating domains, an on-disk dataset
// format, and the n-way k-shot episode sampler shared by both.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <numeric>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "metaloop/archive.hpp"
#include "metaloop/meta.hpp"

namespace metaloop {

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + std::string(s) + "' (expected train, val or test)");
}

/// Class-disjoint meta-train / meta-validation / meta-test class ids.
struct SplitDataset {
  std::vector<int> train, val, test;

  const std::vector<int>& classes(Split s) const {
    switch (s) {
      case Split::train: return train;
      case Split::val: return val;
      case Split::test: return test;
    }
    return train;
  }
};

using ImageShape = std::array<std::size_t, 3>;  // C, H, W

/// Anything episodes can be drawn from: a fixed pool of instances per class.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual const SplitDataset& splits() const = 0;
  virtual ImageShape image_shape() const = 0;
  virtual std::size_t instances(int class_id) const = 0;
  /// Writes C*H*W values of one instance into `out`.
  virtual void instance(int class_id, std::size_t index, std::span<float> out) const = 0;
};

// ------------------------------------------------------------ synthetic domains

inline constexpr std::size_t kPatternPlanes = 3;
inline constexpr std::size_t kGratingsPerPlane = 3;

struct DomainSpec {
  std::uint64_t seed = 1;
  std::size_t train_classes = 20;
  std::size_t val_classes = 5;
  std::size_t test_classes = 5;
  ImageShape image{3, 32, 32};
  double freq_lo = 1.0;  // cycles per image
  double freq_hi = 4.0;
  double contrast_lo = 0.7;
  double contrast_hi = 1.0;
  /// C x kPatternPlanes row-major; empty means identity-like default mixing.
  std::vector<double> channel_mixing;
  std::size_t max_translate = 4;  // px, wrap-around
  double max_phase = 0.5;         // radians of grating phase jitter
  double noise_std = 0.1;
  std::size_t instances_per_class = 600;

  std::size_t num_classes() const { return train_classes + val_classes + test_classes; }

  std::vector<double> mixing() const {
    if (!channel_mixing.empty()) return channel_mixing;
    std::vector<double> m(image[0] * kPatternPlanes, 0.0);
    for (std::size_t c = 0; c < image[0]; ++c) {
      m[c * kPatternPlanes + c % kPatternPlanes] = 1.0;
      m[c * kPatternPlanes + (c + 1) % kPatternPlanes] = 0.25;
    }
    return m;
  }

  void validate() const {
    if (!(freq_lo < freq_hi) || freq_lo <= 0.0) {
      throw std::invalid_argument("domain: need 0 < freq_lo < freq_hi");
    }
    if (!(contrast_lo > 0.0 && contrast_lo <= contrast_hi && contrast_hi <= 1.0)) {
      throw std::invalid_argument("domain: need 0 < contrast_lo <= contrast_hi <= 1");
    }
    if (!(noise_std >= 0.0)) throw std::invalid_argument("domain: noise_std must be >= 0");
    if (max_phase < 0.0) throw std::invalid_argument("domain: max_phase must be >= 0");
    if (image[0] == 0 || image[1] == 0 || image[2] == 0) {
      throw std::invalid_argument("domain: image dimensions must be positive");
    }
    if (!channel_mixing.empty() && channel_mixing.size() != image[0] * kPatternPlanes) {
      throw std::invalid_argument("domain: channel_mixing needs " +
                                  std::to_string(image[0] * kPatternPlanes) + " entries");
    }
    if (num_classes() == 0) throw std::invalid_argument("domain: no classes");
    if (instances_per_class == 0) throw std::invalid_argument("domain: instances_per_class must be positive");
  }
};

namespace detail {

struct Grating {
  double amplitude, freq, orientation, phase;
};

inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::seed_seq seq(parts.begin(), parts.end());
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline constexpr std::uint64_t kPrototypeTag = 0x70726f746fULL;
inline constexpr std::uint64_t kInstanceTag = 0x696e7374ULL;
inline constexpr std::uint64_t kShiftTag = 0x7368696674ULL;

}  // namespace detail

/// A class: its gratings, pre-rendered as sin/cos planes so that phase-jittered
/// instances are a cheap linear combination, and its normalization.
struct ClassPrototype {
  int class_id = 0;
  std::vector<float> image;  // C*H*W in [0, 1]
  std::vector<detail::Grating> gratings;  // kPatternPlanes * kGratingsPerPlane
  std::vector<double> sin_planes, cos_planes;  // per grating, H*W
  double offset = 0.0, gain = 1.0;  // raw -> [0, 1]
};

/// Seeded synthetic domain. Immutable after construction; sampling an
/// instance is a pure function of (spec, class id, instance index).
class Domain final : public SampleSource {
 public:
  explicit Domain(DomainSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const std::size_t total = spec_.num_classes();
    for (std::size_t i = 0; i < total; ++i) {
      const int id = static_cast<int>(i);
      if (i < spec_.train_classes) splits_.train.push_back(id);
      else if (i < spec_.train_classes + spec_.val_classes) splits_.val.push_back(id);
      else splits_.test.push_back(id);
    }
    mixing_ = spec_.mixing();
    for (std::size_t i = 0; i < total; ++i) {
      bool placed = false;
      for (std::uint64_t attempt = 0; attempt < 64 && !placed; ++attempt) {
        auto proto = make_prototype(static_cast<int>(i), attempt);
        placed = std::all_of(prototypes_.begin(), prototypes_.end(), [&](const ClassPrototype& o) {
          return pattern_cosine(o.image, proto.image) < 0.9;
        });
        if (placed) prototypes_.push_back(std::move(proto));
      }
      if (!placed) {
        throw std::runtime_error("domain: class " + std::to_string(i) +
                                 " could not be made dissimilar (pattern cosine < 0.9) to earlier classes "
                                 "in 64 redraws");
      }
    }
  }

  const DomainSpec& spec() const { return spec_; }
  const SplitDataset& splits() const override { return splits_; }
  ImageShape image_shape() const override { return spec_.image; }
  std::size_t instances(int) const override { return spec_.instances_per_class; }
  const ClassPrototype& prototype(int class_id) const { return prototypes_.at(class_id); }

  void instance(int class_id, std::size_t index, std::span<float> out) const override {
    const auto& proto = prototypes_.at(static_cast<std::size_t>(class_id));
    const std::size_t c_count = spec_.image[0], h = spec_.image[1], w = spec_.image[2];
    const std::size_t hw = h * w;
    if (out.size() != c_count * hw) throw ShapeError("domain: output buffer has wrong size");
    std::mt19937_64 rng(detail::mix_seed({spec_.seed, detail::kInstanceTag,
                                          static_cast<std::uint64_t>(class_id), index}));
    std::uniform_real_distribution<double> phase(-spec_.max_phase, spec_.max_phase);
    std::uniform_int_distribution<long> shift(-static_cast<long>(spec_.max_translate),
                                              static_cast<long>(spec_.max_translate));
    std::normal_distribution<double> noise(0.0, 1.0);

    std::vector<double> planes(kPatternPlanes * hw, 0.0);
    for (std::size_t g = 0; g < proto.gratings.size(); ++g) {
      const double delta = spec_.max_phase > 0.0 ? phase(rng) : 0.0;
      const double a = proto.gratings[g].amplitude;
      const double cs = a * std::cos(delta), sn = a * std::sin(delta);
      double* plane = planes.data() + (g / kGratingsPerPlane) * hw;
      const double* s = proto.sin_planes.data() + g * hw;
      const double* c = proto.cos_planes.data() + g * hw;
      for (std::size_t t = 0; t < hw; ++t) plane[t] += s[t] * cs + c[t] * sn;
    }
    const long dx = spec_.max_translate ? shift(rng) : 0;
    const long dy = spec_.max_translate ? shift(rng) : 0;
    for (std::size_t ch = 0; ch < c_count; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        const std::size_t sy = static_cast<std::size_t>((static_cast<long>(y) - dy + static_cast<long>(h) * 8) % static_cast<long>(h));
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t sx = static_cast<std::size_t>((static_cast<long>(x) - dx + static_cast<long>(w) * 8) % static_cast<long>(w));
          double raw = 0.0;
          for (std::size_t p = 0; p < kPatternPlanes; ++p) {
            raw += mixing_[ch * kPatternPlanes + p] * planes[p * hw + sy * w + sx];
          }
          double v = (raw - proto.offset) * proto.gain;
          if (spec_.noise_std > 0.0) v += spec_.noise_std * noise(rng);
          out[ch * hw + y * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }

  /// Cosine of the mean-subtracted images: the shared mid-gray level would
  /// otherwise dominate, more so at low contrast.
  static double pattern_cosine(std::span<const float> a, std::span<const float> b) {
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ma += a[i];
      mb += b[i];
    }
    ma /= double(a.size());
    mb /= double(b.size());
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double x = a[i] - ma, y = b[i] - mb;
      ab += x * y;
      aa += x * x;
      bb += y * y;
    }
    return (aa < 1e-24 || bb < 1e-24) ? 0.0 : ab / std::sqrt(aa * bb);
  }

 private:
  ClassPrototype make_prototype(int class_id, std::uint64_t attempt) const {
    const std::size_t c_count = spec_.image[0], h = spec_.image[1], w = spec_.image[2];
    const std::size_t hw = h * w;
    std::mt19937_64 rng(detail::mix_seed(
        {spec_.seed, detail::kPrototypeTag, static_cast<std::uint64_t>(class_id), attempt}));
    std::uniform_real_distribution<double> amp(0.5, 1.0), freq(spec_.freq_lo, spec_.freq_hi),
        orient(0.0, std::numbers::pi), phase(0.0, 2.0 * std::numbers::pi),
        contrast(spec_.contrast_lo, spec_.contrast_hi);

    ClassPrototype p;
    p.class_id = class_id;
    const std::size_t count = kPatternPlanes * kGratingsPerPlane;
    p.sin_planes.resize(count * hw);
    p.cos_planes.resize(count * hw);
    for (std::size_t g = 0; g < count; ++g) {
      detail::Grating gr{amp(rng), freq(rng), orient(rng), phase(rng)};
      const double kx = 2.0 * std::numbers::pi * gr.freq * std::cos(gr.orientation) / double(w);
      const double ky = 2.0 * std::numbers::pi * gr.freq * std::sin(gr.orientation) / double(h);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double arg = kx * double(x) + ky * double(y) + gr.phase;
          p.sin_planes[g * hw + y * w + x] = std::sin(arg);
          p.cos_planes[g * hw + y * w + x] = std::cos(arg);
        }
      }
      p.gratings.push_back(gr);
    }
    const double class_contrast = contrast(rng);

    std::vector<double> raw(c_count * hw, 0.0);
    for (std::size_t ch = 0; ch < c_count; ++ch) {
      for (std::size_t g = 0; g < count; ++g) {
        const double m = mixing_[ch * kPatternPlanes + g / kGratingsPerPlane];
        if (m == 0.0) continue;
        for (std::size_t t = 0; t < hw; ++t) {
          raw[ch * hw + t] += m * p.gratings[g].amplitude * p.sin_planes[g * hw + t];
        }
      }
    }
    const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
    const double range = std::max(*hi - *lo, 1e-12);
    // raw -> 0.5 + contrast * (unit - 0.5), unit = (raw - lo) / range
    p.gain = class_contrast / range;
    p.offset = *lo + range * 0.5 - 0.5 / p.gain;
    p.image.resize(raw.size());
    for (std::size_t t = 0; t < raw.size(); ++t) {
      p.image[t] = static_cast<float>(std::clamp((raw[t] - p.offset) * p.gain, 0.0, 1.0));
    }
    return p;
  }

  DomainSpec spec_;
  SplitDataset splits_;
  std::vector<double> mixing_;
  std::vector<ClassPrototype> prototypes_;
};

/// Builds a domain handle; prototypes are materialized eagerly.
inline std::shared_ptr<const Domain> make_domain(const DomainSpec& spec) {
  return std::make_shared<const Domain>(spec);
}

/// Moves a domain toward an independent draw of its pattern family.
/// severity 0 returns the spec unchanged; any positive severity uses fresh
/// classes (new seed) with frequency band, contrast range and channel mixing
/// interpolated toward the independent draw; severity 1 is fully independent.
inline DomainSpec shift_domain(const DomainSpec& spec, double severity) {
  if (!(severity >= 0.0 && severity <= 1.0)) {
    throw std::invalid_argument("shift_domain: severity must lie in [0, 1]");
  }
  if (severity == 0.0) return spec;
  std::mt19937_64 rng(detail::mix_seed({spec.seed, detail::kShiftTag}));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double f_lo = 0.5 + 3.0 * u(rng);
  const double f_hi = f_lo + 1.0 + 3.0 * u(rng);
  const double c_lo = 0.5 + 0.3 * u(rng);
  const double c_hi = std::min(1.0, c_lo + 0.1 + 0.3 * u(rng));
  std::vector<double> mix(spec.image[0] * kPatternPlanes);
  for (auto& m : mix) m = 2.0 * u(rng) - 1.0;
  const std::uint64_t fresh_seed = rng();

  auto lerp = [severity](double a, double b) { return a + severity * (b - a); };
  DomainSpec out = spec;
  out.seed = fresh_seed;
  out.freq_lo = lerp(spec.freq_lo, f_lo);
  out.freq_hi = std::max(lerp(spec.freq_hi, f_hi), out.freq_lo + 1e-3);
  out.contrast_lo = lerp(spec.contrast_lo, c_lo);
  out.contrast_hi = std::max(lerp(spec.contrast_hi, c_hi), out.contrast_lo);
  const auto base = spec.mixing();
  out.channel_mixing.resize(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) out.channel_mixing[i] = lerp(base[i], mix[i]);
  return out;
}

// -------------------------------------------------------------- episode sampler

/// Samples n classes from `split`, assigns them a random permutation of
/// labels 0..n-1, and draws k support plus q query distinct instances per
/// class. Support and query are laid out label-major.
template <typename T>
Episode<T> sample_episode(const SampleSource& source, Split split, std::size_t n, std::size_t k,
                          std::size_t q, std::mt19937_64& rng) {
  auto classes = source.splits().classes(split);
  if (n == 0 || k == 0 || q == 0) throw std::invalid_argument("sample_episode: n, k, q must be positive");
  if (n > classes.size()) {
    throw std::invalid_argument("sample_episode: " + std::to_string(n) + "-way episode needs " +
                                std::to_string(n) + " classes but split '" + to_string(split) +
                                "' has " + std::to_string(classes.size()));
  }
  std::shuffle(classes.begin(), classes.end(), rng);
  classes.resize(n);

  const auto shape = source.image_shape();
  const std::size_t per = shape[0] * shape[1] * shape[2];
  Episode<T> ep;
  ep.n = n;
  ep.k = k;
  ep.q = q;
  ep.classes = classes;
  std::vector<float> sx(n * k * per), qx(n * q * per);
  for (std::size_t label = 0; label < n; ++label) {
    const int cls = classes[label];
    const std::size_t pool = source.instances(cls);
    if (k + q > pool) {
      throw std::invalid_argument("sample_episode: class " + std::to_string(cls) + " has " +
                                  std::to_string(pool) + " instances, need " +
                                  std::to_string(k + q));
    }
    // Partial Fisher-Yates over instance indices.
    std::vector<std::uint32_t> idx(pool);
    std::iota(idx.begin(), idx.end(), 0u);
    for (std::size_t i = 0; i < k + q; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t row = label * k + i;
      source.instance(cls, idx[i], std::span<float>(sx.data() + row * per, per));
      ep.support.y.push_back(static_cast<int>(label));
      ep.support_instances.push_back(idx[i]);
    }
    for (std::size_t i = 0; i < q; ++i) {
      const std::size_t row = label * q + i;
      source.instance(cls, idx[k + i], std::span<float>(qx.data() + row * per, per));
      ep.query.y.push_back(static_cast<int>(label));
      ep.query_instances.push_back(idx[k + i]);
    }
  }
  ep.support.x = Tensor<T>(Shape{n * k, shape[0], shape[1], shape[2]},
                           std::vector<T>(sx.begin(), sx.end()));
  ep.query.x = Tensor<T>(Shape{n * q, shape[0], shape[1], shape[2]},
                         std::vector<T>(qx.begin(), qx.end()));
  return ep;
}

/// `count` episodes from one seed, in order.
template <typename T>
std::vector<Episode<T>> sample_episodes(const SampleSource& source, Split split, std::size_t n,
                                        std::size_t k, std::size_t q, std::size_t count,
                                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Episode<T>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_episode<T>(source, split, n, k, q, rng));
  return out;
}

// ----------------------------------------------------------- on-disk datasets
//
// root/manifest: one line per class, "split<TAB>class_id<TAB>relative_path";
// each path is a tensor archive of shape (num_samples, C, H, W).

class DiskDataset final : public SampleSource {
 public:
  explicit DiskDataset(std::filesystem::path root) : root_(std::move(root)) {
    const auto manifest = root_ / "manifest";
    std::ifstream is(manifest);
    if (!is) throw std::runtime_error("dataset: missing manifest " + manifest.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::istringstream fields(line);
      std::string split, id, rel;
      if (!std::getline(fields, split, '\t') || !std::getline(fields, id, '\t') ||
          !std::getline(fields, rel) || rel.empty()) {
        throw std::runtime_error("dataset: " + manifest.string() + ":" + std::to_string(line_no) +
                                 ": expected split<TAB>class_id<TAB>path");
      }
      Entry e;
      try {
        e.class_id = std::stoi(id);
      } catch (const std::exception&) {
        throw std::runtime_error("dataset: " + manifest.string() + ":" + std::to_string(line_no) +
                                 ": bad class id '" + id + "'");
      }
      e.path = root_ / rel;
      const Split s = parse_split(split);
      if (index_.count(e.class_id)) {
        throw std::runtime_error("dataset: class " + id + " listed twice");
      }
      auto header = read_header(e.path);
      if (header.size() != 4 || header[0] == 0) {
        throw std::runtime_error("dataset: " + e.path.string() + " has shape " + shape_str(header) +
                                 "; expected (num_samples > 0, C, H, W)");
      }
      const ImageShape shape{header[1], header[2], header[3]};
      if (entries_.empty()) {
        shape_ = shape;
      } else if (shape != shape_) {
        throw std::runtime_error("dataset: " + e.path.string() + " images are " +
                                 shape_str(Shape(shape.begin(), shape.end())) + " but earlier classes are " +
                                 shape_str(Shape(shape_.begin(), shape_.end())));
      }
      e.count = header[0];
      index_[e.class_id] = entries_.size();
      entries_.push_back(std::move(e));
      switch (s) {
        case Split::train: splits_.train.push_back(entries_.back().class_id); break;
        case Split::val: splits_.val.push_back(entries_.back().class_id); break;
        case Split::test: splits_.test.push_back(entries_.back().class_id); break;
      }
    }
    if (entries_.empty()) throw std::runtime_error("dataset: manifest lists no classes");
    cache_.resize(entries_.size());
    locks_ = std::vector<std::mutex>(entries_.size());
  }

  const SplitDataset& splits() const override { return splits_; }
  ImageShape image_shape() const override { return shape_; }
  std::size_t instances(int class_id) const override { return entry(class_id).count; }

  void instance(int class_id, std::size_t index, std::span<float> out) const override {
    const std::size_t slot = index_.at(class_id);
    const auto& e = entries_[slot];
    if (index >= e.count) throw std::out_of_range("dataset: instance index out of range");
    const std::size_t per = shape_[0] * shape_[1] * shape_[2];
    if (out.size() != per) throw ShapeError("dataset: output buffer has wrong size");
    std::shared_ptr<const std::vector<float>> data;
    {
      std::lock_guard lock(locks_[slot]);
      if (!cache_[slot]) {
        auto a = archive::load_tensor(e.path);
        cache_[slot] = std::make_shared<const std::vector<float>>(std::move(a.values));
      }
      data = cache_[slot];
    }
    std::copy_n(data->data() + index * per, per, out.data());
  }

 private:
  struct Entry {
    int class_id = 0;
    std::filesystem::path path;
    std::size_t count = 0;
  };

  const Entry& entry(int class_id) const {
    auto it = index_.find(class_id);
    if (it == index_.end()) throw std::out_of_range("dataset: unknown class " + std::to_string(class_id));
    return entries_[it->second];
  }

  static Shape read_header(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot open archive " + path.string());
    try {
      std::array<char, 4> magic{};
      if (!is.read(magic.data(), 4) || magic != archive::kTensorMagic) {
        throw ArchiveError("bad magic, expected MLT1");
      }
      const auto rank = archive::get_u32(is);
      if (rank > 16) throw ArchiveError("implausible rank");
      Shape s(rank);
      for (auto& d : s) d = archive::get_u32(is);
      is.seekg(0, std::ios::end);
      const auto bytes = static_cast<std::size_t>(is.tellg());
      if (bytes != 8 + 4 * rank + 4 * shape_numel(s)) throw ArchiveError("truncated archive");
      return s;
    } catch (const ArchiveError& e) {
      throw std::runtime_error("dataset: unreadable archive " + path.string() + ": " + e.what());
    }
  }

  std::filesystem::path root_;
  SplitDataset splits_;
  ImageShape shape_{};
  std::vector<Entry> entries_;
  std::unordered_map<int, std::size_t> index_;
  mutable std::vector<std::shared_ptr<const std::vector<float>>> cache_;
  mutable std::vector<std::mutex> locks_;
};

inline std::shared_ptr<const DiskDataset> load_dataset(const std::filesystem::path& root) {
  return std::make_shared<const DiskDataset>(root);
}

/// Writes the first `per_class` instances of every class in the on-disk format.
inline void export_dataset(const SampleSource& source, const std::filesystem::path& root,
                           std::size_t per_class) {
  std::filesystem::create_directories(root);
  const auto shape = source.image_shape();
  const std::size_t per = shape[0] * shape[1] * shape[2];
  std::ofstream manifest(root / "manifest");
  if (!manifest) throw std::runtime_error("export: cannot write " + (root / "manifest").string());
  for (Split s : {Split::train, Split::val, Split::test}) {
    std::filesystem::create_directories(root / to_string(s));
    for (int cls : source.splits().classes(s)) {
      const std::size_t count = std::min(per_class, source.instances(cls));
      std::vector<float> buf(count * per);
      for (std::size_t i = 0; i < count; ++i) {
        source.instance(cls, i, std::span<float>(buf.data() + i * per, per));
      }
      const std::string rel = to_string(s) + "/class_" + std::to_string(cls) + ".mlt";
      std::ofstream os(root / rel, std::ios::binary);
      if (!os) throw std::runtime_error("export: cannot write " + (root / rel).string());
      archive::write_tensor(os, Shape{count, shape[0], shape[1], shape[2]},
                            std::span<const float>(buf));
      manifest << to_string(s) << '\t' << cls << '\t' << rel << '\n';
    }
  }
}

}  // namespace metaloop
