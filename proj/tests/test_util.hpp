#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "metaloop/metaloop.hpp"

namespace metaloop::testing {

/// Central finite differences of a scalar function, step 1e-5.
inline std::vector<double> finite_difference(const std::function<double(const std::vector<double>&)>& f,
                                             std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// |a - b| / max(|b|, tiny), norm-wise.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  const auto v = random_values(shape_numel(shape), seed, lo, hi);
  return Tensor<T>(std::move(shape), std::vector<T>(v.begin(), v.end()));
}

inline std::vector<double> flat(const std::vector<Tensor<double>>& ts) {
  std::vector<double> out;
  for (const auto& t : ts) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

/// Unpacks a flat vector into tensors shaped like `like`.
inline std::vector<Tensor<double>> unflatten(const std::vector<double>& v,
                                             const std::vector<Tensor<double>>& like,
                                             bool requires_grad = false) {
  std::vector<Tensor<double>> out;
  std::size_t at = 0;
  for (const auto& t : like) {
    std::vector<double> part(v.begin() + at, v.begin() + at + t.numel());
    at += t.numel();
    out.emplace_back(t.shape(), std::move(part), requires_grad);
  }
  return out;
}

/// Checks d f / d inputs (engine) against finite differences for a function
/// of several tensors that returns a scalar tensor.
inline double gradient_error(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                             const std::vector<Tensor<double>>& inputs) {
  std::vector<Tensor<double>> leaves;
  for (const auto& t : inputs) leaves.push_back(t.requiring_grad());
  const auto grads = gradient(f(leaves), leaves);
  const auto numeric = finite_difference(
      [&](const std::vector<double>& x) { return f(unflatten(x, inputs)).item(); },
      flat(inputs));
  return relative_error(flat(grads), numeric);
}

/// Scalar probe of a tensor-valued function: sum(f(x) * fixed random weights).
inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  return sum(mul(y, random_tensor(y.shape(), seed)));
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("metaloop_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// A hand-sized backbone: 1x4x4 inputs, one conv module with 2 channels, n=2.
inline BackboneConfig tiny_config(std::size_t n = 2) {
  BackboneConfig c;
  c.depth = 1;
  c.base_channels = 2;
  c.input = {1, 4, 4};
  c.num_classes = n;
  return c;
}

template <typename T>
LabeledBatch<T> random_batch(const BackboneConfig& c, std::size_t per_class, std::uint64_t seed) {
  LabeledBatch<T> b;
  const std::size_t n = c.num_classes * per_class;
  b.x = random_tensor<T>(Shape{n, c.input[0], c.input[1], c.input[2]}, seed);
  for (std::size_t i = 0; i < n; ++i) b.y.push_back(static_cast<int>(i / per_class));
  return b;
}

template <typename T>
Episode<T> random_episode(const BackboneConfig& c, std::size_t k, std::size_t q, std::uint64_t seed) {
  Episode<T> ep;
  ep.n = c.num_classes;
  ep.k = k;
  ep.q = q;
  ep.support = random_batch<T>(c, k, seed);
  ep.query = random_batch<T>(c, q, seed + 1000);
  for (std::size_t i = 0; i < ep.n; ++i) ep.classes.push_back(static_cast<int>(i));
  return ep;
}

}  // namespace metaloop::testing
