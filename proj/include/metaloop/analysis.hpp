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

// Representation analysis: cosine similarity statistics, linear CKA,
// template (NIL) testing, inner-loop gradient norms and head geometry.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "metaloop/archive.hpp"
#include "metaloop/meta.hpp"
#include "metaloop/nn.hpp"

namespace metaloop {

inline constexpr double kZeroNorm = 1e-12;

/// u.v / (|u||v|), or 0 when either norm is below 1e-12.
template <typename A, typename B>
double cosine(std::span<const A> u, std::span<const B> v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine: length mismatch (" + std::to_string(u.size()) + " vs " +
                                std::to_string(v.size()) + ")");
  }
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double a = static_cast<double>(u[i]), b = static_cast<double>(v[i]);
    uv += a * b;
    uu += a * a;
    vv += b * b;
  }
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  if (nu < kZeroNorm || nv < kZeroNorm) return 0.0;
  return uv / (nu * nv);
}

inline double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  return cosine(std::span<const double>(u), std::span<const double>(v));
}

namespace detail {

template <typename T>
std::span<const T> row(const Tensor<T>& m, std::size_t i) {
  const std::size_t d = m.dim(1);
  return m.values().subspan(i * d, d);
}

template <typename T>
void require_matrix(const Tensor<T>& m, const char* what) {
  if (m.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected a (samples, features) matrix, got " +
                     shape_str(m.shape()));
  }
}

inline const char* state_name(bool after) { return after ? "after" : "before"; }

}  // namespace detail

// -------------------------------------------------------- cosine similarity

struct IntraInter {
  double intra = 0.0;
  double inter = 0.0;
};

/// Mean cosine over all unordered same-label pairs (intra) and
/// different-label pairs (inter) of representation rows.
template <typename T>
IntraInter intra_inter_cosine(const Tensor<T>& reps, const std::vector<int>& labels) {
  detail::require_matrix(reps, "intra_inter_cosine");
  if (reps.dim(0) != labels.size()) {
    throw std::invalid_argument("intra_inter_cosine: " + std::to_string(reps.dim(0)) +
                                " rows but " + std::to_string(labels.size()) + " labels");
  }
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t j = i + 1; j < labels.size(); ++j) {
      const double c = cosine(detail::row(reps, i), detail::row(reps, j));
      if (labels[i] == labels[j]) {
        intra += c;
        ++n_intra;
      } else {
        inter += c;
        ++n_inter;
      }
    }
  }
  if (n_inter == 0) throw std::invalid_argument("intra_inter_cosine: inter-class similarity needs two classes");
  if (n_intra == 0) throw std::invalid_argument("intra_inter_cosine: intra-class similarity needs two samples of a class");
  return {intra / static_cast<double>(n_intra), inter / static_cast<double>(n_inter)};
}

struct SimilarityRow {
  std::string layer;
  std::string state;  // "before" | "after"
  double intra = 0.0;
  double inter = 0.0;
};

using SimilarityReport = std::vector<SimilarityRow>;

/// Query-set representations of `layers` under the given parameters, one
/// (n*q, features) matrix per layer in declared order.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> query_representations(
    const ParameterSet<T>& params, const Episode<T>& episode, const std::vector<std::string>& layers) {
  NoGradGuard off;
  return forward(params.detached(), episode.query.x, layers).captured;
}

/// Adapts detached parameters on the episode's support set (no record escapes).
template <typename T>
ParameterSet<T> adapt_for_analysis(const ParameterSet<T>& params, const Episode<T>& episode,
                                   const InnerLoopConfig& inner,
                                   std::optional<std::size_t> steps = std::nullopt) {
  auto cfg = inner;
  cfg.order = GradOrder::first;
  return inner_adapt(params.detached(), episode.support, cfg, steps).detached();
}

template <typename T>
SimilarityReport similarity_report(const ParameterSet<T>& before, const ParameterSet<T>& after,
                                   const Episode<T>& episode, const std::vector<std::string>& layers) {
  if (episode.n < 2) throw std::invalid_argument("similarity_report: inter-class similarity needs n >= 2");
  SimilarityReport out;
  for (bool adapted : {false, true}) {
    const auto reps = query_representations(adapted ? after : before, episode, layers);
    for (const auto& [layer, m] : reps) {
      const auto s = intra_inter_cosine(m, episode.query.y);
      out.push_back({layer, detail::state_name(adapted), s.intra, s.inter});
    }
  }
  return out;
}

// -------------------------------------------------------------- linear CKA

/// Linear CKA on column-centered features:
/// |Yc^T Xc|_F^2 / (|Xc^T Xc|_F |Yc^T Yc|_F), computed in double.
template <typename A, typename B>
double cka_linear(const Tensor<A>& x, const Tensor<B>& y) {
  detail::require_matrix(x, "cka_linear");
  detail::require_matrix(y, "cka_linear");
  if (x.dim(0) != y.dim(0)) {
    throw ShapeError("cka_linear: sample counts differ (" + shape_str(x.shape()) + " vs " +
                     shape_str(y.shape()) + ")");
  }
  if (x.dim(0) < 2) throw std::invalid_argument("cka_linear: need at least 2 samples");
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  auto centered = [](const auto& t) {
    Mat m(t.dim(0), t.dim(1));
    const auto v = t.values();
    for (std::size_t i = 0; i < v.size(); ++i) m.data()[i] = static_cast<double>(v[i]);
    m.rowwise() -= m.colwise().mean();
    return m;
  };
  const Mat xc = centered(x), yc = centered(y);
  // Gram forms are cheaper when features outnumber samples and give the same norms.
  const Mat kx = xc * xc.transpose(), ky = yc * yc.transpose();
  // One reduction for all three sums, so identical inputs give exactly 1.
  const double sxx = (kx.array() * kx.array()).sum(), syy = (ky.array() * ky.array()).sum();
  if (std::sqrt(sxx) < kZeroNorm || std::sqrt(syy) < kZeroNorm) {
    throw std::invalid_argument("cka_linear: degenerate representation");
  }
  const double cross = (kx.array() * ky.array()).sum();  // = |Yc^T Xc|_F^2
  return cross / std::sqrt(sxx * syy);
}

struct CkaRow {
  std::string layer;
  double cka = 0.0;
};

using CkaReport = std::vector<CkaRow>;

template <typename T>
CkaReport cka_report(const ParameterSet<T>& before, const ParameterSet<T>& after,
                     const Episode<T>& episode, const std::vector<std::string>& layers) {
  const auto rb = query_representations(before, episode, layers);
  const auto ra = query_representations(after, episode, layers);
  CkaReport out;
  for (std::size_t i = 0; i < rb.size(); ++i) out.push_back({rb[i].first, cka_linear(rb[i].second, ra[i].second)});
  return out;
}

// ------------------------------------------------------------- NIL testing

/// Template classifier: template_c is the mean support row of label c; each
/// query row is assigned argmax_c cosine(row, template_c), lowest c on ties.
template <typename T>
std::vector<int> nil_predict(const Tensor<T>& support, const std::vector<int>& support_labels,
                             const Tensor<T>& query, std::size_t n) {
  detail::require_matrix(support, "nil_predict");
  detail::require_matrix(query, "nil_predict");
  if (support.dim(1) != query.dim(1)) {
    throw ShapeError("nil_predict: support " + shape_str(support.shape()) + " and query " +
                     shape_str(query.shape()) + " feature sizes differ");
  }
  const std::size_t d = support.dim(1);
  std::vector<std::vector<double>> templates(n, std::vector<double>(d, 0.0));
  std::vector<std::size_t> count(n, 0);
  for (std::size_t i = 0; i < support_labels.size(); ++i) {
    const int c = support_labels[i];
    if (c < 0 || static_cast<std::size_t>(c) >= n) throw std::invalid_argument("nil_predict: label outside [0, n)");
    const auto r = detail::row(support, i);
    for (std::size_t j = 0; j < d; ++j) templates[c][j] += static_cast<double>(r[j]);
    ++count[c];
  }
  for (std::size_t c = 0; c < n; ++c) {
    if (count[c] == 0) throw std::invalid_argument("nil_predict: no support samples for label " + std::to_string(c));
    for (auto& v : templates[c]) v /= static_cast<double>(count[c]);
  }
  std::vector<int> pred(query.dim(0), 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto r = detail::row(query, i);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      const double s = cosine(r, std::span<const double>(templates[c]));
      if (s > best) {
        best = s;
        pred[i] = static_cast<int>(c);
      }
    }
  }
  return pred;
}

/// Head-free accuracy at `layer`, optionally after adapting on the support set.
template <typename T>
double nil_test(const ParameterSet<T>& params, const Episode<T>& episode, const std::string& layer,
                const std::optional<InnerLoopConfig>& adapt = std::nullopt) {
  const auto used = adapt ? adapt_for_analysis(params, episode, *adapt) : params.detached();
  NoGradGuard off;
  const auto s = forward(used, episode.support.x, {layer}).representation(layer);
  const auto q = forward(used, episode.query.x, {layer}).representation(layer);
  const auto pred = nil_predict(s, episode.support.y, q, episode.n);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == episode.query.y[i];
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

// ------------------------------------------------------------ gradient norms

struct GradNormRow {
  std::string group;
  double weight_norm = 0.0;
  double bias_norm = 0.0;
};

using GradNormReport = std::vector<GradNormRow>;

/// Norms of the support-loss gradient at `params`, per group, with weights
/// and biases reported separately. These are gradients, not applied updates.
template <typename T>
GradNormReport grad_norm_report(const ParameterSet<T>& params, const Episode<T>& episode) {
  auto leaves = params.detached().requiring_grad();
  auto loss = softmax_cross_entropy(forward(leaves, episode.support.x).logits, episode.support.y);
  const auto grads = gradient(loss, leaves.tensors(), false);
  GradNormReport out;
  for (const auto& group : params.group_names()) {
    double w = 0.0, b = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].group != group) continue;
      double sq = 0.0;
      for (T g : grads[i].values()) sq += static_cast<double>(g) * g;
      (params[i].role == ParamRole::weight ? w : b) += sq;
    }
    out.push_back({group, std::sqrt(w), std::sqrt(b)});
  }
  return out;
}

// ------------------------------------------------------------- head geometry

/// Mean over ordered triples (i, j, k), pairwise distinct, of
/// cosine(row_i - row_k, row_j - row_k).
template <typename T>
double head_gap_cosine(const Tensor<T>& head) {
  detail::require_matrix(head, "head_gap_cosine");
  const std::size_t n = head.dim(0), d = head.dim(1);
  if (n < 3) throw std::invalid_argument("head_gap_cosine: need at least 3 rows, got " + std::to_string(n));
  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> a(d), b(d);
  for (std::size_t k = 0; k < n; ++k) {
    const auto rk = detail::row(head, k);
    for (std::size_t i = 0; i < n; ++i) {
      if (i == k) continue;
      const auto ri = detail::row(head, i);
      for (std::size_t t = 0; t < d; ++t) a[t] = static_cast<double>(ri[t]) - static_cast<double>(rk[t]);
      for (std::size_t j = 0; j < n; ++j) {
        if (j == k || j == i) continue;
        const auto rj = detail::row(head, j);
        for (std::size_t t = 0; t < d; ++t) b[t] = static_cast<double>(rj[t]) - static_cast<double>(rk[t]);
        total += cosine(a, b);
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

// ----------------------------------------------------------------- dumps

/// Writes <layer>.<state>.mlt for each layer and state plus labels.mlt (the
/// query labels as floats, one per row).
template <typename T>
std::vector<std::filesystem::path> dump_representations(const ParameterSet<T>& before,
                                                        const ParameterSet<T>& after,
                                                        const Episode<T>& episode,
                                                        const std::vector<std::string>& layers,
                                                        const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("dump_representations: cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  for (bool adapted : {false, true}) {
    for (const auto& [layer, m] : query_representations(adapted ? after : before, episode, layers)) {
      const auto path = dir / (layer + "." + detail::state_name(adapted) + ".mlt");
      archive::save_tensor(path, m);
      written.push_back(path);
    }
  }
  std::vector<float> labels(episode.query.y.begin(), episode.query.y.end());
  const auto path = dir / "labels.mlt";
  archive::save_tensor(path, Tensor<float>(Shape{labels.size()}, std::move(labels)));
  written.push_back(path);
  return written;
}

// -------------------------------------------------------------------- CSV

struct MetricRow {
  std::string layer;
  std::string state;
  std::string metric;
  double value = 0.0;
};

inline void write_metric_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "layer,state,metric,value\n";
  os << std::setprecision(17);
  for (const auto& r : rows) os << r.layer << ',' << r.state << ',' << r.metric << ',' << r.value << '\n';
}

inline std::vector<MetricRow> to_rows(const SimilarityReport& r) {
  std::vector<MetricRow> out;
  for (const auto& s : r) {
    out.push_back({s.layer, s.state, "intra_cosine", s.intra});
    out.push_back({s.layer, s.state, "inter_cosine", s.inter});
  }
  return out;
}

inline std::vector<MetricRow> to_rows(const CkaReport& r) {
  std::vector<MetricRow> out;
  for (const auto& c : r) out.push_back({c.layer, "before_vs_after", "cka", c.cka});
  return out;
}

inline std::vector<MetricRow> to_rows(const GradNormReport& r) {
  std::vector<MetricRow> out;
  for (const auto& g : r) {
    out.push_back({g.group, "before", "grad_norm_weight", g.weight_norm});
    out.push_back({g.group, "before", "grad_norm_bias", g.bias_norm});
  }
  return out;
}

}  // namespace metaloop
