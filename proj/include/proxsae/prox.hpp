// SPDX-License-Identifier: Apache-2.0
#pragma once

// Closed-form proximal operators of the four sparsity regularizers:
//
//   relu_soft  R = |z|_1 + i{z >= 0}          ->  max(u - lambda, 0)
//   jump_relu  R = |z|_0 + i{z >= 0}          ->  u if u >= theta else 0, theta = sqrt(2 lambda)
//   topk       R = i{|z|_0 <= k, z >= 0}      ->  max(u_i, 0) on the k largest entries
//   abs_topk   R = i{|z|_0 <= k}              ->  u_i on the k largest-magnitude entries
//
// Ties in the k-selection go to the smallest index.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "proxsae/errors.hpp"
#include "proxsae/numeric.hpp"

namespace proxsae {

enum class ProxKind { relu_soft, jump_relu, topk, abs_topk };

inline std::string_view to_string(ProxKind k) {
  switch (k) {
    case ProxKind::relu_soft: return "relu_soft";
    case ProxKind::jump_relu: return "jump_relu";
    case ProxKind::topk: return "topk";
    case ProxKind::abs_topk: return "abs_topk";
  }
  return "unknown";
}

inline ProxKind parse_prox_kind(std::string_view s) {
  if (s == "relu_soft" || s == "relu") return ProxKind::relu_soft;
  if (s == "jump_relu" || s == "jumprelu") return ProxKind::jump_relu;
  if (s == "topk") return ProxKind::topk;
  if (s == "abs_topk" || s == "abstopk") return ProxKind::abs_topk;
  throw SchemaError("unknown sparsity operator '" + std::string(s) + "'");
}

/// Which regularizer, with its hyperparameter. Only the field of the active
/// kind is meaningful.
struct ProxSpec {
  ProxKind kind = ProxKind::abs_topk;
  double lambda = 0.0;  // relu_soft
  double theta = 0.0;   // jump_relu
  std::size_t k = 1;    // topk, abs_topk

  static ProxSpec relu_soft(double lambda) {
    require(lambda >= 0.0, "relu_soft: lambda must be nonnegative");
    return {ProxKind::relu_soft, lambda, 0.0, 0};
  }
  static ProxSpec jump_relu(double theta) {
    require(theta >= 0.0, "jump_relu: theta must be nonnegative");
    return {ProxKind::jump_relu, 0.0, theta, 0};
  }
  /// Threshold induced by the l0 weight: theta = sqrt(2 lambda).
  static ProxSpec jump_relu_from_weight(double lambda) {
    require(lambda >= 0.0, "jump_relu: lambda must be nonnegative");
    return {ProxKind::jump_relu, lambda, std::sqrt(2.0 * lambda), 0};
  }
  static ProxSpec topk(std::size_t k) {
    require(k >= 1, "topk: k must be positive");
    return {ProxKind::topk, 0.0, 0.0, k};
  }
  static ProxSpec abs_topk(std::size_t k) {
    require(k >= 1, "abs_topk: k must be positive");
    return {ProxKind::abs_topk, 0.0, 0.0, k};
  }

  bool nonnegative() const noexcept { return kind != ProxKind::abs_topk; }
  bool cardinality() const noexcept { return kind == ProxKind::topk || kind == ProxKind::abs_topk; }

  /// Weight of the regularizer whose prox this spec is. For jump_relu this is
  /// theta^2 / 2; cardinality constraints have no weight.
  double regularizer_weight() const noexcept {
    switch (kind) {
      case ProxKind::relu_soft: return lambda;
      case ProxKind::jump_relu: return 0.5 * theta * theta;
      default: return 0.0;
    }
  }

  /// Spec of prox_{mu * lambda R}: soft threshold scales by mu, hard threshold
  /// by sqrt(mu), cardinality is unchanged.
  ProxSpec scaled(double mu) const {
    require(mu > 0.0, "ProxSpec::scaled: step must be positive");
    ProxSpec out = *this;
    if (kind == ProxKind::relu_soft) out.lambda = lambda * mu;
    if (kind == ProxKind::jump_relu) {
      out.theta = (mu == 1.0) ? theta : theta * std::sqrt(mu);
      out.lambda = lambda * mu;
    }
    return out;
  }

  std::string describe() const {
    switch (kind) {
      case ProxKind::relu_soft: return "relu_soft(lambda=" + std::to_string(lambda) + ")";
      case ProxKind::jump_relu: return "jump_relu(theta=" + std::to_string(theta) + ")";
      case ProxKind::topk: return "topk(k=" + std::to_string(k) + ")";
      case ProxKind::abs_topk: return "abs_topk(k=" + std::to_string(k) + ")";
    }
    return "unknown";
  }

  bool operator==(const ProxSpec&) const = default;
};

/// Counts how often the inner ReLU of TopK changes the output, i.e. how many
/// selected entries were negative and got clipped.
struct TopKStats {
  std::size_t calls = 0;
  std::size_t clipped = 0;
  std::size_t calls_with_clip = 0;
};

namespace detail {

/// Indices of the k largest keys, ties to the smallest index. The result is
/// sorted ascending.
template <class T, class Key>
void select_top(std::span<const T> u, std::size_t k, Key key, std::vector<std::size_t>& idx) {
  if (k <= 32 && k < u.size()) {
    // one pass keeping the current best k in order; scanning by ascending
    // index, an equal key never displaces an earlier one
    idx.clear();
    auto kth = key(u[0]);
    constexpr std::size_t kBlock = 16;
    for (std::size_t i = 0; i < u.size(); ++i) {
      if (idx.size() == k && i % kBlock == 0 && i + kBlock <= u.size()) {
        // skip a whole block when none of its keys can enter
        auto m = key(u[i]);
        for (std::size_t q = 1; q < kBlock; ++q) {
          const auto kq = key(u[i + q]);
          m = kq > m ? kq : m;
        }
        if (!(m > kth)) {
          i += kBlock - 1;
          continue;
        }
      }
      const auto ki = key(u[i]);
      if (idx.size() == k && !(ki > kth)) continue;
      if (idx.size() == k) idx.pop_back();
      auto pos = idx.end();
      while (pos != idx.begin() && ki > key(u[*(pos - 1)])) --pos;
      idx.insert(pos, i);
      if (idx.size() == k) kth = key(u[idx.back()]);
    }
    std::sort(idx.begin(), idx.end());
    return;
  }
  idx.resize(u.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    const auto ka = key(u[a]);
    const auto kb = key(u[b]);
    return ka > kb || (ka == kb && a < b);
  };
  if (k < u.size()) {
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
    idx.resize(k);
  }
  std::sort(idx.begin(), idx.end());
}

inline void check_sizes(std::size_t in, std::size_t out) {
  require(in == out, "prox: output length must equal input length");
}

inline void check_k(std::size_t k, std::size_t n) {
  if (k < 1 || k > n)
    throw ContractViolation("prox: k must satisfy 1 <= k <= len(u) (k=" + std::to_string(k) +
                            ", len=" + std::to_string(n) + ")");
}

}  // namespace detail

template <class T>
void prox_relu_soft(std::span<const T> u, double lambda, std::span<T> out) {
  require(lambda >= 0.0, "prox_relu_soft: lambda must be nonnegative");
  detail::check_sizes(u.size(), out.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double v = static_cast<double>(u[i]) - lambda;
    out[i] = v > 0.0 ? static_cast<T>(v) : T{0};
  }
}

template <class T>
void prox_jump_relu(std::span<const T> u, double theta, std::span<T> out) {
  require(theta >= 0.0, "prox_jump_relu: theta must be nonnegative");
  detail::check_sizes(u.size(), out.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    // u >= theta with theta >= 0 also rejects every negative entry
    out[i] = (static_cast<double>(u[i]) >= theta && u[i] > T{0}) ? u[i] : T{0};
  }
}

/// Per-coordinate thresholds (the JumpReLU SAE learns one per latent).
template <class T>
void prox_jump_relu(std::span<const T> u, std::span<const double> theta, std::span<T> out) {
  detail::check_sizes(u.size(), out.size());
  require(theta.size() == u.size(), "prox_jump_relu: threshold vector length mismatch");
  for (std::size_t i = 0; i < u.size(); ++i) {
    require(theta[i] >= 0.0, "prox_jump_relu: theta must be nonnegative");
    out[i] = (static_cast<double>(u[i]) >= theta[i] && u[i] > T{0}) ? u[i] : T{0};
  }
}

/// `support`, when given, receives the ascending indices of the nonzero
/// outputs.
template <class T>
void prox_topk(std::span<const T> u, std::size_t k, std::span<T> out, TopKStats* stats = nullptr,
               std::vector<std::size_t>* support = nullptr) {
  detail::check_k(k, u.size());
  detail::check_sizes(u.size(), out.size());
  thread_local std::vector<std::size_t> idx;
  detail::select_top(u, k, [](T v) { return v; }, idx);
  std::fill(out.begin(), out.end(), T{0});
  if (support) support->clear();
  std::size_t clipped = 0;
  for (std::size_t i : idx) {
    if (u[i] > T{0}) {
      out[i] = u[i];
      if (support) support->push_back(i);
    } else if (u[i] < T{0}) {
      ++clipped;
    }
  }
  if (stats) {
    ++stats->calls;
    stats->clipped += clipped;
    if (clipped) ++stats->calls_with_clip;
  }
}

template <class T>
void prox_abs_topk(std::span<const T> u, std::size_t k, std::span<T> out,
                   std::vector<std::size_t>* support = nullptr) {
  detail::check_k(k, u.size());
  detail::check_sizes(u.size(), out.size());
  thread_local std::vector<std::size_t> idx;
  detail::select_top(u, k, [](T v) { return std::abs(v); }, idx);
  std::fill(out.begin(), out.end(), T{0});
  if (support) support->clear();
  for (std::size_t i : idx) {
    out[i] = u[i];
    if (support && u[i] != T{0}) support->push_back(i);
  }
}

namespace detail {

template <class T>
void scan_support(std::span<const T> z, std::vector<std::size_t>* support) {
  if (!support) return;
  support->clear();
  for (std::size_t i = 0; i < z.size(); ++i)
    if (z[i] != T{0}) support->push_back(i);
}

}  // namespace detail

template <class T>
void prox_apply(std::span<const T> u, const ProxSpec& spec, std::span<T> out, TopKStats* stats = nullptr,
                std::vector<std::size_t>* support = nullptr) {
  switch (spec.kind) {
    case ProxKind::relu_soft:
      prox_relu_soft(u, spec.lambda, out);
      detail::scan_support(std::span<const T>(out), support);
      return;
    case ProxKind::jump_relu:
      prox_jump_relu(u, spec.theta, out);
      detail::scan_support(std::span<const T>(out), support);
      return;
    case ProxKind::topk: prox_topk(u, spec.k, out, stats, support); return;
    case ProxKind::abs_topk: prox_abs_topk(u, spec.k, out, support); return;
  }
}

/// lambda R(z) for the regularizer behind `spec`; +inf when z is infeasible.
template <class T>
double regularizer_value(std::span<const T> z, const ProxSpec& spec) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  double l1 = 0.0;
  std::size_t nnz = 0;
  bool negative = false;
  for (T v : z) {
    l1 += std::abs(static_cast<double>(v));
    nnz += v != T{0};
    negative |= v < T{0};
  }
  if (negative && spec.nonnegative()) return inf;
  switch (spec.kind) {
    case ProxKind::relu_soft: return spec.lambda * l1;
    case ProxKind::jump_relu: return spec.regularizer_weight() * static_cast<double>(nnz);
    default: return nnz > spec.k ? inf : 0.0;
  }
}

template <class T>
Vector<T> prox_relu_soft(const Vector<T>& u, double lambda) {
  Vector<T> out(u.size());
  prox_relu_soft(u.span(), lambda, out.span());
  return out;
}

template <class T>
Vector<T> prox_jump_relu(const Vector<T>& u, double theta) {
  Vector<T> out(u.size());
  prox_jump_relu(u.span(), theta, out.span());
  return out;
}

template <class T>
Vector<T> prox_topk(const Vector<T>& u, std::size_t k, TopKStats* stats = nullptr) {
  Vector<T> out(u.size());
  prox_topk(u.span(), k, out.span(), stats);
  return out;
}

template <class T>
Vector<T> prox_abs_topk(const Vector<T>& u, std::size_t k) {
  Vector<T> out(u.size());
  prox_abs_topk(u.span(), k, out.span());
  return out;
}

template <class T>
Vector<T> prox_apply(const Vector<T>& u, const ProxSpec& spec) {
  Vector<T> out(u.size());
  prox_apply(u.span(), spec, out.span());
  return out;
}

}  // namespace proxsae
