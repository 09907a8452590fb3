// SPDX-License-Identifier: Apache-2.0
#pragma once

// Direct minimization of 1/2 |v - u|^2 + r(v) without using the closed forms
// in prox.hpp. Cardinality and l0 regularizers are solved by enumerating every
// support; the separable l1 case compares the per-coordinate candidates
// {0, u_i - lambda}.

#include <cmath>
#include <cstddef>
#include <bit>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "proxsae/errors.hpp"
#include "proxsae/numeric.hpp"
#include "proxsae/prox.hpp"

namespace proxsae {

inline constexpr std::size_t kMaxExhaustiveDim = 12;

/// 1/2 |z - u|^2 + r(z), with +inf outside the feasible set of r.
template <class T>
double prox_objective(std::span<const T> u, std::span<const T> z, const ProxSpec& spec) {
  require(u.size() == z.size(), "prox_objective: length mismatch");
  constexpr double inf = std::numeric_limits<double>::infinity();
  double quad = 0.0, l1 = 0.0;
  std::size_t nnz = 0;
  bool negative = false;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double zi = static_cast<double>(z[i]);
    const double diff = zi - static_cast<double>(u[i]);
    quad += diff * diff;
    l1 += std::abs(zi);
    if (zi != 0.0) ++nnz;
    if (zi < 0.0) negative = true;
  }
  quad *= 0.5;
  switch (spec.kind) {
    case ProxKind::relu_soft: return negative ? inf : quad + spec.lambda * l1;
    case ProxKind::jump_relu: return negative ? inf : quad + spec.regularizer_weight() * static_cast<double>(nnz);
    case ProxKind::topk: return (negative || nnz > spec.k) ? inf : quad;
    case ProxKind::abs_topk: return nnz > spec.k ? inf : quad;
  }
  return inf;
}

/// Brute-force proximal point. Throws CapacityError when an l0-type spec is
/// asked to enumerate more than 2^12 supports.
template <class T>
Vector<T> prox_oracle(const Vector<T>& u, const ProxSpec& spec) {
  const std::size_t n = u.size();
  if (spec.kind == ProxKind::relu_soft) {
    require(spec.lambda >= 0.0, "prox_oracle: lambda must be nonnegative");
    Vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      // candidates: the boundary 0 and the stationary point of the smooth part
      const double ui = static_cast<double>(u[i]);
      const double cand = ui - spec.lambda;
      const double f0 = 0.5 * ui * ui;
      const double f1 = cand >= 0.0 ? 0.5 * spec.lambda * spec.lambda + spec.lambda * cand
                                    : std::numeric_limits<double>::infinity();
      out[i] = f1 < f0 ? static_cast<T>(cand) : T{0};
    }
    return out;
  }
  if (n > kMaxExhaustiveDim)
    throw CapacityError("prox_oracle: exhaustive support search limited to dimension " +
                            std::to_string(kMaxExhaustiveDim) + ", got " + std::to_string(n),
                        n);
  if (spec.cardinality()) require(spec.k >= 1 && spec.k <= n, "prox_oracle: k out of range");

  Vector<T> best(n), trial(n);
  double best_obj = prox_objective(u.span(), std::as_const(best).span(), spec);
  const std::uint32_t masks = 1u << n;
  for (std::uint32_t mask = 1; mask < masks; ++mask) {
    if (spec.cardinality() && static_cast<std::size_t>(std::popcount(mask)) > spec.k) continue;
    for (std::size_t i = 0; i < n; ++i) {
      // on a fixed support the unconstrained optimum is u_i, projected onto z >= 0
      // when the regularizer carries the nonnegativity indicator
      T v = (mask >> i) & 1u ? u[i] : T{0};
      if (spec.nonnegative() && v < T{0}) v = T{0};
      trial[i] = v;
    }
    const double obj = prox_objective(u.span(), std::as_const(trial).span(), spec);
    if (obj < best_obj) {
      best_obj = obj;
      best = trial;
    }
  }
  return best;
}

/// Grid audit for the l1 case: per coordinate, scans [0, max(u_i, 0)] at the
/// given step. Agreement with the closed form is within one step.
template <class T>
Vector<T> prox_oracle_grid(const Vector<T>& u, double lambda, double step = 1e-4) {
  require(lambda >= 0.0 && step > 0.0, "prox_oracle_grid: lambda >= 0 and step > 0 required");
  Vector<T> out(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double ui = static_cast<double>(u[i]);
    const double hi = std::max(ui, 0.0);
    double best_z = 0.0, best_f = 0.5 * ui * ui;
    const auto steps = static_cast<std::size_t>(std::ceil(hi / step));
    for (std::size_t s = 1; s <= steps; ++s) {
      const double z = std::min(hi, static_cast<double>(s) * step);
      const double f = 0.5 * (z - ui) * (z - ui) + lambda * z;
      if (f < best_f) {
        best_f = f;
        best_z = z;
      }
    }
    out[i] = static_cast<T>(best_z);
  }
  return out;
}

}  // namespace proxsae
