// SPDX-License-Identifier: Apache-2.0
#pragma once

// Central finite-difference check of the SAE backward pass in double.
// Instances whose pre-activations sit within `margin` of a selection or
// threshold boundary are rejected so the loss is smooth around the point.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "proxsae/trainer.hpp"
#include "test_helpers.hpp"

namespace proxsae::testing {

struct GradCheckCase {
  SaeParams<double> params;
  Vectord x;
  ProxSpec variant;
  LossOptions opt;
};

/// Distance of the pre-activation to the nearest point where the active set
/// or the sign pattern of the code changes.
inline double boundary_margin(const GradCheckCase& c) {
  std::vector<double> acc(c.params.latents());
  Vectord pre(c.params.latents());
  encode_pre_into(c.x.span(), c.params, std::span<double>(acc), pre.span());
  double m = std::numeric_limits<double>::infinity();
  const std::size_t P = pre.size();
  switch (c.variant.kind) {
    case ProxKind::relu_soft:
      for (double v : pre) m = std::min(m, std::abs(v - c.variant.lambda));
      break;
    case ProxKind::jump_relu: {
      const auto th = c.params.thresholds();
      for (std::size_t j = 0; j < P; ++j) m = std::min({m, std::abs(pre[j] - th[j]), std::abs(pre[j])});
      break;
    }
    case ProxKind::topk:
    case ProxKind::abs_topk: {
      const bool mag = c.variant.kind == ProxKind::abs_topk;
      std::vector<double> keys;
      for (double v : pre) keys.push_back(mag ? std::abs(v) : v);
      std::sort(keys.begin(), keys.end(), std::greater<>());
      const std::size_t k = c.variant.k;
      if (k < P) m = keys[k - 1] - keys[k];
      for (std::size_t i = 0; i < k; ++i) m = std::min(m, std::abs(keys[i]));
      break;
    }
  }
  return m;
}

inline GradCheckCase random_case(Rng& rng, ProxKind kind, std::size_t d = 6, std::size_t P = 10) {
  GradCheckCase c{{random_matrix(rng, d, P, 0.5), column_normalize(random_matrix(rng, d, P)),
                   random_vector(rng, P, 0.2), random_vector(rng, d, 0.2), random_vector(rng, P, 0.3)},
                  random_vector(rng, d),
                  {},
                  {0.0, 1e-3}};
  for (auto& v : c.params.log_theta) v += std::log(0.3);
  switch (kind) {
    case ProxKind::relu_soft:
      c.variant = ProxSpec::relu_soft(0.1);
      c.opt.loss_lambda = 0.1;
      break;
    case ProxKind::jump_relu:
      c.variant = ProxSpec::jump_relu(0.3);
      c.opt.loss_lambda = 0.05;
      break;
    case ProxKind::topk: c.variant = ProxSpec::topk(3); break;
    case ProxKind::abs_topk: c.variant = ProxSpec::abs_topk(3); break;
  }
  return c;
}

/// Draws until an instance passes the margin guard.
inline GradCheckCase guarded_case(Rng& rng, ProxKind kind, double margin = 1e-3) {
  for (;;) {
    auto c = random_case(rng, kind);
    if (boundary_margin(c) >= margin) return c;
  }
}

struct GradCheckResult {
  double max_rel_W = 0.0, max_rel_D = 0.0, max_rel_b_e = 0.0, max_rel_b = 0.0;
  double max_rel() const { return std::max({max_rel_W, max_rel_D, max_rel_b_e, max_rel_b}); }
};

/// Per tensor: max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf, 1e-6).
inline GradCheckResult grad_check(const GradCheckCase& c, double h = 1e-4) {
  SaeGrads g(c.params.d(), c.params.latents());
  g.zero();
  backward(loss(c.x, c.params, c.variant, c.opt), c.params, c.variant, c.opt, g);

  auto p = c.params;
  auto fd = [&](std::span<double> entries, std::span<const double> analytic) {
    double worst = 0.0, amax = 0.0, nmax = 0.0;
    std::vector<double> numeric(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const double saved = entries[i];
      entries[i] = saved + h;
      const double up = loss(c.x, p, c.variant, c.opt).loss;
      entries[i] = saved - h;
      const double down = loss(c.x, p, c.variant, c.opt).loss;
      entries[i] = saved;
      numeric[i] = (up - down) / (2.0 * h);
      worst = std::max(worst, std::abs(numeric[i] - analytic[i]));
      amax = std::max(amax, std::abs(analytic[i]));
      nmax = std::max(nmax, std::abs(numeric[i]));
    }
    return worst / std::max({amax, nmax, 1e-6});
  };
  GradCheckResult r;
  const Matrixd gW = transpose(g.W_t), gD = transpose(g.D_t);
  r.max_rel_W = fd(p.W.flat(), gW.flat());
  r.max_rel_D = fd(p.D.flat(), gD.flat());
  r.max_rel_b_e = fd(p.b_e.span(), std::as_const(g.b_e).span());
  r.max_rel_b = fd(p.b.span(), std::as_const(g.b).span());
  return r;
}

}  // namespace proxsae::testing
