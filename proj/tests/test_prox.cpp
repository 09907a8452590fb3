// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "proxsae/prox.hpp"
#include "proxsae/prox_oracle.hpp"
#include "proxsae/rng.hpp"

using namespace proxsae;

namespace {

Vectord random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  Vectord v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

// Per-coordinate grid search of 1/2 (z-u)^2 + lambda |z| over z >= 0.
double grid_relu_soft(double u, double lambda, double step) {
  double best_z = 0.0, best_f = 0.5 * u * u;
  for (double z = step; z <= std::max(u, 0.0) + step; z += step) {
    const double f = 0.5 * (z - u) * (z - u) + lambda * z;
    if (f < best_f) best_f = f, best_z = z;
  }
  return best_z;
}

// Two-candidate minimizer of 1/2 (z-u)^2 + lambda 1(z != 0) over z >= 0.
// Returns the objective of the better candidate.
double jump_candidates_objective(double u, double lambda) {
  const double at_zero = 0.5 * u * u;
  const double at_u = u > 0 ? lambda : at_zero + 1.0;
  return std::min(at_zero, at_u);
}

double jump_objective(double u, double z, double lambda) {
  return 0.5 * (z - u) * (z - u) + (z != 0.0 ? lambda : 0.0);
}

// min over supports |S| <= k of the projection onto {z : z_S free (or >= 0), z_{S^c} = 0}.
double enumerate_cardinality(const Vectord& u, std::size_t k, bool nonneg, Vectord& arg) {
  const std::size_t n = u.size();
  double best = 1e300;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) > k) continue;
    Vectord z(n);
    double f = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if ((mask >> i) & 1u) z[i] = nonneg ? std::max(u[i], 0.0) : u[i];
      f += 0.5 * (z[i] - u[i]) * (z[i] - u[i]);
    }
    if (f < best) best = f, arg = z;
  }
  return best;
}

double half_sq_dist(const Vectord& a, const Vectord& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += 0.5 * (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

std::size_t nnz(const Vectord& v) {
  return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](double x) { return x != 0.0; }));
}

}  // namespace

TEST(ReluSoft, ClosedFormExamples) {
  EXPECT_EQ(prox_relu_soft(Vectord{3, -1, 0.5}, 1.0), (Vectord{2, 0, 0}));
  Rng rng(1);
  const auto u = random_vector(rng, 16);
  const auto out = prox_relu_soft(u, 0.0);
  for (std::size_t i = 0; i < u.size(); ++i) EXPECT_EQ(out[i], std::max(u[i], 0.0));
}

TEST(ReluSoft, MatchesGridSearch) {
  const Vectord u{0.7, -0.2};
  EXPECT_EQ(prox_relu_soft(u, 1.0), (Vectord{0, 0}));
  for (std::size_t i = 0; i < u.size(); ++i) EXPECT_NEAR(grid_relu_soft(u[i], 1.0, 1e-3), 0.0, 1e-3);

  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const double ui = 3 * rng.normal(), lambda = rng.uniform(0, 2);
    const auto z = prox_relu_soft(Vectord{ui}, lambda)[0];
    EXPECT_NEAR(z, grid_relu_soft(ui, lambda, 1e-3), 1e-3);
  }
}

TEST(ReluSoft, LibraryGridAudit) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const auto u = random_vector(rng, 8);
    const double lambda = rng.uniform(0, 1);
    const auto a = prox_relu_soft(u, lambda), b = prox_oracle_grid(u, lambda, 1e-4);
    for (std::size_t i = 0; i < u.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-4);
  }
}

TEST(ReluSoft, NegativeLambdaRejected) { EXPECT_THROW(prox_relu_soft(Vectord{1}, -0.1), ContractViolation); }

TEST(ReluSoft, Nonexpansive) {
  Rng rng(4);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.uniform_index(32);
    const auto u = random_vector(rng, n), v = random_vector(rng, n);
    const double lambda = rng.uniform(0, 1);
    const auto pu = prox_relu_soft(u, lambda), pv = prox_relu_soft(v, lambda);
    EXPECT_LE(half_sq_dist(pu, pv), half_sq_dist(u, v) + 1e-15);
  }
}

TEST(JumpRelu, ClosedFormExamples) {
  EXPECT_EQ(prox_jump_relu(Vectord{2.1, 1.9, -5}, 2.0), (Vectord{2.1, 0, 0}));
  EXPECT_EQ(prox_jump_relu(Vectord{0.3, 0.0, -0.4, 2.0}, 0.0), (Vectord{0.3, 0, 0, 2.0}));
  // boundary u == theta is kept
  EXPECT_EQ(prox_jump_relu(Vectord{2.0}, 2.0), (Vectord{2.0}));
  EXPECT_THROW(prox_jump_relu(Vectord{1}, -1.0), ContractViolation);
}

TEST(JumpRelu, WeightTwoGivesThresholdTwoAndMatchesCandidates) {
  const auto spec = ProxSpec::jump_relu_from_weight(2.0);
  EXPECT_EQ(spec.theta, 2.0);
  Rng rng(5);
  for (int t = 0; t < 500; ++t) {
    const auto u = random_vector(rng, 6, 3.0);
    const auto z = prox_jump_relu(u, spec.theta);
    for (std::size_t i = 0; i < u.size(); ++i)
      EXPECT_NEAR(jump_objective(u[i], z[i], 2.0), jump_candidates_objective(u[i], 2.0), 1e-12);
  }
}

TEST(TopK, ClosedFormExamples) {
  EXPECT_EQ(prox_topk(Vectord{3, -5, 1}, 2), (Vectord{3, 0, 1}));
  EXPECT_EQ(prox_topk(Vectord{-3, -5, -1}, 2), (Vectord{0, 0, 0}));
  EXPECT_THROW(prox_topk(Vectord{1, 2}, 0), ContractViolation);
  EXPECT_THROW(prox_topk(Vectord{1, 2}, 3), ContractViolation);
}

TEST(TopK, MatchesExhaustiveEnumeration) {
  Rng rng(6);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.uniform_index(8), k = 1 + rng.uniform_index(n);
    const auto u = random_vector(rng, n);
    Vectord arg;
    const double best = enumerate_cardinality(u, k, true, arg);
    const auto z = prox_topk(u, k);
    EXPECT_NEAR(half_sq_dist(z, u), best, 1e-12);
    EXPECT_EQ(z, arg);
  }
}

TEST(TopK, ReluBindingDiagnostic) {
  TopKStats stats;
  prox_topk(Vectord{3, -5, -1}, 2, &stats);  // selects 3 and -1; -1 is clipped
  prox_topk(Vectord{3, 2, 1}, 2, &stats);
  EXPECT_EQ(stats.calls, 2u);
  EXPECT_EQ(stats.clipped, 1u);
  EXPECT_EQ(stats.calls_with_clip, 1u);
}

TEST(AbsTopK, ClosedFormExamples) {
  EXPECT_EQ(prox_abs_topk(Vectord{3, -5, 1}, 2), (Vectord{3, -5, 0}));
  EXPECT_THROW(prox_abs_topk(Vectord{1, 2}, 3), ContractViolation);
}

TEST(AbsTopK, SignEquivariant) {
  Rng rng(7);
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 1 + rng.uniform_index(20), k = 1 + rng.uniform_index(n);
    const auto v = random_vector(rng, n);
    Vectord neg(n);
    for (std::size_t i = 0; i < n; ++i) neg[i] = -v[i];
    const auto a = prox_abs_topk(neg, k), b = prox_abs_topk(v, k);
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(a[i], -b[i]);
  }
}

TEST(AbsTopK, MatchesExhaustiveEnumeration) {
  Rng rng(8);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.uniform_index(8), k = 1 + rng.uniform_index(n);
    const auto u = random_vector(rng, n);
    Vectord arg;
    const double best = enumerate_cardinality(u, k, false, arg);
    const auto z = prox_abs_topk(u, k);
    EXPECT_NEAR(half_sq_dist(z, u), best, 1e-12);
    EXPECT_EQ(z, arg);
    EXPECT_EQ(nnz(z), std::min(k, nnz(u)));
  }
}

TEST(Sparsity, CardinalityAndSignInvariants) {
  Rng rng(9);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.uniform_index(40), k = 1 + rng.uniform_index(n);
    const auto u = random_vector(rng, n);
    const auto tk = prox_topk(u, k), ak = prox_abs_topk(u, k);
    EXPECT_LE(nnz(tk), k);
    EXPECT_LE(nnz(ak), k);
    const auto rs = prox_relu_soft(u, 0.1), jr = prox_jump_relu(u, 0.5);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_GE(tk[i], 0.0);
      EXPECT_GE(rs[i], 0.0);
      EXPECT_GE(jr[i], 0.0);
      if (ak[i] != 0.0) {
        EXPECT_EQ(std::signbit(ak[i]), std::signbit(u[i]));
      }
    }
  }
}

TEST(TieBreaking, SmallestIndexWins) {
  EXPECT_EQ(prox_topk(Vectord{1, 1, 1, 1}, 2), (Vectord{1, 1, 0, 0}));
  EXPECT_EQ(prox_abs_topk(Vectord{-2, 2, 2, -2}, 3), (Vectord{-2, 2, 2, 0}));
  EXPECT_EQ(prox_topk(Vectord{0, 5, 3, 5, 3}, 2), (Vectord{0, 5, 0, 5, 0}));
  EXPECT_EQ(prox_topk(Vectord{0, 5, 3, 5, 3}, 3), (Vectord{0, 5, 3, 5, 0}));
}

TEST(TieBreaking, PermutationOfTiedEntriesIsStable) {
  // Values drawn from a tiny alphabet so ties are frequent. For each vector we
  // compute the selection with an independent stable sort and compare.
  Rng rng(10);
  for (int t = 0; t < 2000; ++t) {
    const std::size_t n = 2 + rng.uniform_index(10), k = 1 + rng.uniform_index(n);
    Vectord u(n);
    for (auto& x : u) x = static_cast<double>(static_cast<int>(rng.uniform_index(5)) - 2);
    for (bool magnitude : {false, true}) {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return magnitude ? std::abs(u[a]) > std::abs(u[b]) : u[a] > u[b];
      });
      Vectord expect(n);
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t i = order[j];
        expect[i] = magnitude ? u[i] : std::max(u[i], 0.0);
      }
      EXPECT_EQ(magnitude ? prox_abs_topk(u, k) : prox_topk(u, k), expect);
    }
  }
}

TEST(ProxOracle, ZeroIsFixedUnderEverySpec) {
  const Vectord zero(5);
  for (const auto& spec : {ProxSpec::relu_soft(0.3), ProxSpec::jump_relu(0.4), ProxSpec::topk(2),
                           ProxSpec::abs_topk(3)}) {
    EXPECT_EQ(prox_oracle(zero, spec), zero);
    EXPECT_EQ(prox_apply(zero, spec), zero);
  }
}

TEST(ProxOracle, CapacityLimit) {
  EXPECT_THROW(prox_oracle(Vectord(13), ProxSpec::abs_topk(2)), CapacityError);
  EXPECT_NO_THROW(prox_oracle(Vectord(64), ProxSpec::relu_soft(0.1)));
}

TEST(ProxOracle, ExhaustiveAgreementAllSmallDims) {
  // every dimension up to 8, every k
  Rng rng(12);
  for (std::size_t n = 1; n <= 8; ++n) {
    for (std::size_t k = 1; k <= n; ++k) {
      for (int t = 0; t < 20; ++t) {
        const auto u = random_vector(rng, n);
        EXPECT_EQ(prox_oracle(u, ProxSpec::abs_topk(k)), prox_abs_topk(u, k));
        EXPECT_EQ(prox_oracle(u, ProxSpec::topk(k)), prox_topk(u, k));
      }
    }
  }
}

TEST(ProxSpec, ScalingRules) {
  EXPECT_EQ(ProxSpec::relu_soft(0.5).scaled(0.5).lambda, 0.25);
  EXPECT_NEAR(ProxSpec::jump_relu(2.0).scaled(0.25).theta, 1.0, 1e-15);
  EXPECT_EQ(ProxSpec::jump_relu(2.0).scaled(1.0).theta, 2.0);
  EXPECT_EQ(ProxSpec::abs_topk(3).scaled(0.1).k, 3u);
  EXPECT_EQ(parse_prox_kind("abs_topk"), ProxKind::abs_topk);
  EXPECT_THROW(parse_prox_kind("gated"), SchemaError);
}
