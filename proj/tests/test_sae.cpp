// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "proxsae/sae.hpp"
#include "proxsae/sparse_coding.hpp"
#include "test_helpers.hpp"

using namespace proxsae;
using namespace proxsae::testing;

namespace {

SaeParams<double> identity_params(std::size_t n) {
  return {Matrixd::identity(n), Matrixd::identity(n), Vectord(n), Vectord(n), Vectord(n)};
}

SaeParams<double> random_params(Rng& rng, std::size_t d, std::size_t P) {
  return {random_matrix(rng, d, P), column_normalize(random_matrix(rng, d, P)), random_vector(rng, P, 0.1),
          random_vector(rng, d, 0.1), random_vector(rng, P, 0.3)};
}

const ProxSpec kVariants[] = {ProxSpec::relu_soft(0.05), ProxSpec::jump_relu(0.3), ProxSpec::topk(3),
                              ProxSpec::abs_topk(3)};

}  // namespace

TEST(Encode, IdentityExamples) {
  const auto p = identity_params(2);
  EXPECT_EQ(encode(Vectord{0.2, -0.9}, p, ProxSpec::abs_topk(1)), (Vectord{0, -0.9}));
  EXPECT_EQ(encode(Vectord{0.2, -0.9}, p, ProxSpec::topk(1)), (Vectord{0.2, 0}));
}

TEST(Encode, ComposesMatvecAndProx) {
  Rng rng(21);
  for (int t = 0; t < 200; ++t) {
    const auto p = random_params(rng, 6, 12);
    const auto x = random_vector(rng, 6);
    for (const auto& v : kVariants) {
      auto pre = matvec_t(p.W, x);
      for (std::size_t j = 0; j < pre.size(); ++j) pre[j] += p.b_e[j];
      const auto z = encode(x, p, v);
      Vectord expect(12);
      if (v.kind == ProxKind::jump_relu) {
        const auto th = p.thresholds();
        for (std::size_t j = 0; j < 12; ++j) expect[j] = pre[j] >= th[j] && pre[j] > 0 ? pre[j] : 0.0;
      } else {
        expect = prox_apply(pre, v);
      }
      for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(z[j], expect[j], 1e-12);
      if (v.cardinality()) {
        EXPECT_LE(count_nonzero(z), v.k);
      }
    }
  }
}

TEST(Encode, DimensionMismatch) {
  const auto p = identity_params(3);
  EXPECT_THROW(encode(Vectord{1, 2}, p, ProxSpec::topk(1)), ContractViolation);
  EXPECT_THROW(decode(Vectord{1, 2}, p), ContractViolation);
}

TEST(Decode, Examples) {
  Rng rng(22);
  auto p = random_params(rng, 5, 9);
  EXPECT_EQ(decode(Vectord(9), p), p.b);

  auto sq = identity_params(4);
  EXPECT_EQ(decode(Vectord{1, -2, 0, 3}, sq), (Vectord{1, -2, 0, 3}));

  for (std::size_t i = 0; i < 9; ++i) {
    Vectord z(9);
    z[i] = 1.7;
    const auto xhat = decode(z, p);
    for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(xhat[r], 1.7 * p.D(r, i) + p.b[r], 1e-14);
  }
}

TEST(InitParams, UnitColumnsTiedAndDeterministic) {
  Rng a(5), b(5);
  const auto p = init_params<float>(16, 64, a, ProxSpec::abs_topk(4));
  const auto q = init_params<float>(16, 64, b, ProxSpec::abs_topk(4));
  EXPECT_EQ(p, q);
  EXPECT_EQ(p.W, p.D);
  for (std::size_t c = 0; c < 64; ++c) EXPECT_NEAR(norm(p.D.col(c)), 1.0, 1e-6);
  EXPECT_EQ(p.b_e, Vectorf(64));
  EXPECT_EQ(p.b, Vectorf(16));

  Rng c(6);
  const auto mean = random_vector<float>(c, 16);
  const auto withmean = init_params<float>(16, 64, c, ProxSpec::topk(2), mean);
  EXPECT_EQ(withmean.b, mean);
}

TEST(InitParams, TiedEncoderIsReluOfDtx) {
  Rng rng(7);
  const auto p = init_params<double>(8, 32, rng, ProxSpec::relu_soft(0.0));
  const auto x = random_vector(rng, 8);
  const auto z = encode(x, p, ProxSpec::relu_soft(0.0));
  const auto dtx = matvec_t(p.D, x);
  for (std::size_t j = 0; j < 32; ++j) EXPECT_EQ(z[j], std::max(dtx[j], 0.0));
}

TEST(InitParams, JumpReluNeedsPositiveTheta) {
  Rng rng(1);
  EXPECT_THROW(init_params<double>(4, 8, rng, ProxSpec::jump_relu(0.0)), ContractViolation);
  const auto p = init_params<double>(4, 8, rng, ProxSpec::jump_relu(0.25));
  for (double t : p.thresholds()) EXPECT_NEAR(t, 0.25, 1e-15);
}

TEST(Forward, FiniteForFiniteInputs) {
  Rng rng(23);
  for (int t = 0; t < 100; ++t) {
    const auto p = random_params(rng, 8, 24);
    const auto x = random_vector(rng, 8, 100.0);
    for (const auto& v : kVariants) {
      const auto xhat = reconstruct(x, p, v);
      EXPECT_TRUE(all_finite(xhat.span()));
    }
  }
}

TEST(Forward, AbsTopKSignFidelity) {
  Rng rng(24);
  for (int t = 0; t < 200; ++t) {
    auto p = random_params(rng, 8, 24);
    p.b_e = Vectord(24);
    p.b = Vectord(8);
    const auto x = random_vector(rng, 8);
    Vectord neg(8);
    for (std::size_t i = 0; i < 8; ++i) neg[i] = -x[i];
    const auto z = encode(x, p, ProxSpec::abs_topk(4)), zn = encode(neg, p, ProxSpec::abs_topk(4));
    EXPECT_EQ(count_nonzero(z), 4u);
    for (std::size_t j = 0; j < 24; ++j) EXPECT_EQ(zn[j], -z[j]);
  }
}

TEST(Forward, OneStepUnrollIdentity) {
  // W = D, b_e = -D^T b: the encoder is one proximal-gradient step from z = 0
  // with unit step size.
  Rng rng(25);
  for (int t = 0; t < 100; ++t) {
    const std::size_t d = 4 + rng.uniform_index(8), P = d + rng.uniform_index(3 * d);
    const auto D = column_normalize(random_matrix<float>(rng, d, P));
    const auto b = random_vector<float>(rng, d);
    const auto x = random_vector<float>(rng, d);
    Vectorf b_e = matvec_t(D, b);
    for (auto& v : b_e) v = -v;
    SaeParams<float> p{D, D, b_e, b, Vectorf(P, std::log(0.4f))};
    const double theta = p.thresholds()[0];
    for (const auto& v : {ProxSpec::relu_soft(0.1), ProxSpec::jump_relu(theta), ProxSpec::topk(2),
                          ProxSpec::abs_topk(3)}) {
      CoderConfig cfg{1.0, 1, 0.0, v};
      EXPECT_EQ(encode(x, p, v), prox_grad_step(Vectorf(P), x, D, b, cfg));
      EXPECT_EQ(encode(x, p, v), sparse_code(x, D, b, cfg).z);
    }
  }
}
