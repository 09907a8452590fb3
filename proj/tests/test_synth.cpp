// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "proxsae/synth.hpp"
#include "proxsae/trainer.hpp"

using namespace proxsae;

namespace {

SynthSpec small_spec(std::uint64_t seed = 3) {
  SynthSpec s;
  s.n_samples = 4096;
  s.seed = seed;
  return s;
}

double column_dot(const Matrixf& H, std::size_t a, std::size_t b) {
  double acc = 0.0;
  for (std::size_t r = 0; r < H.rows(); ++r) acc += static_cast<double>(H(r, a)) * static_cast<double>(H(r, b));
  return acc;
}

}  // namespace

TEST(Synth, AtomsAreUnitAndIncoherent) {
  const auto spec = small_spec();
  const auto H = planted_atoms(spec);
  ASSERT_EQ(H.rows(), 64u);
  ASSERT_EQ(H.cols(), 32u);
  for (std::size_t p = 0; p < 32; ++p) {
    EXPECT_NEAR(column_dot(H, p, p), 1.0, 1e-6);
    for (std::size_t q = p + 1; q < 32; ++q) EXPECT_LE(std::abs(column_dot(H, p, q)), 0.3 + 1e-6);
  }
}

TEST(Synth, CodesHaveExactlyKTrueNonzeros) {
  const auto data = generate(small_spec());
  for (std::size_t i = 0; i < data.truth.codes.rows(); ++i) {
    std::size_t nnz = 0;
    for (float v : data.truth.codes.row(i)) {
      nnz += v != 0.0f;
      if (v != 0.0f) {
        EXPECT_GE(std::abs(v), 0.5f);
        EXPECT_LE(std::abs(v), 1.5f);
      }
    }
    EXPECT_EQ(nnz, 4u);
  }
}

TEST(Synth, NoiselessSingleConceptSamplesAreMeanPlusSignedAtom) {
  auto spec = small_spec();
  spec.noise_sigma = 0.0;
  spec.k_true = 1;
  const auto data = generate(spec);
  for (std::size_t i = 0; i < 500; ++i) {
    const auto code = data.truth.codes.row(i);
    const auto p = static_cast<std::size_t>(std::find_if(code.begin(), code.end(), [](float v) { return v != 0; }) -
                                            code.begin());
    for (std::size_t r = 0; r < spec.d; ++r) {
      const double expect = static_cast<double>(data.truth.global_mean[r]) +
                            static_cast<double>(code[p]) * static_cast<double>(data.truth.H(r, p));
      EXPECT_NEAR(data.X(i, r), expect, 1e-6);
    }
  }
}

TEST(Synth, NoiselessSamplesLieInTheSpanOfTheirAtoms) {
  auto spec = small_spec();
  spec.noise_sigma = 0.0;
  const auto data = generate(spec);
  for (std::size_t i = 0; i < 200; ++i) {
    // residual of x - mean after subtracting the planted combination
    double sq = 0.0;
    for (std::size_t r = 0; r < spec.d; ++r) {
      double e = static_cast<double>(data.X(i, r)) - static_cast<double>(data.truth.global_mean[r]);
      for (std::size_t p = 0; p < spec.P_true; ++p)
        e -= static_cast<double>(data.truth.codes(i, p)) * static_cast<double>(data.truth.H(r, p));
      sq += e * e;
    }
    EXPECT_LE(std::sqrt(sq), 1e-6);
  }
}

TEST(Synth, BipolarCoefficientsAverageToZero) {
  auto spec = small_spec(5);
  spec.n_samples = 20000;
  const auto data = generate(spec);
  const double n = static_cast<double>(spec.n_samples);
  for (std::size_t p = 0; p < spec.P_true; ++p) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < spec.n_samples; ++i) {
      const double a = data.truth.codes(i, p);
      s += a;
      s2 += a * a;
    }
    const double mean = s / n;
    const double sd = std::sqrt(s2 / n - mean * mean);
    EXPECT_LE(std::abs(mean), 3.0 * sd / std::sqrt(n)) << "concept " << p;
  }
}

TEST(Synth, SignModesShareMagnitudes) {
  auto spec = small_spec();
  const auto bip = generate(spec);
  spec.sign_mode = SignMode::nonneg;
  const auto pos = generate(spec);
  bool saw_negative = false;
  for (std::size_t i = 0; i < spec.n_samples; ++i)
    for (std::size_t p = 0; p < spec.P_true; ++p) {
      EXPECT_EQ(std::abs(bip.truth.codes(i, p)), pos.truth.codes(i, p));
      saw_negative |= bip.truth.codes(i, p) < 0.0f;
    }
  EXPECT_TRUE(saw_negative);
  EXPECT_EQ(bip.truth.H, pos.truth.H);
}

TEST(Synth, SameSeedSameBytes) {
  const auto a = generate(small_spec(9));
  const auto b = generate(small_spec(9));
  EXPECT_EQ(a.X, b.X);
  EXPECT_EQ(a.truth, b.truth);
  EXPECT_NE(a.X, generate(small_spec(10)).X);
}

TEST(Synth, RowBlocksAreIndependent) {
  const auto spec = small_spec(4);
  const auto full = generate(spec);
  Matrixf X(spec.n_samples, spec.d), codes(spec.n_samples, spec.P_true);
  generate_rows(spec, full.truth.H, full.truth.global_mean, 1000, 1100, X, codes);
  for (std::size_t i = 1000; i < 1100; ++i)
    for (std::size_t r = 0; r < spec.d; ++r) EXPECT_EQ(X(i, r), full.X(i, r));
}

TEST(Synth, HeldoutRowsContinueTheSampleSequence) {
  auto spec = small_spec(6);
  spec.n_samples = 300;
  const auto train = generate(spec);
  const auto held = generate_heldout(spec, train.truth, 50);
  auto longer = spec;
  longer.n_samples = 350;
  const auto all = generate(longer);
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t r = 0; r < spec.d; ++r) EXPECT_EQ(held.X(i, r), all.X(300 + i, r));
  EXPECT_EQ(held.truth.codes.row(7)[0], all.truth.codes.row(307)[0]);
}

TEST(Synth, CoherenceBudgetExhaustionIsReported) {
  auto spec = small_spec();
  spec.d = 4;
  EXPECT_THROW(planted_atoms(spec), CoherenceError);
}

TEST(Synth, InvalidSpecIsRejected) {
  auto spec = small_spec();
  spec.k_true = 40;
  EXPECT_THROW(generate(spec), ContractViolation);
  EXPECT_THROW(parse_sign_mode("both"), SchemaError);
}

TEST(ContrastPairs, NoiselessDifferenceIsTwiceTheAxis) {
  auto spec = small_spec();
  spec.noise_sigma = 0.0;
  const auto truth = generate(spec).truth;
  const auto pairs = make_contrast_pairs(spec, truth, 7, 256, 1.25);
  for (std::size_t i = 0; i < 256; ++i)
    for (std::size_t r = 0; r < spec.d; ++r) {
      EXPECT_NEAR(pairs.plus(i, r) - pairs.minus(i, r), 2.5 * truth.H(r, 7), 1e-6);
      EXPECT_NEAR(0.5 * (pairs.plus(i, r) + pairs.minus(i, r)), pairs.context(i, r), 1e-6);
    }
}

TEST(ContrastPairs, MidpointsAverageToTheContext) {
  const auto spec = small_spec();
  const auto truth = generate(spec).truth;
  const auto pairs = make_contrast_pairs(spec, truth, 2, 4096);
  for (std::size_t r = 0; r < spec.d; ++r) {
    double mid = 0.0, ctx = 0.0;
    for (std::size_t i = 0; i < 4096; ++i) {
      mid += 0.5 * (pairs.plus(i, r) + pairs.minus(i, r));
      ctx += pairs.context(i, r);
    }
    // noise of the midpoint mean: sigma / sqrt(2 n) ~ 5.5e-4
    EXPECT_NEAR(mid / 4096.0, ctx / 4096.0, 3e-3);
  }
}

TEST(ContrastPairs, ConceptOutOfRangeIsRejected) {
  const auto spec = small_spec();
  const auto truth = generate(spec).truth;
  EXPECT_THROW(make_contrast_pairs(spec, truth, 32, 10), ContractViolation);
}

TEST(SynthTraining, AbsTopKReducesNmseTenfold) {
  auto spec = small_spec(21);
  spec.n_samples = 16384;
  const auto data = generate(spec);
  TrainConfig cfg;
  cfg.steps = 1500;
  cfg.batch_size = 512;
  cfg.lr = 1e-3;
  cfg.eval_every = 500;
  cfg.seed = 21;
  cfg.deterministic = true;
  const auto res = train(data.X, 256, ProxSpec::abs_topk(4), cfg);
  const auto& recs = res.report.records;
  EXPECT_LE(recs.back().nmse * 10.0, recs.front().nmse)
      << "initial " << recs.front().nmse << " final " << recs.back().nmse;
}
