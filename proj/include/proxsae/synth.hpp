// SPDX-License-Identifier: Apache-2.0
#pragma once

// Planted-concept activations:
//
//   x = mean + sum_{p in S} alpha_p h_p + eps,   |S| = k_true,  eps ~ N(0, sigma^2 I)
//
// Concept directions are unit vectors with pairwise |cos| bounded by
// max_coherence. Every sample draws from its own Philox stream, so any block
// of rows can be generated independently of the others.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "proxsae/errors.hpp"
#include "proxsae/numeric.hpp"
#include "proxsae/rng.hpp"

namespace proxsae {

enum class SignMode { bipolar, nonneg };

inline std::string_view to_string(SignMode m) { return m == SignMode::bipolar ? "bipolar" : "nonneg"; }

inline SignMode parse_sign_mode(std::string_view s) {
  if (s == "bipolar") return SignMode::bipolar;
  if (s == "nonneg") return SignMode::nonneg;
  throw SchemaError("unknown sign_mode '" + std::string(s) + "' (expected bipolar or nonneg)");
}

enum class CoeffDist { uniform, constant };

inline std::string_view to_string(CoeffDist c) { return c == CoeffDist::uniform ? "uniform" : "constant"; }

inline CoeffDist parse_coeff_dist(std::string_view s) {
  if (s == "uniform") return CoeffDist::uniform;
  if (s == "constant") return CoeffDist::constant;
  throw SchemaError("unknown coeff_dist '" + std::string(s) + "' (expected uniform or constant)");
}

struct SynthSpec {
  std::size_t d = 64;
  std::size_t P_true = 32;
  std::size_t k_true = 4;
  SignMode sign_mode = SignMode::bipolar;
  CoeffDist coeff_dist = CoeffDist::uniform;
  double coeff_lo = 0.5;  // constant: the magnitude
  double coeff_hi = 1.5;
  double noise_sigma = 0.05;
  std::size_t n_samples = 65536;
  std::uint64_t seed = 0;
  double mean_norm = 1.0;
  double max_coherence = 0.3;

  void validate() const {
    require(d >= 1 && P_true >= 1, "SynthSpec: d and P_true must be positive");
    require(k_true >= 1 && k_true <= P_true, "SynthSpec: need 1 <= k_true <= P_true");
    require(n_samples >= 1, "SynthSpec: n_samples must be positive");
    require(coeff_lo > 0.0, "SynthSpec: coefficient magnitudes must be positive");
    require(coeff_dist == CoeffDist::constant || coeff_hi >= coeff_lo, "SynthSpec: coeff_hi < coeff_lo");
    require(noise_sigma >= 0.0, "SynthSpec: noise_sigma must be nonnegative");
    require(mean_norm >= 0.0, "SynthSpec: mean_norm must be nonnegative");
    require(max_coherence > 0.0 && max_coherence <= 1.0, "SynthSpec: max_coherence must lie in (0, 1]");
  }
};

struct GroundTruth {
  Matrixf H;      // d x P_true, unit columns
  Matrixf codes;  // n x P_true, exactly k_true nonzeros per row
  Vectorf global_mean;

  bool operator==(const GroundTruth&) const = default;
};

struct SynthData {
  Matrixf X;  // n x d
  GroundTruth truth;
};

namespace detail {

inline constexpr std::uint64_t kAtomStream = 1;
inline constexpr std::uint64_t kMeanStream = 2;
inline constexpr std::uint64_t kSampleStreams = std::uint64_t{1} << 56;
inline constexpr std::uint64_t kPairStreams = std::uint64_t{2} << 56;

inline std::vector<double> random_unit(Rng& rng, std::size_t d) {
  for (;;) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    const double n = norm(std::span<const double>(v));
    if (n == 0.0) continue;
    for (auto& x : v) x /= n;
    return v;
  }
}

/// k distinct indices out of n, ascending.
inline std::vector<std::size_t> draw_support(Rng& rng, std::size_t n, std::size_t k, std::size_t exclude = SIZE_MAX) {
  std::vector<std::size_t> pool;
  pool.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    if (i != exclude) pool.push_back(i);
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.uniform_index(pool.size() - i)]);
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline double draw_magnitude(Rng& rng, const SynthSpec& spec) {
  const double u = rng.uniform();  // drawn in both modes to keep streams aligned
  return spec.coeff_dist == CoeffDist::uniform ? spec.coeff_lo + (spec.coeff_hi - spec.coeff_lo) * u : spec.coeff_lo;
}

}  // namespace detail

/// Concept directions by rejection sampling. Gives up after 10 * P_true
/// draws.
inline Matrixf planted_atoms(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed, detail::kAtomStream);
  std::vector<std::vector<double>> atoms;
  const std::size_t budget = 10 * spec.P_true;
  std::size_t draws = 0;
  while (atoms.size() < spec.P_true) {
    if (draws++ == budget) {
      throw CoherenceError("planted atoms: could not place " + std::to_string(spec.P_true) +
                               " directions with |cos| <= " + std::to_string(spec.max_coherence) + " in d=" +
                               std::to_string(spec.d) + " within " + std::to_string(budget) +
                               " draws; use a larger d or fewer concepts",
                           atoms.size());
    }
    auto v = detail::random_unit(rng, spec.d);
    const bool ok = std::all_of(atoms.begin(), atoms.end(), [&](const std::vector<double>& a) {
      return std::abs(dot(std::span<const double>(a), std::span<const double>(v))) <= spec.max_coherence;
    });
    if (ok) atoms.push_back(std::move(v));
  }
  Matrixf H(spec.d, spec.P_true);
  for (std::size_t p = 0; p < spec.P_true; ++p)
    for (std::size_t r = 0; r < spec.d; ++r) H(r, p) = static_cast<float>(atoms[p][r]);
  return H;
}

inline Vectorf planted_mean(const SynthSpec& spec) {
  Rng rng(spec.seed, detail::kMeanStream);
  const auto u = detail::random_unit(rng, spec.d);
  Vectorf m(spec.d);
  for (std::size_t r = 0; r < spec.d; ++r) m[r] = static_cast<float>(spec.mean_norm * u[r]);
  return m;
}

namespace detail {

inline void generate_row(const SynthSpec& spec, const Matrixf& H, const Vectorf& mean, std::size_t i,
                         std::span<float> x_out, std::span<float> code_out) {
  thread_local std::vector<double> x;
  x.resize(spec.d);
  Rng rng(spec.seed, kSampleStreams + i);
  for (std::size_t r = 0; r < spec.d; ++r) x[r] = static_cast<double>(mean[r]);
  for (std::size_t p : draw_support(rng, spec.P_true, spec.k_true)) {
    const double mag = draw_magnitude(rng, spec);
    const bool negative = rng.coin();
    const double a = (spec.sign_mode == SignMode::bipolar && negative) ? -mag : mag;
    code_out[p] = static_cast<float>(a);
    for (std::size_t r = 0; r < spec.d; ++r) x[r] += a * static_cast<double>(H(r, p));
  }
  for (std::size_t r = 0; r < spec.d; ++r) {
    const double e = rng.normal();
    x_out[r] = static_cast<float>(x[r] + spec.noise_sigma * e);
  }
}

}  // namespace detail

/// Rows [lo, hi) of the dataset; X and codes must already have full size.
inline void generate_rows(const SynthSpec& spec, const Matrixf& H, const Vectorf& mean, std::size_t lo,
                          std::size_t hi, Matrixf& X, Matrixf& codes) {
  for (std::size_t i = lo; i < hi; ++i) detail::generate_row(spec, H, mean, i, X.row(i), codes.row(i));
}

/// `count` fresh rows from the same distribution: sample indices n_samples,
/// n_samples + 1, ..., which the training set never uses.
inline SynthData generate_heldout(const SynthSpec& spec, const GroundTruth& truth, std::size_t count) {
  spec.validate();
  require(truth.H.rows() == spec.d && truth.H.cols() == spec.P_true, "generate_heldout: ground truth shape");
  require(count >= 1, "generate_heldout: count must be positive");
  SynthData out{Matrixf(count, spec.d), {truth.H, Matrixf(count, spec.P_true), truth.global_mean}};
  for (std::size_t i = 0; i < count; ++i)
    detail::generate_row(spec, truth.H, truth.global_mean, spec.n_samples + i, out.X.row(i), out.truth.codes.row(i));
  return out;
}

inline SynthData generate(const SynthSpec& spec) {
  spec.validate();
  SynthData out{Matrixf(spec.n_samples, spec.d), {planted_atoms(spec), Matrixf(spec.n_samples, spec.P_true), planted_mean(spec)}};
  generate_rows(spec, out.truth.H, out.truth.global_mean, 0, spec.n_samples, out.X, out.truth.codes);
  return out;
}

struct ContrastPairs {
  std::size_t axis = 0;
  double c = 1.0;
  Matrixf plus, minus;  // n_pairs x d
  Matrixf context;      // shared part: mean + the other active concepts
};

/// Pairs that share their context and differ in the sign of one concept:
/// x+- = context +- c h_p + eps+-, with independent noise on each member.
inline ContrastPairs make_contrast_pairs(const SynthSpec& spec, const GroundTruth& truth, std::size_t axis,
                                         std::size_t n_pairs, double c = 1.0) {
  spec.validate();
  require(axis < spec.P_true, "make_contrast_pairs: concept index out of range");
  require(truth.H.rows() == spec.d && truth.H.cols() == spec.P_true, "make_contrast_pairs: ground truth shape");
  require(n_pairs >= 1 && c > 0.0, "make_contrast_pairs: need n_pairs >= 1 and c > 0");
  ContrastPairs out{axis, c, Matrixf(n_pairs, spec.d), Matrixf(n_pairs, spec.d), Matrixf(n_pairs, spec.d)};
  std::vector<double> ctx(spec.d);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    Rng rng(spec.seed, detail::kPairStreams + (static_cast<std::uint64_t>(axis) << 32) + i);
    for (std::size_t r = 0; r < spec.d; ++r) ctx[r] = static_cast<double>(truth.global_mean[r]);
    for (std::size_t p : detail::draw_support(rng, spec.P_true, spec.k_true - 1, axis)) {
      const double mag = detail::draw_magnitude(rng, spec);
      const bool negative = rng.coin();
      const double a = (spec.sign_mode == SignMode::bipolar && negative) ? -mag : mag;
      for (std::size_t r = 0; r < spec.d; ++r) ctx[r] += a * static_cast<double>(truth.H(r, p));
    }
    for (std::size_t r = 0; r < spec.d; ++r) {
      const double h = c * static_cast<double>(truth.H(r, axis));
      out.context(i, r) = static_cast<float>(ctx[r]);
      out.plus(i, r) = static_cast<float>(ctx[r] + h + spec.noise_sigma * rng.normal());
      out.minus(i, r) = static_cast<float>(ctx[r] - h + spec.noise_sigma * rng.normal());
    }
  }
  return out;
}

}  // namespace proxsae
