// SPDX-License-Identifier: Apache-2.0
#pragma once

// Evaluation of trained SAEs:
//   * nMSE |x - xhat|^2 / |x|^2, batch value = mean of per-sample ratios;
//   * loss recovered (H* - H0) / (Horig - H0) through a frozen linear-softmax
//     head standing in for the rest of a network;
//   * dictionary recovery against planted axes, with antipodal fragmentation;
//   * both-sign coverage of latents on contrast pairs;
//   * sparse probing: logistic regression on the top latents by mean
//     difference.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "proxsae/errors.hpp"
#include "proxsae/numeric.hpp"
#include "proxsae/prox.hpp"
#include "proxsae/rng.hpp"
#include "proxsae/sae.hpp"

namespace proxsae {

// ---------------------------------------------------------------- nMSE

template <class T, class U>
double nmse(std::span<const T> x, std::span<const U> xhat) {
  require(x.size() == xhat.size(), "nmse: length mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = static_cast<double>(x[i]);
    const double e = xi - static_cast<double>(xhat[i]);
    num += e * e;
    den += xi * xi;
  }
  if (!(den > 0.0)) throw UndefinedMetricError("nmse: x has zero norm");
  return num / den;
}

template <class T>
double nmse(const Vector<T>& x, const Vector<T>& xhat) {
  return nmse(x.span(), xhat.span());
}

/// Mean of per-sample ratios over the rows of X and Xhat.
template <class T>
double nmse_batch(const Matrix<T>& X, const Matrix<T>& Xhat) {
  require(X.rows() == Xhat.rows() && X.cols() == Xhat.cols(), "nmse_batch: shape mismatch");
  require(X.rows() > 0, "nmse_batch: empty batch");
  double acc = 0.0;
  for (std::size_t r = 0; r < X.rows(); ++r) acc += nmse(X.row(r), Xhat.row(r));
  return acc / static_cast<double>(X.rows());
}

/// Codes and reconstructions of every row of X.
template <class T>
struct Reconstruction {
  Matrix<T> codes;  // n x P
  Matrix<T> xhat;   // n x d
};

template <class T>
Reconstruction<T> reconstruct_all(const Matrix<T>& X, const SaeParams<T>& p, const ProxSpec& variant) {
  require(X.cols() == p.d(), "reconstruct: data dimension != model dimension");
  Reconstruction<T> out{Matrix<T>(X.rows(), p.latents()), Matrix<T>(X.rows(), p.d())};
  std::vector<double> acc(p.latents());
  std::vector<T> pre(p.latents());
  const auto th = p.thresholds();
  for (std::size_t r = 0; r < X.rows(); ++r) {
    encode_pre_into(X.row(r), p, std::span<double>(acc), std::span<T>(pre));
    apply_variant(std::span<const T>(pre), p, variant, out.codes.row(r), nullptr, &th);
    decode_into(std::as_const(out.codes).row(r), p, out.xhat.row(r));
  }
  return out;
}

/// Mean number of nonzero entries per code row.
template <class T>
double mean_l0(const Matrix<T>& codes) {
  std::size_t nnz = 0;
  for (T v : codes.flat()) nnz += v != T{0};
  return static_cast<double>(nnz) / static_cast<double>(codes.rows());
}

// ---------------------------------------------------------------- loss recovered

/// Frozen linear-softmax readout, logits = R x (no bias, so a zero input gives
/// the uniform distribution).
struct ToyHead {
  Matrixd readout;  // V x d
  std::vector<int> labels;

  std::size_t classes() const noexcept { return readout.rows(); }
};

struct ToyHeadConfig {
  std::size_t teachers = 2;  // V = 2^teachers
  std::size_t iters = 300;
  double lr = 0.05;
};

namespace detail {

/// Mean cross-entropy of softmax(R x) against labels.
template <class T>
double head_cross_entropy(const Matrixd& R, const Matrix<T>& X, std::span<const int> labels,
                          Matrixd* grad = nullptr) {
  const std::size_t V = R.rows(), d = R.cols(), n = X.rows();
  std::vector<double> logits(V);
  double total = 0.0;
  if (grad) *grad = Matrixd(V, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = X.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < V; ++v) {
      double a = 0.0;
      for (std::size_t c = 0; c < d; ++c) a += R(v, c) * static_cast<double>(x[c]);
      logits[v] = a;
      mx = std::max(mx, a);
    }
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    const double lse = mx + std::log(z);
    total += lse - logits[static_cast<std::size_t>(labels[i])];
    if (grad) {
      for (std::size_t v = 0; v < V; ++v) {
        const double g = std::exp(logits[v] - lse) - (static_cast<int>(v) == labels[i] ? 1.0 : 0.0);
        for (std::size_t c = 0; c < d; ++c) (*grad)(v, c) += g * static_cast<double>(x[c]);
      }
    }
  }
  if (grad)
    for (auto& g : grad->flat()) g /= static_cast<double>(n);
  return total / static_cast<double>(n);
}

}  // namespace detail

/// Labels from the planted codes: bit t of a label is whether a random
/// projection of the true code exceeds its median, so every bit splits the
/// data in half. Throws when the joint classes are off balance by more than
/// 10%.
inline std::vector<int> teacher_labels(const Matrixf& true_codes, std::size_t teachers, std::uint64_t seed) {
  require(teachers >= 1 && teachers <= 8, "teacher_labels: teachers must be in [1, 8]");
  const std::size_t n = true_codes.rows(), P = true_codes.cols();
  Rng rng(seed, 0x7EAC4E5ull);
  std::vector<int> labels(n, 0);
  std::vector<std::vector<double>> done;  // centered earlier projections
  for (std::size_t t = 0; t < teachers; ++t) {
    std::vector<double> g(P), proj(n);
    for (auto& v : g) v = rng.normal();
    for (std::size_t i = 0; i < n; ++i) proj[i] = dot(true_codes.row(i), std::span<const double>(g));
    const double mean = std::accumulate(proj.begin(), proj.end(), 0.0) / static_cast<double>(n);
    for (auto& v : proj) v -= mean;
    // decorrelate from the earlier bits so the joint classes stay balanced
    for (const auto& q : done) {
      const double beta = dot(std::span<const double>(proj), std::span<const double>(q)) /
                          squared_norm(std::span<const double>(q));
      for (std::size_t i = 0; i < n; ++i) proj[i] -= beta * q[i];
    }
    done.push_back(proj);
    std::vector<double> sorted = proj;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n / 2), sorted.end());
    const double median = sorted[n / 2];
    for (std::size_t i = 0; i < n; ++i)
      if (proj[i] > median) labels[i] |= 1 << t;
  }
  const std::size_t V = std::size_t{1} << teachers;
  std::vector<std::size_t> count(V, 0);
  for (int l : labels) ++count[static_cast<std::size_t>(l)];
  const double expect = static_cast<double>(n) / static_cast<double>(V);
  for (std::size_t v = 0; v < V; ++v)
    if (std::abs(static_cast<double>(count[v]) - expect) > 0.1 * expect)
      throw ContractViolation("teacher_labels: class " + std::to_string(v) + " has " + std::to_string(count[v]) +
                              " samples, expected about " + std::to_string(static_cast<std::size_t>(expect)));
  return labels;
}

/// Fits the readout on raw activations by full-batch Adam from zero.
template <class T>
ToyHead fit_toy_head(const Matrix<T>& X, std::vector<int> labels, std::size_t classes,
                     const ToyHeadConfig& cfg = {}) {
  require(labels.size() == X.rows(), "fit_toy_head: one label per row required");
  require(classes >= 2, "fit_toy_head: need at least two classes");
  for (int l : labels) require(l >= 0 && static_cast<std::size_t>(l) < classes, "fit_toy_head: label out of range");
  ToyHead head{Matrixd(classes, X.cols()), std::move(labels)};
  std::vector<double> m(classes * X.cols(), 0.0), v(m.size(), 0.0);
  Matrixd grad;
  for (std::size_t it = 1; it <= cfg.iters; ++it) {
    detail::head_cross_entropy(head.readout, X, std::span<const int>(head.labels), &grad);
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(it));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(it));
    auto w = head.readout.flat();
    const auto g = std::as_const(grad).flat();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      w[i] -= cfg.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + 1e-8);
    }
  }
  return head;
}

struct LossRecoveredReport {
  double H_orig = 0.0;
  double H_star = 0.0;
  double H_zero = 0.0;
  double score = 0.0;
};

/// Score from the three cross-entropies; undefined when Horig == H0.
inline LossRecoveredReport loss_recovered_score(double H_orig, double H_star, double H_zero) {
  if (!(std::abs(H_orig - H_zero) > 0.0))
    throw UndefinedMetricError("loss_recovered: H_orig equals H_zero, the score is undefined");
  return {H_orig, H_star, H_zero, (H_star - H_zero) / (H_orig - H_zero)};
}

/// Cross-entropies of the head on X, on Xhat and on the zero input.
template <class T>
LossRecoveredReport loss_recovered(const Matrix<T>& X, const Matrix<T>& Xhat, const ToyHead& head) {
  require(X.rows() == head.labels.size() && Xhat.rows() == X.rows(), "loss_recovered: one label per row required");
  require(X.cols() == head.readout.cols() && Xhat.cols() == X.cols(), "loss_recovered: dimension mismatch");
  const std::span<const int> labels(head.labels);
  const double H_orig = detail::head_cross_entropy(head.readout, X, labels);
  const double H_star = detail::head_cross_entropy(head.readout, Xhat, labels);
  const double H_zero = detail::head_cross_entropy(head.readout, Matrix<T>(X.rows(), X.cols()), labels);
  return loss_recovered_score(H_orig, H_star, H_zero);
}

template <class T>
LossRecoveredReport loss_recovered(const Matrix<T>& X, const SaeParams<T>& p, const ProxSpec& variant,
                                   const ToyHead& head) {
  return loss_recovered(X, reconstruct_all(X, p, variant).xhat, head);
}

// ---------------------------------------------------------------- dictionary recovery

struct AtomMatch {
  std::size_t true_index = 0;
  std::optional<std::size_t> learned;  // none when every learned atom is taken
  double abs_cos = 0.0;
  int sign = 0;  // sign of the cosine of the matched pair
  bool recovered = false;
};

struct FragmentationPair {
  std::size_t axis = 0;
  std::size_t positive = 0;  // learned atom with cos >= tau
  std::size_t negative = 0;  // learned atom with cos <= -tau
  double cos_positive = 0.0;
  double cos_negative = 0.0;
};

struct RecoveryReport {
  double tau = 0.9;
  std::vector<AtomMatch> matches;  // one per true atom, in true-atom order
  std::size_t recovered = 0;
  double mean_abs_cos = 0.0;
  std::vector<FragmentationPair> fragmentation;
  std::size_t fragmented_axes = 0;
};

namespace detail {

template <class T>
void require_unit_columns(const Matrix<T>& M, const char* what) {
  for (std::size_t c = 0; c < M.cols(); ++c) {
    double sq = 0.0;
    for (std::size_t r = 0; r < M.rows(); ++r) sq += static_cast<double>(M(r, c)) * static_cast<double>(M(r, c));
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-3)
      throw ContractViolation(std::string(what) + ": column " + std::to_string(c) + " is not unit norm");
  }
}

/// cos(H_true[:, t], D[:, j]) as a P_true x P matrix.
template <class T, class U>
Matrixd cosines(const Matrix<T>& D, const Matrix<U>& H) {
  require(D.rows() == H.rows(), "dictionary_recovery: ambient dimensions differ");
  require_unit_columns(D, "dictionary_recovery: learned dictionary");
  require_unit_columns(H, "dictionary_recovery: true dictionary");
  const Matrixd Hd = transpose(Matrixd::from(H));
  const Matrixd Dd = Matrixd::from(D);
  Matrixd C(H.cols(), D.cols());
  std::vector<double> acc(D.cols());
  for (std::size_t t = 0; t < H.cols(); ++t) {
    matvec_t_into(Dd, Hd.row(t), std::span<double>(acc));
    for (std::size_t j = 0; j < D.cols(); ++j) C(t, j) = acc[j];
  }
  return C;
}

}  // namespace detail

/// Greedy injective matching on |cos| (largest first, ties to the smaller
/// true then learned index), plus every antipodal pair per true axis.
template <class T, class U>
RecoveryReport dictionary_recovery(const Matrix<T>& D_learned, const Matrix<U>& H_true, double tau = 0.9) {
  require(tau > 0.0 && tau <= 1.0, "dictionary_recovery: tau must lie in (0, 1]");
  const Matrixd C = detail::cosines(D_learned, H_true);
  const std::size_t Pt = C.rows(), P = C.cols();

  struct Cand {
    double a;
    std::size_t t, j;
  };
  std::vector<Cand> cands;
  cands.reserve(Pt * P);
  for (std::size_t t = 0; t < Pt; ++t)
    for (std::size_t j = 0; j < P; ++j) cands.push_back({std::abs(C(t, j)), t, j});
  std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
    if (x.a != y.a) return x.a > y.a;
    return x.t != y.t ? x.t < y.t : x.j < y.j;
  });

  RecoveryReport rep;
  rep.tau = tau;
  rep.matches.resize(Pt);
  for (std::size_t t = 0; t < Pt; ++t) rep.matches[t].true_index = t;
  std::vector<bool> true_done(Pt, false), learned_used(P, false);
  std::size_t assigned = 0;
  for (const auto& c : cands) {
    if (assigned == Pt) break;
    if (true_done[c.t] || learned_used[c.j]) continue;
    true_done[c.t] = learned_used[c.j] = true;
    ++assigned;
    auto& m = rep.matches[c.t];
    m.learned = c.j;
    m.abs_cos = c.a;
    m.sign = C(c.t, c.j) >= 0.0 ? 1 : -1;
    m.recovered = c.a >= tau;
  }
  double sum = 0.0;
  for (const auto& m : rep.matches) {
    rep.recovered += m.recovered;
    sum += m.abs_cos;
  }
  rep.mean_abs_cos = sum / static_cast<double>(Pt);

  for (std::size_t t = 0; t < Pt; ++t) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t j = 0; j < P; ++j) {
      if (C(t, j) >= tau) pos.push_back(j);
      if (C(t, j) <= -tau) neg.push_back(j);
    }
    for (std::size_t a : pos)
      for (std::size_t b : neg) rep.fragmentation.push_back({t, a, b, C(t, a), C(t, b)});
    rep.fragmented_axes += !pos.empty() && !neg.empty();
  }
  return rep;
}

inline constexpr std::size_t kMaxAuditAtoms = 10;

/// Injective assignment maximizing the total |cos|, by dynamic programming
/// over subsets of true atoms. Returns the learned index per true atom.
template <class T, class U>
std::vector<std::size_t> exhaustive_matching(const Matrix<T>& D_learned, const Matrix<U>& H_true) {
  const Matrixd C = detail::cosines(D_learned, H_true);
  const std::size_t Pt = C.rows(), P = C.cols();
  if (Pt > kMaxAuditAtoms)
    throw CapacityError("exhaustive_matching: at most " + std::to_string(kMaxAuditAtoms) + " true atoms", Pt);
  require(P >= Pt, "exhaustive_matching: fewer learned than true atoms");
  const std::size_t S = std::size_t{1} << Pt;
  constexpr double ninf = -std::numeric_limits<double>::infinity();
  // best[j][mask]: best total using learned atoms < j covering `mask`
  std::vector<std::vector<double>> best(P + 1, std::vector<double>(S, ninf));
  best[0][0] = 0.0;
  for (std::size_t j = 0; j < P; ++j) {
    for (std::size_t mask = 0; mask < S; ++mask) {
      const double cur = best[j][mask];
      if (cur == ninf) continue;
      best[j + 1][mask] = std::max(best[j + 1][mask], cur);
      for (std::size_t t = 0; t < Pt; ++t) {
        if (mask >> t & 1) continue;
        const std::size_t nm = mask | (std::size_t{1} << t);
        best[j + 1][nm] = std::max(best[j + 1][nm], cur + std::abs(C(t, j)));
      }
    }
  }
  std::vector<std::size_t> assign(Pt, 0);
  std::size_t mask = S - 1;
  for (std::size_t j = P; j-- > 0;) {
    if (best[j + 1][mask] == best[j][mask]) continue;
    for (std::size_t t = 0; t < Pt; ++t) {
      if (!(mask >> t & 1)) continue;
      const std::size_t prev = mask & ~(std::size_t{1} << t);
      if (best[j][prev] != ninf && best[j][prev] + std::abs(C(t, j)) == best[j + 1][mask]) {
        assign[t] = j;
        mask = prev;
        break;
      }
    }
  }
  return assign;
}

// ---------------------------------------------------------------- both-sign coverage

/// Per latent, the fraction of contrast pairs on which it fires on both
/// members with opposite signs.
template <class T>
std::vector<double> both_sign_coverage(const Matrix<T>& codes_plus, const Matrix<T>& codes_minus) {
  require(codes_plus.rows() == codes_minus.rows() && codes_plus.cols() == codes_minus.cols(),
          "both_sign_coverage: shape mismatch");
  require(codes_plus.rows() > 0, "both_sign_coverage: no pairs");
  std::vector<double> cov(codes_plus.cols(), 0.0);
  for (std::size_t i = 0; i < codes_plus.rows(); ++i)
    for (std::size_t j = 0; j < codes_plus.cols(); ++j) {
      const T a = codes_plus(i, j), b = codes_minus(i, j);
      if ((a > T{0} && b < T{0}) || (a < T{0} && b > T{0})) cov[j] += 1.0;
    }
  for (auto& c : cov) c /= static_cast<double>(codes_plus.rows());
  return cov;
}

// ---------------------------------------------------------------- sparse probing

struct ProbeConfig {
  std::size_t top_k = 8;
  double train_fraction = 0.8;
  double ridge = 1e-3;
  std::size_t newton_iters = 50;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double accuracy = 0.0;  // held out
  std::vector<std::size_t> features;
  std::size_t n_train = 0, n_test = 0;
};

namespace detail {

/// Solves A x = b for a small symmetric positive definite A (Cholesky).
inline std::vector<double> spd_solve(std::vector<double> A, std::vector<double> b, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double s = A[j * n + j];
    for (std::size_t k = 0; k < j; ++k) s -= A[j * n + k] * A[j * n + k];
    if (!(s > 0.0)) throw DivergenceError("probe: Hessian is not positive definite");
    A[j * n + j] = std::sqrt(s);
    for (std::size_t i = j + 1; i < n; ++i) {
      double t = A[i * n + j];
      for (std::size_t k = 0; k < j; ++k) t -= A[i * n + k] * A[j * n + k];
      A[i * n + j] = t / A[j * n + j];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) b[i] -= A[i * n + k] * b[k];
    b[i] /= A[i * n + i];
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = i + 1; k < n; ++k) b[i] -= A[k * n + i] * b[k];
    b[i] /= A[i * n + i];
  }
  return b;
}

}  // namespace detail

/// Logistic probe on the `top_k` features with the largest absolute
/// difference of class means on the training split.
template <class T>
ProbeResult probe_accuracy(const Matrix<T>& F, std::span<const int> labels, const ProbeConfig& cfg = {}) {
  const std::size_t n = F.rows();
  require(labels.size() == n, "probe_accuracy: one label per row required");
  require(cfg.top_k >= 1, "probe_accuracy: top_k must be positive");
  std::size_t ones = 0;
  for (int l : labels) {
    require(l == 0 || l == 1, "probe_accuracy: labels must be 0 or 1");
    ones += l == 1;
  }
  if (ones == 0 || ones == n) throw ContractViolation("probe_accuracy: labels contain a single class");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(cfg.seed, 0x960BEull);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
  const std::size_t n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n))), 1, n - 1);
  const std::span<const std::size_t> train(order.data(), n_train), test(order.data() + n_train, n - n_train);

  // feature selection by class-mean difference
  const std::size_t m = F.cols();
  std::vector<double> s1(m, 0.0), s0(m, 0.0);
  std::size_t c1 = 0, c0 = 0;
  for (std::size_t i : train) {
    auto& s = labels[i] ? s1 : s0;
    (labels[i] ? c1 : c0)++;
    const auto row = F.row(i);
    for (std::size_t j = 0; j < m; ++j) s[j] += static_cast<double>(row[j]);
  }
  if (c0 == 0 || c1 == 0) throw ContractViolation("probe_accuracy: training split contains a single class");
  std::vector<std::size_t> feats(m);
  std::iota(feats.begin(), feats.end(), std::size_t{0});
  auto gap = [&](std::size_t j) { return std::abs(s1[j] / static_cast<double>(c1) - s0[j] / static_cast<double>(c0)); };
  std::stable_sort(feats.begin(), feats.end(), [&](std::size_t a, std::size_t b) { return gap(a) > gap(b); });
  feats.resize(std::min(cfg.top_k, m));
  std::sort(feats.begin(), feats.end());

  // Newton's method on the ridge-penalized logistic loss, intercept last
  const std::size_t q = feats.size() + 1;
  std::vector<double> w(q, 0.0), x(q);
  auto load = [&](std::size_t i) {
    const auto row = F.row(i);
    for (std::size_t j = 0; j < feats.size(); ++j) x[j] = static_cast<double>(row[feats[j]]);
    x[q - 1] = 1.0;
  };
  for (std::size_t it = 0; it < cfg.newton_iters; ++it) {
    std::vector<double> g(q, 0.0), H(q * q, 0.0);
    for (std::size_t i : train) {
      load(i);
      double a = 0.0;
      for (std::size_t j = 0; j < q; ++j) a += w[j] * x[j];
      const double p = 1.0 / (1.0 + std::exp(-a));
      const double r = p - static_cast<double>(labels[i]);
      const double s = std::max(p * (1.0 - p), 1e-12);
      for (std::size_t j = 0; j < q; ++j) {
        g[j] += r * x[j];
        for (std::size_t k = 0; k < q; ++k) H[j * q + k] += s * x[j] * x[k];
      }
    }
    for (std::size_t j = 0; j < q; ++j) {
      g[j] += cfg.ridge * w[j];
      H[j * q + j] += cfg.ridge;
    }
    const auto step = detail::spd_solve(H, g, q);
    double change = 0.0;
    for (std::size_t j = 0; j < q; ++j) {
      w[j] -= step[j];
      change = std::max(change, std::abs(step[j]));
    }
    if (change < 1e-10) break;
  }

  std::size_t correct = 0;
  for (std::size_t i : test) {
    load(i);
    double a = 0.0;
    for (std::size_t j = 0; j < q; ++j) a += w[j] * x[j];
    correct += (a > 0.0 ? 1 : 0) == labels[i];
  }
  return {static_cast<double>(correct) / static_cast<double>(test.size()), feats, train.size(), test.size()};
}

}  // namespace proxsae
