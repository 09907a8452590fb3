// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reference proximal-gradient sparse coder for a fixed dictionary:
//
//   min_z 1/2 |x - (D z + b)|^2 + lambda R(z)
//   z <- prox_{mu lambda R}(z - mu D^T (D z + b - x)),   z0 = 0
//
// The gradient is evaluated in Gram form, D^T D z + D^T b - D^T x, with D^T x
// kept in double and D^T b rounded once to the storage type. With z = 0 and
// mu = 1 a single step therefore reproduces the SAE encoder with W = D and
// b_e = -D^T b bit for bit.

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "proxsae/errors.hpp"
#include "proxsae/numeric.hpp"
#include "proxsae/prox.hpp"

namespace proxsae {

struct CoderConfig {
  double mu = 0.0;  // <= 0 selects 0.99 / sigma_max(D)^2
  std::size_t max_iters = 500;
  double tol = 1e-8;
  ProxSpec spec;
};

template <class T>
double default_step_size(const Matrix<T>& D) {
  const double s = spectral_norm_sq(D, 50);
  require(s > 0.0, "default_step_size: dictionary is zero");
  return 0.99 / s;
}

/// 1/2 |x - D z - b|^2 + lambda R(z).
template <class T>
double coding_objective(const Vector<T>& x, const Matrix<T>& D, const Vector<T>& b, const Vector<T>& z,
                        const ProxSpec& spec) {
  require(D.rows() == x.size() && D.cols() == z.size() && b.size() == x.size(), "coding_objective: dims");
  std::vector<double> dz(D.rows());
  matvec_into(D, z.span(), std::span<double>(dz));
  double sq = 0.0;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double e = static_cast<double>(x[r]) - dz[r] - static_cast<double>(b[r]);
    sq += e * e;
  }
  return 0.5 * sq + regularizer_value(z.span(), spec);
}

namespace detail {

template <class T>
struct CoderTerms {
  std::vector<double> dtx;  // D^T x in double
  Vector<T> dtb;            // D^T b rounded to T
};

template <class T>
CoderTerms<T> coder_terms(const Vector<T>& x, const Matrix<T>& D, const Vector<T>& b) {
  require(D.rows() == x.size() && b.size() == x.size(), "sparse coder: x, b must have length d");
  CoderTerms<T> t{std::vector<double>(D.cols()), matvec_t(D, b)};
  matvec_t_into(D, x.span(), std::span<double>(t.dtx));
  return t;
}

template <class T>
Vector<T> step_with_terms(const Vector<T>& z, const Matrix<T>& D, const CoderTerms<T>& t, double mu,
                          const ProxSpec& step_spec) {
  require(z.size() == D.cols(), "prox_grad_step: z.len != P");
  const Vector<T> dtdz = matvec_t(D, matvec(D, z));
  Vector<T> u(z.size()), out(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) {
    const double grad = (static_cast<double>(dtdz[j]) + static_cast<double>(t.dtb[j])) - t.dtx[j];
    u[j] = static_cast<T>(static_cast<double>(z[j]) - mu * grad);
  }
  prox_apply(std::as_const(u).span(), step_spec, out.span());
  return out;
}

}  // namespace detail

template <class T>
Vector<T> prox_grad_step(const Vector<T>& z, const Vector<T>& x, const Matrix<T>& D, const Vector<T>& b,
                         const CoderConfig& cfg) {
  const double mu = cfg.mu > 0.0 ? cfg.mu : default_step_size(D);
  return detail::step_with_terms(z, D, detail::coder_terms(x, D, b), mu, cfg.spec.scaled(mu));
}

template <class T>
struct CodeResult {
  Vector<T> z;
  std::size_t iterations = 0;
  double objective = 0.0;
  bool converged = false;
};

/// Iterates from z = 0 until the relative change |dz| / max(1, |z|) drops
/// below tol. For the l0 and cardinality regularizers the iterate with the
/// lowest objective is returned; for l1 the last one.
template <class T>
CodeResult<T> sparse_code(const Vector<T>& x, const Matrix<T>& D, const Vector<T>& b, const CoderConfig& cfg) {
  require(cfg.max_iters >= 1, "sparse_code: max_iters must be >= 1");
  require(cfg.tol >= 0.0, "sparse_code: tol must be nonnegative");
  const double mu = cfg.mu > 0.0 ? cfg.mu : default_step_size(D);
  const ProxSpec step_spec = cfg.spec.scaled(mu);
  const auto terms = detail::coder_terms(x, D, b);
  const bool keep_best = cfg.spec.kind != ProxKind::relu_soft;

  CodeResult<T> res{Vector<T>(D.cols()), 0, 0.0, false};
  Vector<T> z(D.cols());
  for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
    Vector<T> next = detail::step_with_terms(z, D, terms, mu, step_spec);
    if (!all_finite(std::as_const(next).span()))
      throw DivergenceError("sparse_code: non-finite iterate at iteration " + std::to_string(it), it);
    double diff = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      const double dj = static_cast<double>(next[j]) - static_cast<double>(z[j]);
      diff += dj * dj;
    }
    const double rel = std::sqrt(diff) / std::max(1.0, norm(z));
    z = std::move(next);
    res.iterations = it;
    const double obj = coding_objective(x, D, b, z, cfg.spec);
    if (!std::isfinite(obj))
      throw DivergenceError("sparse_code: non-finite objective at iteration " + std::to_string(it), it);
    if (keep_best && (it == 1 || obj < res.objective)) {
      res.z = z;
      res.objective = obj;
    }
    if (rel < cfg.tol) {
      res.converged = true;
      break;
    }
  }
  if (!keep_best) {
    res.z = z;
    res.objective = coding_objective(x, D, b, z, cfg.spec);
  }
  return res;
}

}  // namespace proxsae
