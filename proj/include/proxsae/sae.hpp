// SPDX-License-Identifier: Apache-2.0
#pragma once

// Sparse autoencoder as a one-step unrolled proximal-gradient coder:
//
//   encoder  z    = prox(W^T x + b_e)
//   decoder  xhat = D z + b
//
// W and D are d x P (one column per latent). The JumpReLU variant keeps one
// threshold per latent, stored as log(theta) so it stays positive under
// gradient updates.

#include <cmath>
#include <cstddef>
#include <iostream>
#include <optional>
#include <span>
#include <vector>

#include "proxsae/errors.hpp"
#include "proxsae/numeric.hpp"
#include "proxsae/prox.hpp"
#include "proxsae/rng.hpp"

namespace proxsae {

inline constexpr std::size_t kDefaultExpansion = 16;

template <class T>
struct SaeParams {
  Matrix<T> W;          // encoder, d x P
  Matrix<T> D;          // decoder dictionary, d x P
  Vector<T> b_e;        // encoder bias, P
  Vector<T> b;          // decoder bias, d
  Vector<T> log_theta;  // per-latent JumpReLU thresholds, P

  std::size_t d() const noexcept { return W.rows(); }
  std::size_t latents() const noexcept { return W.cols(); }

  void validate() const {
    require(W.rows() == D.rows() && W.cols() == D.cols(), "SaeParams: W and D shapes differ");
    require(b_e.size() == W.cols(), "SaeParams: b_e length != P");
    require(b.size() == W.rows(), "SaeParams: b length != d");
    require(log_theta.size() == W.cols(), "SaeParams: log_theta length != P");
  }

  std::vector<double> thresholds() const {
    std::vector<double> out(log_theta.size());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::exp(static_cast<double>(log_theta[j]));
    return out;
  }

  template <class U>
  SaeParams<U> cast() const {
    return {Matrix<U>::from(W), Matrix<U>::from(D), Vector<U>::from(b_e.span()), Vector<U>::from(b.span()),
            Vector<U>::from(log_theta.span())};
  }

  bool operator==(const SaeParams&) const = default;
};

/// Pre-activation W^T x + b_e. The bias is added to the double accumulator
/// before the single rounding to T.
template <class T>
void encode_pre_into(std::span<const T> x, const SaeParams<T>& p, std::span<double> acc, std::span<T> pre) {
  require(x.size() == p.d(), "encode: x.len != d");
  matvec_t_into(p.W, x, acc);
  for (std::size_t j = 0; j < pre.size(); ++j) pre[j] = static_cast<T>(acc[j] + static_cast<double>(p.b_e[j]));
}

/// Applies the variant's operator to a pre-activation. JumpReLU uses the
/// per-latent thresholds of `p`; `support` receives the nonzero indices.
template <class T>
void apply_variant(std::span<const T> pre, const SaeParams<T>& p, const ProxSpec& variant, std::span<T> z,
                   TopKStats* stats = nullptr, const std::vector<double>* thresholds = nullptr,
                   std::vector<std::size_t>* support = nullptr) {
  if (variant.kind == ProxKind::jump_relu) {
    if (thresholds) {
      prox_jump_relu(pre, std::span<const double>(*thresholds), z);
    } else {
      const auto th = p.thresholds();
      prox_jump_relu(pre, std::span<const double>(th), z);
    }
    detail::scan_support(std::span<const T>(z), support);
    return;
  }
  prox_apply(pre, variant, z, stats, support);
}

template <class T>
Vector<T> encode(const Vector<T>& x, const SaeParams<T>& p, const ProxSpec& variant) {
  std::vector<double> acc(p.latents());
  Vector<T> pre(p.latents()), z(p.latents());
  encode_pre_into(x.span(), p, std::span<double>(acc), pre.span());
  apply_variant(std::as_const(pre).span(), p, variant, z.span());
  return z;
}

/// xhat = D z + b, skipping zero code entries.
template <class T>
void decode_into(std::span<const T> z, const SaeParams<T>& p, std::span<T> xhat) {
  require(z.size() == p.latents(), "decode: z.len != P");
  require(xhat.size() == p.d(), "decode: output length != d");
  thread_local std::vector<std::size_t> nz;
  nz.clear();
  for (std::size_t j = 0; j < z.size(); ++j)
    if (z[j] != T{0}) nz.push_back(j);
  for (std::size_t r = 0; r < p.d(); ++r) {
    const auto row = p.D.row(r);
    double acc = 0.0;
    for (std::size_t j : nz) acc += static_cast<double>(row[j]) * static_cast<double>(z[j]);
    xhat[r] = static_cast<T>(acc + static_cast<double>(p.b[r]));
  }
}

/// decode_into with the dictionary given transposed (P x d) and the nonzero
/// indices of z known. Each output sums the same terms in the same order, so
/// the result is bitwise identical.
template <class T>
void decode_support_into(std::span<const T> z, std::span<const std::size_t> support, const Matrix<T>& D_t,
                         const Vector<T>& b, std::span<T> xhat) {
  require(z.size() == D_t.rows() && xhat.size() == D_t.cols(), "decode: dimension mismatch");
  thread_local std::vector<double> acc;
  acc.assign(xhat.size(), 0.0);
  for (std::size_t j : support) {
    const double zj = static_cast<double>(z[j]);
    const T* col = D_t.row(j).data();
    for (std::size_t r = 0; r < acc.size(); ++r) acc[r] += static_cast<double>(col[r]) * zj;
  }
  for (std::size_t r = 0; r < acc.size(); ++r) xhat[r] = static_cast<T>(acc[r] + static_cast<double>(b[r]));
}

template <class T>
Vector<T> decode(const Vector<T>& z, const SaeParams<T>& p) {
  Vector<T> out(p.d());
  decode_into(z.span(), p, out.span());
  return out;
}

template <class T>
Vector<T> reconstruct(const Vector<T>& x, const SaeParams<T>& p, const ProxSpec& variant) {
  return decode(encode(x, p, variant), p);
}

/// Isotropic unit-norm dictionary, encoder tied to it, zero encoder bias.
/// `mean` (the data mean) initializes the decoder bias when given.
template <class T>
SaeParams<T> init_params(std::size_t d, std::size_t latents, Rng& rng, const ProxSpec& variant,
                         const std::optional<Vector<T>>& mean = std::nullopt) {
  require(d > 0 && latents > 0, "init_params: dimensions must be positive");
  if (latents < d) std::clog << "proxsae: warning: P=" << latents << " < d=" << d << " (undercomplete SAE)\n";
  if (variant.kind == ProxKind::jump_relu)
    require(variant.theta > 0.0, "init_params: JumpReLU SAE needs an initial theta > 0");
  if (variant.cardinality()) require(variant.k <= latents, "init_params: k exceeds the number of latents");

  Matrix<T> D(d, latents);
  for (auto& v : D.flat()) v = static_cast<T>(rng.normal());
  D = column_normalize(D);

  SaeParams<T> p{D, D, Vector<T>(latents), Vector<T>(d), Vector<T>(latents)};
  if (mean) {
    require(mean->size() == d, "init_params: mean length != d");
    p.b = *mean;
  }
  if (variant.kind == ProxKind::jump_relu)
    for (auto& v : p.log_theta) v = static_cast<T>(std::log(variant.theta));
  return p;
}

}  // namespace proxsae
