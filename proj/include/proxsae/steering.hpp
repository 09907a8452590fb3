// SPDX-License-Identifier: Apache-2.0
#pragma once

// Interventions on a single layer's activations:
//
//   add     x' = x + alpha d
//   ablate  x' = x - alpha d d^T x        (alpha = 1 removes the d component)
//   clamp   z = encode(x), z_i := c, x' = decode(z)
//
// Concept directions are kept in double and must be unit norm.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "proxsae/errors.hpp"
#include "proxsae/numeric.hpp"
#include "proxsae/sae.hpp"

namespace proxsae {

inline constexpr double kUnitTolerance = 1e-6;

enum class ConceptSourceKind { dim, sae_atom };

struct ConceptSource {
  ConceptSourceKind kind = ConceptSourceKind::dim;
  std::size_t index = 0;  // sae_atom only
  int sign = 1;           // sae_atom only, +1 or -1

  bool operator==(const ConceptSource&) const = default;
};

struct ConceptVector {
  Vectord direction;
  ConceptSource source;
  std::string layer;

  std::size_t dim() const noexcept { return direction.size(); }

  void validate() const {
    require(!direction.empty(), "ConceptVector: empty direction");
    const double n = norm(direction);
    if (!(std::abs(n - 1.0) <= kUnitTolerance))
      throw ContractViolation("ConceptVector: direction norm " + std::to_string(n) + " is not 1");
    require(source.sign == 1 || source.sign == -1, "ConceptVector: sign must be +1 or -1");
  }

  bool operator==(const ConceptVector&) const = default;
};

struct DimResult {
  ConceptVector concept_vector;
  Vectord raw;  // mean(pos) - mean(neg), unnormalized
};

/// Difference of class means, pos minus neg, normalized.
template <class T>
DimResult dim_extract(const Matrix<T>& pos, const Matrix<T>& neg, std::string layer = {}) {
  require(pos.rows() > 0 && neg.rows() > 0, "dim_extract: both sample sets must be nonempty");
  require(pos.cols() == neg.cols(), "dim_extract: pos and neg dimensions differ");
  const std::size_t d = pos.cols();
  auto mean_of = [d](const Matrix<T>& m) {
    std::vector<double> s(d, 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      const auto row = m.row(i);
      for (std::size_t r = 0; r < d; ++r) s[r] += static_cast<double>(row[r]);
    }
    for (auto& v : s) v /= static_cast<double>(m.rows());
    return s;
  };
  const auto mp = mean_of(pos), mn = mean_of(neg);
  Vectord raw(d);
  for (std::size_t r = 0; r < d; ++r) raw[r] = mp[r] - mn[r];
  const double n = norm(raw);
  if (!(n > 0.0) || !std::isfinite(n)) throw DegenerateConceptError("dim_extract: class means coincide, no concept axis");
  Vectord dir(d);
  for (std::size_t r = 0; r < d; ++r) dir[r] = raw[r] / n;
  return {{std::move(dir), {ConceptSourceKind::dim, 0, 1}, std::move(layer)}, std::move(raw)};
}

/// Decoder column i of an SAE, times `sign`, as a concept vector.
template <class T>
ConceptVector concept_from_atom(const SaeParams<T>& p, std::size_t i, int sign = 1, std::string layer = {}) {
  if (i >= p.latents())
    throw ContractViolation("concept_from_atom: latent " + std::to_string(i) + " out of range", i);
  require(sign == 1 || sign == -1, "concept_from_atom: sign must be +1 or -1");
  Vectord dir(p.d());
  for (std::size_t r = 0; r < p.d(); ++r) dir[r] = static_cast<double>(p.D(r, i));
  const double n = norm(dir);
  if (!(n > 0.0)) throw DegenerateAtomError("concept_from_atom: decoder column has zero norm", i);
  for (auto& v : dir) v = sign * v / n;
  return {std::move(dir), {ConceptSourceKind::sae_atom, i, sign}, std::move(layer)};
}

template <class T>
void activation_add_into(std::span<const T> x, const ConceptVector& cv, double alpha, std::span<T> out) {
  require(x.size() == cv.dim() && out.size() == x.size(), "activation_add: dimension mismatch");
  for (std::size_t r = 0; r < x.size(); ++r) out[r] = static_cast<T>(static_cast<double>(x[r]) + alpha * cv.direction[r]);
}

template <class T>
Vector<T> activation_add(const Vector<T>& x, const ConceptVector& cv, double alpha) {
  Vector<T> out(x.size());
  activation_add_into(x.span(), cv, alpha, out.span());
  return out;
}

template <class T>
void directional_ablate_into(std::span<const T> x, const ConceptVector& cv, double alpha, std::span<T> out) {
  require(x.size() == cv.dim() && out.size() == x.size(), "directional_ablate: dimension mismatch");
  cv.validate();
  const double s = alpha * dot(x, cv.direction.span());
  for (std::size_t r = 0; r < x.size(); ++r) out[r] = static_cast<T>(static_cast<double>(x[r]) - s * cv.direction[r]);
}

template <class T>
Vector<T> directional_ablate(const Vector<T>& x, const ConceptVector& cv, double alpha = 1.0) {
  Vector<T> out(x.size());
  directional_ablate_into(x.span(), cv, alpha, out.span());
  return out;
}

/// What latent_clamp returns: the decoded code, or the input patched by the
/// change in the decoded code, x + D (z_c - z).
enum class ClampOutput { reconstruction, patch };

template <class T>
void latent_clamp_into(std::span<const T> x, const SaeParams<T>& p, const ProxSpec& variant, std::size_t i, double c,
                       std::span<T> out, ClampOutput mode = ClampOutput::reconstruction) {
  if (i >= p.latents()) throw ContractViolation("latent_clamp: latent " + std::to_string(i) + " out of range", i);
  require(x.size() == p.d() && out.size() == p.d(), "latent_clamp: dimension mismatch");
  thread_local std::vector<double> acc;
  acc.resize(p.latents());
  Vector<T> pre(p.latents()), z(p.latents());
  encode_pre_into(x, p, std::span<double>(acc), pre.span());
  apply_variant(std::as_const(pre).span(), p, variant, z.span());
  if (mode == ClampOutput::patch) {
    const double delta = c - static_cast<double>(z[i]);
    for (std::size_t r = 0; r < p.d(); ++r)
      out[r] = static_cast<T>(static_cast<double>(x[r]) + delta * static_cast<double>(p.D(r, i)));
    return;
  }
  z[i] = static_cast<T>(c);
  decode_into(std::as_const(z).span(), p, out);
}

template <class T>
Vector<T> latent_clamp(const Vector<T>& x, const SaeParams<T>& p, const ProxSpec& variant, std::size_t i, double c,
                       ClampOutput mode = ClampOutput::reconstruction) {
  Vector<T> out(p.d());
  latent_clamp_into(x.span(), p, variant, i, c, out.span(), mode);
  return out;
}

enum class SteerMode { add, ablate, clamp };

inline std::string_view to_string(SteerMode m) {
  switch (m) {
    case SteerMode::add: return "add";
    case SteerMode::ablate: return "ablate";
    case SteerMode::clamp: return "clamp";
  }
  return "add";
}

inline SteerMode parse_steer_mode(std::string_view s) {
  if (s == "add") return SteerMode::add;
  if (s == "ablate") return SteerMode::ablate;
  if (s == "clamp") return SteerMode::clamp;
  throw SchemaError("unknown steer mode '" + std::string(s) + "' (expected add, ablate or clamp)");
}

struct SteerRequest {
  SteerMode mode = SteerMode::add;
  double alpha = 1.0;
  std::size_t latent = 0;
  double clamp_value = 0.0;
  ClampOutput clamp_output = ClampOutput::reconstruction;
};

/// Applies one request to every row. Add and ablate need `cv`; clamp needs
/// the SAE.
template <class T>
Matrix<T> steer_rows(const Matrix<T>& X, const SteerRequest& req, const ConceptVector* cv,
                     const SaeParams<T>* sae = nullptr, const ProxSpec* variant = nullptr) {
  Matrix<T> out(X.rows(), X.cols());
  if (req.mode == SteerMode::clamp) {
    require(sae && variant, "steer: clamp mode needs an SAE checkpoint");
    sae->validate();
    require(X.cols() == sae->d(), "steer: activation dim != SAE d");
  } else {
    require(cv != nullptr, "steer: add and ablate need a concept vector");
    cv->validate();
    require(X.cols() == cv->dim(), "steer: activation dim != concept dim");
  }
  for (std::size_t i = 0; i < X.rows(); ++i) {
    switch (req.mode) {
      case SteerMode::add: activation_add_into(X.row(i), *cv, req.alpha, out.row(i)); break;
      case SteerMode::ablate: directional_ablate_into(X.row(i), *cv, req.alpha, out.row(i)); break;
      case SteerMode::clamp:
        latent_clamp_into(X.row(i), *sae, *variant, req.latent, req.clamp_value, out.row(i), req.clamp_output);
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------- serialization

inline nlohmann::json concept_to_json(const ConceptVector& cv) {
  nlohmann::json j;
  j["direction"] = cv.direction.values();
  j["layer"] = cv.layer;
  if (cv.source.kind == ConceptSourceKind::dim) {
    j["source"] = {{"kind", "dim"}};
  } else {
    j["source"] = {{"kind", "sae_atom"}, {"index", cv.source.index}, {"sign", cv.source.sign}};
  }
  return j;
}

inline ConceptVector concept_from_json(const nlohmann::json& j) {
  try {
    for (const auto& [key, _] : j.items())
      if (key != "direction" && key != "layer" && key != "source")
        throw SchemaError("concept: unknown key '" + key + "'");
    ConceptVector cv;
    cv.direction = Vectord(j.at("direction").get<std::vector<double>>());
    cv.layer = j.value("layer", std::string{});
    const auto& src = j.at("source");
    const auto kind = src.at("kind").get<std::string>();
    if (kind == "dim") {
      cv.source = {ConceptSourceKind::dim, 0, 1};
    } else if (kind == "sae_atom") {
      cv.source = {ConceptSourceKind::sae_atom, src.at("index").get<std::size_t>(), src.at("sign").get<int>()};
    } else {
      throw SchemaError("concept: unknown source kind '" + kind + "'");
    }
    cv.validate();
    return cv;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("concept: ") + e.what());
  } catch (const ContractViolation& e) {
    throw SchemaError(std::string("concept: ") + e.what());
  }
}

}  // namespace proxsae
