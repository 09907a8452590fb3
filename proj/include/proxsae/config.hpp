// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration as JSON. Every section is optional and every missing key
// keeps its default; unknown keys and wrong types are schema errors.
//
//   {"synth": {...SynthSpec}, "sae": {"variant", "k", "lambda", "theta",
//    "expansion", "latents"}, "train": {...TrainConfig}, "eval": {...}}

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "proxsae/errors.hpp"
#include "proxsae/metrics.hpp"
#include "proxsae/prox.hpp"
#include "proxsae/sae.hpp"
#include "proxsae/store.hpp"
#include "proxsae/synth.hpp"
#include "proxsae/trainer.hpp"

namespace proxsae {

struct SaeConfig {
  ProxKind variant = ProxKind::abs_topk;
  std::size_t k = 4;
  double lambda = 0.01;  // relu_soft
  double theta = 0.1;    // jump_relu, initial threshold
  std::size_t expansion = kDefaultExpansion;
  std::optional<std::size_t> latents;  // overrides expansion * d

  ProxSpec spec() const {
    switch (variant) {
      case ProxKind::relu_soft: return ProxSpec::relu_soft(lambda);
      case ProxKind::jump_relu: return ProxSpec::jump_relu(theta);
      case ProxKind::topk: return ProxSpec::topk(k);
      case ProxKind::abs_topk: return ProxSpec::abs_topk(k);
    }
    return ProxSpec::abs_topk(k);
  }
  std::size_t latent_count(std::size_t d) const { return latents.value_or(expansion * d); }
};

struct EvalConfig {
  double tau = 0.9;               // atom match threshold
  std::size_t heldout = 16384;    // fresh rows drawn after the training rows
  std::size_t concept_axis = 0;   // planted axis for contrast pairs and DiM
  std::size_t pairs = 1024;
  double pair_c = 1.0;
  ToyHeadConfig head;
  ProbeConfig probe;
};

struct RunConfig {
  SynthSpec synth;
  SaeConfig sae;
  TrainConfig train;
  EvalConfig eval;

  void validate() const {
    synth.validate();
    train.validate();
    if (sae.variant == ProxKind::topk || sae.variant == ProxKind::abs_topk)
      if (sae.k < 1 || sae.k > sae.latent_count(synth.d)) throw SchemaError("sae.k must lie in [1, latents]");
    if (sae.latent_count(synth.d) == 0) throw SchemaError("sae: latent count must be positive");
    if (sae.variant == ProxKind::relu_soft && !(sae.lambda >= 0.0)) throw SchemaError("sae.lambda must be >= 0");
    if (sae.variant == ProxKind::jump_relu && !(sae.theta > 0.0)) throw SchemaError("sae.theta must be > 0");
    if (!(eval.tau > 0.0 && eval.tau <= 1.0)) throw SchemaError("eval.tau must lie in (0, 1]");
    if (eval.concept_axis >= synth.P_true) throw SchemaError("eval.concept_axis must be < synth.P_true");
    if (eval.pairs == 0 || eval.heldout == 0) throw SchemaError("eval.pairs and eval.heldout must be positive");
  }
};

namespace detail {

/// Reads known keys out of one JSON object and rejects the rest.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw SchemaError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw SchemaError("expected a boolean");
        out = v.get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned()))
          throw SchemaError("expected a nonnegative integer");
        out = v.get<T>();
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw SchemaError("expected a number");
        out = v.get<T>();
      } else {
        if (!v.is_string()) throw SchemaError("expected a string");
        out = v.get<T>();
      }
    } catch (const SchemaError& e) {
      throw SchemaError(where_ + "." + key + ": " + e.what());
    }
  }

  template <class T>
  void get_optional(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    T v{};
    get(key, v);
    out = v;
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw SchemaError(where_ + ": unknown key '" + key + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::ObjectReader top(j, "config");
  if (const auto* s = top.child("synth")) {
    detail::ObjectReader r(*s, "synth");
    std::string sign(to_string(c.synth.sign_mode)), dist(to_string(c.synth.coeff_dist));
    r.get("d", c.synth.d);
    r.get("P_true", c.synth.P_true);
    r.get("k_true", c.synth.k_true);
    r.get("sign_mode", sign);
    r.get("coeff_dist", dist);
    r.get("coeff_lo", c.synth.coeff_lo);
    r.get("coeff_hi", c.synth.coeff_hi);
    r.get("noise_sigma", c.synth.noise_sigma);
    r.get("n_samples", c.synth.n_samples);
    r.get("seed", c.synth.seed);
    r.get("mean_norm", c.synth.mean_norm);
    r.get("max_coherence", c.synth.max_coherence);
    r.finish();
    c.synth.sign_mode = parse_sign_mode(sign);
    c.synth.coeff_dist = parse_coeff_dist(dist);
  }
  if (const auto* s = top.child("sae")) {
    detail::ObjectReader r(*s, "sae");
    std::string variant(to_string(c.sae.variant));
    r.get("variant", variant);
    r.get("k", c.sae.k);
    r.get("lambda", c.sae.lambda);
    r.get("theta", c.sae.theta);
    r.get("expansion", c.sae.expansion);
    r.get_optional("latents", c.sae.latents);
    r.finish();
    try {
      c.sae.variant = parse_prox_kind(variant);
    } catch (const Error& e) {
      throw SchemaError(std::string("sae.variant: ") + e.what());
    }
  }
  if (const auto* s = top.child("train")) {
    detail::ObjectReader r(*s, "train");
    r.get("steps", c.train.steps);
    r.get("batch_size", c.train.batch_size);
    r.get("lr", c.train.lr);
    r.get("beta1", c.train.beta1);
    r.get("beta2", c.train.beta2);
    r.get("adam_eps", c.train.adam_eps);
    r.get("bandwidth", c.train.bandwidth);
    r.get_optional("loss_lambda", c.train.loss_lambda);
    r.get("seed", c.train.seed);
    r.get("eval_every", c.train.eval_every);
    r.get("threads", c.train.threads);
    r.get("deterministic", c.train.deterministic);
    r.finish();
  }
  if (const auto* s = top.child("eval")) {
    detail::ObjectReader r(*s, "eval");
    r.get("tau", c.eval.tau);
    r.get("heldout", c.eval.heldout);
    r.get("concept_axis", c.eval.concept_axis);
    r.get("pairs", c.eval.pairs);
    r.get("pair_c", c.eval.pair_c);
    if (const auto* h = r.child("head")) {
      detail::ObjectReader hr(*h, "eval.head");
      hr.get("teachers", c.eval.head.teachers);
      hr.get("iters", c.eval.head.iters);
      hr.get("lr", c.eval.head.lr);
      hr.finish();
    }
    if (const auto* p = r.child("probe")) {
      detail::ObjectReader pr(*p, "eval.probe");
      pr.get("top_k", c.eval.probe.top_k);
      pr.get("train_fraction", c.eval.probe.train_fraction);
      pr.get("ridge", c.eval.probe.ridge);
      pr.get("newton_iters", c.eval.probe.newton_iters);
      pr.get("seed", c.eval.probe.seed);
      pr.finish();
    }
    r.finish();
  }
  top.finish();
  try {
    c.validate();
  } catch (const ContractViolation& e) {
    throw SchemaError(e.what());
  }
  return c;
}

inline nlohmann::json synth_to_json(const SynthSpec& s) {
  return {{"d", s.d},
          {"P_true", s.P_true},
          {"k_true", s.k_true},
          {"sign_mode", std::string(to_string(s.sign_mode))},
          {"coeff_dist", std::string(to_string(s.coeff_dist))},
          {"coeff_lo", s.coeff_lo},
          {"coeff_hi", s.coeff_hi},
          {"noise_sigma", s.noise_sigma},
          {"n_samples", s.n_samples},
          {"seed", s.seed},
          {"mean_norm", s.mean_norm},
          {"max_coherence", s.max_coherence}};
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["synth"] = synth_to_json(c.synth);
  j["sae"] = {{"variant", std::string(to_string(c.sae.variant))},
              {"k", c.sae.k},
              {"lambda", c.sae.lambda},
              {"theta", c.sae.theta},
              {"expansion", c.sae.expansion},
              {"latents", c.sae.latents ? nlohmann::json(*c.sae.latents) : nlohmann::json(nullptr)}};
  j["train"] = {{"steps", c.train.steps},
                {"batch_size", c.train.batch_size},
                {"lr", c.train.lr},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"adam_eps", c.train.adam_eps},
                {"bandwidth", c.train.bandwidth},
                {"loss_lambda", c.train.loss_lambda ? nlohmann::json(*c.train.loss_lambda) : nlohmann::json(nullptr)},
                {"seed", c.train.seed},
                {"eval_every", c.train.eval_every},
                {"threads", c.train.threads},
                {"deterministic", c.train.deterministic}};
  j["eval"] = {{"tau", c.eval.tau},
               {"heldout", c.eval.heldout},
               {"concept_axis", c.eval.concept_axis},
               {"pairs", c.eval.pairs},
               {"pair_c", c.eval.pair_c},
               {"head", {{"teachers", c.eval.head.teachers}, {"iters", c.eval.head.iters}, {"lr", c.eval.head.lr}}},
               {"probe",
                {{"top_k", c.eval.probe.top_k},
                 {"train_fraction", c.eval.probe.train_fraction},
                 {"ridge", c.eval.probe.ridge},
                 {"newton_iters", c.eval.probe.newton_iters},
                 {"seed", c.eval.probe.seed}}}};
  return j;
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Hash of everything that determines the trained model: synth, sae and
/// train, minus the worker count (results do not depend on it).
inline std::uint64_t config_hash(const RunConfig& c) {
  auto j = config_to_json(c);
  j.erase("eval");
  j["train"].erase("threads");
  return fnv1a64(canonical_json(j));
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace proxsae
