// SPDX-License-Identifier: Apache-2.0
#pragma once

// gen-data -> train -> eval as library calls. The CLI is a thin layer over
// these; reports are JSON lines with no wall-clock fields in deterministic
// mode, so two runs with the same seed give identical bytes.

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "proxsae/config.hpp"
#include "proxsae/metrics.hpp"
#include "proxsae/sae.hpp"
#include "proxsae/steering.hpp"
#include "proxsae/store.hpp"
#include "proxsae/synth.hpp"
#include "proxsae/trainer.hpp"

namespace proxsae {

inline ActivationStore synthetic_store(const RunConfig& cfg, const Matrixf& X) {
  return {X, {{"source", "synthetic"}, {"model", "planted-concepts"}, {"layer", 0}, {"synth", synth_to_json(cfg.synth)}}};
}

/// Contrast pairs for the configured concept axis.
inline ContrastPairs config_pairs(const RunConfig& cfg, const GroundTruth& truth) {
  return make_contrast_pairs(cfg.synth, truth, cfg.eval.concept_axis, cfg.eval.pairs, cfg.eval.pair_c);
}

struct TrainOutcome {
  Checkpoint checkpoint;
  TrainReport report;
};

/// Trains on X with the configured variant. Checks X against the configured
/// dimension before any compute.
inline TrainOutcome run_train(const RunConfig& cfg, const Matrixf& X) {
  cfg.validate();
  if (X.cols() != cfg.synth.d)
    throw SchemaError("train: activation dim " + std::to_string(X.cols()) + " != configured d " +
                      std::to_string(cfg.synth.d));
  const auto variant = cfg.sae.spec();
  auto res = train(X, cfg.sae.latent_count(cfg.synth.d), variant, cfg.train);
  return {{std::move(res.params), variant, cfg.train.steps, config_hash(cfg), res.rng}, std::move(res.report)};
}

inline nlohmann::json record_to_json(const TrainRecord& r) {
  return {{"record", "train"},         {"step", r.step},
          {"loss", r.loss},            {"train_mse", r.train_mse},
          {"nmse", r.nmse},            {"mean_l0", r.mean_l0},
          {"dead_latents", r.dead_latents}, {"code_min", r.code_min},
          {"code_max", r.code_max},    {"topk_clip_rate", r.topk_clip_rate},
          {"wall_ms", r.wall_ms}};
}

inline std::string to_jsonl(const std::vector<nlohmann::json>& lines) {
  std::string out;
  for (const auto& j : lines) out += canonical_json(j) + "\n";
  return out;
}

inline std::string train_report_jsonl(const TrainReport& r) {
  std::vector<nlohmann::json> lines;
  for (const auto& rec : r.records) lines.push_back(record_to_json(rec));
  return to_jsonl(lines);
}

struct ConceptEval {
  double dim_abs_cos = 0.0;        // DiM axis vs planted axis
  std::size_t matched_latent = 0;  // learned atom best aligned with the axis
  double matched_abs_cos = 0.0;
  double matched_coverage = 0.0;   // both-sign coverage of that latent
  double best_coverage = 0.0;      // over all latents
  std::size_t best_coverage_latent = 0;
  double probe_accuracy = 0.0;     // pair member (plus / minus) from SAE codes
};

struct EvalReport {
  ProxSpec variant;
  std::size_t latents = 0;
  double train_nmse = 0.0;
  double train_l0 = 0.0;
  // with ground truth
  std::optional<double> heldout_nmse;
  std::optional<double> heldout_l0;
  std::optional<std::size_t> heldout_dead;
  std::optional<RecoveryReport> recovery;
  std::optional<ConceptEval> concept_eval;
  std::optional<LossRecoveredReport> loss_rec;

  std::vector<nlohmann::json> lines() const;
};

inline std::vector<nlohmann::json> EvalReport::lines() const {
  std::vector<nlohmann::json> out;
  nlohmann::json rec = {{"record", "reconstruction"}, {"variant", variant_to_json(variant)}, {"latents", latents},
                        {"train_nmse", train_nmse},   {"train_l0", train_l0}};
  if (heldout_nmse) {
    rec["heldout_nmse"] = *heldout_nmse;
    rec["heldout_l0"] = *heldout_l0;
    rec["heldout_dead"] = *heldout_dead;
  }
  out.push_back(rec);
  if (recovery) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& f : recovery->fragmentation)
      pairs.push_back({{"axis", f.axis}, {"positive", f.positive}, {"negative", f.negative},
                       {"cos_positive", f.cos_positive}, {"cos_negative", f.cos_negative}});
    out.push_back({{"record", "recovery"},
                   {"tau", recovery->tau},
                   {"recovered", recovery->recovered},
                   {"true_atoms", recovery->matches.size()},
                   {"mean_abs_cos", recovery->mean_abs_cos},
                   {"fragmentation_pairs", recovery->fragmentation.size()},
                   {"fragmented_axes", recovery->fragmented_axes},
                   {"pairs", pairs}});
  }
  if (concept_eval) {
    const auto& c = *concept_eval;
    out.push_back({{"record", "concept"},
                   {"dim_abs_cos", c.dim_abs_cos},
                   {"matched_latent", c.matched_latent},
                   {"matched_abs_cos", c.matched_abs_cos},
                   {"matched_coverage", c.matched_coverage},
                   {"best_coverage", c.best_coverage},
                   {"best_coverage_latent", c.best_coverage_latent},
                   {"probe_accuracy", c.probe_accuracy}});
  }
  if (loss_rec)
    out.push_back({{"record", "loss_recovered"},
                   {"H_orig", loss_rec->H_orig},
                   {"H_star", loss_rec->H_star},
                   {"H_zero", loss_rec->H_zero},
                   {"score", loss_rec->score}});
  return out;
}

namespace detail {

inline std::size_t dead_count(const Matrixf& codes) {
  std::size_t dead = 0;
  for (std::size_t j = 0; j < codes.cols(); ++j) {
    bool fired = false;
    for (std::size_t i = 0; i < codes.rows() && !fired; ++i) fired = codes(i, j) != 0.0f;
    dead += !fired;
  }
  return dead;
}

}  // namespace detail

/// Reconstruction on X; with ground truth also held-out reconstruction,
/// dictionary recovery, the configured concept axis and loss recovered.
inline EvalReport evaluate(const RunConfig& cfg, const Matrixf& X, const Checkpoint& ck,
                           const GroundTruth* truth = nullptr) {
  ck.params.validate();
  if (X.cols() != ck.params.d())
    throw SchemaError("eval: activation dim " + std::to_string(X.cols()) + " != checkpoint d " +
                      std::to_string(ck.params.d()));
  EvalReport rep;
  rep.variant = ck.variant;
  rep.latents = ck.params.latents();
  {
    const auto rt = reconstruct_all(X, ck.params, ck.variant);
    rep.train_nmse = nmse_batch(X, rt.xhat);
    rep.train_l0 = mean_l0(rt.codes);
  }
  if (!truth) return rep;
  if (truth->H.rows() != X.cols() || truth->H.cols() != cfg.synth.P_true)
    throw SchemaError("eval: ground truth does not match the configured synth shape");

  const auto held = generate_heldout(cfg.synth, *truth, cfg.eval.heldout);
  const auto rh = reconstruct_all(held.X, ck.params, ck.variant);
  rep.heldout_nmse = nmse_batch(held.X, rh.xhat);
  rep.heldout_l0 = mean_l0(rh.codes);
  rep.heldout_dead = detail::dead_count(rh.codes);

  rep.recovery = dictionary_recovery(ck.params.D, truth->H, cfg.eval.tau);

  const auto pairs = config_pairs(cfg, *truth);
  ConceptEval c;
  {
    const auto dim = dim_extract(pairs.plus, pairs.minus);
    const auto h = truth->H.col(cfg.eval.concept_axis);
    c.dim_abs_cos = std::abs(dot(dim.concept_vector.direction.span(), h.span())) / norm(h);
  }
  const auto& m = rep.recovery->matches[cfg.eval.concept_axis];
  c.matched_latent = m.learned.value_or(0);
  c.matched_abs_cos = m.abs_cos;
  const auto cp = reconstruct_all(pairs.plus, ck.params, ck.variant).codes;
  const auto cm = reconstruct_all(pairs.minus, ck.params, ck.variant).codes;
  const auto cov = both_sign_coverage(cp, cm);
  if (m.learned) c.matched_coverage = cov[*m.learned];
  const auto best = std::max_element(cov.begin(), cov.end());
  c.best_coverage = *best;
  c.best_coverage_latent = static_cast<std::size_t>(best - cov.begin());
  {
    Matrixf F(2 * pairs.plus.rows(), rep.latents);
    std::vector<int> labels(F.rows());
    for (std::size_t i = 0; i < pairs.plus.rows(); ++i) {
      std::copy(cp.row(i).begin(), cp.row(i).end(), F.row(2 * i).begin());
      std::copy(cm.row(i).begin(), cm.row(i).end(), F.row(2 * i + 1).begin());
      labels[2 * i] = 1;
      labels[2 * i + 1] = 0;
    }
    c.probe_accuracy = probe_accuracy(F, std::span<const int>(labels), cfg.eval.probe).accuracy;
  }
  rep.concept_eval = c;

  const auto labels = teacher_labels(held.truth.codes, cfg.eval.head.teachers, cfg.synth.seed);
  const auto head = fit_toy_head(held.X, labels, std::size_t{1} << cfg.eval.head.teachers, cfg.eval.head);
  rep.loss_rec = loss_recovered(held.X, rh.xhat, head);
  return rep;
}

}  // namespace proxsae
