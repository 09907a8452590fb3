// SPDX-License-Identifier: Apache-2.0
#pragma once

// `proxsae` command line. Exit status: 0 success, 2 usage or schema error
// (bad flag, missing input, rejected config), 1 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "proxsae/config.hpp"
#include "proxsae/pipeline.hpp"
#include "proxsae/sparse_coding.hpp"
#include "proxsae/steering.hpp"
#include "proxsae/store.hpp"

namespace proxsae::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

inline RunConfig load_or_default(const std::string& path) {
  return path.empty() ? config_from_json(nlohmann::json::object()) : load_config(path);
}

inline void write_report(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty()) {
    out << text;
  } else {
    write_text_atomic(path, text);
  }
}

inline std::string describe(const nlohmann::json& j) { return j.dump(); }

struct GenDataArgs {
  std::string config, out, truth, pairs_plus, pairs_minus;
  std::optional<std::uint64_t> seed;
};

inline void gen_data(const GenDataArgs& a, std::ostream& out) {
  auto cfg = load_or_default(a.config);
  if (a.seed) cfg.synth.seed = *a.seed;
  cfg.validate();
  const auto data = generate(cfg.synth);
  store_write(a.out, synthetic_store(cfg, data.X));
  if (!a.truth.empty()) save_ground_truth(a.truth, data.truth, synth_to_json(cfg.synth));
  if (!a.pairs_plus.empty() || !a.pairs_minus.empty()) {
    if (a.pairs_plus.empty() || a.pairs_minus.empty())
      throw SchemaError("gen-data: --pairs-plus and --pairs-minus go together");
    const auto pairs = config_pairs(cfg, data.truth);
    nlohmann::json meta = {{"source", "contrast_pairs"}, {"axis", pairs.axis}, {"c", pairs.c}, {"layer", 0}};
    meta["member"] = "plus";
    store_write(a.pairs_plus, {pairs.plus, meta});
    meta["member"] = "minus";
    store_write(a.pairs_minus, {pairs.minus, meta});
  }
  out << "gen-data: " << cfg.synth.n_samples << " x " << cfg.synth.d << " -> " << a.out << "\n";
}

struct TrainArgs {
  std::string config, data, out, report;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads, steps;
};

inline void train(const TrainArgs& a, std::ostream& out) {
  auto cfg = load_or_default(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.threads) cfg.train.threads = *a.threads;
  if (a.steps) cfg.train.steps = *a.steps;
  try {
    cfg.validate();
  } catch (const ContractViolation& e) {
    throw SchemaError(e.what());
  }
  const auto store = store_read(a.data);
  const auto res = run_train(cfg, store.X);
  save_checkpoint(a.out, res.checkpoint);
  if (!a.report.empty()) write_text_atomic(a.report, train_report_jsonl(res.report));
  const auto& last = res.report.records.back();
  out << "train: " << res.checkpoint.variant.describe() << " P=" << res.checkpoint.params.latents()
      << " steps=" << last.step << " nmse=" << last.nmse << " l0=" << last.mean_l0 << " -> " << a.out << "\n";
}

struct EvalArgs {
  std::string config, data, checkpoint, truth, out;
  bool force = false;
};

inline void eval(const EvalArgs& a, std::ostream& out) {
  const auto cfg = load_or_default(a.config);
  const auto ck = load_checkpoint(a.checkpoint);
  if (ck.config_hash != config_hash(cfg) && !a.force)
    throw SchemaError("eval: checkpoint was trained under config hash " + hash_hex(ck.config_hash) +
                      " but this config hashes to " + hash_hex(config_hash(cfg)) + " (pass --force to evaluate anyway)");
  const auto store = store_read(a.data);
  std::optional<GroundTruth> truth;
  if (!a.truth.empty()) truth = load_ground_truth(a.truth);
  const auto rep = evaluate(cfg, store.X, ck, truth ? &*truth : nullptr);
  write_report(a.out, to_jsonl(rep.lines()), out);
}

struct SteerArgs {
  std::string mode = "add", in, out, concept_file, checkpoint, pos, neg, layer;
  double alpha = 1.0, clamp_value = 0.0;
  std::size_t latent = 0;
  bool patch = false;
};

inline ConceptVector read_concept(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open concept file '" + path + "'");
  try {
    return concept_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("concept file '" + path + "': " + e.what());
  }
}

inline void steer(const SteerArgs& a, std::ostream& out) {
  if (a.mode == "dim") {
    if (a.pos.empty() || a.neg.empty() || a.concept_file.empty())
      throw SchemaError("steer --mode dim needs --pos, --neg and --concept-file");
    const auto r = dim_extract(store_read(a.pos).X, store_read(a.neg).X, a.layer);
    write_text_atomic(a.concept_file, concept_to_json(r.concept_vector).dump(2) + "\n");
    out << "steer: DiM axis |raw|=" << norm(r.raw) << " -> " << a.concept_file << "\n";
    return;
  }
  SteerRequest req;
  req.mode = parse_steer_mode(a.mode);
  req.alpha = a.alpha;
  req.latent = a.latent;
  req.clamp_value = a.clamp_value;
  req.clamp_output = a.patch ? ClampOutput::patch : ClampOutput::reconstruction;
  if (a.in.empty() || a.out.empty()) throw SchemaError("steer: --in and --out are required");
  auto store = store_read(a.in);
  Matrixf Y;
  if (req.mode == SteerMode::clamp) {
    if (a.checkpoint.empty()) throw SchemaError("steer --mode clamp needs --checkpoint");
    const auto ck = load_checkpoint(a.checkpoint);
    if (store.dim() != ck.params.d()) throw SchemaError("steer: activation dim != checkpoint d");
    if (req.latent >= ck.params.latents()) throw SchemaError("steer: --latent out of range");
    Y = steer_rows(store.X, req, nullptr, &ck.params, &ck.variant);
  } else {
    if (a.concept_file.empty()) throw SchemaError("steer --mode " + a.mode + " needs --concept-file");
    const auto cv = read_concept(a.concept_file);
    if (store.dim() != cv.dim()) throw SchemaError("steer: activation dim != concept dim");
    Y = steer_rows(store.X, req, &cv);
  }
  store.metadata["steer"] = {{"mode", a.mode}, {"alpha", a.alpha}, {"latent", a.latent},
                             {"clamp_value", a.clamp_value}, {"patch", a.patch}};
  store_write(a.out, {std::move(Y), store.metadata});
  out << "steer: " << a.mode << " on " << store.rows() << " rows -> " << a.out << "\n";
}

struct CodeArgs {
  std::string dict, in, out, op = "abs_topk";
  std::size_t k = 4, iters = 500;
  double lambda = 0.01, theta = 0.1, tol = 1e-8, mu = 0.0;
};

inline void code(const CodeArgs& a, std::ostream& out) {
  const auto c = read_container(a.dict);
  const auto kind = c.metadata.value("kind", std::string{});
  Matrixd D;
  Vectord b;
  if (kind == "checkpoint") {
    const auto ck = checkpoint_from_container(c);
    D = Matrixd::from(ck.params.D);
    b = Vectord::from(ck.params.b.span());
  } else if (kind == "ground_truth") {
    const auto t = ground_truth_from_container(c);
    D = Matrixd::from(t.H);
    b = Vectord::from(t.global_mean.span());
  } else {
    throw SchemaError("code: --dict must be a checkpoint or a ground-truth file");
  }
  CoderConfig cfg;
  cfg.max_iters = a.iters;
  cfg.tol = a.tol;
  cfg.mu = a.mu;
  switch (parse_prox_kind(a.op)) {
    case ProxKind::relu_soft: cfg.spec = ProxSpec::relu_soft(a.lambda); break;
    case ProxKind::jump_relu: cfg.spec = ProxSpec::jump_relu(a.theta); break;
    case ProxKind::topk: cfg.spec = ProxSpec::topk(a.k); break;
    case ProxKind::abs_topk: cfg.spec = ProxSpec::abs_topk(a.k); break;
  }
  if (cfg.spec.cardinality() && cfg.spec.k > D.cols()) throw SchemaError("code: --k exceeds the dictionary size");
  const auto store = store_read(a.in);
  if (store.dim() != D.rows()) throw SchemaError("code: activation dim != dictionary rows");
  Matrixf Z(store.rows(), D.cols());
  std::size_t converged = 0, iterations = 0;
  for (std::size_t i = 0; i < store.rows(); ++i) {
    const auto r = sparse_code(Vectord::from(store.X.row(i)), D, b, cfg);
    for (std::size_t j = 0; j < D.cols(); ++j) Z(i, j) = static_cast<float>(r.z[j]);
    converged += r.converged;
    iterations += r.iterations;
  }
  store_write(a.out, {std::move(Z), {{"source", "sparse_code"}, {"operator", variant_to_json(cfg.spec)},
                                     {"dict", std::filesystem::path(a.dict).filename().string()}}});
  out << "code: " << store.rows() << " rows, " << converged << " converged, mean iterations "
      << static_cast<double>(iterations) / static_cast<double>(store.rows()) << " -> " << a.out << "\n";
}

inline void inspect(const std::string& path, std::ostream& out) {
  const auto c = read_container(path);
  const auto kind = c.metadata.value("kind", std::string{});
  out << "file: " << path << "\n";
  if (kind == "checkpoint") {
    const auto ck = checkpoint_from_container(c);
    out << "kind: checkpoint\n"
        << "d: " << ck.params.d() << "\n"
        << "latents: " << ck.params.latents() << "\n"
        << "variant: " << ck.variant.describe() << "\n"
        << "step: " << ck.step << "\n"
        << "config_hash: " << hash_hex(ck.config_hash) << "\n"
        << "rng: " << RngState::algorithm << " seed=" << ck.rng.seed << " stream=" << ck.rng.stream
        << " counter=" << ck.rng.counter << "\n";
  } else if (kind == "ground_truth") {
    const auto t = ground_truth_from_container(c);
    out << "kind: ground_truth\n"
        << "d: " << t.H.rows() << "\n"
        << "P_true: " << t.H.cols() << "\n"
        << "n: " << t.codes.rows() << "\n"
        << "spec: " << describe(c.metadata.value("spec", nlohmann::json::object())) << "\n";
  } else {
    const auto s = from_container(c);
    out << "kind: activations\n"
        << "rows: " << s.rows() << "\n"
        << "dim: " << s.dim() << "\n";
    for (const auto& [key, value] : s.metadata.items()) out << key << ": " << describe(value) << "\n";
  }
}

}  // namespace detail

/// Runs one command line; output goes to `out`, diagnostics to `err`.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse autoencoder lab: planted data, training, evaluation, steering, sparse coding", "proxsae"};
  app.require_subcommand(1);

  detail::GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate planted-concept activations");
  g->add_option("--config", gen.config, "Run config (JSON)")->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "Activation store to write")->required();
  g->add_option("--truth", gen.truth, "Ground-truth file to write");
  g->add_option("--pairs-plus", gen.pairs_plus, "Contrast pairs, plus members");
  g->add_option("--pairs-minus", gen.pairs_minus, "Contrast pairs, minus members");
  g->add_option("--seed", gen.seed, "Overrides synth.seed");

  detail::TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train an SAE on an activation store");
  t->add_option("--config", tr.config, "Run config (JSON)")->check(CLI::ExistingFile);
  t->add_option("--data", tr.data, "Activation store")->required()->check(CLI::ExistingFile);
  t->add_option("--out", tr.out, "Checkpoint to write")->required();
  t->add_option("--report", tr.report, "Training records (JSON lines)");
  t->add_option("--seed", tr.seed, "Overrides train.seed");
  t->add_option("--threads", tr.threads, "Worker threads (PROXSAE_THREADS caps it)");
  t->add_option("--steps", tr.steps, "Overrides train.steps");

  detail::EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--config", ev.config, "Run config the checkpoint was trained with")->check(CLI::ExistingFile);
  e->add_option("--data", ev.data, "Activation store")->required()->check(CLI::ExistingFile);
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  e->add_option("--truth", ev.truth, "Ground-truth file for recovery, concept and loss-recovered metrics")
      ->check(CLI::ExistingFile);
  e->add_option("--out", ev.out, "Report (JSON lines); stdout when omitted");
  e->add_flag("--force", ev.force, "Evaluate even if the config hash differs from the checkpoint's");

  detail::SteerArgs st;
  auto* s = app.add_subcommand("steer", "Apply an intervention, or extract a DiM concept (--mode dim)");
  s->add_option("--mode", st.mode, "add, ablate, clamp or dim")
      ->check(CLI::IsMember({"add", "ablate", "clamp", "dim"}));
  s->add_option("--in", st.in, "Activation store")->check(CLI::ExistingFile);
  s->add_option("--out", st.out, "Steered activation store");
  s->add_option("--alpha", st.alpha, "Strength for add and ablate");
  s->add_option("--concept-file", st.concept_file, "Concept vector (JSON); written by --mode dim");
  s->add_option("--checkpoint", st.checkpoint, "SAE checkpoint for clamp")->check(CLI::ExistingFile);
  s->add_option("--latent", st.latent, "Latent index for clamp");
  s->add_option("--clamp-value", st.clamp_value, "Value the latent is pinned to");
  s->add_flag("--patch", st.patch, "Clamp returns x + D(z_c - z) instead of the reconstruction");
  s->add_option("--pos", st.pos, "Positive samples for dim")->check(CLI::ExistingFile);
  s->add_option("--neg", st.neg, "Negative samples for dim")->check(CLI::ExistingFile);
  s->add_option("--layer", st.layer, "Layer tag stored with the concept");

  detail::CodeArgs co;
  auto* c = app.add_subcommand("code", "Iterative sparse coding against a fixed dictionary");
  c->add_option("--dict", co.dict, "Checkpoint (uses D, b) or ground truth (uses H, mean)")
      ->required()
      ->check(CLI::ExistingFile);
  c->add_option("--in", co.in, "Activation store")->required()->check(CLI::ExistingFile);
  c->add_option("--out", co.out, "Code store to write")->required();
  c->add_option("--operator", co.op, "relu_soft, jump_relu, topk or abs_topk");
  c->add_option("--k", co.k, "Cardinality for topk and abs_topk");
  c->add_option("--lambda", co.lambda, "l1 weight for relu_soft");
  c->add_option("--theta", co.theta, "Threshold for jump_relu");
  c->add_option("--iters", co.iters, "Iteration cap");
  c->add_option("--tol", co.tol, "Relative-change stopping tolerance");
  c->add_option("--mu", co.mu, "Step size; <= 0 picks 0.99 / sigma_max(D)^2");

  std::string inspect_path;
  auto* in = app.add_subcommand("inspect", "Print the header and metadata of a store, checkpoint or ground truth");
  in->add_option("file", inspect_path, "File to inspect")->required()->check(CLI::ExistingFile);

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "proxsae: usage error: " << ex.what() << "\n";
    if (auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front())
      err << "run 'proxsae " << sub->get_name() << " --help' for the flags\n";
    else
      err << "run 'proxsae --help' for the subcommands\n";
    return kExitUsage;
  }

  try {
    if (g->parsed()) detail::gen_data(gen, out);
    if (t->parsed()) detail::train(tr, out);
    if (e->parsed()) detail::eval(ev, out);
    if (s->parsed()) detail::steer(st, out);
    if (c->parsed()) detail::code(co, out);
    if (in->parsed()) detail::inspect(inspect_path, out);
  } catch (const SchemaError& ex) {
    err << "proxsae: error [schema]: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const Error& ex) {
    err << "proxsae: error [" << to_string(ex.kind()) << "]: " << ex.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& ex) {
    err << "proxsae: error: " << ex.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

inline int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args), std::cout, std::cerr);
}

}  // namespace proxsae::cli
