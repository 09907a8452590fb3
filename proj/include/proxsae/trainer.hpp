// SPDX-License-Identifier: Apache-2.0
#pragma once

// Stochastic training of the SAE objective
//
//   E_x [ 1/2 |x - (D z + b)|^2 + lambda R(z) ],   z = prox(W^T x + b_e)
//
// with Adam. The penalty is lambda |z|_1 for ReLU, lambda |z|_0 for JumpReLU
// (through the threshold pseudo-derivative) and nothing for TopK / AbsTopK,
// whose constraint is always satisfied by the encoder output.
//
// Gradients:
//   * every variant: exact a.e. through the active set of z (z_j != 0);
//   * JumpReLU thresholds: rectangle kernel of width `bandwidth`,
//       d z_j / d theta_j   ~ -(theta_j / eps) 1{|pre_j - theta_j| <= eps/2}
//       d 1{z_j} / d theta_j ~ -(1 / eps)       1{|pre_j - theta_j| <= eps/2}
//     applied to log(theta) by the chain rule.
//
// A batch is split into a fixed number of chunks whose gradients are reduced
// in chunk order, so results do not depend on the worker count.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "proxsae/errors.hpp"
#include "proxsae/numeric.hpp"
#include "proxsae/prox.hpp"
#include "proxsae/rng.hpp"
#include "proxsae/sae.hpp"

namespace proxsae {

struct TrainConfig {
  std::size_t steps = 30000;
  std::size_t batch_size = 4096;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double bandwidth = 0.001;
  std::optional<double> loss_lambda;  // unset: encoder lambda for ReLU, 0 for JumpReLU
  std::uint64_t seed = 0;
  std::size_t eval_every = 1000;
  std::size_t threads = 1;
  bool deterministic = false;  // wall-clock fields are written as 0

  void validate() const {
    require(steps >= 1, "TrainConfig: steps must be positive");
    require(batch_size >= 1, "TrainConfig: batch_size must be positive");
    require(lr > 0.0, "TrainConfig: lr must be positive");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "TrainConfig: betas must lie in [0, 1)");
    require(adam_eps > 0.0, "TrainConfig: adam_eps must be positive");
    require(bandwidth > 0.0, "TrainConfig: bandwidth must be positive");
    require(!loss_lambda || *loss_lambda >= 0.0, "TrainConfig: loss_lambda must be nonnegative");
    require(eval_every >= 1, "TrainConfig: eval_every must be positive");
  }
};

inline double resolved_loss_lambda(const TrainConfig& cfg, const ProxSpec& variant) {
  if (cfg.loss_lambda) return *cfg.loss_lambda;
  return variant.kind == ProxKind::relu_soft ? variant.lambda : 0.0;
}

/// Worker count from PROXSAE_THREADS, capped by `requested` when nonzero.
inline std::size_t worker_threads(std::size_t requested) {
  std::size_t n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PROXSAE_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
  }
  return std::max<std::size_t>(n, 1);
}

/// Forward pass of one sample, kept for the backward pass.
template <class T>
struct ForwardState {
  std::vector<T> x, pre, z, xhat;
  std::vector<std::size_t> active;  // ascending indices with z != 0
  double recon = 0.0;    // 1/2 |x - xhat|^2
  double penalty = 0.0;  // lambda R(z) as trained
  double loss = 0.0;
};

struct LossOptions {
  double loss_lambda = 0.0;
  double bandwidth = 0.001;
};

/// Completes a forward pass from the accumulated W^T x (double, length P).
template <class T>
void forward_from_acc(std::span<const T> x, const SaeParams<T>& p, const ProxSpec& variant, const LossOptions& opt,
                      const std::vector<double>* thresholds, std::span<const double> acc, ForwardState<T>& s,
                      TopKStats* stats = nullptr, const Matrix<T>* D_t = nullptr) {
  const std::size_t d = p.d(), P = p.latents();
  s.x.assign(x.begin(), x.end());
  s.pre.resize(P);
  s.z.resize(P);
  s.xhat.resize(d);
  for (std::size_t j = 0; j < P; ++j) s.pre[j] = static_cast<T>(acc[j] + static_cast<double>(p.b_e[j]));
  apply_variant(std::span<const T>(s.pre), p, variant, std::span<T>(s.z), stats, thresholds, &s.active);
  if (D_t) {
    decode_support_into(std::span<const T>(s.z), std::span<const std::size_t>(s.active), *D_t, p.b,
                        std::span<T>(s.xhat));
  } else {
    decode_into(std::span<const T>(s.z), p, std::span<T>(s.xhat));
  }
  double sq = 0.0;
  for (std::size_t r = 0; r < d; ++r) {
    const double e = static_cast<double>(x[r]) - static_cast<double>(s.xhat[r]);
    sq += e * e;
  }
  s.recon = 0.5 * sq;
  s.penalty = 0.0;
  if (opt.loss_lambda > 0.0) {
    double l1 = 0.0;
    for (std::size_t j : s.active) l1 += std::abs(static_cast<double>(s.z[j]));
    if (variant.kind == ProxKind::relu_soft) s.penalty = opt.loss_lambda * l1;
    if (variant.kind == ProxKind::jump_relu) s.penalty = opt.loss_lambda * static_cast<double>(s.active.size());
  }
  s.loss = s.recon + s.penalty;
}

template <class T>
void forward_into(std::span<const T> x, const SaeParams<T>& p, const ProxSpec& variant, const LossOptions& opt,
                  const std::vector<double>* thresholds, std::vector<double>& acc, ForwardState<T>& s,
                  TopKStats* stats = nullptr) {
  require(x.size() == p.d(), "encode: x.len != d");
  acc.resize(p.latents());
  matvec_t_into(p.W, x, std::span<double>(acc));
  forward_from_acc(x, p, variant, opt, thresholds, std::span<const double>(acc), s, stats);
}

/// Per-sample loss with its cached forward state. Throws DivergenceError on a
/// non-finite value.
template <class T>
ForwardState<T> loss(const Vector<T>& x, const SaeParams<T>& p, const ProxSpec& variant,
                     const LossOptions& opt = {}) {
  require(x.size() == p.d(), "loss: x.len != d");
  ForwardState<T> s;
  std::vector<double> acc;
  const auto th = p.thresholds();
  forward_into(x.span(), p, variant, opt, &th, acc, s);
  if (!std::isfinite(s.loss)) throw DivergenceError("loss: non-finite value");
  return s;
}

/// Gradient accumulator, always in double. The matrix gradients are stored
/// latent-major (P x d): row j holds the gradient of column j of W or D.
struct SaeGrads {
  Matrixd W_t, D_t;
  Vectord b_e, b, log_theta;

  SaeGrads() = default;
  SaeGrads(std::size_t d, std::size_t P) : W_t(P, d), D_t(P, d), b_e(P), b(d), log_theta(P) {}

  std::array<std::span<double>, 5> parts() { return {W_t.flat(), D_t.flat(), b_e.span(), b.span(), log_theta.span()}; }
  std::array<std::span<const double>, 5> parts() const {
    return {W_t.flat(), D_t.flat(), b_e.span(), b.span(), log_theta.span()};
  }

  void zero() {
    for (auto s : parts()) std::fill(s.begin(), s.end(), 0.0);
  }
  void add(const SaeGrads& o) {
    const auto mine = parts();
    const auto theirs = o.parts();
    for (std::size_t i = 0; i < mine.size(); ++i)
      for (std::size_t j = 0; j < mine[i].size(); ++j) mine[i][j] += theirs[i][j];
  }
  void scale(double f) {
    for (auto s : parts())
      for (auto& v : s) v *= f;
  }
};

/// Accumulates weight * dloss/dparams for one cached sample into `g`.
/// `D_t`, when given, is the transposed decoder (P x d) and only speeds up
/// column access.
template <class T>
void backward(const ForwardState<T>& s, const SaeParams<T>& p, const ProxSpec& variant, const LossOptions& opt,
              SaeGrads& g, double weight = 1.0, const std::vector<double>* thresholds = nullptr,
              const Matrix<T>* D_t = nullptr) {
  const std::size_t d = p.d(), P = p.latents();
  thread_local std::vector<double> r;
  r.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    r[i] = static_cast<double>(s.xhat[i]) - static_cast<double>(s.x[i]);
    g.b[i] += weight * r[i];
  }
  auto column_dot = [&](std::size_t j) {
    double acc = 0.0;
    if (D_t) {
      const T* col = D_t->row(j).data();
      for (std::size_t i = 0; i < d; ++i) acc += static_cast<double>(col[i]) * r[i];
    } else {
      for (std::size_t i = 0; i < d; ++i) acc += static_cast<double>(p.D(i, j)) * r[i];
    }
    return acc;
  };
  for (std::size_t j : s.active) {
    const double zj = static_cast<double>(s.z[j]);
    double* gd = g.D_t.row(j).data();
    for (std::size_t i = 0; i < d; ++i) gd[i] += weight * r[i] * zj;
    double dz = column_dot(j);
    if (variant.kind == ProxKind::relu_soft) dz += opt.loss_lambda;  // z_j > 0 here
    g.b_e[j] += weight * dz;
    double* gw = g.W_t.row(j).data();
    for (std::size_t i = 0; i < d; ++i) gw[i] += weight * static_cast<double>(s.x[i]) * dz;
  }
  if (variant.kind == ProxKind::jump_relu) {
    std::vector<double> local;
    if (!thresholds) {
      local = p.thresholds();
      thresholds = &local;
    }
    const double eps = opt.bandwidth;
    for (std::size_t j = 0; j < P; ++j) {
      const double th = (*thresholds)[j];
      if (std::abs(static_cast<double>(s.pre[j]) - th) > 0.5 * eps) continue;
      const double dtheta = -(th / eps) * column_dot(j) - opt.loss_lambda / eps;
      g.log_theta[j] += weight * dtheta * th;
    }
  }
}

struct TrainRecord {
  std::size_t step = 0;
  double loss = 0.0;       // batch mean of the trained objective
  double train_mse = 0.0;  // batch mean of |x - xhat|^2 / d
  double nmse = 0.0;       // batch mean of |x - xhat|^2 / |x|^2
  double mean_l0 = 0.0;
  std::size_t dead_latents = 0;  // never nonzero since the previous record
  double code_min = 0.0;
  double code_max = 0.0;
  double topk_clip_rate = 0.0;  // clipped selections per sample (TopK only)
  double wall_ms = 0.0;

  bool operator==(const TrainRecord&) const = default;
};

struct TrainReport {
  std::vector<TrainRecord> records;
  std::vector<double> step_mse;  // train_mse of every step, for trend checks
};

template <class T>
struct TrainResult {
  SaeParams<T> params;
  TrainReport report;
  RngState rng;
};

/// Raised when the loss turns non-finite; carries the parameters of the last
/// finite step.
class TrainingDiverged : public DivergenceError {
 public:
  TrainingDiverged(const std::string& what, std::size_t step, SaeParams<double> last_good, TrainReport report)
      : DivergenceError(what, step), last_good(std::move(last_good)), report(std::move(report)) {}
  SaeParams<double> last_good;
  TrainReport report;
};

namespace detail {

struct AdamSlot {
  std::vector<double> m, v;
  explicit AdamSlot(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

template <class T>
void adam_update(std::span<T> param, std::span<const double> grad, AdamSlot& slot, const TrainConfig& cfg,
                 double bc1, double bc2) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
    slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = slot.m[i] / bc1;
    const double vhat = slot.v[i] / bc2;
    param[i] = static_cast<T>(static_cast<double>(param[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
  }
}

struct ChunkStats {
  double loss = 0.0, mse = 0.0, nmse = 0.0, l0 = 0.0;
  double code_min = std::numeric_limits<double>::infinity();
  double code_max = -std::numeric_limits<double>::infinity();
  TopKStats topk;
  std::vector<std::uint8_t> fired;
};

inline constexpr std::size_t kChunks = 4;

}  // namespace detail

/// Column means of a data matrix, accumulated in double.
template <class T>
Vector<T> column_mean(const Matrix<T>& data) {
  std::vector<double> acc(data.cols(), 0.0);
  for (std::size_t r = 0; r < data.rows(); ++r) {
    const auto row = data.row(r);
    for (std::size_t c = 0; c < data.cols(); ++c) acc[c] += static_cast<double>(row[c]);
  }
  for (auto& v : acc) v /= static_cast<double>(data.rows());
  return Vector<T>::from(std::span<const double>(acc));
}

/// Trains from `init` on the rows of `data`. Batches are drawn uniformly with
/// replacement from a stream derived from cfg.seed.
template <class T>
TrainResult<T> train_from(const Matrix<T>& data, SaeParams<T> params, const ProxSpec& variant,
                          const TrainConfig& cfg) {
  cfg.validate();
  params.validate();
  require(data.cols() == params.d(), "train: data dimension " + std::to_string(data.cols()) +
                                         " != model dimension " + std::to_string(params.d()));
  if (variant.cardinality()) require(variant.k <= params.latents(), "train: k exceeds the number of latents");

  const std::size_t d = params.d(), P = params.latents(), B = cfg.batch_size, n = data.rows();
  const LossOptions opt{resolved_loss_lambda(cfg, variant), cfg.bandwidth};
  const std::size_t chunks = std::min(detail::kChunks, B);
  const std::size_t workers = std::min(worker_threads(cfg.threads), chunks);
  const bool learn_theta = variant.kind == ProxKind::jump_relu;

  Rng batch_rng(cfg.seed, 0xBA7C4ull);
  std::vector<SaeGrads> chunk_grads(chunks, SaeGrads(d, P));
  std::vector<detail::ChunkStats> chunk_stats(chunks);
  std::vector<std::size_t> rows(B);
  detail::AdamSlot sW(d * P), sD(d * P), sbe(P), sb(d), sth(P);
  SaeGrads total(d, P);
  Matrix<T> D_t = transpose(params.D);

  TrainResult<T> result{params, {}, {}};
  auto& report = result.report;
  report.step_mse.reserve(cfg.steps);
  std::vector<std::uint8_t> window_fired(P, 0);
  double w_min = std::numeric_limits<double>::infinity(), w_max = -w_min;
  const auto t0 = std::chrono::steady_clock::now();
  SaeParams<T> last_good = params;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (auto& r : rows) r = static_cast<std::size_t>(batch_rng.uniform_index(n));
    const auto thresholds = params.thresholds();

    auto run_chunk = [&](std::size_t c) {
      const std::size_t lo = c * B / chunks, hi = (c + 1) * B / chunks;
      auto& g = chunk_grads[c];
      auto& st = chunk_stats[c];
      g.zero();
      st = detail::ChunkStats{};
      st.fired.assign(P, 0);
      ForwardState<T> s;
      constexpr std::size_t kBlock = 4;
      std::vector<double> acc(kBlock * P);
      for (std::size_t i = lo; i < hi; ++i) {
        const std::size_t slot = (i - lo) % kBlock;
        if (slot == 0) {
          if (i + kBlock <= hi) {
            std::array<const T*, kBlock> in;
            std::array<double*, kBlock> out;
            for (std::size_t q = 0; q < kBlock; ++q) {
              in[q] = data.row(rows[i + q]).data();
              out[q] = acc.data() + q * P;
            }
            matvec_t_block_into<kBlock>(params.W, in, out);
          } else {
            for (std::size_t q = 0; i + q < hi; ++q)
              matvec_t_into(params.W, data.row(rows[i + q]), std::span<double>(acc.data() + q * P, P));
          }
        }
        const auto x = data.row(rows[i]);
        forward_from_acc(x, params, variant, opt, &thresholds, std::span<const double>(acc.data() + slot * P, P), s,
                         variant.kind == ProxKind::topk ? &st.topk : nullptr, &D_t);
        backward(s, params, variant, opt, g, 1.0, &thresholds, &D_t);
        const double xsq = squared_norm(x);
        st.loss += s.loss;
        st.mse += 2.0 * s.recon / static_cast<double>(d);
        if (xsq > 0.0) st.nmse += 2.0 * s.recon / xsq;
        for (std::size_t j : s.active) {
          const double zj = static_cast<double>(s.z[j]);
          st.l0 += 1.0;
          st.fired[j] = 1;
          st.code_min = std::min(st.code_min, zj);
          st.code_max = std::max(st.code_max, zj);
        }
      }
    };

    if (workers <= 1) {
      for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          for (std::size_t c = w; c < chunks; c += workers) run_chunk(c);
        });
    }

    total.zero();
    detail::ChunkStats sum;
    sum.fired.assign(P, 0);
    for (std::size_t c = 0; c < chunks; ++c) {
      total.add(chunk_grads[c]);
      const auto& st = chunk_stats[c];
      sum.loss += st.loss;
      sum.mse += st.mse;
      sum.nmse += st.nmse;
      sum.l0 += st.l0;
      sum.code_min = std::min(sum.code_min, st.code_min);
      sum.code_max = std::max(sum.code_max, st.code_max);
      sum.topk.clipped += st.topk.clipped;
      for (std::size_t j = 0; j < P; ++j) window_fired[j] |= st.fired[j];
    }
    const double inv_b = 1.0 / static_cast<double>(B);
    total.scale(inv_b);
    const double batch_loss = sum.loss * inv_b;
    if (!std::isfinite(batch_loss)) {
      throw TrainingDiverged("train: non-finite loss at step " + std::to_string(step), step,
                             last_good.template cast<double>(), report);
    }
    last_good = params;
    report.step_mse.push_back(sum.mse * inv_b);
    w_min = std::min(w_min, sum.code_min);
    w_max = std::max(w_max, sum.code_max);

    if (step == 1 || step % cfg.eval_every == 0 || step == cfg.steps) {
      TrainRecord rec;
      rec.step = step;
      rec.loss = batch_loss;
      rec.train_mse = sum.mse * inv_b;
      rec.nmse = sum.nmse * inv_b;
      rec.mean_l0 = sum.l0 * inv_b;
      rec.dead_latents = static_cast<std::size_t>(std::count(window_fired.begin(), window_fired.end(), 0));
      rec.code_min = std::isfinite(w_min) ? w_min : 0.0;
      rec.code_max = std::isfinite(w_max) ? w_max : 0.0;
      rec.topk_clip_rate = static_cast<double>(sum.topk.clipped) * inv_b;
      rec.wall_ms = cfg.deterministic
                        ? 0.0
                        : std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      report.records.push_back(rec);
      std::fill(window_fired.begin(), window_fired.end(), 0);
      w_min = std::numeric_limits<double>::infinity();
      w_max = -w_min;
    }

    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    const Matrixd gW = transpose(total.W_t), gD = transpose(total.D_t);
    detail::adam_update(params.W.flat(), gW.flat(), sW, cfg, bc1, bc2);
    detail::adam_update(params.D.flat(), gD.flat(), sD, cfg, bc1, bc2);
    detail::adam_update(params.b_e.span(), std::as_const(total.b_e).span(), sbe, cfg, bc1, bc2);
    detail::adam_update(params.b.span(), std::as_const(total.b).span(), sb, cfg, bc1, bc2);
    if (learn_theta) detail::adam_update(params.log_theta.span(), std::as_const(total.log_theta).span(), sth, cfg, bc1, bc2);
    params.D = column_normalize(params.D);
    D_t = transpose(params.D);
  }
  result.params = std::move(params);
  result.rng = batch_rng.state();
  return result;
}

/// Initializes parameters (decoder bias at the data mean) and trains.
template <class T>
TrainResult<T> train(const Matrix<T>& data, std::size_t latents, const ProxSpec& variant, const TrainConfig& cfg) {
  Rng init_rng(cfg.seed, 0x1417ull);
  auto params = init_params<T>(data.cols(), latents, init_rng, variant, column_mean(data));
  return train_from(data, std::move(params), variant, cfg);
}

}  // namespace proxsae
