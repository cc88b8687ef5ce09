#pragma once

#include "cpqe/nets.hpp"
#include "cpqe/schedule.hpp"

namespace cpqe {

// Per-sample noise draws shared by the reconstruction and consistency terms:
// one level index n (0-based, pairing levels[n] and levels[n+1]) and one
// Gaussian z per sample.
template <typename S>
struct NoiseDraws {
  std::vector<int> n;  // in {0, ..., N-2}
  Mat<S> z;            // (act_dim, batch*horizon)
};

template <typename S>
NoiseDraws<S> draw_level_pairs(const NoiseSchedule& sched, int batch,
                               int act_dim, int horizon, Rng& rng) {
  if (batch < 1) throw std::invalid_argument("draw_level_pairs: empty batch");
  if (sched.n_levels < 2)
    throw std::invalid_argument("draw_level_pairs: need at least 2 levels");
  NoiseDraws<S> d;
  d.n.resize(static_cast<size_t>(batch));
  for (int s = 0; s < batch; ++s)
    d.n[static_cast<size_t>(s)] =
        static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(sched.n_levels - 1)));
  d.z.resize(act_dim, static_cast<Eigen::Index>(batch) * horizon);
  for (Eigen::Index j = 0; j < d.z.cols(); ++j)
    for (Eigen::Index i = 0; i < d.z.rows(); ++i)
      d.z(i, j) = static_cast<S>(rng.normal());
  return d;
}

// The single-step policy: f(a, k | s) = c_skip(k) a + c_out(k) F(a, k | s),
// which satisfies f(a, eps | s) = a identically.
template <typename S>
struct ConsistencyPolicy {
  PolicyNet<S> net;
  NoiseSchedule schedule;
};

// noisy: (act_dim, batch*horizon); ks: one noise level per sample;
// states: (obs_dim, batch) as a context value.
template <typename S, class Ctx>
typename Ctx::V consistency_forward(Ctx& ctx, const ConsistencyPolicy<S>& pol,
                                    typename Ctx::V noisy,
                                    const std::vector<double>& ks,
                                    typename Ctx::V states,
                                    bool use_ema = false) {
  const auto& sc = pol.schedule;
  for (double k : ks)
    if (k < sc.eps || k > sc.k_max)
      throw std::invalid_argument("consistency_forward: k outside [eps, k_max]");
  auto emb = ctx.c(time_embed_batch<S>(ks, pol.net.spec.temb.dim,
                                       pol.net.spec.temb.max_period));
  auto cond = ctx.vconcat(emb, states);
  auto f = pol.net.forward(ctx, noisy, cond, use_ema);
  std::vector<S> cs(ks.size()), co(ks.size());
  for (size_t i = 0; i < ks.size(); ++i) {
    cs[i] = static_cast<S>(sc.c_skip(ks[i]));
    co[i] = static_cast<S>(sc.c_out(ks[i]));
  }
  const int h = pol.net.spec.horizon;
  return ctx.add(ctx.colscale(noisy, cs, h), ctx.colscale(f, co, h));
}

// batch-mean of per-sample squared L2 norms, for (rows, batch*cps) layouts
template <typename S>
typename Tape<S>::Var mean_sq_norm(TapeCtx<S>& ctx, typename Tape<S>::Var diff,
                                   int batch) {
  auto s = ctx.tape.sum_all(ctx.tape.square(diff));
  return ctx.tape.scale(s, S(1) / static_cast<S>(batch));
}

template <typename S>
struct ChunkBatchT {
  Mat<S> states;       // (2*obs_dim, b)
  Mat<S> chunks;       // (act_dim, b*horizon), channel-major
  Mat<S> rewards;      // (1, b)
  Mat<S> next_states;  // (2*obs_dim, b)
  Mat<S> bootstrap;    // (1, b): gamma^{n_a}, or 0 when done
  int batch() const { return static_cast<int>(states.cols()); }
  int horizon(int act_dim) const {
    return static_cast<int>(chunks.cols() / states.cols());
  }
};

// L_CT: online net at the higher level k_{n+1}, EMA target (gradient-stopped)
// at the lower level k_n, both perturbed with the same z.
template <typename S>
typename Tape<S>::Var ct_loss_with(TapeCtx<S>& ctx,
                                   const ConsistencyPolicy<S>& pol,
                                   const ChunkBatchT<S>& batch,
                                   const NoiseDraws<S>& d) {
  const auto& sc = pol.schedule;
  const int b = batch.batch();
  const int h = pol.net.spec.horizon;
  std::vector<double> k_lo(static_cast<size_t>(b)), k_hi(static_cast<size_t>(b));
  std::vector<S> s_lo(static_cast<size_t>(b)), s_hi(static_cast<size_t>(b));
  for (int s = 0; s < b; ++s) {
    k_lo[static_cast<size_t>(s)] = sc.levels[static_cast<size_t>(d.n[static_cast<size_t>(s)])];
    k_hi[static_cast<size_t>(s)] = sc.levels[static_cast<size_t>(d.n[static_cast<size_t>(s)]) + 1];
    s_lo[static_cast<size_t>(s)] = static_cast<S>(k_lo[static_cast<size_t>(s)]);
    s_hi[static_cast<size_t>(s)] = static_cast<S>(k_hi[static_cast<size_t>(s)]);
  }
  Mat<S> a0 = batch.chunks;
  Mat<S> a_hi = a0 + kernels::colscale(d.z, s_hi, h);
  Mat<S> a_lo = a0 + kernels::colscale(d.z, s_lo, h);

  auto states_v = ctx.c(batch.states);
  auto online = consistency_forward(ctx, pol, ctx.c(a_hi), k_hi, states_v, false);

  EvalCtx<S> ec;
  Mat<S> target = consistency_forward(ec, pol, a_lo, k_lo, batch.states, true);

  auto diff = ctx.tape.sub(online, ctx.c(std::move(target)));
  return mean_sq_norm(ctx, diff, b);
}

// L_RC: online net at the lower level against the clean action.
template <typename S>
typename Tape<S>::Var rc_loss_with(TapeCtx<S>& ctx,
                                   const ConsistencyPolicy<S>& pol,
                                   const ChunkBatchT<S>& batch,
                                   const NoiseDraws<S>& d) {
  const auto& sc = pol.schedule;
  const int b = batch.batch();
  const int h = pol.net.spec.horizon;
  std::vector<double> k_lo(static_cast<size_t>(b));
  std::vector<S> s_lo(static_cast<size_t>(b));
  for (int s = 0; s < b; ++s) {
    k_lo[static_cast<size_t>(s)] = sc.levels[static_cast<size_t>(d.n[static_cast<size_t>(s)])];
    s_lo[static_cast<size_t>(s)] = static_cast<S>(k_lo[static_cast<size_t>(s)]);
  }
  Mat<S> a_lo = batch.chunks + kernels::colscale(d.z, s_lo, h);
  auto states_v = ctx.c(batch.states);
  auto f = consistency_forward(ctx, pol, ctx.c(std::move(a_lo)), k_lo, states_v, false);
  auto diff = ctx.tape.sub(f, ctx.c(batch.chunks));
  return mean_sq_norm(ctx, diff, b);
}

template <typename S>
typename Tape<S>::Var ct_loss(TapeCtx<S>& ctx, const ConsistencyPolicy<S>& pol,
                              const ChunkBatchT<S>& batch, Rng& rng) {
  const auto d = draw_level_pairs<S>(pol.schedule, batch.batch(),
                                     pol.net.spec.act_dim, pol.net.spec.horizon, rng);
  return ct_loss_with(ctx, pol, batch, d);
}

template <typename S>
typename Tape<S>::Var rc_loss(TapeCtx<S>& ctx, const ConsistencyPolicy<S>& pol,
                              const ChunkBatchT<S>& batch, Rng& rng) {
  const auto d = draw_level_pairs<S>(pol.schedule, batch.batch(),
                                     pol.net.spec.act_dim, pol.net.spec.horizon, rng);
  return rc_loss_with(ctx, pol, batch, d);
}

// L_RC + L_CT on the same (n, z) draws.
template <typename S>
typename Tape<S>::Var consistency_loss(TapeCtx<S>& ctx,
                                       const ConsistencyPolicy<S>& pol,
                                       const ChunkBatchT<S>& batch, Rng& rng) {
  const auto d = draw_level_pairs<S>(pol.schedule, batch.batch(),
                                     pol.net.spec.act_dim, pol.net.spec.horizon, rng);
  auto rc = rc_loss_with(ctx, pol, batch, d);
  auto ct = ct_loss_with(ctx, pol, batch, d);
  return ctx.tape.add(rc, ct);
}

// One forward pass: a = f(a_K, K | s), a_K ~ N(0, K^2 I); output clamped to
// the action box. Batched over columns of `states`.
template <typename S>
Mat<S> one_step_sample_batch(const ConsistencyPolicy<S>& pol,
                             const Mat<S>& states, Rng& rng) {
  const int b = static_cast<int>(states.cols());
  const int h = pol.net.spec.horizon;
  const int a = pol.net.spec.act_dim;
  const double kmax = pol.schedule.k_max;
  Mat<S> noisy(a, static_cast<Eigen::Index>(b) * h);
  for (Eigen::Index j = 0; j < noisy.cols(); ++j)
    for (Eigen::Index i = 0; i < noisy.rows(); ++i)
      noisy(i, j) = static_cast<S>(kmax * rng.normal());
  EvalCtx<S> ctx;
  std::vector<double> ks(static_cast<size_t>(b), kmax);
  Mat<S> out = consistency_forward(ctx, pol, noisy, ks, states, false);
  return out.cwiseMax(S(-1)).cwiseMin(S(1));
}

// Single-state convenience: returns the (act_dim, horizon) chunk.
template <typename S>
Mat<S> one_step_sample(const ConsistencyPolicy<S>& pol,
                       const std::vector<double>& state, Rng& rng) {
  Mat<S> st(static_cast<Eigen::Index>(state.size()), 1);
  for (size_t i = 0; i < state.size(); ++i)
    st(static_cast<Eigen::Index>(i), 0) = static_cast<S>(state[i]);
  return one_step_sample_batch(pol, st, rng);
}

}  // namespace cpqe
