#pragma once

#include "cpqe/consistency.hpp"
#include "cpqe/nets.hpp"
#include "cpqe/schedule.hpp"

namespace cpqe {

// Multi-step baseline. The backbone acts as a denoiser D(a_k, k | s)
// predicting the clean action sequence; the score is always derived,
// never stored: s(a, k) = (D(a, k | s) - a) / k^2.
template <typename S>
struct DiffusionPolicy {
  PolicyNet<S> net;
  NoiseSchedule schedule;
  int sample_steps = 10;
};

template <typename S, class Ctx>
typename Ctx::V denoiser_forward(Ctx& ctx, const DiffusionPolicy<S>& pol,
                                 typename Ctx::V noisy,
                                 const std::vector<double>& ks,
                                 typename Ctx::V states) {
  auto emb = ctx.c(time_embed_batch<S>(ks, pol.net.spec.temb.dim,
                                       pol.net.spec.temb.max_period));
  auto cond = ctx.vconcat(emb, states);
  return pol.net.forward(ctx, noisy, cond, false);
}

// Denoising score matching with the level drawn uniformly from the schedule:
// mean over the batch of || D(a_0 + k z, k | s) - a_0 ||^2.
template <typename S>
typename Tape<S>::Var dsm_loss(TapeCtx<S>& ctx, const DiffusionPolicy<S>& pol,
                               const ChunkBatchT<S>& batch, Rng& rng) {
  const int b = batch.batch();
  if (b < 1) throw std::invalid_argument("dsm_loss: empty batch");
  const int h = pol.net.spec.horizon;
  const int a = pol.net.spec.act_dim;
  std::vector<double> ks(static_cast<size_t>(b));
  std::vector<S> kf(static_cast<size_t>(b));
  for (int s = 0; s < b; ++s) {
    const auto n = rng.uniform_int(static_cast<std::uint64_t>(pol.schedule.n_levels));
    ks[static_cast<size_t>(s)] = pol.schedule.levels[static_cast<size_t>(n)];
    kf[static_cast<size_t>(s)] = static_cast<S>(ks[static_cast<size_t>(s)]);
  }
  Mat<S> z(a, static_cast<Eigen::Index>(b) * h);
  for (Eigen::Index j = 0; j < z.cols(); ++j)
    for (Eigen::Index i = 0; i < z.rows(); ++i)
      z(i, j) = static_cast<S>(rng.normal());
  Mat<S> noisy = batch.chunks + kernels::colscale(z, kf, h);
  auto states_v = ctx.c(batch.states);
  auto d = denoiser_forward(ctx, pol, ctx.c(std::move(noisy)), ks, states_v);
  auto diff = ctx.tape.sub(d, ctx.c(batch.chunks));
  return mean_sq_norm(ctx, diff, b);
}

// Euler solve of da/dk = (a - D(a, k | s)) / k over a (t_steps + 1)-point
// Karras sub-schedule from k_max down to eps: exactly t_steps denoiser calls.
template <typename S>
Mat<S> pf_ode_sample_batch(const DiffusionPolicy<S>& pol, const Mat<S>& states,
                           int t_steps, Rng& rng) {
  if (t_steps < 1) throw std::invalid_argument("pf_ode_sample: t_steps must be >= 1");
  const int b = static_cast<int>(states.cols());
  const int h = pol.net.spec.horizon;
  const int ad = pol.net.spec.act_dim;
  const auto levels = karras_levels(pol.schedule.eps, pol.schedule.k_max,
                                    pol.schedule.rho, t_steps + 1);
  Mat<S> a(ad, static_cast<Eigen::Index>(b) * h);
  for (Eigen::Index j = 0; j < a.cols(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      a(i, j) = static_cast<S>(pol.schedule.k_max * rng.normal());
  EvalCtx<S> ctx;
  for (int n = t_steps; n >= 1; --n) {
    const double k_n = levels[static_cast<size_t>(n)];
    const double k_prev = levels[static_cast<size_t>(n) - 1];
    std::vector<double> ks(static_cast<size_t>(b), k_n);
    Mat<S> d = denoiser_forward(ctx, pol, a, ks, states);
    a += static_cast<S>((k_prev - k_n) / k_n) * (a - d);
  }
  return a;
}

template <typename S>
Mat<S> pf_ode_sample(const DiffusionPolicy<S>& pol,
                     const std::vector<double>& state, int t_steps, Rng& rng) {
  Mat<S> st(static_cast<Eigen::Index>(state.size()), 1);
  for (size_t i = 0; i < state.size(); ++i)
    st(static_cast<Eigen::Index>(i), 0) = static_cast<S>(state[i]);
  return pf_ode_sample_batch(pol, st, t_steps, rng);
}

// Implied score at (a, k): (D(a, k | s) - a) / k^2, for the oracle tests.
template <typename S>
Mat<S> implied_score(const DiffusionPolicy<S>& pol, const Mat<S>& noisy,
                     double k, const Mat<S>& states) {
  EvalCtx<S> ctx;
  const int b = static_cast<int>(states.cols());
  std::vector<double> ks(static_cast<size_t>(b), k);
  Mat<S> d = denoiser_forward(ctx, pol, noisy, ks, states);
  return (d - noisy) / static_cast<S>(k * k);
}

}  // namespace cpqe
