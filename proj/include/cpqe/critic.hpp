#pragma once

#include "cpqe/consistency.hpp"
#include "cpqe/nets.hpp"

namespace cpqe {

// Scalar action-value MLP over (stacked state | flattened action chunk).
template <typename S>
struct CriticNet {
  ParamStore<S> params;
  std::vector<int> w, b;
  int out_w = -1, out_b = -1;
  int in_dim = 0;

  static CriticNet build(int in_dim, const std::vector<int>& hidden, Rng& rng) {
    CriticNet c;
    c.in_dim = in_dim;
    int in = in_dim;
    for (size_t i = 0; i < hidden.size(); ++i) {
      const int out = hidden[i];
      c.w.push_back(c.params.add("l" + std::to_string(i) + ".w", out, in));
      c.b.push_back(c.params.add("l" + std::to_string(i) + ".b", out, 1));
      init_uniform(c.params[c.w.back()], in, rng);
      init_uniform(c.params[c.b.back()], in, rng);
      in = out;
    }
    c.out_w = c.params.add("out.w", 1, in);
    c.out_b = c.params.add("out.b", 1, 1);
    init_uniform(c.params[c.out_w], in, rng);
    init_uniform(c.params[c.out_b], in, rng);
    return c;
  }

  // input: (in_dim, batch) -> (1, batch)
  template <class Ctx>
  typename Ctx::V forward(Ctx& ctx, typename Ctx::V input) const {
    auto x = input;
    for (size_t i = 0; i < w.size(); ++i)
      x = ctx.mish(ctx.add_bias(ctx.matmul(ctx.p(params[w[i]]), x),
                                ctx.p(params[b[i]])));
    return ctx.add_bias(ctx.matmul(ctx.p(params[out_w]), x), ctx.p(params[out_b]));
  }

  Mat<S> forward_eval(const Mat<S>& input) const {
    EvalCtx<S> ctx;
    return forward(ctx, input);
  }
};

// M critics with per-member target networks, distinct initialization seeds.
template <typename S>
struct QEnsemble {
  std::vector<CriticNet<S>> members;
  std::vector<CriticNet<S>> targets;
  double beta = 1.0;
  double gamma = 0.99;
  double tau = 0.995;

  static QEnsemble build(int m, int in_dim, const std::vector<int>& hidden,
                         double beta, double gamma, double tau,
                         std::uint64_t seed) {
    if (m < 2) throw std::invalid_argument("QEnsemble: need at least 2 members");
    if (beta < 0.0) throw std::invalid_argument("QEnsemble: beta must be >= 0");
    QEnsemble e;
    e.beta = beta;
    e.gamma = gamma;
    e.tau = tau;
    for (int i = 0; i < m; ++i) {
      Rng r(derive_seed(seed, streams::kCriticInit, static_cast<std::uint64_t>(i)));
      e.members.push_back(CriticNet<S>::build(in_dim, hidden, r));
    }
    e.targets = e.members;
    return e;
  }

  int size() const { return static_cast<int>(members.size()); }

  void update_targets() {
    for (size_t m = 0; m < members.size(); ++m)
      ema_update(targets[m].params, members[m].params, tau);
  }
};

// Two critics plus two targets; the bootstrap uses the elementwise minimum.
template <typename S>
struct DoubleQ {
  CriticNet<S> q1, q2;
  CriticNet<S> t1, t2;
  double gamma = 0.99;
  double tau = 0.995;

  static DoubleQ build(int in_dim, const std::vector<int>& hidden, double gamma,
                       double tau, std::uint64_t seed) {
    DoubleQ d;
    d.gamma = gamma;
    d.tau = tau;
    Rng r1(derive_seed(seed, streams::kCriticInit, 0));
    Rng r2(derive_seed(seed, streams::kCriticInit, 1));
    d.q1 = CriticNet<S>::build(in_dim, hidden, r1);
    d.q2 = CriticNet<S>::build(in_dim, hidden, r2);
    d.t1 = d.q1;
    d.t2 = d.q2;
    return d;
  }

  void update_targets() {
    ema_update(t1.params, q1.params, tau);
    ema_update(t2.params, q2.params, tau);
  }
};

// (state | flattened chunk) assembly for critics; chunk is channel-major.
template <typename S, class Ctx>
typename Ctx::V critic_input(Ctx& ctx, typename Ctx::V states,
                             typename Ctx::V chunk, int horizon) {
  return ctx.vconcat(states, ctx.chunk_to_cols(chunk, horizon));
}

// y_m = r + bootstrap * Qbar_m(s', a'), each member with its OWN target.
// next_actions: (act_dim, b*horizon), already sampled and gradient-free.
template <typename S>
Mat<S> ensemble_targets(const QEnsemble<S>& ens, const ChunkBatchT<S>& batch,
                        const Mat<S>& next_actions, int horizon) {
  const int b = batch.batch();
  if (static_cast<int>(next_actions.cols()) != b * horizon)
    throw std::invalid_argument("ensemble_targets: batch size mismatch");
  EvalCtx<S> ctx;
  Mat<S> input = critic_input<S>(ctx, batch.next_states, next_actions, horizon);
  Mat<S> y(ens.size(), b);
  for (int m = 0; m < ens.size(); ++m) {
    Mat<S> q = ens.targets[static_cast<size_t>(m)].forward_eval(input);
    y.row(m) = batch.rewards.row(0) + batch.bootstrap.row(0).cwiseProduct(q.row(0));
  }
  return y;
}

// Mean over members and samples of (Q_m(s, a) - y_m)^2.
template <typename S>
typename Tape<S>::Var qe_loss(TapeCtx<S>& ctx, const QEnsemble<S>& ens,
                              const ChunkBatchT<S>& batch, const Mat<S>& y,
                              int horizon) {
  const int b = batch.batch();
  auto input = critic_input<S, TapeCtx<S>>(ctx, ctx.c(batch.states),
                                           ctx.c(batch.chunks), horizon);
  typename Tape<S>::Var total = -1;
  for (int m = 0; m < ens.size(); ++m) {
    auto q = ens.members[static_cast<size_t>(m)].forward(ctx, input);
    auto diff = ctx.tape.sub(q, ctx.c(y.row(m)));
    auto sq = ctx.tape.sum_all(ctx.tape.square(diff));
    total = (total < 0) ? sq : ctx.tape.add(total, sq);
  }
  return ctx.tape.scale(total, S(1) / static_cast<S>(ens.size() * b));
}

// y = r + bootstrap * min(Qbar_1, Qbar_2)(s', a').
template <typename S>
Mat<S> doubleq_target(const DoubleQ<S>& dq, const ChunkBatchT<S>& batch,
                      const Mat<S>& next_actions, int horizon) {
  const int b = batch.batch();
  if (static_cast<int>(next_actions.cols()) != b * horizon)
    throw std::invalid_argument("doubleq_target: batch size mismatch");
  EvalCtx<S> ctx;
  Mat<S> input = critic_input<S>(ctx, batch.next_states, next_actions, horizon);
  Mat<S> q1 = dq.t1.forward_eval(input);
  Mat<S> q2 = dq.t2.forward_eval(input);
  Mat<S> y(1, b);
  y.row(0) = batch.rewards.row(0) +
             batch.bootstrap.row(0).cwiseProduct(q1.row(0).cwiseMin(q2.row(0)));
  return y;
}

template <typename S>
typename Tape<S>::Var doubleq_loss(TapeCtx<S>& ctx, const DoubleQ<S>& dq,
                                   const ChunkBatchT<S>& batch, const Mat<S>& y,
                                   int horizon) {
  const int b = batch.batch();
  auto input = critic_input<S, TapeCtx<S>>(ctx, ctx.c(batch.states),
                                           ctx.c(batch.chunks), horizon);
  auto yv = ctx.c(y);
  auto d1 = ctx.tape.sub(dq.q1.forward(ctx, input), yv);
  auto d2 = ctx.tape.sub(dq.q2.forward(ctx, input), yv);
  auto total = ctx.tape.add(ctx.tape.sum_all(ctx.tape.square(d1)),
                            ctx.tape.sum_all(ctx.tape.square(d2)));
  return ctx.tape.scale(total, S(1) / static_cast<S>(2 * b));
}

// Q^LCB = mean_m Q_m - beta * population std_m Q_m, as a differentiable
// composite (gradients flow into the critic INPUT, e.g. generated actions).
template <typename S>
typename Tape<S>::Var lcb_var(TapeCtx<S>& ctx, const QEnsemble<S>& ens,
                              typename Tape<S>::Var input, double beta) {
  if (beta < 0.0) throw std::invalid_argument("lcb: beta must be >= 0");
  const int m = ens.size();
  typename Tape<S>::Var stacked = -1;
  for (int i = 0; i < m; ++i) {
    auto q = ens.members[static_cast<size_t>(i)].forward(ctx, input);
    stacked = (stacked < 0) ? q : ctx.tape.vconcat(stacked, q);
  }
  auto mean = ctx.tape.matmul(
      ctx.c(Mat<S>::Constant(1, m, S(1) / static_cast<S>(m))), stacked);
  auto centered =
      ctx.tape.sub(stacked, ctx.tape.matmul(ctx.c(Mat<S>::Ones(m, 1)), mean));
  auto var = ctx.tape.matmul(
      ctx.c(Mat<S>::Constant(1, m, S(1) / static_cast<S>(m))),
      ctx.tape.square(centered));
  auto sd = ctx.tape.sqrt_guard(var);
  return ctx.tape.sub(mean, ctx.tape.scale(sd, static_cast<S>(beta)));
}

// Scalar convenience for a single (state, action-chunk) pair.
template <typename S>
double lcb(const QEnsemble<S>& ens, const std::vector<double>& state,
           const Mat<S>& action_chunk, int horizon) {
  if (ens.beta < 0.0) throw std::invalid_argument("lcb: beta must be >= 0");
  Mat<S> st(static_cast<Eigen::Index>(state.size()), 1);
  for (size_t i = 0; i < state.size(); ++i)
    st(static_cast<Eigen::Index>(i), 0) = static_cast<S>(state[i]);
  EvalCtx<S> ctx;
  Mat<S> chunk = action_chunk;
  chunk.resize(action_chunk.rows(), action_chunk.cols());
  Mat<S> input = critic_input<S>(ctx, st, chunk, horizon);
  double mean = 0.0, m2 = 0.0;
  for (int i = 0; i < ens.size(); ++i) {
    const double q = static_cast<double>(
        ens.members[static_cast<size_t>(i)].forward_eval(input)(0, 0));
    mean += q;
    m2 += q * q;
  }
  const int m = ens.size();
  mean /= m;
  const double var = std::max(0.0, m2 / m - mean * mean);
  return mean - ens.beta * std::sqrt(var);
}

}  // namespace cpqe
