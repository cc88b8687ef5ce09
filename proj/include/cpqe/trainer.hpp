#pragma once

#include <optional>
#include <variant>

#include "cpqe/critic.hpp"
#include "cpqe/diffusion.hpp"
#include "cpqe/envkit.hpp"

namespace cpqe {

enum class Method { kDiff, kCpbc, kCpql, kCpqe };

inline std::string method_name(Method m, int sample_steps = 0) {
  switch (m) {
    case Method::kDiff: return "diff_" + std::to_string(sample_steps);
    case Method::kCpbc: return "cpbc";
    case Method::kCpql: return "cpql";
    case Method::kCpqe: return "cpqe";
  }
  return "?";
}

// Accepts cpbc / cpql / cpqe / diff_<t>.
inline std::pair<Method, int> parse_method(const std::string& s) {
  if (s == "cpbc") return {Method::kCpbc, 0};
  if (s == "cpql") return {Method::kCpql, 0};
  if (s == "cpqe") return {Method::kCpqe, 0};
  if (s.rfind("diff_", 0) == 0) {
    const int t = std::stoi(s.substr(5));
    if (t < 1) throw std::invalid_argument("diff_t: t must be >= 1");
    return {Method::kDiff, t};
  }
  throw std::invalid_argument("unknown method: " + s);
}

struct TrainConfig {
  Method method = Method::kCpqe;
  int sample_steps = 1;  // denoising steps for diff_t
  BackboneKind backbone = BackboneKind::kUnet1d;
  Task task = Task::kB;
  double eta = 0.5;          // BC/Q trade-off (cpql default 1.0, cpqe 0.5)
  double beta = 1.0;         // LCB pessimism
  double gamma = 0.99;
  double tau = 0.995;        // target retention
  int ensemble_size = 16;    // M
  int batch_size = 256;
  int epochs = 24;
  std::uint64_t seed = 1;
  double learning_rate = 1e-4;
  int n_p = 8, n_a = 4;
  int eval_every = 2;        // epochs between evaluations (0 = never)
  int eval_episodes = 30;
  bool critic_updates = true;

  // schedule
  double sched_eps = 0.002, sched_k_max = 80.0, sched_rho = 7.0;
  int sched_n = 40;
  double sigma_data = 0.5;

  // networks
  std::vector<int> mlp_hidden = {512, 512, 512};
  std::vector<int> unet_channels = {32, 64};
  int time_dim = 16;
  std::vector<int> critic_hidden = {256, 256, 256};

  void validate() const {
    if (eta < 0.0) throw std::invalid_argument("TrainConfig: eta must be >= 0");
    if (beta < 0.0) throw std::invalid_argument("TrainConfig: beta must be >= 0");
    if (method == Method::kCpqe && ensemble_size < 2)
      throw std::invalid_argument("TrainConfig: cpqe requires M >= 2");
    if (method == Method::kDiff && sample_steps < 1)
      throw std::invalid_argument("TrainConfig: diff needs sample_steps >= 1");
    if (batch_size < 1 || epochs < 1)
      throw std::invalid_argument("TrainConfig: bad batch size or epochs");
    if (tau < 0.0 || tau > 1.0)
      throw std::invalid_argument("TrainConfig: tau must be in [0, 1]");
    if (n_p < 1 || n_a < 1 || n_a > n_p)
      throw std::invalid_argument("TrainConfig: need 1 <= n_a <= n_p");
  }

  NoiseSchedule schedule() const {
    return NoiseSchedule(sched_eps, sched_k_max, sched_rho, sched_n, sigma_data);
  }
};

// alpha = eta / E|Q|, the mean floored at 1e-8; constant within the step.
template <typename S>
double compute_alpha(double eta, const Mat<S>& q_values) {
  if (eta < 0.0) throw std::invalid_argument("compute_alpha: eta must be >= 0");
  if (q_values.size() == 0)
    throw std::invalid_argument("compute_alpha: empty batch");
  const double mean_abs =
      q_values.template cast<double>().cwiseAbs().mean();
  return eta / std::max(mean_abs, 1e-8);
}

// Ensemble LCB over a batch without a tape (for alpha and diagnostics).
template <typename S>
Mat<S> lcb_eval(const QEnsemble<S>& ens, const Mat<S>& input) {
  const int b = static_cast<int>(input.cols());
  const int m = ens.size();
  Mat<S> q(m, b);
  for (int i = 0; i < m; ++i)
    q.row(i) = ens.members[static_cast<size_t>(i)].forward_eval(input).row(0);
  Mat<S> out(1, b);
  for (int j = 0; j < b; ++j) {
    const double mean = q.col(j).template cast<double>().mean();
    double var = 0.0;
    for (int i = 0; i < m; ++i) {
      const double d = static_cast<double>(q(i, j)) - mean;
      var += d * d;
    }
    var /= m;
    out(0, j) = static_cast<S>(mean - ens.beta * std::sqrt(var));
  }
  return out;
}

struct CriticRef {
  enum class Kind { kNone, kEnsemble, kDoubleQ } kind = Kind::kNone;
  const void* ptr = nullptr;

  CriticRef() = default;
  template <typename S>
  static CriticRef ensemble(const QEnsemble<S>& e) {
    CriticRef r;
    r.kind = Kind::kEnsemble;
    r.ptr = &e;
    return r;
  }
  template <typename S>
  static CriticRef double_q(const DoubleQ<S>& d) {
    CriticRef r;
    r.kind = Kind::kDoubleQ;
    r.ptr = &d;
    return r;
  }
  template <typename S>
  const QEnsemble<S>& as_ensemble() const {
    return *static_cast<const QEnsemble<S>*>(ptr);
  }
  template <typename S>
  const DoubleQ<S>& as_double_q() const {
    return *static_cast<const DoubleQ<S>*>(ptr);
  }
};

// L_consistency - alpha * E[Q(s, f(a_K, K | s))], with gradients flowing
// through the one-step generation into Q. CPQE scores with the LCB, CPQL
// with the first critic of the double-Q pair; with no critic (or eta = 0)
// this reduces to the consistency loss exactly.
template <typename S>
typename Tape<S>::Var policy_loss_var(TapeCtx<S>& ctx,
                                      const ConsistencyPolicy<S>& pol,
                                      const CriticRef& critic,
                                      const ChunkBatchT<S>& batch, double eta,
                                      Rng& rng) {
  auto cons = consistency_loss(ctx, pol, batch, rng);
  if (critic.kind == CriticRef::Kind::kNone || eta == 0.0) return cons;
  if (critic.kind == CriticRef::Kind::kEnsemble &&
      critic.as_ensemble<S>().size() < 2)
    throw std::invalid_argument("policy_loss: cpqe requires M >= 2");

  const int b = batch.batch();
  const int h = pol.net.spec.horizon;
  const int a = pol.net.spec.act_dim;

  // alpha from the current critic on dataset (s, a) pairs, gradient-stopped
  EvalCtx<S> ec;
  Mat<S> data_input = critic_input<S>(ec, batch.states, batch.chunks, h);
  Mat<S> q_data;
  if (critic.kind == CriticRef::Kind::kEnsemble)
    q_data = lcb_eval(critic.as_ensemble<S>(), data_input);
  else
    q_data = critic.as_double_q<S>().q1.forward_eval(data_input);
  const double alpha = compute_alpha(eta, q_data);

  // fresh one-step generation, gradients flow through f into Q
  const double kmax = pol.schedule.k_max;
  Mat<S> noisy(a, static_cast<Eigen::Index>(b) * h);
  for (Eigen::Index j = 0; j < noisy.cols(); ++j)
    for (Eigen::Index i = 0; i < noisy.rows(); ++i)
      noisy(i, j) = static_cast<S>(kmax * rng.normal());
  std::vector<double> ks(static_cast<size_t>(b), kmax);
  auto states_v = ctx.c(batch.states);
  auto gen = consistency_forward(ctx, pol, ctx.c(std::move(noisy)), ks, states_v, false);
  auto input = critic_input<S, TapeCtx<S>>(ctx, states_v, gen, h);
  typename Tape<S>::Var qv;
  if (critic.kind == CriticRef::Kind::kEnsemble)
    qv = lcb_var(ctx, critic.as_ensemble<S>(), input,
                 critic.as_ensemble<S>().beta);
  else
    qv = critic.as_double_q<S>().q1.forward(ctx, input);
  auto q_mean = ctx.tape.scale(ctx.tape.sum_all(qv), S(1) / static_cast<S>(b));
  return ctx.tape.sub(cons, ctx.tape.scale(q_mean, static_cast<S>(alpha)));
}

// Scalar convenience used by tests and examples.
template <typename S>
S policy_loss(const ConsistencyPolicy<S>& pol, const CriticRef& critic,
              const ChunkBatchT<S>& batch, double eta, Rng& rng) {
  Tape<S> tape;
  TapeCtx<S> ctx(tape, false);
  return tape.val(policy_loss_var(ctx, pol, critic, batch, eta, rng))(0, 0);
}

// ---------------------------------------------------------------------------
// training loop

struct CurveRow {
  int epoch = 0;
  double policy_loss = 0.0;
  double critic_loss = 0.0;
  bool has_eval = false;
  double eval_return = 0.0;
  double eval_success = 0.0;
};

template <typename S>
struct TrainResult {
  TrainConfig config;
  std::variant<ConsistencyPolicy<S>, DiffusionPolicy<S>> policy;
  std::optional<QEnsemble<S>> ensemble;
  std::optional<DoubleQ<S>> dq;
  std::vector<CurveRow> curve;

  bool is_diffusion() const {
    return std::holds_alternative<DiffusionPolicy<S>>(policy);
  }
  const PolicyNet<S>& net() const {
    return is_diffusion() ? std::get<DiffusionPolicy<S>>(policy).net
                          : std::get<ConsistencyPolicy<S>>(policy).net;
  }
};

// Chunk sampler for closed-loop execution / benchmarking. Consistency
// variants clamp at sampling time; the diffusion sampler output is executed
// through the environment's own clamp.
template <typename S>
ChunkSamplerFn make_chunk_sampler(const TrainResult<S>& tr) {
  const int h = tr.net().spec.horizon;
  if (tr.is_diffusion()) {
    const DiffusionPolicy<S>* dp = &std::get<DiffusionPolicy<S>>(tr.policy);
    return [dp, h](const std::vector<double>& state, Rng& rng) {
      Mat<S> out = pf_ode_sample(*dp, state, dp->sample_steps, rng);
      Eigen::MatrixXd chunk(out.rows(), h);
      for (int t = 0; t < h; ++t)
        chunk.col(t) = out.col(t).template cast<double>();
      return chunk;
    };
  }
  const ConsistencyPolicy<S>* cp = &std::get<ConsistencyPolicy<S>>(tr.policy);
  return [cp, h](const std::vector<double>& state, Rng& rng) {
    Mat<S> out = one_step_sample(*cp, state, rng);
    Eigen::MatrixXd chunk(out.rows(), h);
    for (int t = 0; t < h; ++t)
      chunk.col(t) = out.col(t).template cast<double>();
    return chunk;
  };
}

template <typename S>
ChunkBatchT<S> gather_batch(const ChunkDataset& ds,
                            const std::vector<long>& idx) {
  const int b = static_cast<int>(idx.size());
  const int sd = 2 * ds.obs_dim;
  const int h = ds.n_p;
  const int a = ds.act_dim;
  ChunkBatchT<S> out;
  out.states.resize(sd, b);
  out.next_states.resize(sd, b);
  out.rewards.resize(1, b);
  out.bootstrap.resize(1, b);
  Mat<S> flat(static_cast<Eigen::Index>(h) * a, b);
  for (int j = 0; j < b; ++j) {
    const long c = idx[static_cast<size_t>(j)];
    out.states.col(j) = ds.states.col(c).cast<S>();
    out.next_states.col(j) = ds.next_states.col(c).cast<S>();
    flat.col(j) = ds.chunks.col(c).cast<S>();
    out.rewards(0, j) = static_cast<S>(ds.reward_agg(c));
    out.bootstrap(0, j) = static_cast<S>(ds.bootstrap(c));
  }
  out.chunks = kernels::cols_to_chunk(flat, h);
  return out;
}

template <typename S>
TrainResult<S> train(const TrainConfig& cfg, const ChunkDataset& ds) {
  cfg.validate();
  if (ds.n < 1) throw std::invalid_argument("train: empty dataset");
  if (cfg.n_p != ds.n_p || cfg.n_a != ds.n_a)
    throw std::invalid_argument("train: config chunk lengths do not match dataset");
  if (std::abs(cfg.gamma - ds.gamma) > 1e-9)
    throw std::invalid_argument("train: config gamma does not match dataset");
  if (cfg.task != ds.task)
    throw std::invalid_argument("train: config task does not match dataset");

  BackboneSpec spec;
  spec.kind = cfg.backbone;
  spec.hidden = cfg.mlp_hidden;
  spec.channels = cfg.unet_channels;
  spec.horizon = ds.n_p;
  spec.act_dim = ds.act_dim;
  spec.obs_dim = 2 * ds.obs_dim;
  spec.temb.dim = cfg.time_dim;
  spec.validate();

  Rng policy_init(derive_seed(cfg.seed, streams::kPolicyInit));
  Rng batch_rng(derive_seed(cfg.seed, streams::kBatch));
  Rng noise_rng(derive_seed(cfg.seed, streams::kNoise));
  Rng critic_rng(derive_seed(cfg.seed, streams::kCritic));

  TrainResult<S> tr;
  tr.config = cfg;
  PolicyNet<S> net = PolicyNet<S>::build(spec, policy_init);
  NoiseSchedule sched = cfg.schedule();
  const bool diffusion = cfg.method == Method::kDiff;
  if (diffusion)
    tr.policy = DiffusionPolicy<S>{std::move(net), sched, cfg.sample_steps};
  else
    tr.policy = ConsistencyPolicy<S>{std::move(net), sched};

  const int critic_in = 2 * ds.obs_dim + ds.n_p * ds.act_dim;
  if (cfg.method == Method::kCpqe)
    tr.ensemble = QEnsemble<S>::build(cfg.ensemble_size, critic_in,
                                      cfg.critic_hidden, cfg.beta, cfg.gamma,
                                      cfg.tau, cfg.seed);
  else if (cfg.method == Method::kCpql)
    tr.dq = DoubleQ<S>::build(critic_in, cfg.critic_hidden, cfg.gamma, cfg.tau,
                              cfg.seed);

  Adam<S> policy_opt(cfg.learning_rate);
  std::vector<Adam<S>> critic_opts;
  if (tr.ensemble)
    critic_opts.assign(static_cast<size_t>(tr.ensemble->size()),
                       Adam<S>(cfg.learning_rate));
  else if (tr.dq)
    critic_opts.assign(2, Adam<S>(cfg.learning_rate));

  const long steps_per_epoch = std::max<long>(1, ds.n / cfg.batch_size);
  std::vector<long> idx(static_cast<size_t>(cfg.batch_size));

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double ep_policy_loss = 0.0, ep_critic_loss = 0.0;
    for (long step = 0; step < steps_per_epoch; ++step) {
      for (auto& i : idx)
        i = static_cast<long>(batch_rng.uniform_int(static_cast<std::uint64_t>(ds.n)));
      ChunkBatchT<S> batch = gather_batch<S>(ds, idx);

      // critic update (Bellman targets from the one-step policy at s')
      if ((tr.ensemble || tr.dq) && cfg.critic_updates) {
        const auto& cp = std::get<ConsistencyPolicy<S>>(tr.policy);
        Mat<S> next_a = one_step_sample_batch(cp, batch.next_states, critic_rng);
        if (tr.ensemble) {
          Mat<S> y = ensemble_targets(*tr.ensemble, batch, next_a, ds.n_p);
          Tape<S> tape;
          TapeCtx<S> ctx(tape);
          auto loss = qe_loss(ctx, *tr.ensemble, batch, y, ds.n_p);
          tape.backward(loss);
          ep_critic_loss += static_cast<double>(tape.val(loss)(0, 0));
          for (int m = 0; m < tr.ensemble->size(); ++m)
            critic_opts[static_cast<size_t>(m)].step(
                tr.ensemble->members[static_cast<size_t>(m)].params,
                ctx.grads(tr.ensemble->members[static_cast<size_t>(m)].params));
        } else {
          Mat<S> y = doubleq_target(*tr.dq, batch, next_a, ds.n_p);
          Tape<S> tape;
          TapeCtx<S> ctx(tape);
          auto loss = doubleq_loss(ctx, *tr.dq, batch, y, ds.n_p);
          tape.backward(loss);
          ep_critic_loss += static_cast<double>(tape.val(loss)(0, 0));
          critic_opts[0].step(tr.dq->q1.params, ctx.grads(tr.dq->q1.params));
          critic_opts[1].step(tr.dq->q2.params, ctx.grads(tr.dq->q2.params));
        }
      }

      // policy update
      {
        Tape<S> tape;
        TapeCtx<S> ctx(tape);
        typename Tape<S>::Var loss;
        if (diffusion) {
          auto& dp = std::get<DiffusionPolicy<S>>(tr.policy);
          loss = dsm_loss(ctx, dp, batch, noise_rng);
        } else {
          auto& cp = std::get<ConsistencyPolicy<S>>(tr.policy);
          CriticRef critic;
          if (tr.ensemble && cfg.critic_updates)
            critic = CriticRef::ensemble(*tr.ensemble);
          else if (tr.dq && cfg.critic_updates)
            critic = CriticRef::double_q(*tr.dq);
          loss = policy_loss_var(ctx, cp, critic, batch, cfg.eta, noise_rng);
        }
        tape.backward(loss);
        ep_policy_loss += static_cast<double>(tape.val(loss)(0, 0));
        PolicyNet<S>& n = diffusion
                              ? std::get<DiffusionPolicy<S>>(tr.policy).net
                              : std::get<ConsistencyPolicy<S>>(tr.policy).net;
        policy_opt.step(n.params, ctx.grads(n.params));
      }

      // target updates
      if (tr.ensemble && cfg.critic_updates) tr.ensemble->update_targets();
      if (tr.dq && cfg.critic_updates) tr.dq->update_targets();
      if (!diffusion) {
        PolicyNet<S>& n = std::get<ConsistencyPolicy<S>>(tr.policy).net;
        ema_update(n.ema, n.params, cfg.tau);
      }
    }

    CurveRow row;
    row.epoch = epoch;
    row.policy_loss = ep_policy_loss / static_cast<double>(steps_per_epoch);
    row.critic_loss = ep_critic_loss / static_cast<double>(steps_per_epoch);
    if (cfg.eval_every > 0 &&
        (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)) {
      const auto sampler = make_chunk_sampler(tr);
      const auto stats =
          closed_loop_execute(sampler, cfg.task, cfg.eval_episodes,
                              derive_seed(cfg.seed, streams::kEval,
                                          static_cast<std::uint64_t>(epoch)),
                              ds.n_p, ds.n_a);
      row.has_eval = true;
      row.eval_return = stats.mean_return();
      row.eval_success = stats.success_rate();
    }
    tr.curve.push_back(row);
  }
  return tr;
}

}  // namespace cpqe
