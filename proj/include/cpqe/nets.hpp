#pragma once

#include <atomic>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cpqe/rng.hpp"
#include "cpqe/tensor.hpp"

namespace cpqe {

// ---------------------------------------------------------------------------
// time embedding

struct TimeEmbedding {
  int dim = 16;
  double max_period = 10000.0;
};

// Sinusoidal embedding of a noise level: first half sines, second half
// cosines over log-spaced frequencies from 1 down to 1/max_period.
inline std::vector<double> time_embed(double k, int dim,
                                      double max_period = 10000.0) {
  if (dim <= 0 || dim % 2 != 0)
    throw std::invalid_argument("time_embed: dim must be a positive even number");
  if (k < 0.0) throw std::invalid_argument("time_embed: k must be >= 0");
  const int half = dim / 2;
  std::vector<double> out(static_cast<size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double f =
        (half == 1) ? 1.0
                    : std::exp(-std::log(max_period) * i / (half - 1));
    out[static_cast<size_t>(i)] = std::sin(k * f);
    out[static_cast<size_t>(half + i)] = std::cos(k * f);
  }
  return out;
}

template <typename S>
Mat<S> time_embed_batch(const std::vector<double>& ks, int dim,
                        double max_period = 10000.0) {
  Mat<S> out(dim, static_cast<Eigen::Index>(ks.size()));
  for (size_t s = 0; s < ks.size(); ++s) {
    const auto e = time_embed(ks[s], dim, max_period);
    for (int i = 0; i < dim; ++i)
      out(i, static_cast<Eigen::Index>(s)) = static_cast<S>(e[static_cast<size_t>(i)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// parameter containers

template <typename S>
struct ParamTensor {
  std::string name;
  Mat<S> value;
};

template <typename S>
struct ParamStore {
  std::vector<ParamTensor<S>> tensors;

  int add(const std::string& name, int rows, int cols) {
    tensors.push_back({name, Mat<S>::Zero(rows, cols)});
    return static_cast<int>(tensors.size()) - 1;
  }
  Mat<S>& operator[](int i) { return tensors[static_cast<size_t>(i)].value; }
  const Mat<S>& operator[](int i) const {
    return tensors[static_cast<size_t>(i)].value;
  }
  size_t count() const { return tensors.size(); }
  size_t total_params() const {
    size_t n = 0;
    for (const auto& t : tensors) n += static_cast<size_t>(t.value.size());
    return n;
  }
};

// target <- tau * target + (1 - tau) * online
template <typename S>
void ema_update(ParamStore<S>& target, const ParamStore<S>& online, double tau) {
  if (tau < 0.0 || tau > 1.0)
    throw std::invalid_argument("ema_update: tau must be in [0, 1]");
  if (target.count() != online.count())
    throw std::invalid_argument("ema_update: stores differ in tensor count");
  for (size_t i = 0; i < target.count(); ++i) {
    auto& t = target.tensors[i].value;
    const auto& o = online.tensors[i].value;
    if (t.rows() != o.rows() || t.cols() != o.cols())
      throw std::invalid_argument("ema_update: tensor shape mismatch");
    t = static_cast<S>(tau) * t + static_cast<S>(1.0 - tau) * o;
  }
}

template <typename S>
struct Adam {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long t = 0;
  std::vector<Mat<S>> m, v;

  explicit Adam(double lr_ = 1e-4) : lr(lr_) {}

  void step(ParamStore<S>& params, const std::vector<Mat<S>>& grads) {
    if (m.empty()) {
      m.resize(params.count());
      v.resize(params.count());
      for (size_t i = 0; i < params.count(); ++i) {
        m[i] = Mat<S>::Zero(params[static_cast<int>(i)].rows(),
                            params[static_cast<int>(i)].cols());
        v[i] = m[i];
      }
    }
    ++t;
    const S b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2);
    const S c1 = static_cast<S>(1.0 / (1.0 - std::pow(beta1, static_cast<double>(t))));
    const S c2 = static_cast<S>(1.0 / (1.0 - std::pow(beta2, static_cast<double>(t))));
    for (size_t i = 0; i < params.count(); ++i) {
      const Mat<S>& gr = grads[i];
      if (gr.size() == 0) continue;
      m[i] = b1 * m[i] + (S(1) - b1) * gr;
      v[i] = b2 * v[i] + (S(1) - b2) * gr.cwiseProduct(gr);
      params[static_cast<int>(i)].array() -=
          static_cast<S>(lr) * (m[i] * c1).array() /
          ((v[i] * c2).cwiseSqrt().array() + static_cast<S>(eps));
    }
  }
};

// ---------------------------------------------------------------------------
// contexts: one forward implementation serves training and inference

template <typename S>
struct TapeCtx {
  using V = int;
  Tape<S>& tape;
  bool train = true;
  std::unordered_map<const void*, int> param_vars;

  explicit TapeCtx(Tape<S>& t, bool train_ = true) : tape(t), train(train_) {}

  V p(const Mat<S>& m) {
    auto it = param_vars.find(m.data());
    if (it != param_vars.end()) return it->second;
    const int v = tape.leaf(m, train);
    param_vars.emplace(m.data(), v);
    return v;
  }
  V c(Mat<S> m) { return tape.leaf(std::move(m), false); }
  V matmul(V a, V b) { return tape.matmul(a, b); }
  V add(V a, V b) { return tape.add(a, b); }
  V add_bias(V x, V b) { return tape.add_bias(x, b); }
  V mish(V x) { return tape.mish(x); }
  V conv1d(V x, V w, V b, int h, int s) { return tape.conv1d(x, w, b, h, s); }
  V groupnorm(V x, V g, V b, int h, int gr) { return tape.groupnorm(x, g, b, h, gr); }
  V film(V x, V sc, V sh, int h) { return tape.film(x, sc, sh, h); }
  V vconcat(V a, V b) { return tape.vconcat(a, b); }
  V rows(V a, int r0, int n) { return tape.rows(a, r0, n); }
  V upsample2(V x, int h) { return tape.upsample2(x, h); }
  V chunk_to_cols(V x, int h) { return tape.chunk_to_cols(x, h); }
  V cols_to_chunk(V x, int h) { return tape.cols_to_chunk(x, h); }
  V colscale(V x, const std::vector<S>& c, int cps) {
    return tape.colscale(x, c, cps);
  }

  // gradient of the loss w.r.t. a parameter tensor (zeros when unused)
  Mat<S> grad(const Mat<S>& m) const {
    auto it = param_vars.find(m.data());
    if (it == param_vars.end()) return Mat<S>::Zero(m.rows(), m.cols());
    return tape.grad_of(it->second);
  }
  std::vector<Mat<S>> grads(const ParamStore<S>& ps) const {
    std::vector<Mat<S>> out(ps.count());
    for (size_t i = 0; i < ps.count(); ++i)
      out[i] = grad(ps[static_cast<int>(i)]);
    return out;
  }
};

template <typename S>
struct EvalCtx {
  using V = Mat<S>;

  const V& p(const Mat<S>& m) { return m; }
  V c(Mat<S> m) { return m; }
  V matmul(const V& a, const V& b) { return a * b; }
  V add(const V& a, const V& b) { return a + b; }
  V add_bias(const V& x, const V& b) { return x.colwise() + b.col(0); }
  V mish(const V& x) { return kernels::mish(x); }
  V conv1d(const V& x, const V& w, const V& b, int h, int s) {
    return kernels::conv1d(x, w, b, h, s);
  }
  V groupnorm(const V& x, const V& g, const V& b, int h, int gr) {
    return kernels::groupnorm(x, g, b, h, gr);
  }
  V film(const V& x, const V& sc, const V& sh, int h) {
    if (sc.rows() != x.rows() || sh.rows() != x.rows())
      throw std::invalid_argument("film: channel count mismatch");
    return kernels::film(x, sc, sh, h);
  }
  V vconcat(const V& a, const V& b) {
    V out(a.rows() + b.rows(), a.cols());
    out.topRows(a.rows()) = a;
    out.bottomRows(b.rows()) = b;
    return out;
  }
  V rows(const V& a, int r0, int n) { return a.middleRows(r0, n); }
  V upsample2(const V& x, int h) { return kernels::upsample2(x, h); }
  V chunk_to_cols(const V& x, int h) { return kernels::chunk_to_cols(x, h); }
  V cols_to_chunk(const V& x, int h) { return kernels::cols_to_chunk(x, h); }
  V colscale(const V& x, const std::vector<S>& c, int cps) {
    return kernels::colscale(x, c, cps);
  }
};

// ---------------------------------------------------------------------------
// backbones

enum class BackboneKind { kMlp, kUnet1d };

struct BackboneSpec {
  BackboneKind kind = BackboneKind::kUnet1d;
  std::vector<int> hidden = {512, 512, 512};  // mlp layer widths
  std::vector<int> channels = {32, 64};       // unet per-level channels
  int horizon = 8;
  int act_dim = 3;
  int obs_dim = 62;  // stacked observation width
  TimeEmbedding temb;

  int cond_dim() const { return temb.dim + obs_dim; }
  int n_downsamples() const {
    return static_cast<int>(channels.size()) - 1;
  }
  void validate() const {
    if (horizon < 1 || act_dim < 1 || obs_dim < 1)
      throw std::invalid_argument("BackboneSpec: bad dimensions");
    if (temb.dim % 2 != 0 || temb.dim <= 0)
      throw std::invalid_argument("BackboneSpec: time embedding dim must be even");
    if (kind == BackboneKind::kMlp) {
      if (hidden.empty()) throw std::invalid_argument("BackboneSpec: empty mlp");
    } else {
      if (channels.empty())
        throw std::invalid_argument("BackboneSpec: empty unet channels");
      const int div = 1 << n_downsamples();
      if (horizon % div != 0)
        throw std::invalid_argument(
            "BackboneSpec: horizon must be divisible by 2^(down levels)");
    }
  }
};

inline int groups_for(int channels) {
  for (int g : {8, 4, 2, 1})
    if (channels % g == 0) return g;
  return 1;
}

template <typename S>
void init_uniform(Mat<S>& w, int fan_in, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Eigen::Index j = 0; j < w.cols(); ++j)
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      w(i, j) = static_cast<S>(rng.uniform(-s, s));
}

struct ResBlockIdx {
  int cin = 0, cout = 0;
  int conv1_w = -1, conv1_b = -1, gn1_g = -1, gn1_b = -1;
  int film_w = -1, film_b = -1;
  int conv2_w = -1, conv2_b = -1, gn2_g = -1, gn2_b = -1;
  int proj_w = -1, proj_b = -1;  // 1x1 projection when cin != cout
};

struct UnetIdx {
  std::vector<ResBlockIdx> down;   // two per level
  std::vector<int> down_conv_w, down_conv_b;  // stride-2, per non-final level
  ResBlockIdx mid1, mid2;
  std::vector<ResBlockIdx> up;     // two per up level
  std::vector<int> up_conv_w, up_conv_b;      // post-upsample conv
  int final_w = -1, final_b = -1, final_gn_g = -1, final_gn_b = -1;
  int out_w = -1, out_b = -1;      // zero-initialized 1x1
};

struct MlpIdx {
  std::vector<int> w, b;
  int out_w = -1, out_b = -1;  // zero-initialized
};

namespace detail {

template <typename S>
ResBlockIdx make_resblock(ParamStore<S>& ps, const std::string& prefix, int cin,
                          int cout, int cond_dim, Rng& rng) {
  ResBlockIdx rb;
  rb.cin = cin;
  rb.cout = cout;
  rb.conv1_w = ps.add(prefix + ".conv1.w", cout, 3 * cin);
  rb.conv1_b = ps.add(prefix + ".conv1.b", cout, 1);
  rb.gn1_g = ps.add(prefix + ".gn1.g", cout, 1);
  rb.gn1_b = ps.add(prefix + ".gn1.b", cout, 1);
  rb.film_w = ps.add(prefix + ".film.w", 2 * cout, cond_dim);
  rb.film_b = ps.add(prefix + ".film.b", 2 * cout, 1);
  rb.conv2_w = ps.add(prefix + ".conv2.w", cout, 3 * cout);
  rb.conv2_b = ps.add(prefix + ".conv2.b", cout, 1);
  rb.gn2_g = ps.add(prefix + ".gn2.g", cout, 1);
  rb.gn2_b = ps.add(prefix + ".gn2.b", cout, 1);
  if (cin != cout) {
    rb.proj_w = ps.add(prefix + ".proj.w", cout, cin);
    rb.proj_b = ps.add(prefix + ".proj.b", cout, 1);
  }
  init_uniform(ps[rb.conv1_w], 3 * cin, rng);
  init_uniform(ps[rb.conv1_b], 3 * cin, rng);
  ps[rb.gn1_g].setOnes();
  init_uniform(ps[rb.film_w], cond_dim, rng);
  init_uniform(ps[rb.conv2_w], 3 * cout, rng);
  init_uniform(ps[rb.conv2_b], 3 * cout, rng);
  ps[rb.gn2_g].setOnes();
  if (rb.proj_w >= 0) {
    init_uniform(ps[rb.proj_w], cin, rng);
    init_uniform(ps[rb.proj_b], cin, rng);
  }
  return rb;
}

template <typename S, class Ctx>
typename Ctx::V resblock_forward(Ctx& ctx, const ParamStore<S>& ps,
                                 const ResBlockIdx& rb, typename Ctx::V x,
                                 typename Ctx::V cond, int h) {
  const int g = groups_for(rb.cout);
  auto y = ctx.conv1d(x, ctx.p(ps[rb.conv1_w]), ctx.p(ps[rb.conv1_b]), h, 1);
  y = ctx.groupnorm(y, ctx.p(ps[rb.gn1_g]), ctx.p(ps[rb.gn1_b]), h, g);
  y = ctx.mish(y);
  auto fp = ctx.add_bias(ctx.matmul(ctx.p(ps[rb.film_w]), cond),
                         ctx.p(ps[rb.film_b]));
  auto sc = ctx.rows(fp, 0, rb.cout);
  auto sh = ctx.rows(fp, rb.cout, rb.cout);
  y = ctx.film(y, sc, sh, h);
  y = ctx.conv1d(y, ctx.p(ps[rb.conv2_w]), ctx.p(ps[rb.conv2_b]), h, 1);
  y = ctx.groupnorm(y, ctx.p(ps[rb.gn2_g]), ctx.p(ps[rb.gn2_b]), h, g);
  y = ctx.mish(y);
  if (rb.proj_w >= 0) {
    auto r = ctx.add_bias(ctx.matmul(ctx.p(ps[rb.proj_w]), x),
                          ctx.p(ps[rb.proj_b]));
    return ctx.add(y, r);
  }
  return ctx.add(y, x);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// policy network: a conditional denoiser backbone plus its EMA target copy

template <typename S>
struct PolicyNet {
  BackboneSpec spec;
  ParamStore<S> params;
  ParamStore<S> ema;
  UnetIdx unet;
  MlpIdx mlp;
  mutable std::atomic<long long> forward_calls{0};

  PolicyNet() = default;
  PolicyNet(const PolicyNet& o)
      : spec(o.spec), params(o.params), ema(o.ema), unet(o.unet), mlp(o.mlp) {
    forward_calls.store(o.forward_calls.load());
  }
  PolicyNet& operator=(const PolicyNet& o) {
    spec = o.spec;
    params = o.params;
    ema = o.ema;
    unet = o.unet;
    mlp = o.mlp;
    forward_calls.store(o.forward_calls.load());
    return *this;
  }

  static PolicyNet build(const BackboneSpec& spec, Rng& rng) {
    spec.validate();
    PolicyNet net;
    net.spec = spec;
    if (spec.kind == BackboneKind::kMlp)
      net.build_mlp(rng);
    else
      net.build_unet(rng);
    net.ema = net.params;
    return net;
  }

  // noisy: (act_dim, batch*horizon) channel-major; cond: (cond_dim, batch).
  // Returns the denoised chunk in the same layout.
  template <class Ctx>
  typename Ctx::V forward(Ctx& ctx, typename Ctx::V noisy,
                          typename Ctx::V cond, bool use_ema = false) const {
    ++forward_calls;
    const ParamStore<S>& ps = use_ema ? ema : params;
    if (spec.kind == BackboneKind::kMlp) return forward_mlp(ctx, ps, noisy, cond);
    return forward_unet(ctx, ps, noisy, cond);
  }

  // Convenience single-sample inference path (no tape).
  Mat<S> forward_eval(const Mat<S>& noisy, const Mat<S>& cond,
                      bool use_ema = false) const {
    EvalCtx<S> ctx;
    return forward(ctx, noisy, cond, use_ema);
  }

 private:
  void build_mlp(Rng& rng) {
    const int in0 = spec.act_dim * spec.horizon + spec.cond_dim();
    int in = in0;
    for (size_t i = 0; i < spec.hidden.size(); ++i) {
      const int out = spec.hidden[i];
      mlp.w.push_back(params.add("mlp.l" + std::to_string(i) + ".w", out, in));
      mlp.b.push_back(params.add("mlp.l" + std::to_string(i) + ".b", out, 1));
      init_uniform(params[mlp.w.back()], in, rng);
      init_uniform(params[mlp.b.back()], in, rng);
      in = out;
    }
    mlp.out_w = params.add("mlp.out.w", spec.act_dim * spec.horizon, in);
    mlp.out_b = params.add("mlp.out.b", spec.act_dim * spec.horizon, 1);
    // zero-init final layer: the untrained model starts on the skip path
  }

  void build_unet(Rng& rng) {
    const int L = static_cast<int>(spec.channels.size());
    const int cd = spec.cond_dim();
    int cin = spec.act_dim;
    for (int l = 0; l < L; ++l) {
      const int cout = spec.channels[static_cast<size_t>(l)];
      unet.down.push_back(detail::make_resblock(params,
          "unet.down" + std::to_string(l) + ".res0", cin, cout, cd, rng));
      unet.down.push_back(detail::make_resblock(params,
          "unet.down" + std::to_string(l) + ".res1", cout, cout, cd, rng));
      if (l < L - 1) {
        unet.down_conv_w.push_back(
            params.add("unet.down" + std::to_string(l) + ".ds.w", cout, 3 * cout));
        unet.down_conv_b.push_back(
            params.add("unet.down" + std::to_string(l) + ".ds.b", cout, 1));
        init_uniform(params[unet.down_conv_w.back()], 3 * cout, rng);
        init_uniform(params[unet.down_conv_b.back()], 3 * cout, rng);
      }
      cin = cout;
    }
    const int cl = spec.channels.back();
    unet.mid1 = detail::make_resblock(params, "unet.mid.res0", cl, cl, cd, rng);
    unet.mid2 = detail::make_resblock(params, "unet.mid.res1", cl, cl, cd, rng);
    for (int l = L - 1; l >= 1; --l) {
      const int ci = spec.channels[static_cast<size_t>(l)];
      const int co = spec.channels[static_cast<size_t>(l - 1)];
      unet.up.push_back(detail::make_resblock(params,
          "unet.up" + std::to_string(l) + ".res0", 2 * ci, co, cd, rng));
      unet.up.push_back(detail::make_resblock(params,
          "unet.up" + std::to_string(l) + ".res1", co, co, cd, rng));
      unet.up_conv_w.push_back(
          params.add("unet.up" + std::to_string(l) + ".us.w", co, 3 * co));
      unet.up_conv_b.push_back(
          params.add("unet.up" + std::to_string(l) + ".us.b", co, 1));
      init_uniform(params[unet.up_conv_w.back()], 3 * co, rng);
      init_uniform(params[unet.up_conv_b.back()], 3 * co, rng);
    }
    const int c0 = spec.channels.front();
    unet.final_w = params.add("unet.final.w", c0, 3 * 2 * c0);
    unet.final_b = params.add("unet.final.b", c0, 1);
    unet.final_gn_g = params.add("unet.final.gn.g", c0, 1);
    unet.final_gn_b = params.add("unet.final.gn.b", c0, 1);
    init_uniform(params[unet.final_w], 3 * 2 * c0, rng);
    init_uniform(params[unet.final_b], 3 * 2 * c0, rng);
    params[unet.final_gn_g].setOnes();
    unet.out_w = params.add("unet.out.w", spec.act_dim, c0);
    unet.out_b = params.add("unet.out.b", spec.act_dim, 1);
    // zero-init final 1x1
  }

  template <class Ctx>
  typename Ctx::V forward_mlp(Ctx& ctx, const ParamStore<S>& ps,
                              typename Ctx::V noisy,
                              typename Ctx::V cond) const {
    auto x = ctx.vconcat(ctx.chunk_to_cols(noisy, spec.horizon), cond);
    for (size_t i = 0; i < mlp.w.size(); ++i)
      x = ctx.mish(ctx.add_bias(ctx.matmul(ctx.p(ps[mlp.w[i]]), x),
                                ctx.p(ps[mlp.b[i]])));
    x = ctx.add_bias(ctx.matmul(ctx.p(ps[mlp.out_w]), x), ctx.p(ps[mlp.out_b]));
    return ctx.cols_to_chunk(x, spec.horizon);
  }

  template <class Ctx>
  typename Ctx::V forward_unet(Ctx& ctx, const ParamStore<S>& ps,
                               typename Ctx::V noisy,
                               typename Ctx::V cond) const {
    const int L = static_cast<int>(spec.channels.size());
    int h = spec.horizon;
    auto x = noisy;
    std::vector<typename Ctx::V> skips;
    std::vector<int> skip_h;
    for (int l = 0; l < L; ++l) {
      x = detail::resblock_forward(ctx, ps, unet.down[static_cast<size_t>(2 * l)], x, cond, h);
      x = detail::resblock_forward(ctx, ps, unet.down[static_cast<size_t>(2 * l + 1)], x, cond, h);
      skips.push_back(x);
      skip_h.push_back(h);
      if (l < L - 1) {
        x = ctx.conv1d(x, ctx.p(ps[unet.down_conv_w[static_cast<size_t>(l)]]),
                       ctx.p(ps[unet.down_conv_b[static_cast<size_t>(l)]]), h, 2);
        h /= 2;
      }
    }
    x = detail::resblock_forward(ctx, ps, unet.mid1, x, cond, h);
    x = detail::resblock_forward(ctx, ps, unet.mid2, x, cond, h);
    for (int i = 0; i < L - 1; ++i) {
      x = ctx.vconcat(x, skips[static_cast<size_t>(L - 1 - i)]);
      x = detail::resblock_forward(ctx, ps, unet.up[static_cast<size_t>(2 * i)], x, cond, h);
      x = detail::resblock_forward(ctx, ps, unet.up[static_cast<size_t>(2 * i + 1)], x, cond, h);
      x = ctx.upsample2(x, h);
      h *= 2;
      x = ctx.conv1d(x, ctx.p(ps[unet.up_conv_w[static_cast<size_t>(i)]]),
                     ctx.p(ps[unet.up_conv_b[static_cast<size_t>(i)]]), h, 1);
    }
    x = ctx.vconcat(x, skips[0]);
    x = ctx.conv1d(x, ctx.p(ps[unet.final_w]), ctx.p(ps[unet.final_b]), h, 1);
    x = ctx.groupnorm(x, ctx.p(ps[unet.final_gn_g]), ctx.p(ps[unet.final_gn_b]),
                      h, groups_for(spec.channels.front()));
    x = ctx.mish(x);
    x = ctx.add_bias(ctx.matmul(ctx.p(ps[unet.out_w]), x), ctx.p(ps[unet.out_b]));
    return x;
  }
};

// ---------------------------------------------------------------------------
// checkpoints: text header (meta lines, then tensor names and shapes)
// followed by little-endian 32-bit float data, column-major.

template <typename S>
void save_checkpoint(const std::string& path,
                     const std::map<std::string, std::string>& meta,
                     const std::vector<const ParamStore<S>*>& stores,
                     const std::vector<std::string>& prefixes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  size_t n = 0;
  for (const auto* ps : stores) n += ps->count();
  f << "cpqe-ckpt v1\n";
  for (const auto& [k, v] : meta) f << "meta " << k << " " << v << "\n";
  f << "tensors " << n << "\n";
  for (size_t si = 0; si < stores.size(); ++si)
    for (const auto& t : stores[si]->tensors)
      f << prefixes[si] << t.name << " " << t.value.rows() << " "
        << t.value.cols() << "\n";
  for (const auto* ps : stores)
    for (const auto& t : ps->tensors) {
      Mat<float> fl = t.value.template cast<float>();
      f.write(reinterpret_cast<const char*>(fl.data()),
              static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(fl.size())));
    }
  if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

struct CheckpointData {
  std::map<std::string, std::string> meta;
  std::vector<std::string> names;
  std::vector<Mat<float>> tensors;

  const Mat<float>& find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return tensors[i];
    throw std::runtime_error("checkpoint tensor not found: " + name);
  }
};

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(f, line) || line != "cpqe-ckpt v1")
    throw std::runtime_error("bad checkpoint magic in " + path);
  CheckpointData ck;
  size_t n = 0;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "meta") {
      std::string k;
      ss >> k;
      std::string v;
      std::getline(ss, v);
      if (!v.empty() && v.front() == ' ') v.erase(0, 1);
      ck.meta[k] = v;
    } else if (tag == "tensors") {
      ss >> n;
      break;
    } else {
      throw std::runtime_error("bad checkpoint header line: " + line);
    }
  }
  std::vector<std::pair<long, long>> shapes;
  for (size_t i = 0; i < n; ++i) {
    if (!std::getline(f, line))
      throw std::runtime_error("truncated checkpoint header");
    std::istringstream ss(line);
    std::string name;
    long r, c;
    ss >> name >> r >> c;
    ck.names.push_back(name);
    shapes.emplace_back(r, c);
  }
  for (size_t i = 0; i < n; ++i) {
    Mat<float> m(shapes[i].first, shapes[i].second);
    f.read(reinterpret_cast<char*>(m.data()),
           static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(m.size())));
    if (!f) throw std::runtime_error("truncated checkpoint data in " + path);
    ck.tensors.push_back(std::move(m));
  }
  return ck;
}

// Restores tensors with the given prefix into the store (by matching names).
template <typename S>
void restore_store(ParamStore<S>& ps, const CheckpointData& ck,
                   const std::string& prefix) {
  for (auto& t : ps.tensors) {
    const Mat<float>& src = ck.find(prefix + t.name);
    if (src.rows() != t.value.rows() || src.cols() != t.value.cols())
      throw std::runtime_error("checkpoint shape mismatch for " + t.name);
    t.value = src.template cast<S>();
  }
}

}  // namespace cpqe
