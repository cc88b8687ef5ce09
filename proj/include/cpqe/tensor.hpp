#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace cpqe {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// Shared forward kernels. The tape ops and the no-grad inference path both
// call these, so a recorded forward and a plain forward are bit-identical.
namespace kernels {

template <typename S>
S softplus(S x) {
  if (x > S(20)) return x;
  if (x < S(-20)) return std::exp(x);
  return std::log1p(std::exp(x));
}

template <typename S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

// mish(x) = x * tanh(softplus(x)); tanh_sp output is reused by the backward.
template <typename S>
Mat<S> mish(const Mat<S>& x, Mat<S>* tanh_sp_out = nullptr) {
  Mat<S> t(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      t(i, j) = std::tanh(softplus(x(i, j)));
  Mat<S> y = x.cwiseProduct(t);
  if (tanh_sp_out) *tanh_sp_out = std::move(t);
  return y;
}

// Column shift within each sample's block of `cps` columns, zero fill.
// shifted(:, s*cps + t) = x(:, s*cps + t + d) when in range.
template <typename S>
Mat<S> colshift(const Mat<S>& x, int d, int cps) {
  const int b = static_cast<int>(x.cols()) / cps;
  Mat<S> out = Mat<S>::Zero(x.rows(), x.cols());
  if (d == 0) return x;
  for (int s = 0; s < b; ++s) {
    const int lo = std::max(0, -d);
    const int hi = std::min(cps, cps - d);
    if (hi > lo)
      out.block(0, s * cps + lo, x.rows(), hi - lo) =
          x.block(0, s * cps + lo + d, x.rows(), hi - lo);
  }
  return out;
}

// Gather for stride-2 conv: g_j(:, s*ho + t) = x(:, s*h + 2t + j - 1), zero pad.
template <typename S>
Mat<S> gather_stride2(const Mat<S>& x, int j, int h) {
  const int b = static_cast<int>(x.cols()) / h;
  const int ho = h / 2;
  Mat<S> out = Mat<S>::Zero(x.rows(), static_cast<Eigen::Index>(b) * ho);
  for (int s = 0; s < b; ++s)
    for (int t = 0; t < ho; ++t) {
      const int src = 2 * t + j - 1;
      if (src >= 0 && src < h) out.col(s * ho + t) = x.col(s * h + src);
    }
  return out;
}

// 1-D convolution, kernel 3, padding 1, stride 1 or 2.
// x: (c_in, b*h); w: (c_out, 3*c_in) laid out [w_-1 | w_0 | w_+1]; bias (c_out, 1).
template <typename S>
Mat<S> conv1d(const Mat<S>& x, const Mat<S>& w, const Mat<S>& bias, int h,
              int stride) {
  const int cin = static_cast<int>(x.rows());
  const int cout = static_cast<int>(w.rows());
  const int b = static_cast<int>(x.cols()) / h;
  const int ho = (stride == 1) ? h : h / 2;
  Mat<S> out = bias.replicate(1, static_cast<Eigen::Index>(b) * ho);
  for (int j = 0; j < 3; ++j) {
    const auto wj = w.block(0, j * cin, cout, cin);
    if (stride == 1)
      out.noalias() += wj * colshift(x, j - 1, h);
    else
      out.noalias() += wj * gather_stride2(x, j, h);
  }
  return out;
}

// Nearest-neighbour x2 upsampling along the within-sample axis.
template <typename S>
Mat<S> upsample2(const Mat<S>& x, int h) {
  const int b = static_cast<int>(x.cols()) / h;
  Mat<S> out(x.rows(), x.cols() * 2);
  for (int s = 0; s < b; ++s)
    for (int t = 0; t < h; ++t) {
      out.col(s * 2 * h + 2 * t) = x.col(s * h + t);
      out.col(s * 2 * h + 2 * t + 1) = x.col(s * h + t);
    }
  return out;
}

// Group normalization over (channels-in-group x h) per sample, then a
// per-channel affine. gamma/beta are (c, 1).
template <typename S>
Mat<S> groupnorm(const Mat<S>& x, const Mat<S>& gamma, const Mat<S>& beta,
                 int h, int groups, Mat<S>* xhat_out = nullptr,
                 std::vector<S>* istd_out = nullptr) {
  const int c = static_cast<int>(x.rows());
  const int b = static_cast<int>(x.cols()) / h;
  const int cg = c / groups;
  const S gn_eps = S(1e-5);
  Mat<S> xhat(x.rows(), x.cols());
  std::vector<S> istd(static_cast<size_t>(b) * groups);
  for (int s = 0; s < b; ++s)
    for (int g = 0; g < groups; ++g) {
      auto blk = x.block(g * cg, s * h, cg, h);
      const S mu = blk.mean();
      const S var = (blk.array() - mu).square().mean();
      const S is = S(1) / std::sqrt(var + gn_eps);
      istd[static_cast<size_t>(s) * groups + g] = is;
      xhat.block(g * cg, s * h, cg, h) = (blk.array() - mu) * is;
    }
  Mat<S> out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    out.col(j) = gamma.col(0).cwiseProduct(xhat.col(j)) + beta.col(0);
  if (istd_out) *istd_out = std::move(istd);
  if (xhat_out) *xhat_out = std::move(xhat);
  return out;
}

// out(:, s*h + t) = scale(:, s) .* x(:, s*h + t) + shift(:, s)
template <typename S>
Mat<S> film(const Mat<S>& x, const Mat<S>& scale, const Mat<S>& shift, int h) {
  const int b = static_cast<int>(x.cols()) / h;
  Mat<S> out(x.rows(), x.cols());
  for (int s = 0; s < b; ++s)
    for (int t = 0; t < h; ++t)
      out.col(s * h + t) =
          scale.col(s).cwiseProduct(x.col(s * h + t)) + shift.col(s);
  return out;
}

// Per-sample scalar scaling of each sample's block of cps columns.
template <typename S>
Mat<S> colscale(const Mat<S>& x, const std::vector<S>& coeff, int cps) {
  const int b = static_cast<int>(x.cols()) / cps;
  Mat<S> out(x.rows(), x.cols());
  for (int s = 0; s < b; ++s)
    out.block(0, s * cps, x.rows(), cps) =
        x.block(0, s * cps, x.rows(), cps) * coeff[static_cast<size_t>(s)];
  return out;
}

// (a, b*h) channel-major feature map -> (a*h, b) flat column per sample,
// time-major within the column: out(t*a + c, s) = in(c, s*h + t).
template <typename S>
Mat<S> chunk_to_cols(const Mat<S>& x, int h) {
  const int a = static_cast<int>(x.rows());
  const int b = static_cast<int>(x.cols()) / h;
  Mat<S> out(static_cast<Eigen::Index>(a) * h, b);
  for (int s = 0; s < b; ++s)
    for (int t = 0; t < h; ++t)
      out.block(t * a, s, a, 1) = x.col(s * h + t);
  return out;
}

template <typename S>
Mat<S> cols_to_chunk(const Mat<S>& x, int h) {
  const int a = static_cast<int>(x.rows()) / h;
  const int b = static_cast<int>(x.cols());
  Mat<S> out(a, static_cast<Eigen::Index>(b) * h);
  for (int s = 0; s < b; ++s)
    for (int t = 0; t < h; ++t)
      out.col(s * h + t) = x.block(t * a, s, a, 1);
  return out;
}

}  // namespace kernels

// Reverse-mode tape over Eigen matrices. Nodes are appended in evaluation
// order, which is already topological, so backward is a reverse sweep.
template <typename S>
class Tape {
 public:
  using M = Mat<S>;
  using Var = int;

  Tape() { nodes_.reserve(256); }

  Var leaf(M value, bool needs_grad) {
    return push(std::move(value), needs_grad, {});
  }

  const M& val(Var v) const { return nodes_[static_cast<size_t>(v)].value; }

  // Gradient of the last backward() target w.r.t. v (zeros if untouched).
  M grad_of(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(v)];
    if (n.grad.size() == 0) return M::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Var matmul(Var a, Var b) {
    if (val(a).cols() != val(b).rows())
      throw std::invalid_argument("matmul: inner dimensions differ");
    M out = val(a) * val(b);
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, Var o) {
      if (t.needs(a)) t.g(a).noalias() += t.g(o) * t.val(b).transpose();
      if (t.needs(b)) t.g(b).noalias() += t.val(a).transpose() * t.g(o);
    });
  }

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    M out = val(a) + val(b);
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, Var o) {
      if (t.needs(a)) t.g(a) += t.g(o);
      if (t.needs(b)) t.g(b) += t.g(o);
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    M out = val(a) - val(b);
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, Var o) {
      if (t.needs(a)) t.g(a) += t.g(o);
      if (t.needs(b)) t.g(b) -= t.g(o);
    });
  }

  // bias (r, 1) broadcast over columns
  Var add_bias(Var x, Var b) {
    if (val(b).cols() != 1 || val(b).rows() != val(x).rows())
      throw std::invalid_argument("add_bias: bias must be (rows, 1)");
    M out = val(x).colwise() + val(b).col(0);
    return push(std::move(out), needs(x) || needs(b), [x, b](Tape& t, Var o) {
      if (t.needs(x)) t.g(x) += t.g(o);
      if (t.needs(b)) t.g(b).col(0) += t.g(o).rowwise().sum();
    });
  }

  Var cmul(Var a, Var b) {
    check_same_shape(a, b, "cmul");
    M out = val(a).cwiseProduct(val(b));
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, Var o) {
      if (t.needs(a)) t.g(a) += t.g(o).cwiseProduct(t.val(b));
      if (t.needs(b)) t.g(b) += t.g(o).cwiseProduct(t.val(a));
    });
  }

  Var scale(Var a, S c) {
    M out = val(a) * c;
    return push(std::move(out), needs(a), [a, c](Tape& t, Var o) {
      if (t.needs(a)) t.g(a) += t.g(o) * c;
    });
  }

  Var square(Var a) {
    M out = val(a).cwiseProduct(val(a));
    return push(std::move(out), needs(a), [a](Tape& t, Var o) {
      if (t.needs(a)) t.g(a) += S(2) * t.g(o).cwiseProduct(t.val(a));
    });
  }

  Var mish(Var a) {
    M tanh_sp;
    M out = kernels::mish(val(a), &tanh_sp);
    auto cache = std::make_shared<M>(std::move(tanh_sp));
    return push(std::move(out), needs(a), [a, cache](Tape& t, Var o) {
      if (!t.needs(a)) return;
      const M& x = t.val(a);
      const M& ts = *cache;
      M& ga = t.g(a);
      const M& go = t.g(o);
      for (Eigen::Index j = 0; j < x.cols(); ++j)
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
          const S tv = ts(i, j);
          const S d = tv + x(i, j) * (S(1) - tv * tv) *
                               kernels::sigmoid(x(i, j));
          ga(i, j) += go(i, j) * d;
        }
    });
  }

  Var sum_all(Var a) {
    M out(1, 1);
    out(0, 0) = val(a).sum();
    return push(std::move(out), needs(a), [a](Tape& t, Var o) {
      if (t.needs(a)) t.g(a).array() += t.g(o)(0, 0);
    });
  }

  Var vconcat(Var a, Var b) {
    if (val(a).cols() != val(b).cols())
      throw std::invalid_argument("vconcat: column counts differ");
    M out(val(a).rows() + val(b).rows(), val(a).cols());
    out.topRows(val(a).rows()) = val(a);
    out.bottomRows(val(b).rows()) = val(b);
    const Eigen::Index ra = val(a).rows();
    return push(std::move(out), needs(a) || needs(b),
                [a, b, ra](Tape& t, Var o) {
                  if (t.needs(a)) t.g(a) += t.g(o).topRows(ra);
                  if (t.needs(b))
                    t.g(b) += t.g(o).bottomRows(t.val(b).rows());
                });
  }

  Var rows(Var a, int r0, int n) {
    M out = val(a).middleRows(r0, n);
    return push(std::move(out), needs(a), [a, r0, n](Tape& t, Var o) {
      if (t.needs(a)) t.g(a).middleRows(r0, n) += t.g(o);
    });
  }

  Var colscale(Var x, std::vector<S> coeff, int cps) {
    M out = kernels::colscale(val(x), coeff, cps);
    auto c = std::make_shared<std::vector<S>>(std::move(coeff));
    return push(std::move(out), needs(x), [x, c, cps](Tape& t, Var o) {
      if (t.needs(x)) t.g(x) += kernels::colscale(t.g(o), *c, cps);
    });
  }

  Var film(Var x, Var sc, Var sh, int h) {
    if (val(sc).rows() != val(x).rows() || val(sh).rows() != val(x).rows())
      throw std::invalid_argument("film: channel count mismatch");
    M out = kernels::film(val(x), val(sc), val(sh), h);
    return push(std::move(out), needs(x) || needs(sc) || needs(sh),
                [x, sc, sh, h](Tape& t, Var o) {
                  const int b = static_cast<int>(t.val(x).cols()) / h;
                  const M& go = t.g(o);
                  for (int s = 0; s < b; ++s)
                    for (int tt = 0; tt < h; ++tt) {
                      const Eigen::Index col = s * h + tt;
                      if (t.needs(x))
                        t.g(x).col(col) +=
                            go.col(col).cwiseProduct(t.val(sc).col(s));
                      if (t.needs(sc))
                        t.g(sc).col(s) +=
                            go.col(col).cwiseProduct(t.val(x).col(col));
                      if (t.needs(sh)) t.g(sh).col(s) += go.col(col);
                    }
                });
  }

  Var groupnorm(Var x, Var gamma, Var beta, int h, int groups) {
    if (val(x).rows() % groups != 0)
      throw std::invalid_argument("groupnorm: groups must divide channels");
    auto xhat = std::make_shared<M>();
    auto istd = std::make_shared<std::vector<S>>();
    M out = kernels::groupnorm(val(x), val(gamma), val(beta), h, groups,
                               xhat.get(), istd.get());
    return push(
        std::move(out), needs(x) || needs(gamma) || needs(beta),
        [x, gamma, beta, h, groups, xhat, istd](Tape& t, Var o) {
          const int c = static_cast<int>(t.val(x).rows());
          const int b = static_cast<int>(t.val(x).cols()) / h;
          const int cg = c / groups;
          const M& go = t.g(o);
          if (t.needs(gamma))
            t.g(gamma).col(0) += go.cwiseProduct(*xhat).rowwise().sum();
          if (t.needs(beta)) t.g(beta).col(0) += go.rowwise().sum();
          if (!t.needs(x)) return;
          const S n = S(cg) * S(h);
          for (int s = 0; s < b; ++s)
            for (int g = 0; g < groups; ++g) {
              auto xh = xhat->block(g * cg, s * h, cg, h);
              M dxh = go.block(g * cg, s * h, cg, h)
                          .cwiseProduct(t.val(gamma)
                                            .col(0)
                                            .segment(g * cg, cg)
                                            .replicate(1, h));
              const S m1 = dxh.sum() / n;
              const S m2 = dxh.cwiseProduct(xh).sum() / n;
              const S is = (*istd)[static_cast<size_t>(s) * groups + g];
              t.g(x).block(g * cg, s * h, cg, h) +=
                  is * (dxh.array() - m1 - xh.array() * m2).matrix();
            }
        });
  }

  Var conv1d(Var x, Var w, Var b, int h, int stride) {
    const int cin = static_cast<int>(val(x).rows());
    if (val(w).cols() != 3 * cin)
      throw std::invalid_argument("conv1d: weight shape mismatch");
    if (stride == 2 && h % 2 != 0)
      throw std::invalid_argument("conv1d: stride 2 needs even length");
    M out = kernels::conv1d(val(x), val(w), val(b), h, stride);
    return push(
        std::move(out), needs(x) || needs(w) || needs(b),
        [x, w, b, h, stride](Tape& t, Var o) {
          const int cin = static_cast<int>(t.val(x).rows());
          const int cout = static_cast<int>(t.val(w).rows());
          const M& go = t.g(o);
          if (t.needs(b)) t.g(b).col(0) += go.rowwise().sum();
          if (stride == 1) {
            for (int j = 0; j < 3; ++j) {
              auto wj = t.val(w).block(0, j * cin, cout, cin);
              if (t.needs(w))
                t.g(w).block(0, j * cin, cout, cin).noalias() +=
                    go * kernels::colshift(t.val(x), j - 1, h).transpose();
              if (t.needs(x))
                t.g(x).noalias() +=
                    wj.transpose() * kernels::colshift(go, 1 - j, h);
            }
          } else {
            const int ho = h / 2;
            const int bs = static_cast<int>(t.val(x).cols()) / h;
            for (int j = 0; j < 3; ++j) {
              auto wj = t.val(w).block(0, j * cin, cout, cin);
              if (t.needs(w))
                t.g(w).block(0, j * cin, cout, cin).noalias() +=
                    go * kernels::gather_stride2(t.val(x), j, h).transpose();
              if (t.needs(x)) {
                M dxj = wj.transpose() * go;  // (cin, bs*ho)
                for (int s = 0; s < bs; ++s)
                  for (int tt = 0; tt < ho; ++tt) {
                    const int dst = 2 * tt + j - 1;
                    if (dst >= 0 && dst < h)
                      t.g(x).col(s * h + dst) += dxj.col(s * ho + tt);
                  }
              }
            }
          }
        });
  }

  Var upsample2(Var x, int h) {
    M out = kernels::upsample2(val(x), h);
    return push(std::move(out), needs(x), [x, h](Tape& t, Var o) {
      if (!t.needs(x)) return;
      const int b = static_cast<int>(t.val(x).cols()) / h;
      const M& go = t.g(o);
      for (int s = 0; s < b; ++s)
        for (int tt = 0; tt < h; ++tt)
          t.g(x).col(s * h + tt) +=
              go.col(s * 2 * h + 2 * tt) + go.col(s * 2 * h + 2 * tt + 1);
    });
  }

  Var chunk_to_cols(Var x, int h) {
    M out = kernels::chunk_to_cols(val(x), h);
    return push(std::move(out), needs(x), [x, h](Tape& t, Var o) {
      if (t.needs(x)) t.g(x) += kernels::cols_to_chunk(t.g(o), h);
    });
  }

  Var cols_to_chunk(Var x, int h) {
    M out = kernels::cols_to_chunk(val(x), h);
    return push(std::move(out), needs(x), [x, h](Tape& t, Var o) {
      if (t.needs(x)) t.g(x) += kernels::chunk_to_cols(t.g(o), h);
    });
  }

  // sqrt with a zero subgradient at 0, so a zero-variance ensemble is exact.
  Var sqrt_guard(Var a) {
    M out = val(a).cwiseMax(S(0)).cwiseSqrt();
    return push(std::move(out), needs(a), [a](Tape& t, Var o) {
      if (!t.needs(a)) return;
      const M& v = t.val(a);
      const M& ov = t.val(o);
      M& ga = t.g(a);
      const M& go = t.g(o);
      for (Eigen::Index j = 0; j < v.cols(); ++j)
        for (Eigen::Index i = 0; i < v.rows(); ++i)
          if (v(i, j) > S(1e-12))
            ga(i, j) += go(i, j) * S(0.5) / ov(i, j);
    });
  }

  void backward(Var target) {
    Node& last = nodes_[static_cast<size_t>(target)];
    if (last.value.size() != 1)
      throw std::invalid_argument("backward: target must be a scalar");
    g(target)(0, 0) = S(1);
    for (int i = target; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.back && n.needs_grad && n.grad.size() != 0) n.back(*this, i);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    M value;
    M grad;
    bool needs_grad;
    std::function<void(Tape&, Var)> back;
  };

  bool needs(Var v) const { return nodes_[static_cast<size_t>(v)].needs_grad; }

  M& g(Var v) {
    Node& n = nodes_[static_cast<size_t>(v)];
    if (n.grad.size() == 0) n.grad = M::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void check_same_shape(Var a, Var b, const char* op) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }

  Var push(M value, bool needs_grad, std::function<void(Tape&, Var)> back) {
    nodes_.push_back(Node{std::move(value), M(), needs_grad, std::move(back)});
    return static_cast<Var>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

}  // namespace cpqe
