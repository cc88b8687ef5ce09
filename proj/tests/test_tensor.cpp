#include "doctest.h"

#include <functional>

#include "cpqe/rng.hpp"
#include "cpqe/tensor.hpp"

using namespace cpqe;
using M = Mat<double>;

namespace {

M random_mat(int r, int c, Rng& rng, double scale = 1.0) {
  M m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
  return m;
}

// Central finite differences against the tape gradient for a scalar-valued
// builder over a set of leaf inputs.
using Builder = std::function<int(Tape<double>&, const std::vector<int>&)>;

void fd_check(std::vector<M> inputs, const Builder& build, double tol = 1e-7,
              double h = 1e-6) {
  Tape<double> tape;
  std::vector<int> vars;
  for (const auto& m : inputs) vars.push_back(tape.leaf(m, true));
  const int loss = build(tape, vars);
  REQUIRE(tape.val(loss).size() == 1);
  tape.backward(loss);
  std::vector<M> grads;
  for (int v : vars) grads.push_back(tape.grad_of(v));

  auto eval = [&](const std::vector<M>& in) {
    Tape<double> t;
    std::vector<int> vs;
    for (const auto& m : in) vs.push_back(t.leaf(m, false));
    return t.val(build(t, vs))(0, 0);
  };
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (int j = 0; j < inputs[k].cols(); ++j)
      for (int i = 0; i < inputs[k].rows(); ++i) {
        auto plus = inputs, minus = inputs;
        plus[k](i, j) += h;
        minus[k](i, j) -= h;
        const double fd = (eval(plus) - eval(minus)) / (2.0 * h);
        const double an = grads[k](i, j);
        const double err =
            std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
        CHECK_MESSAGE(err < tol, "input ", k, " entry (", i, ",", j,
                      "): analytic ", an, " vs fd ", fd);
      }
  }
}

// weighted sum to turn any output into a scalar
int weighted(Tape<double>& t, int x, const M& w) {
  return t.sum_all(t.cmul(x, t.leaf(w, false)));
}

}  // namespace

TEST_CASE("gradients: matmul, bias, elementwise") {
  Rng rng(1);
  const M w = random_mat(3, 8, rng);
  fd_check({random_mat(3, 4, rng), random_mat(4, 2, rng)},
           [&](Tape<double>& t, const std::vector<int>& v) {
             return weighted(t, t.matmul(v[0], v[1]), random_mat(3, 2, Rng(9)));
           });
  fd_check({random_mat(5, 3, rng), random_mat(5, 1, rng)},
           [&](Tape<double>& t, const std::vector<int>& v) {
             return weighted(t, t.add_bias(v[0], v[1]), random_mat(5, 3, Rng(8)));
           });
  fd_check({random_mat(4, 4, rng), random_mat(4, 4, rng)},
           [&](Tape<double>& t, const std::vector<int>& v) {
             auto a = t.cmul(v[0], v[1]);
             auto b = t.sub(a, t.square(v[0]));
             return weighted(t, t.scale(b, 0.7), random_mat(4, 4, Rng(7)));
           });
}

TEST_CASE("gradients: mish") {
  Rng rng(2);
  fd_check({random_mat(6, 5, rng, 2.0)},
           [&](Tape<double>& t, const std::vector<int>& v) {
             return weighted(t, t.mish(v[0]), random_mat(6, 5, Rng(6)));
           },
           1e-6);
}

TEST_CASE("gradients: conv1d stride 1 and stride 2") {
  Rng rng(3);
  const int cin = 3, cout = 4, h = 6, b = 2;
  fd_check({random_mat(cin, b * h, rng), random_mat(cout, 3 * cin, rng),
            random_mat(cout, 1, rng)},
           [&](Tape<double>& t, const std::vector<int>& v) {
             return weighted(t, t.conv1d(v[0], v[1], v[2], h, 1),
                             random_mat(cout, b * h, Rng(5)));
           });
  fd_check({random_mat(cin, b * h, rng), random_mat(cout, 3 * cin, rng),
            random_mat(cout, 1, rng)},
           [&](Tape<double>& t, const std::vector<int>& v) {
             return weighted(t, t.conv1d(v[0], v[1], v[2], h, 2),
                             random_mat(cout, b * h / 2, Rng(4)));
           });
}

TEST_CASE("conv1d: zero padding at sample boundaries") {
  // one sample, length 3, identity-ish kernel picking only the left neighbor
  Tape<double> t;
  M x(1, 3);
  x << 1.0, 2.0, 3.0;
  M w = M::Zero(1, 3);
  w(0, 0) = 1.0;  // weight on offset -1
  M b = M::Zero(1, 1);
  auto out = t.conv1d(t.leaf(x, false), t.leaf(w, false), t.leaf(b, false), 3, 1);
  CHECK(t.val(out)(0, 0) == 0.0);  // left pad
  CHECK(t.val(out)(0, 1) == 1.0);
  CHECK(t.val(out)(0, 2) == 2.0);
}

TEST_CASE("gradients: group norm") {
  Rng rng(4);
  const int c = 4, h = 3, b = 2, groups = 2;
  fd_check({random_mat(c, b * h, rng), random_mat(c, 1, rng, 0.5),
            random_mat(c, 1, rng, 0.5)},
           [&](Tape<double>& t, const std::vector<int>& v) {
             return weighted(t, t.groupnorm(v[0], v[1], v[2], h, groups),
                             random_mat(c, b * h, Rng(3)));
           },
           1e-5, 1e-6);
}

TEST_CASE("gradients: film, colscale, upsample, reshapes") {
  Rng rng(5);
  const int c = 3, h = 4, b = 2;
  fd_check({random_mat(c, b * h, rng), random_mat(c, b, rng),
            random_mat(c, b, rng)},
           [&](Tape<double>& t, const std::vector<int>& v) {
             return weighted(t, t.film(v[0], v[1], v[2], h),
                             random_mat(c, b * h, Rng(2)));
           });
  fd_check({random_mat(c, b * h, rng)},
           [&](Tape<double>& t, const std::vector<int>& v) {
             auto up = t.upsample2(v[0], h);
             return weighted(t, up, random_mat(c, 2 * b * h, Rng(1)));
           });
  fd_check({random_mat(c, b * h, rng)},
           [&](Tape<double>& t, const std::vector<int>& v) {
             auto y = t.colscale(v[0], {0.5, -2.0}, h);
             return weighted(t, y, random_mat(c, b * h, Rng(11)));
           });
  fd_check({random_mat(c, b * h, rng)},
           [&](Tape<double>& t, const std::vector<int>& v) {
             auto y = t.chunk_to_cols(v[0], h);
             return weighted(t, y, random_mat(c * h, b, Rng(12)));
           });
}

TEST_CASE("chunk layout conversions are mutually inverse") {
  Rng rng(6);
  const M x = random_mat(3, 2 * 4, rng);
  const M y = kernels::chunk_to_cols(x, 4);
  const M back = kernels::cols_to_chunk(y, 4);
  CHECK((x - back).cwiseAbs().maxCoeff() == 0.0);
  // layout: out(t*a + c, s) = in(c, s*h + t)
  CHECK(y(0 * 3 + 1, 1) == x(1, 1 * 4 + 0));
  CHECK(y(3 * 3 + 2, 0) == x(2, 0 * 4 + 3));
}

TEST_CASE("gradients: vconcat, rows, sqrt_guard") {
  Rng rng(7);
  fd_check({random_mat(2, 3, rng), random_mat(4, 3, rng)},
           [&](Tape<double>& t, const std::vector<int>& v) {
             auto cat = t.vconcat(v[0], v[1]);
             auto top = t.rows(cat, 1, 3);
             return weighted(t, top, random_mat(3, 3, Rng(13)));
           });
  // positive inputs for sqrt
  M pos = random_mat(3, 3, rng).cwiseAbs();
  pos.array() += 0.5;
  fd_check({pos},
           [&](Tape<double>& t, const std::vector<int>& v) {
             return weighted(t, t.sqrt_guard(v[0]), random_mat(3, 3, Rng(14)));
           });
}

TEST_CASE("sqrt_guard: exact zero has zero subgradient") {
  Tape<double> t;
  const int x = t.leaf(M::Zero(2, 2), true);
  auto loss = t.sum_all(t.sqrt_guard(x));
  t.backward(loss);
  CHECK(t.grad_of(x).cwiseAbs().maxCoeff() == 0.0);
  CHECK(t.val(loss)(0, 0) == 0.0);
}

TEST_CASE("shape errors are rejected") {
  Tape<double> t;
  const int a = t.leaf(M::Zero(2, 3), false);
  const int b = t.leaf(M::Zero(3, 3), false);
  CHECK_THROWS_AS(t.add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(t.matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS(t.film(a, b, b, 3), std::invalid_argument);
  const int g = t.leaf(M::Zero(3, 1), false);
  CHECK_THROWS_AS(t.groupnorm(b, g, g, 3, 2), std::invalid_argument);
}

TEST_CASE("backward requires a scalar target") {
  Tape<double> t;
  const int a = t.leaf(M::Zero(2, 2), true);
  CHECK_THROWS_AS(t.backward(a), std::invalid_argument);
}

TEST_CASE("tape and eval kernels produce identical forwards") {
  Rng rng(8);
  const int c = 4, h = 4, b = 3;
  const M x = random_mat(c, b * h, rng);
  const M w = random_mat(c, 3 * c, rng);
  const M bias = random_mat(c, 1, rng);
  const M g = random_mat(c, 1, rng);
  const M be = random_mat(c, 1, rng);

  Tape<double> t;
  auto v = t.mish(t.groupnorm(
      t.conv1d(t.leaf(x, false), t.leaf(w, false), t.leaf(bias, false), h, 1),
      t.leaf(g, false), t.leaf(be, false), h, 2));
  const M direct = kernels::mish(kernels::groupnorm(
      kernels::conv1d(x, w, bias, h, 1), g, be, h, 2));
  CHECK((t.val(v) - direct).cwiseAbs().maxCoeff() == 0.0);
}
