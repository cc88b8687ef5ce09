#include "doctest.h"

#include <cmath>
#include <stdexcept>

#include "cpqe/rng.hpp"
#include "cpqe/schedule.hpp"

using namespace cpqe;

TEST_CASE("karras levels: exact endpoints and stated cases") {
  const auto l10 = karras_levels(0.002, 80.0, 7.0, 10);
  REQUIRE(l10.size() == 10);
  CHECK(l10.front() == 0.002);
  CHECK(l10.back() == 80.0);

  // midpoint of the 3-level schedule against a high-precision evaluation of
  // the closed form
  const auto l3 = karras_levels(0.002, 80.0, 7.0, 3);
  CHECK(std::abs(l3[1] - 2.5152189761471586) < 1e-10);

  // rho = 1 degenerates to linear interpolation
  const auto lin = karras_levels(0.002, 80.0, 1.0, 5);
  const double expected[5] = {0.002, 20.0015, 40.001, 60.0005, 80.0};
  for (int i = 0; i < 5; ++i) CHECK(lin[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("karras levels: rejects bad arguments") {
  CHECK_THROWS_AS(karras_levels(0.002, 80.0, 7.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(karras_levels(0.0, 80.0, 7.0, 10), std::invalid_argument);
  CHECK_THROWS_AS(karras_levels(-0.1, 80.0, 7.0, 10), std::invalid_argument);
  CHECK_THROWS_AS(karras_levels(0.002, 0.002, 7.0, 10), std::invalid_argument);
  CHECK_THROWS_AS(karras_levels(2.0, 1.0, 7.0, 10), std::invalid_argument);
  CHECK_THROWS_AS(karras_levels(0.002, 80.0, 0.5, 10), std::invalid_argument);
}

TEST_CASE("karras levels: endpoint exactness and monotonicity, 1000 draws") {
  Rng rng(42);
  for (int trial = 0; trial < 1000; ++trial) {
    const double eps = rng.uniform(1e-4, 0.1);
    const double k_max = eps + rng.uniform(0.5, 100.0);
    const double rho = rng.uniform(1.0, 10.0);
    const int n = 2 + static_cast<int>(rng.uniform_int(60));
    const auto l = karras_levels(eps, k_max, rho, n);
    REQUIRE(l.size() == static_cast<size_t>(n));
    CHECK(l.front() == eps);
    CHECK(l.back() == k_max);
    for (int i = 1; i < n; ++i) CHECK(l[i] > l[i - 1]);
  }
}

TEST_CASE("boundary weights at eps and the stated evaluations") {
  NoiseSchedule s;  // defaults: eps 0.002, k_max 80, rho 7, sigma_data 0.5
  CHECK(s.c_skip(s.eps) == 1.0);
  CHECK(s.c_out(s.eps) == 0.0);
  CHECK(s.c_skip(1.0) == doctest::Approx(0.2006414104609616).epsilon(1e-12));
  CHECK(s.c_out(1.0) == doctest::Approx(0.4463191683089580).epsilon(1e-12));
  CHECK(s.c_skip(80.0) < 1e-3);
  CHECK_THROWS_AS(s.c_skip(0.001), std::invalid_argument);
  CHECK_THROWS_AS(s.c_out(0.001), std::invalid_argument);
}

TEST_CASE("boundary weights: continuity at eps") {
  NoiseSchedule s;
  for (double h : {1e-3, 1e-6}) {
    CHECK(std::abs(s.c_skip(s.eps + h) - 1.0) < 10.0 * h);
    CHECK(std::abs(s.c_out(s.eps + h)) < 10.0 * h);
  }
}

TEST_CASE("boundary weights: ranges over the whole level span") {
  NoiseSchedule s;
  Rng rng(7);
  for (int i = 0; i < 2000; ++i) {
    const double k = s.eps + rng.uniform() * (s.k_max - s.eps);
    const double cs = s.c_skip(k);
    const double co = s.c_out(k);
    CHECK(cs > 0.0);
    CHECK(cs <= 1.0);
    CHECK(co >= 0.0);
    CHECK(co < s.sigma_data);
  }
  // c_skip monotonically decreasing in k
  double prev = s.c_skip(s.eps);
  for (double k = s.eps; k <= s.k_max; k += 0.5) {
    const double cur = s.c_skip(k);
    CHECK(cur <= prev + 1e-15);
    prev = cur;
  }
}

TEST_CASE("schedule invariants of the default construction") {
  NoiseSchedule s;
  REQUIRE(s.levels.size() == 40);
  CHECK(s.levels.front() == s.eps);
  CHECK(s.levels.back() == s.k_max);
  CHECK_THROWS_AS(NoiseSchedule(0.002, 80.0, 7.0, 40, -1.0), std::invalid_argument);
}
