#pragma once

#include <vector>

namespace cpqe {

// Discretized noise levels k_1 = eps < k_2 < ... < k_N = k_max obtained by
// warping a uniform grid with exponent rho, plus the skip/output weights
// that pin the boundary condition c_skip(eps) = 1, c_out(eps) = 0.
//
// All schedule arithmetic is 64-bit. Immutable after construction.
struct NoiseSchedule {
  double eps = 0.002;
  double k_max = 80.0;
  double rho = 7.0;
  int n_levels = 40;
  double sigma_data = 0.5;
  std::vector<double> levels;  // size n_levels, strictly increasing

  NoiseSchedule() { rebuild(); }
  NoiseSchedule(double eps_, double k_max_, double rho_, int n_levels_,
                double sigma_data_);

  double c_skip(double k) const;
  double c_out(double k) const;

  // Drift mu(.) = 0 and diffusion sigma(k) = sqrt(2)*k are fixed; only the
  // latter's coefficient is ever needed.
  static constexpr double kDiffusionCoeff = 1.4142135623730951;  // sqrt(2)

 private:
  void rebuild();
};

// k_n = (eps^(1/rho) + (n-1)/(N-1) * (k_max^(1/rho) - eps^(1/rho)))^rho,
// with the endpoints written exactly. Throws std::invalid_argument on
// n < 2, eps <= 0, k_max <= eps, or rho < 1.
std::vector<double> karras_levels(double eps, double k_max, double rho, int n);

}  // namespace cpqe
