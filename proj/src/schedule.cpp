#include "cpqe/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace cpqe {

std::vector<double> karras_levels(double eps, double k_max, double rho, int n) {
  if (n < 2) throw std::invalid_argument("karras_levels: need at least 2 levels");
  if (eps <= 0.0) throw std::invalid_argument("karras_levels: eps must be > 0");
  if (k_max <= eps) throw std::invalid_argument("karras_levels: k_max must exceed eps");
  if (rho < 1.0) throw std::invalid_argument("karras_levels: rho must be >= 1");

  const double lo = std::pow(eps, 1.0 / rho);
  const double hi = std::pow(k_max, 1.0 / rho);
  std::vector<double> levels(n);
  for (int i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / (n - 1);
    levels[i] = std::pow(lo + t * (hi - lo), rho);
  }
  // endpoints exact
  levels.front() = eps;
  levels.back() = k_max;
  return levels;
}

NoiseSchedule::NoiseSchedule(double eps_, double k_max_, double rho_,
                             int n_levels_, double sigma_data_)
    : eps(eps_), k_max(k_max_), rho(rho_), n_levels(n_levels_),
      sigma_data(sigma_data_) {
  if (sigma_data <= 0.0)
    throw std::invalid_argument("NoiseSchedule: sigma_data must be > 0");
  rebuild();
}

void NoiseSchedule::rebuild() {
  levels = karras_levels(eps, k_max, rho, n_levels);
}

double NoiseSchedule::c_skip(double k) const {
  if (k < eps) throw std::invalid_argument("c_skip: k below eps");
  const double d = k - eps;
  return sigma_data * sigma_data / (d * d + sigma_data * sigma_data);
}

double NoiseSchedule::c_out(double k) const {
  if (k < eps) throw std::invalid_argument("c_out: k below eps");
  return sigma_data * (k - eps) / std::sqrt(sigma_data * sigma_data + k * k);
}

}  // namespace cpqe
