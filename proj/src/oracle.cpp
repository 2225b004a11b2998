// SPDX-License-Identifier: Apache-2.0
#include "surfcap/oracle.hpp"

#include "surfcap/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace surfcap {

std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> x, double h) {
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = f(probe);
    probe[i] = x[i] - h;
    const double fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw Error(ErrorCode::NonFinite, "function not finite in the probe neighbourhood");
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

ContactMap brute_force_contact(std::span<const Vec3> hand, std::span<const Vec3> object,
                               double tau) {
  ContactMap map;
  map.tau = tau;
  map.in_contact.assign(hand.size(), 0);
  map.distance.assign(hand.size(), std::numeric_limits<double>::infinity());
  map.nearest.assign(hand.size(), kNoSurfel);
  for (std::size_t i = 0; i < hand.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < object.size(); ++j) {
      const double d2 = (hand[i] - object[j]).squaredNorm();
      if (d2 < best) {
        best = d2;
        map.nearest[i] = static_cast<std::uint32_t>(j);
      }
    }
    if (!object.empty()) {
      map.distance[i] = std::sqrt(best);
      map.in_contact[i] = map.distance[i] < tau;
    }
  }
  return map;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor) {
  if (analytic.size() != numeric.size())
    throw Error(ErrorCode::LengthMismatch, "gradient vectors differ in length");
  double scale = 0.0;
  for (double v : numeric) scale = std::max(scale, std::abs(v));
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor * scale});
    if (denom == 0.0) continue;
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace surfcap
