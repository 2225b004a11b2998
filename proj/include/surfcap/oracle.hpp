// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "surfcap/contact.hpp"
#include "surfcap/core_geom.hpp"

#include <functional>
#include <span>
#include <vector>

namespace surfcap {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
/// Throws NonFinite when any evaluation is not finite.
std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> x, double h = 1e-5);

/// Exhaustive O(N*M) nearest-neighbour contact; the reference for
/// instantaneous_contact.
ContactMap brute_force_contact(std::span<const Vec3> hand, std::span<const Vec3> object,
                               double tau);

/// Relative error |a - f| / max(|a|, |f|, floor * max_j |f_j|), maximized over
/// coordinates. The floor keeps round-off on vanishing entries from dominating.
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor = 1e-3);

}  // namespace surfcap
