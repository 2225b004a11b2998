// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace surfcap {

struct GradcheckClass {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t scenes = 0;
  std::size_t parameters = 0;  // summed over scenes
  std::size_t rejected = 0;    // non-generic draws skipped
};

struct GradcheckReport {
  std::vector<GradcheckClass> classes;
  double seconds = 0.0;
  double tolerance = 1e-4;

  bool passed() const;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  int scenes = 20;
  int max_surfels = 20;
  double h = 1e-5;
  double tolerance = 1e-4;
};

/// Central-difference checks of every analytic gradient: render outputs,
/// L_c, L_d, L_n, L_p, L_s, L_i and the refinement net weights.
GradcheckReport run_gradcheck(const GradcheckOptions& options);

}  // namespace surfcap
