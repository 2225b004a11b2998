// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "surfcap/core_geom.hpp"
#include "surfcap/image.hpp"
#include "surfcap/surfel.hpp"

#include <optional>
#include <span>
#include <vector>

namespace surfcap {

struct RenderSettings {
  Vec3 background = Vec3::Zero();
  int sh_degree = 0;
  /// Square tile edge in pixels; 0 renders the whole image as one tile.
  int tile_size = 16;
  double near_plane = 0.01;
  double alpha_max = 0.99;
  double min_transmittance = 1e-4;
  /// Contributions beyond this many standard deviations are dropped.
  double cutoff_sigma = 3.0;
  /// Screen-space low-pass footprint (pixels) blended by max() with the splat.
  double lowpass_radius = 0.5;
};

/// All per-pixel render products. Normals are in the camera frame and
/// oriented towards the camera; depth is camera-space z.
struct RenderOutput {
  Image color;       // 3 channels
  Image alpha;       // 1 channel
  Image depth;       // 1 channel, blend-weight normalized
  Image normal;      // 3 channels, sum of weighted unit normals
  Image distortion;  // 1 channel, sum_{i<j} w_i w_j |z_i - z_j|
};

struct SplatHit {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

/// Intersects a ray (unit direction) with the surfel's plane. (u, v) are in
/// standard deviations along the tangent axes; depth is the ray parameter.
std::optional<SplatHit> ray_splat_intersect(const Surfel2D& surfel, const Vec3& origin,
                                            const Vec3& direction, double near_plane = 0.01);

RenderOutput render(std::span<const Surfel2D> surfels, const Camera& camera,
                    const RenderSettings& settings);

/// Upstream gradients; an empty image means zero gradient for that output.
struct RenderGradients {
  Image color;
  Image alpha;
  Image depth;
  Image normal;
  Image distortion;
};

struct GradientBuffer {
  std::vector<SurfelGrad> surfels;
  /// |dL/d(screen position)| in NDC units for this pass.
  std::vector<double> screen_grad;
  /// True when the surfel contributed to at least one pixel.
  std::vector<char> visible;
};

/// Analytic backward pass. Recomputes the per-pixel sorted lists.
GradientBuffer render_backward(std::span<const Surfel2D> surfels, const Camera& camera,
                               const RenderSettings& settings, const RenderGradients& grads);

/// Distances to the nearest non-differentiable event of a render, used to
/// select generic configurations for finite-difference checks. Each entry is
/// the minimum over all (pixel, fragment) pairs.
struct RenderMargins {
  double cutoff = 0.0;         // |rho - cutoff^2|
  double branch = 0.0;         // |rho_splat - rho_lowpass|
  double clamp = 0.0;          // |opacity * G - alpha_max|
  double transmittance = 0.0;  // |T_next - min_transmittance| / min_transmittance
  double depth_gap = 0.0;      // gap between consecutive sorted depths
  double facing = 0.0;         // |n . (x - o)| / |x - o|
  double color = 0.0;          // distance of any SH color channel from 0
};

RenderMargins render_margins(std::span<const Surfel2D> surfels, const Camera& camera,
                             const RenderSettings& settings);

}  // namespace surfcap
