// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "surfcap/image.hpp"
#include "surfcap/model.hpp"
#include "surfcap/rasterizer.hpp"

#include <span>
#include <vector>

namespace surfcap {

struct LossWeights {
  double dssim = 0.2;
  double distortion = 100.0;
  double normal = 0.005;
  double position = 0.01;
  double scale = 1.0;
  double isotropic = 0.1;
  double ratio_target = 0.4;
  double position_margin = 1.0;  // local units
  double scale_margin = 0.6;     // local units
};

struct LossComponents {
  double color = 0.0;
  double distortion = 0.0;
  double normal = 0.0;
  double position = 0.0;
  double scale = 0.0;
  double isotropic = 0.0;
};

/// Weighted sum; throws NonFinite when any component is not finite.
double total_loss(const LossComponents& c, const LossWeights& w = {});

/// Mean SSIM over pixels and channels: 11x11 Gaussian window (sigma 1.5),
/// zero-padded, C1 = 0.01^2, C2 = 0.03^2. grad_a receives dSSIM/da if given.
double ssim(const Image& a, const Image& b, Image* grad_a = nullptr);

double psnr(const Image& a, const Image& b);

/// target composited over the background outside the mask.
Image masked_target(const Image& target, const Image& mask, const Vec3& background);

struct ImageLoss {
  double value = 0.0;
  double l1 = 0.0;
  double ssim = 0.0;
  Image grad;  // d value / d rendered
};

/// (1 - lambda) * L1 + lambda * (1 - SSIM) / 2. Throws DimensionMismatch.
ImageLoss loss_photometric(const Image& rendered, const Image& target, double lambda);

/// Mean of the per-pixel distortion map; grad is the constant 1/N image.
double loss_distortion(const RenderOutput& out, Image* grad);

/// Mean over interior pixels of 1 - A * (N . N_d), with N the blended normal,
/// A the accumulated alpha (held constant) and N_d the unit normal of the
/// back-projected depth map. Pixels whose 4-neighbourhood is not solidly
/// covered (alpha <= 0.5) count as zero.
double loss_normal(const RenderOutput& out, const Camera& camera, Image* grad_normal,
                   Image* grad_depth);

/// Mean over hand surfels of the hinge norms in local coordinates.
/// Gradients (scaled by the weights) are added into grad.
struct RiggingLoss {
  double position = 0.0;
  double scale = 0.0;
};
RiggingLoss loss_rigging(std::span<const HandModel> hands, const LossWeights& w,
                         SceneGrad* grad);

/// Mean over the selected surfels of |min(s)/max(s) - target|. Adds
/// weight * gradient into grads[i].log_scale when grads is non-empty.
double loss_isotropic(std::span<const Surfel2D> surfels, std::span<const std::uint32_t> selected,
                      double target, double weight, std::span<SurfelGrad> grads);

}  // namespace surfcap
