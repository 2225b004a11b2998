// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "surfcap/core_geom.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace surfcap {

/// Number of SH coefficients per color channel for a given degree.
constexpr int sh_coeffs(int degree) { return (degree + 1) * (degree + 1); }

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// A planar Gaussian primitive. Rotation columns are the two tangent axes and
/// the normal; the covariance is never stored. `sh` holds
/// 3 * sh_coeffs(degree) values laid out as [coefficient][channel].
struct Surfel2D {
  Vec3 position = Vec3::Zero();
  Quaternion rotation;
  Vec2 log_scale = Vec2::Zero();
  double opacity_logit = 0.0;
  std::vector<double> sh = std::vector<double>(3, 0.0);

  Vec2 scale() const { return log_scale.array().exp(); }
  double opacity() const { return sigmoid(opacity_logit); }
};

/// Gradients w.r.t. the raw parameters of a Surfel2D.
struct SurfelGrad {
  Vec3 position = Vec3::Zero();
  Vec4 rotation = Vec4::Zero();
  Vec2 log_scale = Vec2::Zero();
  double opacity_logit = 0.0;
  std::vector<double> sh;

  explicit SurfelGrad(std::size_t sh_size = 3) : sh(sh_size, 0.0) {}
  SurfelGrad& operator+=(const SurfelGrad& o);
};

enum class SourceKind : std::uint8_t { HandLeft, HandRight, Object };

struct SurfelTag {
  SourceKind kind = SourceKind::Object;
  /// Object index for objects, hand index for hands.
  std::uint32_t group = 0;
  /// Index of the surfel inside its source set.
  std::uint32_t index = 0;

  bool is_hand() const { return kind != SourceKind::Object; }
  bool operator==(const SurfelTag&) const = default;
};

std::string to_string(SourceKind kind);

/// DC-only SH coefficient giving the requested RGB after the +0.5 offset.
double rgb_to_sh0(double c);
double sh0_to_rgb(double k);

struct ShColor {
  Vec3 rgb = Vec3::Zero();
  /// Channels that were clamped at zero receive no gradient.
  bool clamped[3] = {false, false, false};
};

/// Evaluates view-dependent color (3DGS convention: +0.5 offset, clamp >= 0)
/// along the unit direction from camera to surfel.
ShColor eval_sh(int degree, std::span<const double> sh, const Vec3& dir);

/// Backward of eval_sh. Adds into grad_sh and returns dL/d(dir).
Vec3 eval_sh_backward(int degree, std::span<const double> sh, const Vec3& dir,
                      const ShColor& forward, const Vec3& grad_rgb, std::span<double> grad_sh);

}  // namespace surfcap
