// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <span>
#include <vector>

namespace surfcap {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Hamilton quaternion stored as (w, x, y, z). Values may be unnormalized
/// while being optimized; every rotation use goes through normalized().
struct Quaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static Quaternion identity() { return {}; }
  static Quaternion from_vec(const Vec4& v) { return {v[0], v[1], v[2], v[3]}; }
  static Quaternion from_axis_angle(const Vec3& axis, double angle);
  /// Shepperd's method; input must be a proper rotation.
  static Quaternion from_matrix(const Mat3& r);

  Vec4 as_vec() const { return {w, x, y, z}; }
  double norm() const;
  Quaternion normalized() const;
  Mat3 to_matrix() const;
};

Quaternion operator*(const Quaternion& a, const Quaternion& b);

/// Linear maps of the Hamilton product: (a*b) = left_mul(a)·b = right_mul(b)·a.
Mat4 quat_left_mul(const Quaternion& a);
Mat4 quat_right_mul(const Quaternion& b);

/// Rotation matrix of a raw (possibly unnormalized) quaternion.
Mat3 rotation_from_raw(const Vec4& q_raw);

/// Pulls dL/dR back to dL/dq_raw through normalization and the
/// quaternion-to-matrix map.
Vec4 rotation_from_raw_vjp(const Vec4& q_raw, const Mat3& grad_r);

/// Pulls dL/dq_unit back through q_unit = q_raw / |q_raw|.
Vec4 normalize_vjp(const Vec4& q_raw, const Vec4& grad_unit);

inline constexpr double kMinTriangleArea = 1e-12;

/// Local frame of a template triangle. R maps local to world, T is the
/// barycenter and s the isotropic scale sqrt(area).
struct TriangleFrame {
  Mat3 R = Mat3::Identity();
  Vec3 T = Vec3::Zero();
  double s = 1.0;
};

double triangle_area(const Vec3& v0, const Vec3& v1, const Vec3& v2);

/// Columns of R: unit edge v0->v1, unit face normal, and their cross product.
/// Throws DegenerateTriangle when the area is below kMinTriangleArea.
TriangleFrame triangle_frame(const Vec3& v0, const Vec3& v1, const Vec3& v2);

/// NeRF-style encoding; output is [sin(2^k pi p), cos(2^k pi p)] for k = 0..L-1,
/// each block spanning every input dimension.
std::vector<double> posenc(std::span<const double> p, int levels);
void posenc_into(std::span<const double> p, int levels, std::span<double> out);

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  RigidTransform inverse() const;
};

/// Pinhole camera with an OpenCV-style frame (x right, y down, z forward).
/// Pixel (i, j) is sampled at image coordinates (i, j).
struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
  RigidTransform world_to_cam;

  /// Throws InvalidCamera when intrinsics violate fx, fy > 0 or the
  /// principal point lies outside the image.
  void validate() const;
  Vec3 center() const;
  /// World-space direction through pixel coordinates (u, v), scaled so that
  /// its camera-space z component is 1; ray parameter therefore equals depth.
  Vec3 ray_direction(double u, double v) const;
};

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

/// Throws BehindCamera when the camera-space depth is <= 1e-6.
Projection project(const Camera& camera, const Vec3& x);

/// Camera looking from eye towards target with the given world up vector.
Camera look_at_camera(const Vec3& eye, const Vec3& target, const Vec3& up, int width,
                      int height, double fx, double fy);

}  // namespace surfcap
