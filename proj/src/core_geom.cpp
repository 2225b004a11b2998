// SPDX-License-Identifier: Apache-2.0
#include "surfcap/core_geom.hpp"

#include "surfcap/error.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace surfcap {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DegenerateTriangle: return "DegenerateTriangle";
    case ErrorCode::BehindCamera: return "BehindCamera";
    case ErrorCode::InvalidCamera: return "InvalidCamera";
    case ErrorCode::FrameOutOfRange: return "FrameOutOfRange";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::EmptySequence: return "EmptySequence";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::GridIncomplete: return "GridIncomplete";
    case ErrorCode::TopologyOutOfRange: return "TopologyOutOfRange";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::GradientCheckFailed: return "GradientCheckFailed";
  }
  return "Unknown";
}

// ---------------------------------------------------------------------------
// Quaternion
// ---------------------------------------------------------------------------

Quaternion Quaternion::from_axis_angle(const Vec3& axis, double angle) {
  const Vec3 a = axis.normalized();
  const double h = 0.5 * angle;
  const double s = std::sin(h);
  return {std::cos(h), a.x() * s, a.y() * s, a.z() * s};
}

Quaternion Quaternion::from_matrix(const Mat3& r) {
  Quaternion q;
  const double trace = r.trace();
  if (trace > 0.0) {
    const double s = 2.0 * std::sqrt(1.0 + trace);
    q.w = 0.25 * s;
    q.x = (r(2, 1) - r(1, 2)) / s;
    q.y = (r(0, 2) - r(2, 0)) / s;
    q.z = (r(1, 0) - r(0, 1)) / s;
  } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
    q.w = (r(2, 1) - r(1, 2)) / s;
    q.x = 0.25 * s;
    q.y = (r(0, 1) + r(1, 0)) / s;
    q.z = (r(0, 2) + r(2, 0)) / s;
  } else if (r(1, 1) > r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2));
    q.w = (r(0, 2) - r(2, 0)) / s;
    q.x = (r(0, 1) + r(1, 0)) / s;
    q.y = 0.25 * s;
    q.z = (r(1, 2) + r(2, 1)) / s;
  } else {
    const double s = 2.0 * std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1));
    q.w = (r(1, 0) - r(0, 1)) / s;
    q.x = (r(0, 2) + r(2, 0)) / s;
    q.y = (r(1, 2) + r(2, 1)) / s;
    q.z = 0.25 * s;
  }
  return q.normalized();
}

double Quaternion::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Quaternion Quaternion::normalized() const {
  const double n = norm();
  if (n <= 1e-12) return identity();
  return {w / n, x / n, y / n, z / n};
}

Mat3 Quaternion::to_matrix() const { return rotation_from_raw(as_vec()); }

Quaternion operator*(const Quaternion& a, const Quaternion& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Mat4 quat_left_mul(const Quaternion& a) {
  Mat4 m;
  m << a.w, -a.x, -a.y, -a.z,
       a.x,  a.w, -a.z,  a.y,
       a.y,  a.z,  a.w, -a.x,
       a.z, -a.y,  a.x,  a.w;
  return m;
}

Mat4 quat_right_mul(const Quaternion& b) {
  Mat4 m;
  m << b.w, -b.x, -b.y, -b.z,
       b.x,  b.w,  b.z, -b.y,
       b.y, -b.z,  b.w,  b.x,
       b.z,  b.y, -b.x,  b.w;
  return m;
}

Mat3 rotation_from_raw(const Vec4& q_raw) {
  const double n = q_raw.norm();
  const Vec4 q = n > 1e-12 ? Vec4(q_raw / n) : Vec4(1, 0, 0, 0);
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

Vec4 normalize_vjp(const Vec4& q_raw, const Vec4& grad_unit) {
  const double n = q_raw.norm();
  if (n <= 1e-12) return Vec4::Zero();
  const Vec4 q = q_raw / n;
  return (grad_unit - q * q.dot(grad_unit)) / n;
}

Vec4 rotation_from_raw_vjp(const Vec4& q_raw, const Mat3& g) {
  const double n = q_raw.norm();
  if (n <= 1e-12) return Vec4::Zero();
  const Vec4 q = q_raw / n;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Vec4 gq;
  gq[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) +
               x * g(2, 1));
  gq[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) +
               z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2));
  gq[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) -
               w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2));
  gq[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) -
               2 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
  return normalize_vjp(q_raw, gq);
}

// ---------------------------------------------------------------------------
// Triangle frames
// ---------------------------------------------------------------------------

double triangle_area(const Vec3& v0, const Vec3& v1, const Vec3& v2) {
  return 0.5 * (v1 - v0).cross(v2 - v0).norm();
}

TriangleFrame triangle_frame(const Vec3& v0, const Vec3& v1, const Vec3& v2) {
  const Vec3 cross = (v1 - v0).cross(v2 - v0);
  const double area = 0.5 * cross.norm();
  if (!(area >= kMinTriangleArea)) {
    std::ostringstream msg;
    msg << "triangle area " << area << " below " << kMinTriangleArea;
    throw Error(ErrorCode::DegenerateTriangle, msg.str());
  }
  const Vec3 e = (v1 - v0).normalized();
  const Vec3 n = cross / (2.0 * area);
  TriangleFrame f;
  f.R.col(0) = e;
  f.R.col(1) = n;
  f.R.col(2) = e.cross(n);
  f.T = (v0 + v1 + v2) / 3.0;
  f.s = std::sqrt(area);
  return f;
}

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

void posenc_into(std::span<const double> p, int levels, std::span<double> out) {
  const std::size_t d = p.size();
  double freq = std::numbers::pi;
  for (int k = 0; k < levels; ++k) {
    double* block = out.data() + 2 * d * static_cast<std::size_t>(k);
    for (std::size_t i = 0; i < d; ++i) {
      block[i] = std::sin(freq * p[i]);
      block[d + i] = std::cos(freq * p[i]);
    }
    freq *= 2.0;
  }
}

std::vector<double> posenc(std::span<const double> p, int levels) {
  if (levels < 1) throw Error(ErrorCode::InvalidArgument, "posenc requires L >= 1");
  std::vector<double> out(2 * static_cast<std::size_t>(levels) * p.size());
  posenc_into(p, levels, out);
  return out;
}

// ---------------------------------------------------------------------------
// Cameras
// ---------------------------------------------------------------------------

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

void Camera::validate() const {
  std::ostringstream msg;
  if (!(fx > 0.0) || !(fy > 0.0)) msg << "focal lengths must be positive; ";
  if (width <= 0 || height <= 0) msg << "image size must be positive; ";
  if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
    msg << "principal point outside the image; ";
  const Mat3& r = world_to_cam.rotation;
  if ((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
      std::abs(r.determinant() - 1.0) > 1e-6)
    msg << "world_to_cam rotation is not orthonormal; ";
  if (!msg.str().empty()) throw Error(ErrorCode::InvalidCamera, msg.str());
}

Vec3 Camera::center() const { return world_to_cam.inverse().translation; }

Vec3 Camera::ray_direction(double u, double v) const {
  const Vec3 d_cam((u - cx) / fx, (v - cy) / fy, 1.0);
  return world_to_cam.rotation.transpose() * d_cam;
}

Projection project(const Camera& camera, const Vec3& x) {
  const Vec3 pc = camera.world_to_cam.apply(x);
  if (!(pc.z() > 1e-6)) {
    std::ostringstream msg;
    msg << "point depth " << pc.z() << " is not in front of the camera";
    throw Error(ErrorCode::BehindCamera, msg.str());
  }
  return {camera.fx * pc.x() / pc.z() + camera.cx, camera.fy * pc.y() / pc.z() + camera.cy,
          pc.z()};
}

Camera look_at_camera(const Vec3& eye, const Vec3& target, const Vec3& up, int width,
                      int height, double fx, double fy) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-9) right = forward.cross(Vec3::UnitX());
  right.normalize();
  const Vec3 down = forward.cross(right);
  Camera cam;
  cam.fx = fx;
  cam.fy = fy;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.width = width;
  cam.height = height;
  cam.world_to_cam.rotation.row(0) = right;
  cam.world_to_cam.rotation.row(1) = down;
  cam.world_to_cam.rotation.row(2) = forward;
  cam.world_to_cam.translation = -(cam.world_to_cam.rotation * eye);
  return cam;
}

}  // namespace surfcap
