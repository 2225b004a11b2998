// SPDX-License-Identifier: Apache-2.0
#include "surfcap/surfel.hpp"

#include <array>

namespace surfcap {

namespace {

constexpr double kC0 = 0.28209479177387814;
constexpr double kC1 = 0.4886025119029199;
constexpr std::array<double, 5> kC2 = {1.0925484305920792, -1.0925484305920792,
                                       0.31539156525252005, -1.0925484305920792,
                                       0.5462742152960396};
constexpr std::array<double, 7> kC3 = {-0.5900435899266435, 2.890611442640554,
                                       -0.4570457994644658, 0.3731763325901154,
                                       -0.4570457994644658, 1.445305721320277,
                                       -0.5900435899266435};

struct ShBasis {
  std::array<double, 16> value{};
  std::array<Vec3, 16> grad{};
};

ShBasis sh_basis(int degree, const Vec3& d, bool with_grad) {
  ShBasis b;
  b.value[0] = kC0;
  if (with_grad) b.grad.fill(Vec3::Zero());
  if (degree < 1) return b;
  const double x = d.x(), y = d.y(), z = d.z();
  b.value[1] = -kC1 * y;
  b.value[2] = kC1 * z;
  b.value[3] = -kC1 * x;
  if (with_grad) {
    b.grad[1] = {0, -kC1, 0};
    b.grad[2] = {0, 0, kC1};
    b.grad[3] = {-kC1, 0, 0};
  }
  if (degree < 2) return b;
  const double xx = x * x, yy = y * y, zz = z * z;
  b.value[4] = kC2[0] * x * y;
  b.value[5] = kC2[1] * y * z;
  b.value[6] = kC2[2] * (2 * zz - xx - yy);
  b.value[7] = kC2[3] * x * z;
  b.value[8] = kC2[4] * (xx - yy);
  if (with_grad) {
    b.grad[4] = kC2[0] * Vec3(y, x, 0);
    b.grad[5] = kC2[1] * Vec3(0, z, y);
    b.grad[6] = kC2[2] * Vec3(-2 * x, -2 * y, 4 * z);
    b.grad[7] = kC2[3] * Vec3(z, 0, x);
    b.grad[8] = kC2[4] * Vec3(2 * x, -2 * y, 0);
  }
  if (degree < 3) return b;
  b.value[9] = kC3[0] * y * (3 * xx - yy);
  b.value[10] = kC3[1] * x * y * z;
  b.value[11] = kC3[2] * y * (4 * zz - xx - yy);
  b.value[12] = kC3[3] * z * (2 * zz - 3 * xx - 3 * yy);
  b.value[13] = kC3[4] * x * (4 * zz - xx - yy);
  b.value[14] = kC3[5] * z * (xx - yy);
  b.value[15] = kC3[6] * x * (xx - 3 * yy);
  if (with_grad) {
    b.grad[9] = kC3[0] * Vec3(6 * x * y, 3 * xx - 3 * yy, 0);
    b.grad[10] = kC3[1] * Vec3(y * z, x * z, x * y);
    b.grad[11] = kC3[2] * Vec3(-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z);
    b.grad[12] = kC3[3] * Vec3(-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy);
    b.grad[13] = kC3[4] * Vec3(4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z);
    b.grad[14] = kC3[5] * Vec3(2 * x * z, -2 * y * z, xx - yy);
    b.grad[15] = kC3[6] * Vec3(3 * xx - 3 * yy, -6 * x * y, 0);
  }
  return b;
}

}  // namespace

SurfelGrad& SurfelGrad::operator+=(const SurfelGrad& o) {
  position += o.position;
  rotation += o.rotation;
  log_scale += o.log_scale;
  opacity_logit += o.opacity_logit;
  for (std::size_t i = 0; i < sh.size() && i < o.sh.size(); ++i) sh[i] += o.sh[i];
  return *this;
}

std::string to_string(SourceKind kind) {
  switch (kind) {
    case SourceKind::HandLeft: return "left";
    case SourceKind::HandRight: return "right";
    case SourceKind::Object: return "object";
  }
  return "unknown";
}

double rgb_to_sh0(double c) { return (c - 0.5) / kC0; }
double sh0_to_rgb(double k) { return kC0 * k + 0.5; }

ShColor eval_sh(int degree, std::span<const double> sh, const Vec3& dir) {
  const ShBasis b = sh_basis(degree, dir, false);
  const int n = sh_coeffs(degree);
  ShColor out;
  for (int c = 0; c < 3; ++c) {
    double v = 0.5;
    for (int k = 0; k < n; ++k) v += b.value[k] * sh[3 * k + c];
    if (v < 0.0) {
      out.clamped[c] = true;
      v = 0.0;
    }
    out.rgb[c] = v;
  }
  return out;
}

Vec3 eval_sh_backward(int degree, std::span<const double> sh, const Vec3& dir,
                      const ShColor& forward, const Vec3& grad_rgb, std::span<double> grad_sh) {
  const bool need_dir = degree > 0;
  const ShBasis b = sh_basis(degree, dir, need_dir);
  const int n = sh_coeffs(degree);
  Vec3 g = grad_rgb;
  for (int c = 0; c < 3; ++c)
    if (forward.clamped[c]) g[c] = 0.0;
  Vec3 grad_dir = Vec3::Zero();
  for (int k = 0; k < n; ++k) {
    double dot = 0.0;
    for (int c = 0; c < 3; ++c) {
      grad_sh[3 * k + c] += b.value[k] * g[c];
      dot += sh[3 * k + c] * g[c];
    }
    if (need_dir) grad_dir += dot * b.grad[k];
  }
  return grad_dir;
}

}  // namespace surfcap
