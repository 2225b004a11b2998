// SPDX-License-Identifier: Apache-2.0
#include "surfcap/losses.hpp"

#include "surfcap/error.hpp"

#include <array>
#include <cmath>
#include <limits>

namespace surfcap {

double total_loss(const LossComponents& c, const LossWeights& w) {
  for (double v : {c.color, c.distortion, c.normal, c.position, c.scale, c.isotropic})
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "loss component is not finite");
  return c.color + w.distortion * c.distortion + w.normal * c.normal + w.position * c.position +
         w.scale * c.scale + w.isotropic * c.isotropic;
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> g{};
  double sum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    g[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    sum += g[i];
  }
  for (double& v : g) v /= sum;
  return g;
}

using Plane = std::vector<double>;

// Separable zero-padded "same" filtering. The kernel is symmetric, so this is
// also its own adjoint.
Plane blur(const Plane& in, int w, int h) {
  static const auto g = gaussian_window();
  constexpr int r = kWindow / 2;
  Plane tmp(in.size(), 0.0), out(in.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -r; k <= r; ++k) {
        const int xx = x + k;
        if (xx >= 0 && xx < w) s += g[k + r] * in[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -r; k <= r; ++k) {
        const int yy = y + k;
        if (yy >= 0 && yy < h) s += g[k + r] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = s;
    }
  return out;
}

void require_same(const Image& a, const Image& b) {
  if (!a.same_shape(b))
    throw Error(ErrorCode::DimensionMismatch,
                "image shapes differ: " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                    "x" + std::to_string(a.channels) + " vs " + std::to_string(b.width) + "x" +
                    std::to_string(b.height) + "x" + std::to_string(b.channels));
}

}  // namespace

double ssim(const Image& a, const Image& b, Image* grad_a) {
  require_same(a, b);
  const int w = a.width, h = a.height, nc = a.channels;
  const std::size_t np = a.pixel_count();
  if (np == 0) return 1.0;
  const double inv_n = 1.0 / static_cast<double>(np * nc);
  if (grad_a) *grad_a = Image(w, h, nc);
  double total = 0.0;
  for (int c = 0; c < nc; ++c) {
    Plane x(np), y(np), xx(np), yy(np), xy(np);
    for (std::size_t i = 0; i < np; ++i) {
      x[i] = a.data[i * nc + c];
      y[i] = b.data[i * nc + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const Plane mx = blur(x, w, h), my = blur(y, w, h);
    const Plane exx = blur(xx, w, h), eyy = blur(yy, w, h), exy = blur(xy, w, h);
    Plane dm(np), dexx(np), dexy(np);
    for (std::size_t i = 0; i < np; ++i) {
      const double A1 = 2 * mx[i] * my[i] + kC1;
      const double A2 = 2 * (exy[i] - mx[i] * my[i]) + kC2;
      const double B1 = mx[i] * mx[i] + my[i] * my[i] + kC1;
      const double B2 = (exx[i] - mx[i] * mx[i]) + (eyy[i] - my[i] * my[i]) + kC2;
      const double S = A1 * A2 / (B1 * B2);
      total += S;
      if (!grad_a) continue;
      dm[i] = inv_n * ((2 * my[i] * A2 - 2 * my[i] * A1) / (B1 * B2) -
                       S * (2 * mx[i] / B1 - 2 * mx[i] / B2));
      dexx[i] = -inv_n * S / B2;
      dexy[i] = inv_n * 2 * A1 / (B1 * B2);
    }
    if (!grad_a) continue;
    const Plane gm = blur(dm, w, h), gxx = blur(dexx, w, h), gxy = blur(dexy, w, h);
    for (std::size_t i = 0; i < np; ++i)
      grad_a->data[i * nc + c] = gm[i] + 2 * x[i] * gxx[i] + y[i] * gxy[i];
  }
  return total * inv_n;
}

double psnr(const Image& a, const Image& b) {
  require_same(a, b);
  double mse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

Image masked_target(const Image& target, const Image& mask, const Vec3& background) {
  if (mask.width != target.width || mask.height != target.height || mask.channels != 1)
    throw Error(ErrorCode::DimensionMismatch, "mask does not match its image");
  Image out = target;
  for (int y = 0; y < target.height; ++y)
    for (int x = 0; x < target.width; ++x) {
      const double m = mask.at(x, y);
      for (int c = 0; c < target.channels; ++c)
        out.at(x, y, c) = m * target.at(x, y, c) + (1.0 - m) * background[c % 3];
    }
  return out;
}

ImageLoss loss_photometric(const Image& rendered, const Image& target, double lambda) {
  require_same(rendered, target);
  ImageLoss out;
  Image gs;
  out.ssim = ssim(rendered, target, &gs);
  const double inv_n = 1.0 / static_cast<double>(rendered.data.size());
  out.grad = Image(rendered.width, rendered.height, rendered.channels);
  for (std::size_t i = 0; i < rendered.data.size(); ++i) {
    const double d = rendered.data[i] - target.data[i];
    out.l1 += std::abs(d);
    const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
    out.grad.data[i] = (1 - lambda) * sgn * inv_n - 0.5 * lambda * gs.data[i];
  }
  out.l1 *= inv_n;
  out.value = (1 - lambda) * out.l1 + lambda * (1 - out.ssim) / 2;
  return out;
}

double loss_distortion(const RenderOutput& out, Image* grad) {
  const Image& d = out.distortion;
  const double inv_n = d.data.empty() ? 0.0 : 1.0 / static_cast<double>(d.data.size());
  double s = 0.0;
  for (double v : d.data) s += v;
  if (grad) *grad = Image(d.width, d.height, 1, inv_n);
  return s * inv_n;
}

double loss_normal(const RenderOutput& out, const Camera& camera, Image* grad_normal,
                   Image* grad_depth) {
  const int w = out.depth.width, h = out.depth.height;
  if (grad_normal) *grad_normal = Image(w, h, 3);
  if (grad_depth) *grad_depth = Image(w, h, 1);
  if (w < 3 || h < 3) return 0.0;
  const double inv_n = 1.0 / static_cast<double>((w - 2) * (h - 2));
  auto ray = [&](int x, int y) {
    return Vec3((x - camera.cx) / camera.fx, (y - camera.cy) / camera.fy, 1.0);
  };
  auto point = [&](int x, int y) -> Vec3 { return out.depth.at(x, y) * ray(x, y); };
  double total = 0.0;
  for (int y = 1; y < h - 1; ++y)
    for (int x = 1; x < w - 1; ++x) {
      const double A = out.alpha.at(x, y);
      if (A <= 0.5 || out.alpha.at(x - 1, y) <= 0.5 || out.alpha.at(x + 1, y) <= 0.5 ||
          out.alpha.at(x, y - 1) <= 0.5 || out.alpha.at(x, y + 1) <= 0.5)
        continue;
      const Vec3 dpx = point(x + 1, y) - point(x - 1, y);
      const Vec3 dpy = point(x, y + 1) - point(x, y - 1);
      const Vec3 c = dpy.cross(dpx);
      const double cn = c.norm();
      if (cn == 0.0) continue;
      const Vec3 nd = c / cn;
      const Vec3 n(out.normal.at(x, y, 0), out.normal.at(x, y, 1), out.normal.at(x, y, 2));
      total += 1.0 - A * n.dot(nd);
      if (grad_normal)
        for (int k = 0; k < 3; ++k) grad_normal->at(x, y, k) -= inv_n * A * nd[k];
      if (grad_depth) {
        const Vec3 g_nd = -inv_n * A * n;
        const Vec3 g_c = (g_nd - nd * nd.dot(g_nd)) / cn;
        const Vec3 g_dpy = dpx.cross(g_c);
        const Vec3 g_dpx = g_c.cross(dpy);
        grad_depth->at(x + 1, y) += g_dpx.dot(ray(x + 1, y));
        grad_depth->at(x - 1, y) -= g_dpx.dot(ray(x - 1, y));
        grad_depth->at(x, y + 1) += g_dpy.dot(ray(x, y + 1));
        grad_depth->at(x, y - 1) -= g_dpy.dot(ray(x, y - 1));
      }
    }
  return total * inv_n;
}

RiggingLoss loss_rigging(std::span<const HandModel> hands, const LossWeights& w,
                         SceneGrad* grad) {
  RiggingLoss out;
  std::size_t count = 0;
  for (const auto& hand : hands) count += hand.local.size();
  if (count == 0) return out;
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t hi = 0; hi < hands.size(); ++hi)
    for (std::size_t i = 0; i < hands[hi].local.size(); ++i) {
      const Surfel2D& s = hands[hi].local[i];
      const Vec3 hp = (s.position.cwiseAbs().array() - w.position_margin).cwiseMax(0.0);
      const double np = hp.norm();
      const Vec2 e = s.log_scale.array().exp();
      const Vec2 hs = (e.array() - w.scale_margin).cwiseMax(0.0);
      const double ns = hs.norm();
      out.position += np;
      out.scale += ns;
      if (!grad) continue;
      SurfelGrad& g = grad->hands[hi][i];
      if (np > 0.0)
        for (int k = 0; k < 3; ++k)
          g.position[k] += w.position * inv * hp[k] / np * (s.position[k] > 0 ? 1.0 : -1.0);
      if (ns > 0.0)
        for (int k = 0; k < 2; ++k) g.log_scale[k] += w.scale * inv * hs[k] / ns * e[k];
    }
  out.position *= inv;
  out.scale *= inv;
  return out;
}

double loss_isotropic(std::span<const Surfel2D> surfels, std::span<const std::uint32_t> selected,
                      double target, double weight, std::span<SurfelGrad> grads) {
  if (selected.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(selected.size());
  double total = 0.0;
  for (std::uint32_t i : selected) {
    const Surfel2D& s = surfels[i];
    const double d = s.log_scale[0] - s.log_scale[1];
    const double ratio = std::exp(-std::abs(d));
    const double r = ratio - target;
    total += std::abs(r);
    if (grads.empty()) continue;
    const double sr = r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
    const double sd = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
    const double g0 = weight * inv * sr * (-sd * ratio);
    grads[i].log_scale[0] += g0;
    grads[i].log_scale[1] -= g0;
  }
  return total * inv;
}

}  // namespace surfcap
