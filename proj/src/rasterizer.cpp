// SPDX-License-Identifier: Apache-2.0
#include "surfcap/rasterizer.hpp"

#include "surfcap/error.hpp"
#include "surfcap/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

namespace surfcap {

namespace {

constexpr double kParallelEps = 1e-9;

// Per-surfel quantities shared by every pixel of one render.
struct Prepared {
  bool valid = false;
  Vec3 m;            // center relative to camera center (world frame)
  Mat3 R;            // world rotation; columns tu, tv, n
  double su = 1.0, sv = 1.0;
  double opacity = 0.0;
  double orient = 1.0;  // +1 when the normal already faces the camera
  Vec3 normal_cam;      // oriented normal in the camera frame
  ShColor color;
  Vec3 view_dir;
  double view_dist = 1.0;
  Vec3 center_cam;  // camera-frame center
  double cu = 0.0, cv = 0.0;
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;
};

struct Fragment {
  double z;
  std::uint32_t local;  // index into the tile list
  double alpha;
  double gauss;
  double u, v;
  bool lowpass;
  bool clamped;
};

struct Context {
  const Camera* camera;
  const RenderSettings* settings;
  Vec3 origin;
  Mat3 cam_rot;  // world_to_cam rotation
  double lowpass_sigma2;
  double cutoff2;
};

Prepared prepare(const Surfel2D& s, const Context& ctx) {
  Prepared p;
  const Camera& cam = *ctx.camera;
  const RenderSettings& st = *ctx.settings;
  p.m = s.position - ctx.origin;
  p.center_cam = ctx.cam_rot * p.m;
  if (!(p.center_cam.z() > st.near_plane)) return p;
  p.R = rotation_from_raw(s.rotation.as_vec());
  p.su = std::exp(s.log_scale[0]);
  p.sv = std::exp(s.log_scale[1]);
  if (!std::isfinite(p.su) || !std::isfinite(p.sv) || p.su <= 0.0 || p.sv <= 0.0) return p;
  p.opacity = sigmoid(s.opacity_logit);
  const Vec3 n = p.R.col(2);
  p.orient = n.dot(p.m) > 0.0 ? -1.0 : 1.0;
  p.normal_cam = p.orient * (ctx.cam_rot * n);
  p.view_dist = p.m.norm();
  p.view_dir = p.m / p.view_dist;
  p.color = eval_sh(st.sh_degree, s.sh, p.view_dir);
  p.cu = cam.fx * p.center_cam.x() / p.center_cam.z() + cam.cx;
  p.cv = cam.fy * p.center_cam.y() / p.center_cam.z() + cam.cy;

  // Conservative screen bounds: projected 3-sigma square plus low-pass disc.
  const double lp = st.cutoff_sigma * st.lowpass_radius;
  double umin = p.cu - lp, umax = p.cu + lp, vmin = p.cv - lp, vmax = p.cv + lp;
  bool full_screen = false;
  const Vec3 du = st.cutoff_sigma * p.su * p.R.col(0);
  const Vec3 dv = st.cutoff_sigma * p.sv * p.R.col(1);
  for (int i = 0; i < 4 && !full_screen; ++i) {
    const Vec3 corner = p.m + ((i & 1) ? du : Vec3(-du)) + ((i & 2) ? dv : Vec3(-dv));
    const Vec3 c = ctx.cam_rot * corner;
    if (!(c.z() > st.near_plane)) {
      full_screen = true;
      break;
    }
    const double u = cam.fx * c.x() / c.z() + cam.cx;
    const double v = cam.fy * c.y() / c.z() + cam.cy;
    umin = std::min(umin, u);
    umax = std::max(umax, u);
    vmin = std::min(vmin, v);
    vmax = std::max(vmax, v);
  }
  if (full_screen) {
    p.x0 = 0;
    p.y0 = 0;
    p.x1 = cam.width - 1;
    p.y1 = cam.height - 1;
  } else {
    auto clampi = [](double v, int lo, int hi) {
      if (!(v > lo)) return lo;
      if (!(v < hi)) return hi;
      return static_cast<int>(v);
    };
    p.x0 = clampi(std::floor(umin), 0, cam.width);
    p.x1 = clampi(std::ceil(umax), -1, cam.width - 1);
    p.y0 = clampi(std::floor(vmin), 0, cam.height);
    p.y1 = clampi(std::ceil(vmax), -1, cam.height - 1);
  }
  p.valid = p.x0 <= p.x1 && p.y0 <= p.y1;
  return p;
}

bool make_fragment(const Prepared& p, const Vec3& d, double px, double py, const Context& ctx,
                   Fragment& f) {
  const Vec3 n = p.R.col(2);
  const double a = n.dot(p.m);
  const double b = n.dot(d);
  double rho3d = std::numeric_limits<double>::infinity();
  double t = 0.0;
  f.u = f.v = 0.0;
  if (std::abs(b) >= kParallelEps) {
    t = a / b;
    if (t > ctx.settings->near_plane) {
      const Vec3 delta = t * d - p.m;
      f.u = p.R.col(0).dot(delta) / p.su;
      f.v = p.R.col(1).dot(delta) / p.sv;
      rho3d = f.u * f.u + f.v * f.v;
    }
  }
  const double dx = px - p.cu;
  const double dy = py - p.cv;
  const double rho2d = (dx * dx + dy * dy) / ctx.lowpass_sigma2;
  f.lowpass = rho2d < rho3d;
  const double rho = f.lowpass ? rho2d : rho3d;
  if (!(rho <= ctx.cutoff2)) return false;
  f.z = f.lowpass ? p.center_cam.z() : t;
  f.gauss = std::exp(-0.5 * rho);
  const double raw = p.opacity * f.gauss;
  f.clamped = raw > ctx.settings->alpha_max;
  f.alpha = f.clamped ? ctx.settings->alpha_max : raw;
  return true;
}

struct Tiling {
  int tile = 16;
  int nx = 1, ny = 1;
  std::vector<std::vector<std::uint32_t>> lists;
};

Tiling build_tiles(const std::vector<Prepared>& prep, const Camera& cam, int tile_size) {
  Tiling t;
  t.tile = tile_size > 0 ? tile_size : std::max(cam.width, cam.height);
  t.nx = (cam.width + t.tile - 1) / t.tile;
  t.ny = (cam.height + t.tile - 1) / t.tile;
  t.lists.resize(static_cast<std::size_t>(t.nx) * t.ny);
  for (std::size_t i = 0; i < prep.size(); ++i) {
    const Prepared& p = prep[i];
    if (!p.valid) continue;
    for (int ty = p.y0 / t.tile; ty <= p.y1 / t.tile; ++ty)
      for (int tx = p.x0 / t.tile; tx <= p.x1 / t.tile; ++tx)
        t.lists[static_cast<std::size_t>(ty) * t.nx + tx].push_back(
            static_cast<std::uint32_t>(i));
  }
  return t;
}

Context make_context(const Camera& camera, const RenderSettings& settings) {
  camera.validate();
  Context ctx;
  ctx.camera = &camera;
  ctx.settings = &settings;
  ctx.origin = camera.center();
  ctx.cam_rot = camera.world_to_cam.rotation;
  ctx.lowpass_sigma2 = settings.lowpass_radius * settings.lowpass_radius;
  ctx.cutoff2 = settings.cutoff_sigma * settings.cutoff_sigma;
  return ctx;
}

// Tile-local candidate lists per pixel, in ascending list order. Scattering
// each surfel over its bounds beats testing every tile entry at every pixel.
struct PixelBins {
  int x0 = 0, y0 = 0, w = 0;
  std::vector<std::vector<std::uint32_t>> bins;

  const std::vector<std::uint32_t>& at(int px, int py) const {
    return bins[static_cast<std::size_t>(py - y0) * w + (px - x0)];
  }
};

PixelBins bin_pixels(const std::vector<Prepared>& prep, const std::vector<std::uint32_t>& list,
                     int x0, int y0, int x1, int y1) {
  PixelBins b;
  b.x0 = x0;
  b.y0 = y0;
  b.w = x1 - x0;
  b.bins.resize(static_cast<std::size_t>(b.w) * (y1 - y0));
  for (std::uint32_t k = 0; k < list.size(); ++k) {
    const Prepared& p = prep[list[k]];
    for (int y = std::max(p.y0, y0); y <= std::min(p.y1, y1 - 1); ++y)
      for (int x = std::max(p.x0, x0); x <= std::min(p.x1, x1 - 1); ++x)
        b.bins[static_cast<std::size_t>(y - y0) * b.w + (x - x0)].push_back(k);
  }
  return b;
}

// Gathers, sorts and returns the fragments of one pixel.
void collect(const std::vector<Prepared>& prep, const std::vector<std::uint32_t>& list,
             const std::vector<std::uint32_t>& candidates, const Vec3& d, double px, double py,
             const Context& ctx, std::vector<Fragment>& frags) {
  frags.clear();
  for (std::uint32_t k : candidates) {
    const Prepared& p = prep[list[k]];
    Fragment f;
    if (make_fragment(p, d, px, py, ctx, f)) {
      f.local = k;
      frags.push_back(f);
    }
  }
  std::sort(frags.begin(), frags.end(), [&](const Fragment& a, const Fragment& b) {
    if (a.z != b.z) return a.z < b.z;
    return list[a.local] < list[b.local];
  });
}

struct Accum {
  Vec3 rgb = Vec3::Zero();
  double opacity = 0.0;
  Vec3 position = Vec3::Zero();
  Mat3 rot = Mat3::Zero();
  Vec2 log_scale = Vec2::Zero();
  Vec3 center = Vec3::Zero();  // d/d(cu, cv, center depth)
  Vec3 normal_cam = Vec3::Zero();
  bool touched = false;

  void add(const Accum& o) {
    rgb += o.rgb;
    opacity += o.opacity;
    position += o.position;
    rot += o.rot;
    log_scale += o.log_scale;
    center += o.center;
    normal_cam += o.normal_cam;
    touched = touched || o.touched;
  }
};

// Backward of the ray-plane intersection for one fragment.
void intersect_vjp(const Prepared& p, const Vec3& d, double gu, double gv, double gz,
                   Accum& acc) {
  const Vec3 tu = p.R.col(0), tv = p.R.col(1), n = p.R.col(2);
  const double a = n.dot(p.m);
  const double b = n.dot(d);
  const double t = a / b;
  const Vec3 delta = t * d - p.m;
  const double u = tu.dot(delta) / p.su;
  const double v = tv.dot(delta) / p.sv;
  const Vec3 g_delta = gu * tu / p.su + gv * tv / p.sv;
  const double gt = gz + g_delta.dot(d);
  Vec3 g_m = -g_delta;
  acc.rot.col(0) += gu * delta / p.su;
  acc.rot.col(1) += gv * delta / p.sv;
  acc.log_scale += Vec2(-gu * u, -gv * v);
  const double ga = gt / b;
  const double gb = -gt * a / (b * b);
  acc.rot.col(2) += ga * p.m + gb * d;
  g_m += ga * n;
  acc.position += g_m;
}

}  // namespace

std::optional<SplatHit> ray_splat_intersect(const Surfel2D& surfel, const Vec3& origin,
                                            const Vec3& direction, double near_plane) {
  const Mat3 R = rotation_from_raw(surfel.rotation.as_vec());
  const Vec3 n = R.col(2);
  const double b = n.dot(direction);
  if (std::abs(b) < kParallelEps) return std::nullopt;
  const double t = n.dot(surfel.position - origin) / b;
  if (!(t > near_plane)) return std::nullopt;
  const Vec3 delta = origin + t * direction - surfel.position;
  const Vec2 s = surfel.scale();
  return SplatHit{R.col(0).dot(delta) / s[0], R.col(1).dot(delta) / s[1], t};
}

RenderOutput render(std::span<const Surfel2D> surfels, const Camera& camera,
                    const RenderSettings& settings) {
  const Context ctx = make_context(camera, settings);
  const int W = camera.width, H = camera.height;
  RenderOutput out{Image(W, H, 3), Image(W, H, 1), Image(W, H, 1), Image(W, H, 3),
                   Image(W, H, 1)};

  std::vector<Prepared> prep(surfels.size());
  for (std::size_t i = 0; i < surfels.size(); ++i) prep[i] = prepare(surfels[i], ctx);
  const Tiling tiles = build_tiles(prep, camera, settings.tile_size);

  parallel_for(tiles.lists.size(), [&](std::size_t tile_id) {
    const auto& list = tiles.lists[tile_id];
    const int tx = static_cast<int>(tile_id % tiles.nx), ty = static_cast<int>(tile_id / tiles.nx);
    const int x0 = tx * tiles.tile, x1 = std::min(W, x0 + tiles.tile);
    const int y0 = ty * tiles.tile, y1 = std::min(H, y0 + tiles.tile);
    const PixelBins bins = bin_pixels(prep, list, x0, y0, x1, y1);
    std::vector<Fragment> frags;
    for (int py = y0; py < y1; ++py)
      for (int px = x0; px < x1; ++px) {
        const Vec3 d = camera.ray_direction(px, py);
        collect(prep, list, bins.at(px, py), d, px, py, ctx, frags);
        double T = 1.0, wsum = 0.0, wz = 0.0, dist = 0.0;
        Vec3 color = Vec3::Zero(), normal = Vec3::Zero();
        for (const Fragment& f : frags) {
          const double next = T * (1.0 - f.alpha);
          if (next < settings.min_transmittance) break;
          const Prepared& p = prep[list[f.local]];
          const double w = f.alpha * T;
          color += w * p.color.rgb;
          normal += w * p.normal_cam;
          dist += w * (f.z * wsum - wz);
          wsum += w;
          wz += w * f.z;
          T = next;
        }
        color += T * settings.background;
        for (int c = 0; c < 3; ++c) {
          out.color.at(px, py, c) = color[c];
          out.normal.at(px, py, c) = normal[c];
        }
        out.alpha.at(px, py) = 1.0 - T;
        out.depth.at(px, py) = wsum > 0.0 ? wz / wsum : 0.0;
        out.distortion.at(px, py) = dist;
      }
  });
  return out;
}

GradientBuffer render_backward(std::span<const Surfel2D> surfels, const Camera& camera,
                               const RenderSettings& settings, const RenderGradients& grads) {
  const Context ctx = make_context(camera, settings);
  const int W = camera.width, H = camera.height;
  auto check = [&](const Image& img, int ch) {
    if (!img.data.empty() && (img.width != W || img.height != H || img.channels != ch))
      throw Error(ErrorCode::DimensionMismatch, "render gradient image has wrong shape");
  };
  check(grads.color, 3);
  check(grads.alpha, 1);
  check(grads.depth, 1);
  check(grads.normal, 3);
  check(grads.distortion, 1);

  const std::size_t sh_size = 3 * static_cast<std::size_t>(sh_coeffs(settings.sh_degree));
  GradientBuffer out;
  out.surfels.assign(surfels.size(), SurfelGrad(sh_size));
  out.screen_grad.assign(surfels.size(), 0.0);
  out.visible.assign(surfels.size(), 0);

  std::vector<Prepared> prep(surfels.size());
  for (std::size_t i = 0; i < surfels.size(); ++i) prep[i] = prepare(surfels[i], ctx);
  const Tiling tiles = build_tiles(prep, camera, settings.tile_size);
  std::vector<std::vector<Accum>> tile_acc(tiles.lists.size());

  parallel_for(tiles.lists.size(), [&](std::size_t tile_id) {
    const auto& list = tiles.lists[tile_id];
    auto& acc = tile_acc[tile_id];
    acc.assign(list.size(), Accum{});
    const int tx = static_cast<int>(tile_id % tiles.nx), ty = static_cast<int>(tile_id / tiles.nx);
    const int x0 = tx * tiles.tile, x1 = std::min(W, x0 + tiles.tile);
    const int y0 = ty * tiles.tile, y1 = std::min(H, y0 + tiles.tile);
    const PixelBins bins = bin_pixels(prep, list, x0, y0, x1, y1);
    std::vector<Fragment> frags;
    std::vector<double> w, T, before;
    std::vector<double> h;
    for (int py = y0; py < y1; ++py)
      for (int px = x0; px < x1; ++px) {
        const Vec3 gC = grads.color.data.empty()
                            ? Vec3::Zero()
                            : Vec3(grads.color.at(px, py, 0), grads.color.at(px, py, 1),
                                   grads.color.at(px, py, 2));
        const Vec3 gN = grads.normal.data.empty()
                            ? Vec3::Zero()
                            : Vec3(grads.normal.at(px, py, 0), grads.normal.at(px, py, 1),
                                   grads.normal.at(px, py, 2));
        const double gA = grads.alpha.data.empty() ? 0.0 : grads.alpha.at(px, py);
        const double gD = grads.depth.data.empty() ? 0.0 : grads.depth.at(px, py);
        const double gDist = grads.distortion.data.empty() ? 0.0 : grads.distortion.at(px, py);

        const Vec3 d = camera.ray_direction(px, py);
        collect(prep, list, bins.at(px, py), d, px, py, ctx, frags);

        // Forward replay over the contributing prefix.
        w.clear();
        T.clear();
        before.clear();
        double Tcur = 1.0, wsum = 0.0, wz = 0.0;
        std::size_t K = 0;
        for (const Fragment& f : frags) {
          const double next = Tcur * (1.0 - f.alpha);
          if (next < settings.min_transmittance) break;
          T.push_back(Tcur);
          w.push_back(f.alpha * Tcur);
          before.push_back(wsum);
          wsum += w.back();
          wz += w.back() * f.z;
          Tcur = next;
          ++K;
        }
        if (K == 0) continue;
        const double Tfinal = Tcur;
        const double g_wz = wsum > 0.0 ? gD / wsum : 0.0;
        const double gA_eff = gA - (wsum > 0.0 ? gD * wz / (wsum * wsum) : 0.0);

        h.assign(K, 0.0);
        double zbefore = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          const Fragment& f = frags[k];
          const Prepared& p = prep[list[f.local]];
          const double after = wsum - before[k] - w[k];
          const double zafter = wz - zbefore - w[k] * f.z;
          const double e = f.z * (before[k] - after) - zbefore + zafter;
          h[k] = gC.dot(p.color.rgb) + gA_eff + g_wz * f.z + gN.dot(p.normal_cam) + gDist * e;
          zbefore += w[k] * f.z;
        }

        double suffix = Tfinal * gC.dot(settings.background);
        for (std::size_t kk = K; kk-- > 0;) {
          const Fragment& f = frags[kk];
          const Prepared& p = prep[list[f.local]];
          Accum& a = acc[f.local];
          a.touched = true;
          const double g_alpha = T[kk] * h[kk] - suffix / (1.0 - f.alpha);
          suffix += w[kk] * h[kk];
          const double after = wsum - before[kk] - w[kk];
          const double g_z = g_wz * w[kk] + gDist * w[kk] * (before[kk] - after);
          a.rgb += w[kk] * gC;
          a.normal_cam += w[kk] * gN;
          double g_rho = 0.0;
          if (!f.clamped) {
            a.opacity += g_alpha * f.gauss;
            g_rho = -0.5 * f.gauss * g_alpha * p.opacity;
          }
          if (f.lowpass) {
            a.center[0] += g_rho * 2.0 * (p.cu - px) / ctx.lowpass_sigma2;
            a.center[1] += g_rho * 2.0 * (p.cv - py) / ctx.lowpass_sigma2;
            a.center[2] += g_z;
          } else {
            intersect_vjp(p, d, 2.0 * f.u * g_rho, 2.0 * f.v * g_rho, g_z, a);
          }
        }
      }
  });

  // Deterministic reduction in tile order.
  std::vector<Accum> total(surfels.size());
  for (std::size_t t = 0; t < tiles.lists.size(); ++t)
    for (std::size_t k = 0; k < tiles.lists[t].size(); ++k)
      total[tiles.lists[t][k]].add(tile_acc[t][k]);

  const double fx = camera.fx, fy = camera.fy;
  for (std::size_t i = 0; i < surfels.size(); ++i) {
    const Accum& a = total[i];
    const Prepared& p = prep[i];
    if (!p.valid || !a.touched) continue;
    out.visible[i] = 1;
    SurfelGrad& g = out.surfels[i];
    Mat3 g_rot = a.rot;
    g_rot.col(2) += p.orient * (ctx.cam_rot.transpose() * a.normal_cam);
    Vec3 g_pos = a.position;
    const Vec3& X = p.center_cam;
    const Vec3 g_cam(a.center[0] * fx / X.z(), a.center[1] * fy / X.z(),
                     -a.center[0] * fx * X.x() / (X.z() * X.z()) -
                         a.center[1] * fy * X.y() / (X.z() * X.z()) + a.center[2]);
    g_pos += ctx.cam_rot.transpose() * g_cam;
    const Vec3 g_dir = eval_sh_backward(settings.sh_degree, surfels[i].sh, p.view_dir, p.color,
                                        a.rgb, g.sh);
    g_pos += (g_dir - p.view_dir * p.view_dir.dot(g_dir)) / p.view_dist;
    g.position = g_pos;
    g.rotation = rotation_from_raw_vjp(surfels[i].rotation.as_vec(), g_rot);
    g.log_scale = a.log_scale;
    g.opacity_logit = a.opacity * p.opacity * (1.0 - p.opacity);

    const Vec3 gc = ctx.cam_rot * g_pos;
    const double su = gc.x() * X.z() / fx * 0.5 * W;
    const double sv = gc.y() * X.z() / fy * 0.5 * H;
    out.screen_grad[i] = std::sqrt(su * su + sv * sv);
  }
  return out;
}

}  // namespace surfcap

namespace surfcap {

RenderMargins render_margins(std::span<const Surfel2D> surfels, const Camera& camera,
                             const RenderSettings& settings) {
  const Context ctx = make_context(camera, settings);
  const double inf = std::numeric_limits<double>::infinity();
  RenderMargins m{inf, inf, inf, inf, inf, inf, inf};
  std::vector<Prepared> prep(surfels.size());
  for (std::size_t i = 0; i < surfels.size(); ++i) {
    prep[i] = prepare(surfels[i], ctx);
    if (!prep[i].valid) continue;
    m.facing = std::min(m.facing, std::abs(prep[i].R.col(2).dot(prep[i].m)) / prep[i].view_dist);
    const ShColor raw = eval_sh(settings.sh_degree, surfels[i].sh, prep[i].view_dir);
    for (int c = 0; c < 3; ++c) m.color = std::min(m.color, raw.clamped[c] ? 0.0 : raw.rgb[c]);
  }
  std::vector<std::uint32_t> all;
  for (std::uint32_t i = 0; i < prep.size(); ++i)
    if (prep[i].valid) all.push_back(i);
  const PixelBins bins = bin_pixels(prep, all, 0, 0, camera.width, camera.height);
  std::vector<Fragment> frags;
  for (int py = 0; py < camera.height; ++py)
    for (int px = 0; px < camera.width; ++px) {
      const Vec3 d = camera.ray_direction(px, py);
      // Margins consider every candidate, including culled-by-cutoff ones.
      for (std::uint32_t i : all) {
        const Prepared& p = prep[i];
        const Vec3 n = p.R.col(2);
        const double b = n.dot(d);
        double rho3d = inf;
        if (std::abs(b) >= kParallelEps) {
          const double t = n.dot(p.m) / b;
          if (t > settings.near_plane) {
            const Vec3 delta = t * d - p.m;
            const double u = p.R.col(0).dot(delta) / p.su;
            const double v = p.R.col(1).dot(delta) / p.sv;
            rho3d = u * u + v * v;
          }
        }
        const double dx = px - p.cu, dy = py - p.cv;
        const double rho2d = (dx * dx + dy * dy) / ctx.lowpass_sigma2;
        const double rho = std::min(rho3d, rho2d);
        m.cutoff = std::min(m.cutoff, std::abs(rho - ctx.cutoff2));
        if (rho <= ctx.cutoff2 && std::isfinite(rho3d))
          m.branch = std::min(m.branch, std::abs(rho3d - rho2d));
      }
      collect(prep, all, bins.at(px, py), d, px, py, ctx, frags);
      double T = 1.0;
      for (std::size_t k = 0; k < frags.size(); ++k) {
        const Fragment& f = frags[k];
        const Prepared& p = prep[all[f.local]];
        m.clamp = std::min(m.clamp, std::abs(p.opacity * f.gauss - settings.alpha_max));
        if (k > 0) m.depth_gap = std::min(m.depth_gap, f.z - frags[k - 1].z);
        const double next = T * (1.0 - f.alpha);
        m.transmittance = std::min(
            m.transmittance, std::abs(next - settings.min_transmittance) / settings.min_transmittance);
        if (next < settings.min_transmittance) break;
        T = next;
      }
    }
  return m;
}

}  // namespace surfcap
