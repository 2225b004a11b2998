// SPDX-License-Identifier: Apache-2.0
#include "surfcap/gradcheck.hpp"

#include "surfcap/contact.hpp"
#include "surfcap/losses.hpp"
#include "surfcap/model.hpp"
#include "surfcap/oracle.hpp"
#include "surfcap/rasterizer.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <random>

namespace surfcap {

bool GradcheckReport::passed() const {
  for (const auto& c : classes)
    if (!(c.max_rel_error < tolerance) || c.scenes == 0) return false;
  return true;
}

namespace {

constexpr int kImage = 24;
constexpr int kMaxAttempts = 500;

Camera check_camera() {
  return look_at_camera({0.3, -0.2, -5.0}, {0, 0, 0}, {0, -1, 0}, kImage, kImage, 1.4 * kImage,
                        1.4 * kImage);
}

std::vector<Surfel2D> random_scene(std::mt19937_64& rng, int n, double op_lo, double op_hi) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> op(op_lo, op_hi);
  std::uniform_real_distribution<double> sc(std::log(0.15), std::log(0.4));
  std::uniform_real_distribution<double> col(0.15, 0.85);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Surfel2D> out;
  for (int i = 0; i < n; ++i) {
    Surfel2D s;
    s.position = {0.6 * u(rng), 0.6 * u(rng), 0.5 * u(rng)};
    const Quaternion tilt = Quaternion::from_axis_angle(Vec3(g(rng), g(rng), 0.0), 0.6 * u(rng));
    const Quaternion spin = Quaternion::from_axis_angle(Vec3::UnitZ(), 3.0 * u(rng));
    const Quaternion q = tilt * spin;
    const double k = 0.7 + 0.6 * (0.5 + 0.5 * u(rng));  // unnormalized on purpose
    s.rotation = {q.w * k, q.x * k, q.y * k, q.z * k};
    s.log_scale = {sc(rng), sc(rng)};
    s.opacity_logit = logit(op(rng));
    s.sh = {rgb_to_sh0(col(rng)), rgb_to_sh0(col(rng)), rgb_to_sh0(col(rng))};
    out.push_back(s);
  }
  return out;
}

bool generic(const RenderMargins& m) {
  return m.cutoff > 2e-3 && m.branch > 2e-3 && m.clamp > 1e-3 && m.transmittance > 1e-2 &&
         m.depth_gap > 1e-4 && m.facing > 1e-3 && m.color > 1e-3;
}

std::vector<double> pack(std::span<const Surfel2D> scene) {
  std::vector<double> x;
  for (const Surfel2D& s : scene) {
    const std::size_t k = x.size();
    x.resize(k + surfel_dof(s));
    surfel_to_row(s, std::span(x).subspan(k));
  }
  return x;
}

std::vector<Surfel2D> unpack(std::vector<Surfel2D> scene, std::span<const double> x) {
  std::size_t k = 0;
  for (Surfel2D& s : scene) {
    row_to_surfel(x.subspan(k, surfel_dof(s)), s);
    k += surfel_dof(s);
  }
  return scene;
}

std::vector<double> pack_grad(std::span<const SurfelGrad> grads) {
  std::vector<double> x;
  for (const SurfelGrad& g : grads) {
    const std::size_t k = x.size();
    x.resize(k + kSurfelFixedDof + g.sh.size());
    grad_to_row(g, std::span(x).subspan(k));
  }
  return x;
}

Image random_image(std::mt19937_64& rng, int c, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Image img(kImage, kImage, c);
  for (double& v : img.data) v = u(rng);
  return img;
}

double dot(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

// Scene loss on the render plus the image-space gradients that feed
// render_backward.
using ImageObjective = std::function<double(const RenderOutput&, RenderGradients*)>;

struct ClassRun {
  GradcheckClass& out;
  double h;

  void record(std::span<const double> analytic, std::span<const double> numeric) {
    out.max_rel_error = std::max(out.max_rel_error, max_relative_error(analytic, numeric));
    out.parameters += analytic.size();
    ++out.scenes;
  }
};

// Extra genericity requirements of an objective (kinks of L1, the L_n mask).
using Screen = std::function<bool(const RenderOutput&)>;

void check_render_class(ClassRun run, std::mt19937_64& rng, int scenes, int max_surfels,
                        double op_lo, double op_hi, const std::function<ImageObjective(std::mt19937_64&)>& make,
                        const Screen& screen) {
  const Camera cam = check_camera();
  RenderSettings st;
  st.background = {0.2, 0.1, 0.3};
  std::uniform_int_distribution<int> count(std::min(4, max_surfels), max_surfels);
  for (int s = 0; s < scenes; ++s) {
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const auto scene = random_scene(rng, count(rng), op_lo, op_hi);
      if (!generic(render_margins(scene, cam, st))) {
        ++run.out.rejected;
        continue;
      }
      const RenderOutput out = render(scene, cam, st);
      if (screen && !screen(out)) {
        ++run.out.rejected;
        continue;
      }
      const ImageObjective objective = make(rng);
      RenderGradients rg;
      objective(out, &rg);
      const auto analytic = pack_grad(render_backward(scene, cam, st, rg).surfels);
      auto f = [&](std::span<const double> x) { return objective(render(unpack(scene, x), cam, st), nullptr); };
      run.record(analytic, fd_gradient(f, pack(scene), run.h));
      break;
    }
  }
}

// Pixels near the L_n alpha mask threshold make the loss discontinuous.
bool normal_mask_generic(const RenderOutput& o) {
  std::size_t inside = 0;
  for (double a : o.alpha.data) {
    if (std::abs(a - 0.5) < 2e-3) return false;
    inside += a > 0.5;
  }
  return inside >= 12;
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  GradcheckReport report;
  report.tolerance = opt.tolerance;
  for (const char* name : {"render", "L_c", "L_d", "L_n", "L_p", "L_s", "L_i", "net"})
    report.classes.push_back({name});
  auto cls = [&](const char* name) -> GradcheckClass& {
    for (auto& c : report.classes)
      if (c.name == name) return c;
    throw std::logic_error("unknown gradcheck class");
  };
  std::mt19937_64 rng(opt.seed);
  const int n = opt.scenes, m = opt.max_surfels;

  // Every render product under a random linear functional.
  check_render_class({cls("render"), opt.h}, rng, n, m, 0.2, 0.7, [](std::mt19937_64& r) -> ImageObjective {
    RenderGradients w{random_image(r, 3, -1, 1), random_image(r, 1, -1, 1), random_image(r, 1, -1, 1),
                      random_image(r, 3, -1, 1), random_image(r, 1, -1, 1)};
    return [w](const RenderOutput& o, RenderGradients* g) {
      if (g) *g = w;
      return dot(o.color, w.color) + dot(o.alpha, w.alpha) + dot(o.depth, w.depth) +
             dot(o.normal, w.normal) + dot(o.distortion, w.distortion);
    };
  }, nullptr);

  // Photometric loss against a random target; the L1 kink is avoided by
  // requiring every residual to be well away from zero.
  Image target;
  check_render_class({cls("L_c"), opt.h}, rng, n, m, 0.2, 0.7, [&](std::mt19937_64& r) -> ImageObjective {
    const Image tgt = target;
    (void)r;
    return [tgt](const RenderOutput& o, RenderGradients* g) {
      ImageLoss l = loss_photometric(o.color, tgt, 0.2);
      if (g) g->color = std::move(l.grad);
      return l.value;
    };
  }, [&](const RenderOutput& o) {
    target = random_image(rng, 3, 0.0, 1.0);
    for (std::size_t i = 0; i < target.data.size(); ++i)
      if (std::abs(o.color.data[i] - target.data[i]) < 1e-3) return false;
    return true;
  });

  check_render_class({cls("L_d"), opt.h}, rng, n, m, 0.2, 0.7, [](std::mt19937_64&) -> ImageObjective {
    return [](const RenderOutput& o, RenderGradients* g) {
      return loss_distortion(o, g ? &g->distortion : nullptr);
    };
  }, nullptr);

  // Accumulated alpha is a constant inside L_n, so the oracle freezes it at
  // the unperturbed render.
  const Camera cam = check_camera();
  Image frozen_alpha;
  check_render_class({cls("L_n"), opt.h}, rng, n, m, 0.45, 0.9, [&](std::mt19937_64&) -> ImageObjective {
    return [cam, a = frozen_alpha](const RenderOutput& o, RenderGradients* g) {
      RenderOutput held = o;
      held.alpha = a;
      return loss_normal(held, cam, g ? &g->normal : nullptr, g ? &g->depth : nullptr);
    };
  }, [&](const RenderOutput& o) {
    frozen_alpha = o.alpha;
    return normal_mask_generic(o);
  });

  // Rigging losses over the hand parameters of a model.
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (const bool position : {true, false}) {
    GradcheckClass& c = cls(position ? "L_p" : "L_s");
    LossWeights w;
    w.position = position ? 1.0 : 0.0;
    w.scale = position ? 0.0 : 1.0;
    for (int s = 0; s < n; ++s) {
      SceneModel model;
      model.hands.resize(1);
      const int count = std::uniform_int_distribution<int>(1, m)(rng);
      for (int i = 0; i < count; ++i) {
        Surfel2D x;
        x.position = {1.5 * gauss(rng), 1.5 * gauss(rng), 1.5 * gauss(rng)};
        x.rotation = {gauss(rng), gauss(rng), gauss(rng), gauss(rng)};
        x.log_scale = {0.5 * gauss(rng) - 0.3, 0.5 * gauss(rng) - 0.3};
        model.hands[0].local.push_back(x);
        model.hands[0].bindings.push_back({});
      }
      // Hinge kinks sit at |x| = eps_p and exp(l) = eps_s.
      bool kink = false;
      for (const auto& x : model.hands[0].local) {
        kink = kink || (x.position.cwiseAbs().array() - w.position_margin).abs().minCoeff() < 1e-3;
        kink = kink || (x.scale().array() - w.scale_margin).abs().minCoeff() < 1e-3;
      }
      if (kink) {
        ++c.rejected;
        --s;
        continue;
      }
      SceneGrad grad = SceneGrad::zeros_like(model);
      loss_rigging(model.hands, w, &grad);
      auto f = [&](std::span<const double> x) {
        SceneModel mm = model;
        assign_params(mm, x);
        const RiggingLoss l = loss_rigging(mm.hands, w, nullptr);
        return w.position * l.position + w.scale * l.scale;
      };
      ClassRun{c, opt.h}.record(flatten_grad(grad), fd_gradient(f, flatten_params(model), opt.h));
    }
  }

  // Isotropic loss on the surfels of contact voxels of a random hand/object mix.
  {
    GradcheckClass& c = cls("L_i");
    const double tau = kDefaultContactTau;
    std::uniform_real_distribution<double> box(-0.003, 0.003);
    for (int s = 0; s < n; ++s) {
      const int count = std::uniform_int_distribution<int>(2, m)(rng);
      std::vector<Surfel2D> surfels(count);
      std::vector<SurfelTag> tags(count);
      std::vector<Vec3> pos;
      for (int i = 0; i < count; ++i) {
        surfels[i].position = {box(rng), box(rng), box(rng)};
        surfels[i].log_scale = {0.6 * gauss(rng) - 5.0, 0.6 * gauss(rng) - 5.0};
        tags[i] = {i % 2 ? SourceKind::Object : SourceKind::HandRight, 0, static_cast<std::uint32_t>(i)};
        pos.push_back(surfels[i].position);
      }
      const auto selected = label_contact_voxels(pos, tags, tau).surfels;
      bool kink = selected.empty();
      for (auto i : selected) {
        const double d = surfels[i].log_scale[0] - surfels[i].log_scale[1];
        kink = kink || std::abs(d) < 1e-3 || std::abs(std::exp(-std::abs(d)) - 0.4) < 1e-3;
      }
      if (kink) {
        ++c.rejected;
        --s;
        continue;
      }
      std::vector<SurfelGrad> grads(count);
      loss_isotropic(surfels, selected, 0.4, 1.0, grads);
      auto f = [&](std::span<const double> x) {
        return loss_isotropic(unpack(surfels, x), selected, 0.4, 1.0, {});
      };
      ClassRun{c, opt.h}.record(pack_grad(grads), fd_gradient(f, pack(surfels), opt.h));
    }
  }

  // Refinement weights through composition of a rigged strip.
  {
    GradcheckClass& c = cls("net");
    for (int s = 0; s < n; ++s) {
      const int quads = std::uniform_int_distribution<int>(1, std::max(1, m / 4))(rng);
      TemplateSequence tmpl;
      tmpl.topology.vertex_count = 2 * (quads + 1);
      for (int i = 0; i < quads; ++i) {
        const auto a = static_cast<std::uint32_t>(2 * i);
        tmpl.topology.faces.push_back({a, a + 2, a + 1});
        tmpl.topology.faces.push_back({a + 1, a + 2, a + 3});
      }
      for (std::size_t t = 0; t < 3; ++t) {
        TemplateFrame f;
        f.t = t;
        for (int i = 0; i <= quads; ++i) {
          const double z = 0.002 * std::sin(0.7 * i + 0.3 * static_cast<double>(t));
          f.vertices.push_back({0.01 * i, 0.0, z});
          f.vertices.push_back({0.01 * i, 0.01, z + 0.001});
        }
        tmpl.frames.push_back(std::move(f));
      }
      const std::vector<TemplateSequence> tmpls{tmpl};
      SceneModel model;
      model.use_refinement = true;
      model.hands.push_back(init_hand_surfels(tmpl, 0, 2, 0.5, rng).hand);
      RefinementConfig cfg;
      cfg.layers = 2;
      cfg.hidden = 8;
      cfg.lx = 2;
      cfg.lr = 1;
      cfg.ls = 1;
      cfg.lj = 2;
      model.net = RefinementNet(cfg, rng());
      for (double& p : model.net.parameters()) p = 0.3 * gauss(rng);
      const std::size_t t = std::uniform_int_distribution<std::size_t>(0, 2)(rng);
      const ComposedScene sc = compose_scene(model, tmpls, t);
      std::vector<double> w(pack(sc.surfels).size());
      for (double& v : w) v = gauss(rng);
      std::vector<SurfelGrad> wg;
      std::size_t k = 0;
      for (const Surfel2D& x : sc.surfels) {
        SurfelGrad gg(x.sh.size());
        for (int i = 0; i < 3; ++i) gg.position[i] = w[k + i];
        for (int i = 0; i < 4; ++i) gg.rotation[i] = w[k + 3 + i];
        gg.log_scale = {w[k + 7], w[k + 8]};
        gg.opacity_logit = w[k + 9];
        for (std::size_t j = 0; j < x.sh.size(); ++j) gg.sh[j] = w[k + 10 + j];
        k += surfel_dof(x);
        wg.push_back(std::move(gg));
      }
      SceneGrad grad = SceneGrad::zeros_like(model);
      compose_backward(model, sc, wg, grad);
      const std::vector<double> x0(model.net.parameters().begin(), model.net.parameters().end());
      auto f = [&](std::span<const double> x) {
        SceneModel mm = model;
        std::copy(x.begin(), x.end(), mm.net.parameters().begin());
        const auto rows = pack(compose_scene(mm, tmpls, t).surfels);
        double acc = 0.0;
        for (std::size_t i = 0; i < rows.size(); ++i) acc += w[i] * rows[i];
        return acc;
      };
      ClassRun{c, opt.h}.record(grad.net, fd_gradient(f, x0, opt.h));
    }
  }

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace surfcap
