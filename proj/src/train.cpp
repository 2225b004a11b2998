// SPDX-License-Identifier: Apache-2.0
#include "surfcap/train.hpp"

#include "surfcap/binary_io.hpp"
#include "surfcap/error.hpp"
#include "surfcap/rasterizer.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace surfcap {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, what); };
  if (iterations <= 0) fail("iterations must be positive");
  if (!(tau > 0.0)) fail("tau must be positive");
  if (image_subsample < 1) fail("image_subsample must be >= 1");
  if (sh_degree < 0 || sh_degree > 3) fail("sh_degree must be in [0, 3]");
  if (init_k < 1 || !(init_variance >= 0.0)) fail("init_k >= 1 and init_variance >= 0 required");
  for (double lr : {lr_position, lr_position_final, lr_rotation, lr_scale, lr_opacity, lr_color,
                    lr_net, lr_pose})
    if (!(lr >= 0.0)) fail("learning rates must be nonnegative");
  if (densify_interval < 1 || contact_refresh < 1 || log_interval < 1)
    fail("intervals must be positive");
  for (double v : {weights.dssim, weights.distortion, weights.normal, weights.position,
                   weights.scale, weights.isotropic, weights.ratio_target})
    if (!(v >= 0.0)) fail("loss weights must be nonnegative");
}

std::string config_to_json(const TrainConfig& c) {
  json j;
  j["iterations"] = c.iterations;
  j["seed"] = c.seed;
  j["tau"] = c.tau;
  j["image_subsample"] = c.image_subsample;
  j["sh_degree"] = c.sh_degree;
  j["init_k"] = c.init_k;
  j["init_variance"] = c.init_variance;
  j["lr_position"] = c.lr_position;
  j["lr_position_final"] = c.lr_position_final;
  j["lr_rotation"] = c.lr_rotation;
  j["lr_scale"] = c.lr_scale;
  j["lr_opacity"] = c.lr_opacity;
  j["lr_color"] = c.lr_color;
  j["lr_net"] = c.lr_net;
  j["lr_pose"] = c.lr_pose;
  j["densify_interval"] = c.densify_interval;
  j["densify_from"] = c.densify_from;
  j["densify_until"] = c.densify_until;
  j["densify_grad_threshold"] = c.densify_grad_threshold;
  j["dense_percent"] = c.dense_percent;
  j["prune_opacity"] = c.prune_opacity;
  j["max_surfels"] = c.max_surfels;
  j["final_prune"] = c.final_prune;
  j["contact_refresh"] = c.contact_refresh;
  j["use_refinement"] = c.use_refinement;
  j["use_isotropic"] = c.use_isotropic;
  j["net"] = {{"layers", c.net.layers}, {"hidden", c.net.hidden}, {"lx", c.net.lx},
              {"lr", c.net.lr},         {"ls", c.net.ls},         {"lj", c.net.lj}};
  j["weights"] = {{"dssim", c.weights.dssim},
                  {"distortion", c.weights.distortion},
                  {"normal", c.weights.normal},
                  {"position", c.weights.position},
                  {"scale", c.weights.scale},
                  {"isotropic", c.weights.isotropic},
                  {"ratio_target", c.weights.ratio_target},
                  {"position_margin", c.weights.position_margin},
                  {"scale_margin", c.weights.scale_margin}};
  j["background"] = {c.background[0], c.background[1], c.background[2]};
  j["holdout_views"] = c.holdout_views;
  j["log_interval"] = c.log_interval;
  return j.dump(2);
}

namespace {

template <typename T>
void set_from(const json& j, T& field) {
  field = j.get<T>();
}

}  // namespace

void apply_config_json(TrainConfig& c, const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("config: ") + e.what());
  }
  if (!doc.is_object()) throw Error(ErrorCode::ParseError, "config must be a JSON object");
  try {
    for (const auto& [key, val] : doc.items()) {
      if (key == "iterations") set_from(val, c.iterations);
      else if (key == "seed") set_from(val, c.seed);
      else if (key == "tau") set_from(val, c.tau);
      else if (key == "image_subsample") set_from(val, c.image_subsample);
      else if (key == "sh_degree") set_from(val, c.sh_degree);
      else if (key == "init_k") set_from(val, c.init_k);
      else if (key == "init_variance") set_from(val, c.init_variance);
      else if (key == "lr_position") set_from(val, c.lr_position);
      else if (key == "lr_position_final") set_from(val, c.lr_position_final);
      else if (key == "lr_rotation") set_from(val, c.lr_rotation);
      else if (key == "lr_scale") set_from(val, c.lr_scale);
      else if (key == "lr_opacity") set_from(val, c.lr_opacity);
      else if (key == "lr_color") set_from(val, c.lr_color);
      else if (key == "lr_net") set_from(val, c.lr_net);
      else if (key == "lr_pose") set_from(val, c.lr_pose);
      else if (key == "densify_interval") set_from(val, c.densify_interval);
      else if (key == "densify_from") set_from(val, c.densify_from);
      else if (key == "densify_until") set_from(val, c.densify_until);
      else if (key == "densify_grad_threshold") set_from(val, c.densify_grad_threshold);
      else if (key == "dense_percent") set_from(val, c.dense_percent);
      else if (key == "prune_opacity") set_from(val, c.prune_opacity);
      else if (key == "max_surfels") set_from(val, c.max_surfels);
      else if (key == "final_prune") set_from(val, c.final_prune);
      else if (key == "contact_refresh") set_from(val, c.contact_refresh);
      else if (key == "use_refinement") set_from(val, c.use_refinement);
      else if (key == "use_isotropic") set_from(val, c.use_isotropic);
      else if (key == "log_interval") set_from(val, c.log_interval);
      else if (key == "holdout_views") set_from(val, c.holdout_views);
      else if (key == "background") {
        const auto v = val.get<std::vector<double>>();
        if (v.size() != 3) throw Error(ErrorCode::InvalidArgument, "background needs 3 values");
        c.background = {v[0], v[1], v[2]};
      } else if (key == "net") {
        for (const auto& [k, v] : val.items()) {
          if (k == "layers") set_from(v, c.net.layers);
          else if (k == "hidden") set_from(v, c.net.hidden);
          else if (k == "lx") set_from(v, c.net.lx);
          else if (k == "lr") set_from(v, c.net.lr);
          else if (k == "ls") set_from(v, c.net.ls);
          else if (k == "lj") set_from(v, c.net.lj);
          else throw Error(ErrorCode::InvalidArgument, "unknown config key net." + k);
        }
      } else if (key == "weights") {
        for (const auto& [k, v] : val.items()) {
          if (k == "dssim") set_from(v, c.weights.dssim);
          else if (k == "distortion") set_from(v, c.weights.distortion);
          else if (k == "normal") set_from(v, c.weights.normal);
          else if (k == "position") set_from(v, c.weights.position);
          else if (k == "scale") set_from(v, c.weights.scale);
          else if (k == "isotropic") set_from(v, c.weights.isotropic);
          else if (k == "ratio_target") set_from(v, c.weights.ratio_target);
          else if (k == "position_margin") set_from(v, c.weights.position_margin);
          else if (k == "scale_margin") set_from(v, c.weights.scale_margin);
          else throw Error(ErrorCode::InvalidArgument, "unknown config key weights." + k);
        }
      } else {
        throw Error(ErrorCode::InvalidArgument, "unknown config key " + key);
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Adam

OptimizerState OptimizerState::zeros_like(const SceneModel& model) {
  OptimizerState s;
  auto zeros = [](std::size_t n) { return Moments{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)}; };
  for (const auto& h : model.hands) {
    std::size_t n = 0;
    for (const auto& x : h.local) n += surfel_dof(x);
    s.hands.push_back(zeros(n));
  }
  for (const auto& o : model.objects) {
    std::size_t n = 0;
    for (const auto& x : o.surfels) n += surfel_dof(x);
    s.objects.push_back(zeros(n));
    s.poses.push_back(zeros(o.pose_track.size() * kPoseDof));
  }
  s.net = zeros(model.net.parameter_count());
  return s;
}

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                 std::span<double> v, std::span<const double> lr, std::int64_t step,
                 const AdamSettings& s) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size() ||
      lr.size() != param.size())
    throw Error(ErrorCode::ShapeMismatch, "Adam buffers differ in size");
  if (step < 1) throw Error(ErrorCode::InvalidArgument, "Adam step count starts at 1");
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * grad[i];
    v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * grad[i] * grad[i];
    const double mh = m[i] / bc1;
    const double vh = v[i] / bc2;
    param[i] -= lr[i] * mh / (std::sqrt(vh) + s.eps);
  }
}

LearningRates learning_rates(const TrainConfig& c, std::int64_t iteration, double extent) {
  LearningRates lr;
  double pos = c.lr_position;
  if (c.lr_position_final > 0.0 && c.lr_position > 0.0) {
    const double t = std::clamp(static_cast<double>(iteration) / std::max(c.iterations, 1), 0.0, 1.0);
    pos = std::exp((1.0 - t) * std::log(c.lr_position) + t * std::log(c.lr_position_final));
  }
  lr.hand_position = pos;
  lr.object_position = pos * extent;
  lr.rotation = c.lr_rotation;
  lr.scale = c.lr_scale;
  lr.opacity = c.lr_opacity;
  lr.color = c.lr_color;
  lr.net = c.lr_net;
  lr.pose = c.lr_pose;
  return lr;
}

namespace {

std::vector<double> surfel_lr_row(std::size_t dof, double pos, const LearningRates& lr) {
  std::vector<double> row(dof, lr.color);
  std::fill(row.begin(), row.begin() + 3, pos);
  std::fill(row.begin() + 3, row.begin() + 7, lr.rotation);
  row[7] = row[8] = lr.scale;
  row[9] = lr.opacity;
  return row;
}

void step_surfels(std::vector<Surfel2D>& surfels, const std::vector<SurfelGrad>& grads,
                  Moments& mom, double pos_lr, const LearningRates& lr, std::int64_t step,
                  const AdamSettings& s) {
  if (grads.size() != surfels.size())
    throw Error(ErrorCode::ShapeMismatch, "gradient count differs from surfel count");
  std::size_t k = 0;
  std::vector<double> p, g, rates;
  for (std::size_t i = 0; i < surfels.size(); ++i) {
    const std::size_t dof = surfel_dof(surfels[i]);
    if (grads[i].sh.size() != surfels[i].sh.size() || k + dof > mom.m.size())
      throw Error(ErrorCode::ShapeMismatch, "moment rows do not match surfels");
    p.resize(dof);
    g.resize(dof);
    surfel_to_row(surfels[i], p);
    grad_to_row(grads[i], g);
    if (rates.size() != dof) rates = surfel_lr_row(dof, pos_lr, lr);
    adam_update(p, g, std::span(mom.m).subspan(k, dof), std::span(mom.v).subspan(k, dof), rates,
                step, s);
    row_to_surfel(p, surfels[i]);
    k += dof;
  }
  if (k != mom.m.size()) throw Error(ErrorCode::ShapeMismatch, "moment rows do not match surfels");
}

}  // namespace

bool adam_step(SceneModel& model, OptimizerState& opt, const SceneGrad& grad,
               const LearningRates& lr, const AdamSettings& s) {
  for (double g : flatten_grad(grad))
    if (!std::isfinite(g)) return false;
  if (grad.hands.size() != model.hands.size() || grad.objects.size() != model.objects.size() ||
      opt.hands.size() != model.hands.size() || opt.objects.size() != model.objects.size() ||
      opt.poses.size() != model.objects.size() || grad.net.size() != model.net.parameter_count() ||
      opt.net.m.size() != model.net.parameter_count())
    throw Error(ErrorCode::ShapeMismatch, "gradient or moments do not match the model");
  const std::int64_t step = ++opt.step;
  for (std::size_t h = 0; h < model.hands.size(); ++h)
    step_surfels(model.hands[h].local, grad.hands[h], opt.hands[h], lr.hand_position, lr, step, s);
  for (std::size_t o = 0; o < model.objects.size(); ++o) {
    ObjectModel& obj = model.objects[o];
    step_surfels(obj.surfels, grad.objects[o].surfels, opt.objects[o], lr.object_position, lr,
                 step, s);
    const std::size_t nf = obj.pose_track.size();
    if (grad.objects[o].pose_q.size() != nf || opt.poses[o].m.size() != nf * kPoseDof)
      throw Error(ErrorCode::ShapeMismatch, "pose gradient does not match the pose track");
    std::vector<double> p(nf * kPoseDof), g(nf * kPoseDof), rates(nf * kPoseDof, lr.pose);
    for (std::size_t f = 0; f < nf; ++f) {
      const ObjectPose& pose = obj.pose_track[f];
      const double vals[] = {pose.q.w, pose.q.x, pose.q.y, pose.q.z, pose.t[0], pose.t[1], pose.t[2]};
      std::copy(std::begin(vals), std::end(vals), p.begin() + f * kPoseDof);
      for (int i = 0; i < 4; ++i) g[f * kPoseDof + i] = grad.objects[o].pose_q[f][i];
      for (int i = 0; i < 3; ++i) g[f * kPoseDof + 4 + i] = grad.objects[o].pose_t[f][i];
    }
    adam_update(p, g, opt.poses[o].m, opt.poses[o].v, rates, step, s);
    for (std::size_t f = 0; f < nf; ++f) {
      const double* r = p.data() + f * kPoseDof;
      obj.pose_track[f].q = {r[0], r[1], r[2], r[3]};
      obj.pose_track[f].t = {r[4], r[5], r[6]};
    }
  }
  if (model.net.parameter_count() > 0) {
    const std::vector<double> rates(model.net.parameter_count(), lr.net);
    adam_update(model.net.parameters(), grad.net, opt.net.m, opt.net.v, rates, step, s);
  }
  return true;
}

// ---------------------------------------------------------------------------
// Density control

void DensityStats::reset(std::size_t n) {
  grad_accum.assign(n, 0.0);
  count.assign(n, 0);
}

void DensityStats::add(std::span<const double> screen_grad, std::span<const char> visible) {
  if (screen_grad.size() != grad_accum.size() || visible.size() != grad_accum.size())
    throw Error(ErrorCode::ShapeMismatch, "screen gradients do not match the statistics");
  for (std::size_t i = 0; i < grad_accum.size(); ++i)
    if (visible[i]) {
      grad_accum[i] += screen_grad[i];
      ++count[i];
    }
}

namespace {

enum class Action : std::uint8_t { Keep, Clone, Split };

struct SetRef {
  std::vector<Surfel2D>* surfels;
  std::vector<TriangleBinding>* bindings;  // null for objects
  Moments* moments;
  std::vector<double> world_max_scale;
  std::size_t offset;
};

Vec3 tangent_sample(const Surfel2D& s, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  const Mat3 R = s.rotation.to_matrix();
  const Vec2 sc = s.scale();
  return R * Vec3(sc[0] * n01(rng), sc[1] * n01(rng), 0.0);
}

}  // namespace

DensityReport density_control(SceneModel& model, OptimizerState& opt, DensityStats& stats,
                              std::span<const TemplateSequence> templates,
                              const TrainConfig& config, double extent, std::mt19937_64& rng,
                              bool densify) {
  DensityReport report;
  const std::size_t total = model.surfel_count();
  if (stats.grad_accum.size() != total) stats.reset(total);
  if (templates.size() != model.hands.size())
    throw Error(ErrorCode::LengthMismatch, "one template sequence is needed per hand");

  std::vector<SetRef> sets;
  std::size_t offset = 0;
  for (std::size_t h = 0; h < model.hands.size(); ++h) {
    HandModel& hand = model.hands[h];
    SetRef ref{&hand.local, &hand.bindings, &opt.hands[h], {}, offset};
    const auto frames = templates[h].triangle_frames(0);
    for (std::size_t i = 0; i < hand.local.size(); ++i)
      ref.world_max_scale.push_back(frames[hand.bindings[i].triangle_id].s *
                                    hand.local[i].scale().maxCoeff());
    offset += hand.local.size();
    sets.push_back(std::move(ref));
  }
  for (std::size_t o = 0; o < model.objects.size(); ++o) {
    ObjectModel& obj = model.objects[o];
    SetRef ref{&obj.surfels, nullptr, &opt.objects[o], {}, offset};
    for (const auto& s : obj.surfels) ref.world_max_scale.push_back(s.scale().maxCoeff());
    offset += obj.surfels.size();
    sets.push_back(std::move(ref));
  }

  std::vector<std::vector<Action>> actions(sets.size());
  for (std::size_t k = 0; k < sets.size(); ++k) actions[k].assign(sets[k].surfels->size(), Action::Keep);

  if (densify) {
    struct Candidate {
      double grad;
      std::size_t set, index;
    };
    std::vector<Candidate> cands;
    for (std::size_t k = 0; k < sets.size(); ++k)
      for (std::size_t i = 0; i < sets[k].surfels->size(); ++i) {
        const std::size_t g = sets[k].offset + i;
        if (stats.count[g] == 0) continue;
        const double mean = stats.grad_accum[g] / stats.count[g];
        if (mean > config.densify_grad_threshold) cands.push_back({mean, k, i});
      }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.grad > b.grad; });
    const std::size_t budget = config.max_surfels > total ? config.max_surfels - total : 0;
    if (cands.size() > budget) {
      cands.resize(budget);
      report.capped = true;
    }
    for (const Candidate& c : cands) {
      const bool small = sets[c.set].world_max_scale[c.index] <= config.dense_percent * extent;
      actions[c.set][c.index] = small ? Action::Clone : Action::Split;
      (small ? report.cloned : report.split) += 1;
    }
  }

  const double log_shrink = std::log(1.6);
  for (std::size_t k = 0; k < sets.size(); ++k) {
    SetRef& ref = sets[k];
    auto& surfels = *ref.surfels;
    std::vector<Surfel2D> kept, extra;
    std::vector<TriangleBinding> kept_b, extra_b;
    std::vector<double> km, kv;
    std::size_t row = 0;
    for (std::size_t i = 0; i < surfels.size(); ++i) {
      const Surfel2D& s = surfels[i];
      const std::size_t dof = surfel_dof(s);
      const Action a = actions[k][i];
      if (a == Action::Split) {
        for (int c = 0; c < 2; ++c) {
          Surfel2D child = s;
          child.position = s.position + tangent_sample(s, rng);
          child.log_scale = s.log_scale.array() - log_shrink;
          extra.push_back(std::move(child));
          if (ref.bindings) extra_b.push_back((*ref.bindings)[i]);
        }
      } else {
        kept.push_back(s);
        if (ref.bindings) kept_b.push_back((*ref.bindings)[i]);
        km.insert(km.end(), ref.moments->m.begin() + row, ref.moments->m.begin() + row + dof);
        kv.insert(kv.end(), ref.moments->v.begin() + row, ref.moments->v.begin() + row + dof);
        if (a == Action::Clone) {
          Surfel2D child = s;
          // Hand clones are jittered inside the parent footprint so the
          // pair does not stay locked together on the same triangle.
          if (ref.bindings) child.position = s.position + tangent_sample(s, rng);
          extra.push_back(std::move(child));
          if (ref.bindings) extra_b.push_back((*ref.bindings)[i]);
        }
      }
      row += dof;
    }
    for (std::size_t i = 0; i < extra.size(); ++i) {
      km.resize(km.size() + surfel_dof(extra[i]), 0.0);
      kv.resize(kv.size() + surfel_dof(extra[i]), 0.0);
      kept.push_back(std::move(extra[i]));
      if (ref.bindings) kept_b.push_back(extra_b[i]);
    }
    // Prune.
    std::vector<Surfel2D> out;
    std::vector<TriangleBinding> out_b;
    std::vector<double> om, ov;
    row = 0;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      const std::size_t dof = surfel_dof(kept[i]);
      if (kept[i].opacity() < config.prune_opacity) {
        ++report.pruned;
      } else {
        om.insert(om.end(), km.begin() + row, km.begin() + row + dof);
        ov.insert(ov.end(), kv.begin() + row, kv.begin() + row + dof);
        out.push_back(std::move(kept[i]));
        if (ref.bindings) out_b.push_back(kept_b[i]);
      }
      row += dof;
    }
    surfels = std::move(out);
    if (ref.bindings) *ref.bindings = std::move(out_b);
    ref.moments->m = std::move(om);
    ref.moments->v = std::move(ov);
  }
  stats.reset(model.surfel_count());
  return report;
}

// ---------------------------------------------------------------------------
// Training

double scene_extent(std::span<const Camera> cameras) {
  if (cameras.empty()) return 1.0;
  Vec3 c = Vec3::Zero();
  for (const Camera& cam : cameras) c += cam.center();
  c /= static_cast<double>(cameras.size());
  double r = 0.0;
  for (const Camera& cam : cameras) r = std::max(r, (cam.center() - c).norm());
  return r > 0.0 ? 1.1 * r : 1.0;
}

Camera subsample_camera(const Camera& camera, int factor) {
  if (factor == 1) return camera;
  Camera c = camera;
  const double f = factor;
  c.fx /= f;
  c.fy /= f;
  c.cx = (camera.cx - 0.5 * (f - 1.0)) / f;
  c.cy = (camera.cy - 0.5 * (f - 1.0)) / f;
  c.width = camera.width / factor;
  c.height = camera.height / factor;
  c.cx = std::clamp(c.cx, 0.0, c.width - 1e-9);
  c.cy = std::clamp(c.cy, 0.0, c.height - 1e-9);
  return c;
}

namespace {

double foreground_gray(const SceneBundle& b) {
  double sum = 0.0, n = 0.0;
  for (std::size_t v = 0; v < b.images.size(); ++v) {
    if (b.images[v].empty()) continue;
    const Image& img = b.images[v][0];
    const Image& m = b.masks[v][0];
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const double w = m.at(x, y);
        for (int c = 0; c < img.channels; ++c) sum += w * img.at(x, y, c);
        n += w * img.channels;
      }
  }
  return n > 0.0 ? sum / n : 0.5;
}

std::vector<int> training_views(const SceneBundle& b, const TrainConfig& c) {
  std::vector<int> views;
  for (int v = 0; v < static_cast<int>(b.cameras.size()); ++v)
    if (std::find(c.holdout_views.begin(), c.holdout_views.end(), v) == c.holdout_views.end())
      views.push_back(v);
  if (views.empty()) throw Error(ErrorCode::InvalidArgument, "every view is held out");
  return views;
}

}  // namespace

TrainState init_train_state(const SceneBundle& bundle, const TrainConfig& config) {
  config.validate();
  TrainState st;
  st.rng.seed(config.seed);
  st.extent = scene_extent(bundle.cameras);
  SceneModel& m = st.model;
  m.sh_degree = config.sh_degree;
  m.use_refinement = config.use_refinement;
  const double gray = foreground_gray(bundle);
  for (const auto& tmpl : bundle.hands)
    m.hands.push_back(
        init_hand_surfels(tmpl, 0, config.init_k, config.init_variance, st.rng, config.sh_degree, gray)
            .hand);
  for (const auto& seed : bundle.objects)
    m.objects.push_back(init_object_surfels(seed.points, seed.colors, bundle.frame_count, config.sh_degree));
  if (config.use_refinement) m.net = RefinementNet(config.net, config.seed ^ 0x9e3779b97f4a7c15ull);
  if (m.surfel_count() > config.max_surfels)
    throw Error(ErrorCode::InvalidArgument,
                "initial surfel count " + std::to_string(m.surfel_count()) + " exceeds the cap");
  st.opt = OptimizerState::zeros_like(m);
  st.stats.reset(m.surfel_count());
  return st;
}

void train(const SceneBundle& bundle, const TrainConfig& config, TrainState& state,
           std::vector<LogRow>& log, const std::function<void(const LogRow&)>& on_row) {
  config.validate();
  if (state.iteration >= config.iterations) return;
  const auto views = training_views(bundle, config);
  const int f = config.image_subsample;
  std::vector<Camera> cams;
  for (const Camera& c : bundle.cameras) cams.push_back(subsample_camera(c, f));
  std::vector<std::vector<Image>> targets(bundle.cameras.size());
  for (int v : views)
    for (std::size_t t = 0; t < bundle.frame_count; ++t)
      targets[v].push_back(masked_target(downsample(bundle.images[v][t], f),
                                         downsample(bundle.masks[v][t], f), config.background));
  RenderSettings rs;
  rs.background = config.background;
  rs.sh_degree = state.model.sh_degree;

  struct VoxelCache {
    std::int64_t at = -1;
    std::vector<std::uint32_t> surfels;
  };
  std::vector<VoxelCache> cache(bundle.frame_count);
  const std::int64_t densify_until =
      static_cast<std::int64_t>(std::floor(config.densify_until * config.iterations));
  std::uniform_int_distribution<std::size_t> pick_view(0, views.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_frame(0, bundle.frame_count - 1);
  SceneModel& model = state.model;
  const LossWeights& w = config.weights;
  if (state.stats.grad_accum.size() != model.surfel_count()) state.stats.reset(model.surfel_count());

  for (; state.iteration < config.iterations; ++state.iteration) {
    const std::int64_t it = state.iteration;
    const int v = views[pick_view(state.rng)];
    const std::size_t t = pick_frame(state.rng);
    const Image& target = targets[v][t];
    const Camera& cam = cams[v];

    const ComposedScene sc = compose_scene(model, bundle.hands, t);
    const RenderOutput out = render(sc.surfels, cam, rs);
    LossComponents lc;
    RenderGradients rg;
    ImageLoss photo = loss_photometric(out.color, target, w.dssim);
    lc.color = photo.value;
    rg.color = std::move(photo.grad);
    lc.distortion = loss_distortion(out, &rg.distortion);
    for (double& g : rg.distortion.data) g *= w.distortion;
    lc.normal = loss_normal(out, cam, &rg.normal, &rg.depth);
    for (double& g : rg.normal.data) g *= w.normal;
    for (double& g : rg.depth.data) g *= w.normal;
    GradientBuffer gb = render_backward(sc.surfels, cam, rs, rg);

    if (config.use_isotropic) {
      VoxelCache& vc = cache[t];
      if (vc.at < 0 || it - vc.at >= config.contact_refresh) {
        std::vector<Vec3> pos;
        pos.reserve(sc.surfels.size());
        for (const auto& s : sc.surfels) pos.push_back(s.position);
        vc.surfels = label_contact_voxels(pos, sc.tags, config.tau).surfels;
        vc.at = it;
      }
      lc.isotropic = loss_isotropic(sc.surfels, vc.surfels, w.ratio_target, w.isotropic, gb.surfels);
    }

    SceneGrad grad = SceneGrad::zeros_like(model);
    compose_backward(model, sc, gb.surfels, grad);
    const RiggingLoss rig = loss_rigging(model.hands, w, &grad);
    lc.position = rig.position;
    lc.scale = rig.scale;
    const double total = total_loss(lc, w);

    state.stats.add(gb.screen_grad, gb.visible);
    adam_step(model, state.opt, grad, learning_rates(config, it, state.extent));

    if (it % config.log_interval == 0 || it + 1 == config.iterations) {
      LogRow row;
      row.iteration = it;
      row.components = lc;
      row.total = total;
      for (const auto& h : model.hands) row.hand_surfels += h.local.size();
      for (const auto& o : model.objects) row.object_surfels += o.surfels.size();
      row.psnr = psnr(out.color, target);
      log.push_back(row);
      if (on_row) on_row(row);
    }

    const std::int64_t done = it + 1;
    if (done >= config.densify_from && done <= densify_until && done % config.densify_interval == 0) {
      density_control(model, state.opt, state.stats, bundle.hands, config, state.extent, state.rng);
      for (auto& c : cache) c.at = -1;
    }
  }
  if (config.final_prune)
    density_control(model, state.opt, state.stats, bundle.hands, config, state.extent, state.rng,
                    false);
}

void write_log_csv(const std::filesystem::path& path, std::span<const LogRow> log) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::MissingFile, "cannot write " + path.string());
  os << "iteration,total,L_c,L_d,L_n,L_p,L_s,L_i,hand_surfels,object_surfels,psnr_train\n";
  os << std::setprecision(17);
  for (const LogRow& r : log)
    os << r.iteration << ',' << r.total << ',' << r.components.color << ','
       << r.components.distortion << ',' << r.components.normal << ',' << r.components.position
       << ',' << r.components.scale << ',' << r.components.isotropic << ',' << r.hand_surfels
       << ',' << r.object_surfels << ',' << r.psnr << '\n';
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kMagic[8] = {'S', 'F', 'C', 'A', 'P', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_moments(std::ostream& os, const Moments& m) {
  write_doubles(os, m.m);
  write_doubles(os, m.v);
}

Moments read_moments(std::istream& is) {
  Moments m;
  m.m = read_doubles(is);
  m.v = read_doubles(is);
  if (m.m.size() != m.v.size()) throw Error(ErrorCode::ParseError, "moment arrays differ in size");
  return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainState& st) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::MissingFile, "cannot write " + path.string());
  os.write(kMagic, sizeof(kMagic));
  write_le<std::uint32_t>(os, kCheckpointVersion);
  write_le<std::int64_t>(os, st.iteration);
  write_le<double>(os, st.extent);
  std::ostringstream rng;
  rng << st.rng;
  const std::string r = rng.str();
  write_le<std::uint64_t>(os, r.size());
  os.write(r.data(), static_cast<std::streamsize>(r.size()));
  st.model.write(os);
  write_le<std::int64_t>(os, st.opt.step);
  write_le<std::uint64_t>(os, st.opt.hands.size());
  for (const auto& m : st.opt.hands) write_moments(os, m);
  write_le<std::uint64_t>(os, st.opt.objects.size());
  for (std::size_t o = 0; o < st.opt.objects.size(); ++o) {
    write_moments(os, st.opt.objects[o]);
    write_moments(os, st.opt.poses[o]);
  }
  write_moments(os, st.opt.net);
  write_doubles(os, st.stats.grad_accum);
  std::vector<double> counts(st.stats.count.begin(), st.stats.count.end());
  write_doubles(os, counts);
  if (!os) throw Error(ErrorCode::MissingFile, "failed writing " + path.string());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::MissingFile, "cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || !std::equal(magic, magic + 8, kMagic))
    throw Error(ErrorCode::ParseError, path.string() + " is not a checkpoint");
  const auto version = read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::ParseError, "unsupported checkpoint version " + std::to_string(version));
  TrainState st;
  st.iteration = read_le<std::int64_t>(is);
  st.extent = read_le<double>(is);
  const auto rlen = read_le<std::uint64_t>(is);
  if (rlen > (1u << 20)) throw Error(ErrorCode::ParseError, "bad RNG state length");
  std::string r(rlen, '\0');
  if (!is.read(r.data(), static_cast<std::streamsize>(rlen)))
    throw Error(ErrorCode::ParseError, "truncated checkpoint");
  std::istringstream rs(r);
  rs >> st.rng;
  if (!rs) throw Error(ErrorCode::ParseError, "bad RNG state");
  st.model = SceneModel::read(is);
  st.opt.step = read_le<std::int64_t>(is);
  const auto nh = read_le<std::uint64_t>(is);
  if (nh != st.model.hands.size()) throw Error(ErrorCode::ParseError, "hand moment count mismatch");
  for (std::uint64_t h = 0; h < nh; ++h) st.opt.hands.push_back(read_moments(is));
  const auto no = read_le<std::uint64_t>(is);
  if (no != st.model.objects.size()) throw Error(ErrorCode::ParseError, "object moment count mismatch");
  for (std::uint64_t o = 0; o < no; ++o) {
    st.opt.objects.push_back(read_moments(is));
    st.opt.poses.push_back(read_moments(is));
  }
  st.opt.net = read_moments(is);
  st.stats.grad_accum = read_doubles(is);
  const auto counts = read_doubles(is);
  st.stats.count.assign(counts.begin(), counts.end());
  // Moment shapes must track the parameters.
  const OptimizerState ref = OptimizerState::zeros_like(st.model);
  for (std::size_t h = 0; h < nh; ++h)
    if (ref.hands[h].m.size() != st.opt.hands[h].m.size())
      throw Error(ErrorCode::ParseError, "hand moments do not match parameters");
  for (std::size_t o = 0; o < no; ++o)
    if (ref.objects[o].m.size() != st.opt.objects[o].m.size() ||
        ref.poses[o].m.size() != st.opt.poses[o].m.size())
      throw Error(ErrorCode::ParseError, "object moments do not match parameters");
  if (ref.net.m.size() != st.opt.net.m.size())
    throw Error(ErrorCode::ParseError, "net moments do not match parameters");
  return st;
}

// ---------------------------------------------------------------------------
// Evaluation

ImageMetrics evaluate_views(const SceneBundle& bundle, const SceneModel& model,
                            std::span<const int> views, const Vec3& background, int subsample) {
  ImageMetrics m;
  RenderSettings rs;
  rs.background = background;
  rs.sh_degree = model.sh_degree;
  for (int v : views) {
    if (v < 0 || static_cast<std::size_t>(v) >= bundle.cameras.size())
      throw Error(ErrorCode::InvalidArgument, "view index out of range");
    const Camera cam = subsample_camera(bundle.cameras[v], subsample);
    for (std::size_t t = 0; t < bundle.frame_count; ++t) {
      const Image target = masked_target(downsample(bundle.images[v][t], subsample),
                                         downsample(bundle.masks[v][t], subsample), background);
      const ComposedScene sc = compose_scene(model, bundle.hands, t);
      const RenderOutput out = render(sc.surfels, cam, rs);
      m.psnr += psnr(out.color, target);
      m.ssim += ssim(out.color, target);
      ++m.images;
    }
  }
  if (m.images > 0) {
    m.psnr /= static_cast<double>(m.images);
    m.ssim /= static_cast<double>(m.images);
  }
  return m;
}

std::vector<HandContact> infer_contact(const SceneModel& model,
                                       std::span<const TemplateSequence> templates, double tau) {
  std::vector<HandContact> out(model.hands.size());
  const std::size_t frames = templates.empty() ? 0 : templates[0].frames.size();
  for (std::size_t t = 0; t < frames; ++t) {
    const ComposedScene sc = compose_scene(model, templates, t);
    std::vector<Vec3> objects;
    std::vector<std::vector<Vec3>> hands(model.hands.size());
    for (std::size_t i = 0; i < sc.surfels.size(); ++i) {
      if (sc.tags[i].is_hand())
        hands[sc.tags[i].group].push_back(sc.surfels[i].position);
      else
        objects.push_back(sc.surfels[i].position);
    }
    for (std::size_t h = 0; h < hands.size(); ++h)
      out[h].frames.push_back(instantaneous_contact(hands[h], objects, tau));
  }
  for (std::size_t h = 0; h < out.size(); ++h) {
    if (out[h].frames.empty()) continue;
    out[h].accumulated = accumulate(out[h].frames);
    std::vector<std::uint32_t> ids;
    for (const auto& b : model.hands[h].bindings) ids.push_back(b.triangle_id);
    out[h].accumulated.vertex_labels =
        project_to_template(out[h].accumulated.ever_contact, ids, templates[h].topology.faces,
                            templates[h].topology.vertex_count);
  }
  return out;
}

}  // namespace surfcap
