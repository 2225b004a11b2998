// SPDX-License-Identifier: Apache-2.0
#include "surfcap/model.hpp"

#include "surfcap/binary_io.hpp"
#include "surfcap/error.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace surfcap {

void Topology::validate() const {
  for (std::size_t f = 0; f < faces.size(); ++f)
    for (std::uint32_t v : faces[f])
      if (v >= vertex_count)
        throw Error(ErrorCode::TopologyOutOfRange,
                    "face " + std::to_string(f) + " references vertex " + std::to_string(v) +
                        " of " + std::to_string(vertex_count));
}

void TemplateSequence::validate() const {
  topology.validate();
  if (frames.empty()) throw Error(ErrorCode::EmptySequence, "template has no frames");
  for (std::size_t t = 0; t < frames.size(); ++t) {
    if (frames[t].vertices.size() != topology.vertex_count)
      throw Error(ErrorCode::ShapeMismatch,
                  "template frame " + std::to_string(t) + " has " +
                      std::to_string(frames[t].vertices.size()) + " vertices, topology has " +
                      std::to_string(topology.vertex_count));
    for (const Vec3& v : frames[t].vertices)
      if (!v.allFinite())
        throw Error(ErrorCode::NonFinite, "template frame " + std::to_string(t) + " has NaN");
  }
}

std::vector<TriangleFrame> TemplateSequence::triangle_frames(std::size_t t) const {
  if (t >= frames.size())
    throw Error(ErrorCode::FrameOutOfRange, "template frame " + std::to_string(t) + " missing");
  const auto& vs = frames[t].vertices;
  std::vector<TriangleFrame> out(topology.faces.size());
  for (std::size_t f = 0; f < out.size(); ++f) {
    const Face& face = topology.faces[f];
    const Vec3 &a = vs[face[0]], &b = vs[face[1]], &c = vs[face[2]];
    // Degenerate faces keep s = 0 and fail only if something is bound to them.
    if (triangle_area(a, b, c) < kMinTriangleArea)
      out[f].s = 0.0;
    else
      out[f] = triangle_frame(a, b, c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Refinement network

RefinementNet::RefinementNet(const RefinementConfig& config, std::uint64_t seed)
    : config_(config) {
  if (config.layers < 1 || config.hidden < 1 || config.lx < 1 || config.lr < 1 ||
      config.ls < 1 || config.lj < 1)
    throw Error(ErrorCode::InvalidArgument, "refinement net sizes must be positive");
  const auto views = layout();
  params_.assign(views.back().offset + static_cast<std::size_t>(views.back().out) *
                                           (views.back().in + 1),
                 0.0);
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < views.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(views[l].in));
    std::uniform_real_distribution<double> u(-bound, bound);
    const std::size_t n = static_cast<std::size_t>(views[l].out) * (views[l].in + 1);
    for (std::size_t i = 0; i < n; ++i) params_[views[l].offset + i] = u(rng);
  }
  // The output layer stays zero so the initial offsets vanish.
}

int RefinementNet::input_dim() const {
  return 2 * (3 * config_.lx + 4 * config_.lr + 2 * config_.ls + config_.lj);
}

std::vector<RefinementNet::LayerView> RefinementNet::layout() const {
  std::vector<LayerView> views;
  std::size_t offset = 0;
  int in = input_dim();
  for (int l = 0; l <= config_.layers; ++l) {
    const int out = l == config_.layers ? kOutputDim : config_.hidden;
    views.push_back({offset, in, out});
    offset += static_cast<std::size_t>(out) * (in + 1);
    in = out;
  }
  return views;
}

void RefinementNet::encode(const Vec3& x, const Vec4& r, const Vec2& log_scale, double t_norm,
                           std::span<double> out) const {
  std::size_t k = 0;
  auto put = [&](std::span<const double> p, int levels) {
    const std::size_t n = 2 * levels * p.size();
    posenc_into(p, levels, out.subspan(k, n));
    k += n;
  };
  put({x.data(), 3}, config_.lx);
  put({r.data(), 4}, config_.lr);
  put({log_scale.data(), 2}, config_.ls);
  put({&t_norm, 1}, config_.lj);
}

Eigen::MatrixXd RefinementNet::forward(const Eigen::MatrixXd& input, Cache* cache) const {
  const auto views = layout();
  if (input.rows() != input_dim())
    throw Error(ErrorCode::ShapeMismatch, "refinement input has wrong dimension");
  if (cache) {
    cache->activations.clear();
    cache->activations.push_back(input);
  }
  Eigen::MatrixXd a = input;
  for (std::size_t l = 0; l < views.size(); ++l) {
    const LayerView& lv = views[l];
    // Owned copies: Eigen's SIMD kernels round differently depending on the
    // alignment of mapped memory, which would break run-to-run determinism.
    const Eigen::MatrixXd W = Eigen::Map<const Eigen::MatrixXd>(params_.data() + lv.offset, lv.out, lv.in);
    const Eigen::VectorXd b =
        Eigen::Map<const Eigen::VectorXd>(params_.data() + lv.offset + lv.out * lv.in, lv.out);
    Eigen::MatrixXd z = W * a;
    z.colwise() += b;
    if (l + 1 == views.size()) return z;
    a = z.cwiseMax(0.0);
    if (cache) cache->activations.push_back(a);
  }
  return a;
}

void RefinementNet::backward(const Cache& cache, const Eigen::MatrixXd& grad_output,
                             std::span<double> grad) const {
  const auto views = layout();
  if (grad.size() != params_.size())
    throw Error(ErrorCode::ShapeMismatch, "refinement gradient buffer has wrong size");
  Eigen::MatrixXd g = grad_output;
  for (std::size_t l = views.size(); l-- > 0;) {
    const LayerView& lv = views[l];
    const Eigen::MatrixXd& a = cache.activations[l];
    Eigen::Map<Eigen::MatrixXd> dW(grad.data() + lv.offset, lv.out, lv.in);
    Eigen::Map<Eigen::VectorXd> db(grad.data() + lv.offset + lv.out * lv.in, lv.out);
    const Eigen::MatrixXd gW = g * a.transpose();
    const Eigen::VectorXd gb = g.rowwise().sum();
    dW += gW;
    db += gb;
    if (l == 0) break;
    const Eigen::MatrixXd W = Eigen::Map<const Eigen::MatrixXd>(params_.data() + lv.offset, lv.out, lv.in);
    Eigen::MatrixXd prev = W.transpose() * g;
    g = (a.array() > 0.0).select(prev, 0.0);
  }
}

void RefinementNet::write(std::ostream& os) const {
  for (int v : {config_.layers, config_.hidden, config_.lx, config_.lr, config_.ls, config_.lj})
    write_le<std::int32_t>(os, v);
  write_doubles(os, params_);
}

RefinementNet RefinementNet::read(std::istream& is) {
  RefinementNet net;
  int* fields[] = {&net.config_.layers, &net.config_.hidden, &net.config_.lx,
                   &net.config_.lr,     &net.config_.ls,     &net.config_.lj};
  for (int* f : fields) *f = read_le<std::int32_t>(is);
  net.params_ = read_doubles(is);
  const auto views = net.layout();
  if (!net.params_.empty() && net.params_.size() !=
      views.back().offset + static_cast<std::size_t>(views.back().out) * (views.back().in + 1))
    throw Error(ErrorCode::ParseError, "refinement weights do not match the stored layout");
  return net;
}

// ---------------------------------------------------------------------------
// Rigging

Quaternion face_aligned_local_rotation() {
  // Frame column 1 is the face normal; surfel normals are local z.
  return Quaternion::from_axis_angle(Vec3::UnitX(), -std::numbers::pi / 2);
}

HandInit init_hand_surfels(const TemplateSequence& tmpl, std::size_t frame, int k, double v,
                           std::mt19937_64& rng, int sh_degree, double gray) {
  if (k < 1 || !(v >= 0.0)) throw Error(ErrorCode::InvalidArgument, "need k >= 1 and v >= 0");
  const auto frames = tmpl.triangle_frames(frame);
  HandInit out;
  out.hand.side = tmpl.side;
  std::normal_distribution<double> n01(0.0, 1.0);
  const double sd = std::sqrt(v);
  const Quaternion rot = face_aligned_local_rotation();
  const int nsh = 3 * sh_coeffs(sh_degree);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    if (frames[f].s == 0.0) {
      ++out.skipped_faces;
      continue;
    }
    for (int i = 0; i < k; ++i) {
      Surfel2D s;
      s.position = {sd * n01(rng), sd * n01(rng), sd * n01(rng)};
      s.rotation = rot;
      s.log_scale = Vec2::Constant(std::log(0.5));
      s.opacity_logit = logit(0.1);
      s.sh.assign(nsh, 0.0);
      for (int c = 0; c < 3; ++c) s.sh[c] = rgb_to_sh0(gray);
      out.hand.local.push_back(std::move(s));
      out.hand.bindings.push_back({static_cast<std::uint32_t>(f), tmpl.side});
    }
  }
  return out;
}

Surfel2D rig_to_world(const Surfel2D& local, const TriangleFrame& frame) {
  Surfel2D w = local;
  w.position = frame.s * (frame.R * local.position) + frame.T;
  w.rotation = Quaternion::from_matrix(frame.R) * local.rotation.normalized();
  w.log_scale = local.log_scale.array() + std::log(frame.s);
  return w;
}

RefinementOffsets refine(const Surfel2D& world, double t_norm, const RefinementNet& net) {
  RefinementOffsets o;
  if (net.parameter_count() == 0) return o;
  Eigen::MatrixXd in(net.input_dim(), 1);
  net.encode(world.position, world.rotation.as_vec(), world.log_scale, t_norm,
             {in.data(), static_cast<std::size_t>(in.size())});
  const Eigen::MatrixXd out = net.forward(in);
  o.dx = out.block<3, 1>(0, 0);
  o.dr = out.block<4, 1>(3, 0);
  o.ds = out.block<2, 1>(7, 0);
  return o;
}

Surfel2D apply_offsets(const Surfel2D& world, const RefinementOffsets& o) {
  Surfel2D s = world;
  s.position += o.dx;
  // Kept raw; every rotation use normalizes.
  s.rotation = Quaternion::from_vec(world.rotation.as_vec() + o.dr);
  s.log_scale += o.ds;
  return s;
}

std::vector<Surfel2D> object_to_world(const ObjectModel& obj, std::size_t t) {
  if (t >= obj.pose_track.size())
    throw Error(ErrorCode::FrameOutOfRange, "object pose track has no frame " + std::to_string(t));
  const ObjectPose& p = obj.pose_track[t];
  const Quaternion q = p.q.normalized();
  const Mat3 R = q.to_matrix();
  std::vector<Surfel2D> out;
  out.reserve(obj.surfels.size());
  for (const Surfel2D& c : obj.surfels) {
    Surfel2D w = c;
    w.position = R * c.position + p.t;
    w.rotation = q * c.rotation;
    out.push_back(std::move(w));
  }
  return out;
}

ObjectModel init_object_surfels(std::span<const Vec3> points, std::span<const Vec3> colors,
                                std::size_t frame_count, int sh_degree) {
  if (!colors.empty() && colors.size() != points.size())
    throw Error(ErrorCode::LengthMismatch, "object colors and points differ in length");
  ObjectModel obj;
  obj.pose_track.assign(std::max<std::size_t>(frame_count, 1), ObjectPose{});
  if (points.empty()) return obj;
  Vec3 centroid = Vec3::Zero();
  for (const Vec3& p : points) centroid += p;
  centroid /= static_cast<double>(points.size());
  constexpr std::size_t kNeighbours = 8;
  const int nsh = 3 * sh_coeffs(sh_degree);
  std::vector<std::pair<double, std::size_t>> d(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t j = 0; j < points.size(); ++j) d[j] = {(points[j] - points[i]).squaredNorm(), j};
    const std::size_t m = std::min(kNeighbours + 1, points.size());
    std::partial_sort(d.begin(), d.begin() + m, d.end());
    Surfel2D s;
    s.position = points[i];
    double mean3 = 0.0;
    int n3 = 0;
    Mat3 cov = Mat3::Zero();
    Vec3 mu = Vec3::Zero();
    for (std::size_t a = 0; a < m; ++a) mu += points[d[a].second];
    mu /= static_cast<double>(m);
    for (std::size_t a = 0; a < m; ++a) {
      const Vec3 e = points[d[a].second] - mu;
      cov += e * e.transpose();
      if (a >= 1 && a <= 3) {
        mean3 += std::sqrt(d[a].first);
        ++n3;
      }
    }
    Mat3 R = Mat3::Identity();
    if (m >= 3) {
      const Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
      Vec3 normal = es.eigenvectors().col(0);
      if (normal.dot(points[i] - centroid) < 0.0) normal = -normal;
      const Vec3 tangent = es.eigenvectors().col(2);
      R.col(0) = tangent;
      R.col(2) = normal;
      R.col(1) = normal.cross(tangent);
    }
    s.rotation = Quaternion::from_matrix(R);
    const double size = n3 > 0 && mean3 > 0.0 ? mean3 / n3 : 1e-3;
    s.log_scale = Vec2::Constant(std::log(size));
    s.opacity_logit = logit(0.1);
    s.sh.assign(nsh, 0.0);
    const Vec3 rgb = colors.empty() ? Vec3::Constant(0.5) : colors[i];
    for (int c = 0; c < 3; ++c) s.sh[c] = rgb_to_sh0(rgb[c]);
    obj.surfels.push_back(std::move(s));
  }
  return obj;
}

// ---------------------------------------------------------------------------
// Composition

std::size_t SceneModel::surfel_count() const {
  std::size_t n = 0;
  for (const auto& h : hands) n += h.local.size();
  for (const auto& o : objects) n += o.surfels.size();
  return n;
}

double normalized_time(std::size_t t, std::size_t frame_count) {
  if (frame_count <= 1) return 0.0;
  return static_cast<double>(t) / static_cast<double>(frame_count - 1);
}

ComposedScene compose_scene(const SceneModel& model, std::span<const TemplateSequence> templates,
                            std::size_t t) {
  if (templates.size() != model.hands.size())
    throw Error(ErrorCode::LengthMismatch, "one template sequence is needed per hand");
  std::size_t frame_count = 1;
  if (!templates.empty())
    frame_count = templates[0].frames.size();
  else if (!model.objects.empty())
    frame_count = model.objects[0].pose_track.size();

  ComposedScene sc;
  sc.t = t;
  sc.t_norm = normalized_time(t, frame_count);
  for (std::size_t h = 0; h < model.hands.size(); ++h) {
    const HandModel& hand = model.hands[h];
    sc.frames.push_back(templates[h].triangle_frames(t));
    const auto& frames = sc.frames.back();
    for (std::size_t i = 0; i < hand.local.size(); ++i) {
      const std::uint32_t f = hand.bindings[i].triangle_id;
      if (f >= frames.size())
        throw Error(ErrorCode::TopologyOutOfRange, "surfel bound to a missing face");
      if (frames[f].s == 0.0)
        throw Error(ErrorCode::DegenerateTriangle,
                    "face " + std::to_string(f) + " is degenerate at frame " + std::to_string(t));
      sc.surfels.push_back(rig_to_world(hand.local[i], frames[f]));
      sc.rig_rotation.push_back(Quaternion::from_matrix(frames[f].R));
      sc.tags.push_back({hand.side, static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(i)});
    }
  }
  sc.hand_count = sc.surfels.size();

  if (model.use_refinement && model.net.parameter_count() > 0 && sc.hand_count > 0) {
    const RefinementNet& net = model.net;
    Eigen::MatrixXd in(net.input_dim(), static_cast<Eigen::Index>(sc.hand_count));
    for (std::size_t i = 0; i < sc.hand_count; ++i) {
      const Surfel2D& s = sc.surfels[i];
      net.encode(s.position, s.rotation.as_vec(), s.log_scale, sc.t_norm,
                 {in.col(static_cast<Eigen::Index>(i)).data(), static_cast<std::size_t>(in.rows())});
    }
    const Eigen::MatrixXd out = net.forward(in, &sc.net_cache);
    for (std::size_t i = 0; i < sc.hand_count; ++i) {
      const auto c = out.col(static_cast<Eigen::Index>(i));
      RefinementOffsets o;
      o.dx = c.segment<3>(0);
      o.dr = c.segment<4>(3);
      o.ds = c.segment<2>(7);
      sc.surfels[i] = apply_offsets(sc.surfels[i], o);
    }
  }

  for (std::size_t o = 0; o < model.objects.size(); ++o) {
    auto world = object_to_world(model.objects[o], t);
    for (std::size_t i = 0; i < world.size(); ++i) {
      sc.surfels.push_back(std::move(world[i]));
      sc.tags.push_back({SourceKind::Object, static_cast<std::uint32_t>(o), static_cast<std::uint32_t>(i)});
    }
  }
  return sc;
}

SceneGrad SceneGrad::zeros_like(const SceneModel& model) {
  SceneGrad g;
  for (const auto& h : model.hands) {
    auto& v = g.hands.emplace_back();
    v.reserve(h.local.size());
    for (const auto& s : h.local) v.emplace_back(s.sh.size());
  }
  for (const auto& o : model.objects) {
    ObjectGrad og;
    for (const auto& s : o.surfels) og.surfels.emplace_back(s.sh.size());
    og.pose_q.assign(o.pose_track.size(), Vec4::Zero());
    og.pose_t.assign(o.pose_track.size(), Vec3::Zero());
    g.objects.push_back(std::move(og));
  }
  g.net.assign(model.net.parameter_count(), 0.0);
  return g;
}

void compose_backward(const SceneModel& model, const ComposedScene& scene,
                      std::span<const SurfelGrad> world_grads, SceneGrad& out) {
  if (world_grads.size() != scene.surfels.size())
    throw Error(ErrorCode::LengthMismatch, "gradient count differs from composed scene");
  const bool refined = !scene.net_cache.activations.empty();
  Eigen::MatrixXd net_grad;
  if (refined) net_grad.setZero(RefinementNet::kOutputDim, static_cast<Eigen::Index>(scene.hand_count));

  for (std::size_t i = 0; i < scene.hand_count; ++i) {
    const SurfelTag& tag = scene.tags[i];
    const SurfelGrad& g = world_grads[i];
    const Surfel2D& local = model.hands[tag.group].local[tag.index];
    const TriangleFrame& fr =
        scene.frames[tag.group][model.hands[tag.group].bindings[tag.index].triangle_id];
    SurfelGrad& dst = out.hands[tag.group][tag.index];
    if (refined) {
      auto c = net_grad.col(static_cast<Eigen::Index>(i));
      c.segment<3>(0) = g.position;
      c.segment<4>(3) = g.rotation;
      c.segment<2>(7) = g.log_scale;
    }
    dst.position += fr.s * (fr.R.transpose() * g.position);
    const Vec4 g_unit = quat_left_mul(scene.rig_rotation[i]).transpose() * g.rotation;
    dst.rotation += normalize_vjp(local.rotation.as_vec(), g_unit);
    dst.log_scale += g.log_scale;
    dst.opacity_logit += g.opacity_logit;
    for (std::size_t k = 0; k < dst.sh.size(); ++k) dst.sh[k] += g.sh[k];
  }
  if (refined) model.net.backward(scene.net_cache, net_grad, out.net);

  for (std::size_t i = scene.hand_count; i < scene.surfels.size(); ++i) {
    const SurfelTag& tag = scene.tags[i];
    const SurfelGrad& g = world_grads[i];
    const ObjectModel& obj = model.objects[tag.group];
    const Surfel2D& c = obj.surfels[tag.index];
    const ObjectPose& pose = obj.pose_track[scene.t];
    const Vec4 q_raw = pose.q.as_vec();
    const Quaternion q = pose.q.normalized();
    const Mat3 R = q.to_matrix();
    ObjectGrad& og = out.objects[tag.group];
    SurfelGrad& dst = og.surfels[tag.index];
    dst.position += R.transpose() * g.position;
    og.pose_t[scene.t] += g.position;
    og.pose_q[scene.t] += rotation_from_raw_vjp(q_raw, g.position * c.position.transpose());
    dst.rotation += quat_left_mul(q).transpose() * g.rotation;
    og.pose_q[scene.t] +=
        normalize_vjp(q_raw, quat_right_mul(c.rotation).transpose() * g.rotation);
    dst.log_scale += g.log_scale;
    dst.opacity_logit += g.opacity_logit;
    for (std::size_t k = 0; k < dst.sh.size(); ++k) dst.sh[k] += g.sh[k];
  }
}

// ---------------------------------------------------------------------------
// Flat parameter views

void surfel_to_row(const Surfel2D& s, std::span<double> row) {
  for (int i = 0; i < 3; ++i) row[i] = s.position[i];
  row[3] = s.rotation.w;
  row[4] = s.rotation.x;
  row[5] = s.rotation.y;
  row[6] = s.rotation.z;
  row[7] = s.log_scale[0];
  row[8] = s.log_scale[1];
  row[9] = s.opacity_logit;
  std::copy(s.sh.begin(), s.sh.end(), row.begin() + kSurfelFixedDof);
}

void row_to_surfel(std::span<const double> row, Surfel2D& s) {
  for (int i = 0; i < 3; ++i) s.position[i] = row[i];
  s.rotation = {row[3], row[4], row[5], row[6]};
  s.log_scale = {row[7], row[8]};
  s.opacity_logit = row[9];
  std::copy(row.begin() + kSurfelFixedDof, row.begin() + kSurfelFixedDof + s.sh.size(), s.sh.begin());
}

void grad_to_row(const SurfelGrad& g, std::span<double> row) {
  for (int i = 0; i < 3; ++i) row[i] = g.position[i];
  for (int i = 0; i < 4; ++i) row[3 + i] = g.rotation[i];
  row[7] = g.log_scale[0];
  row[8] = g.log_scale[1];
  row[9] = g.opacity_logit;
  std::copy(g.sh.begin(), g.sh.end(), row.begin() + kSurfelFixedDof);
}

std::vector<double> flatten_params(const SceneModel& model) {
  std::vector<double> out;
  auto put_surfels = [&](const std::vector<Surfel2D>& ss) {
    for (const Surfel2D& s : ss) {
      const std::size_t k = out.size();
      out.resize(k + surfel_dof(s));
      surfel_to_row(s, std::span<double>(out).subspan(k));
    }
  };
  for (const auto& h : model.hands) put_surfels(h.local);
  for (const auto& o : model.objects) {
    put_surfels(o.surfels);
    for (const ObjectPose& p : o.pose_track) {
      out.insert(out.end(), {p.q.w, p.q.x, p.q.y, p.q.z, p.t[0], p.t[1], p.t[2]});
    }
  }
  const auto net = model.net.parameters();
  out.insert(out.end(), net.begin(), net.end());
  return out;
}

void assign_params(SceneModel& model, std::span<const double> flat) {
  std::size_t k = 0;
  auto take = [&](std::size_t n) {
    if (k + n > flat.size()) throw Error(ErrorCode::ShapeMismatch, "flat parameter vector too short");
    auto s = flat.subspan(k, n);
    k += n;
    return s;
  };
  for (auto& h : model.hands)
    for (Surfel2D& s : h.local) row_to_surfel(take(surfel_dof(s)), s);
  for (auto& o : model.objects) {
    for (Surfel2D& s : o.surfels) row_to_surfel(take(surfel_dof(s)), s);
    for (ObjectPose& p : o.pose_track) {
      const auto r = take(kPoseDof);
      p.q = {r[0], r[1], r[2], r[3]};
      p.t = {r[4], r[5], r[6]};
    }
  }
  const auto net = take(model.net.parameter_count());
  std::copy(net.begin(), net.end(), model.net.parameters().begin());
  if (k != flat.size()) throw Error(ErrorCode::ShapeMismatch, "flat parameter vector too long");
}

std::vector<double> flatten_grad(const SceneGrad& grad) {
  std::vector<double> out;
  auto put = [&](const std::vector<SurfelGrad>& gs) {
    for (const SurfelGrad& g : gs) {
      const std::size_t k = out.size();
      out.resize(k + kSurfelFixedDof + g.sh.size());
      grad_to_row(g, std::span<double>(out).subspan(k));
    }
  };
  for (const auto& h : grad.hands) put(h);
  for (const auto& o : grad.objects) {
    put(o.surfels);
    for (std::size_t f = 0; f < o.pose_q.size(); ++f) {
      const Vec4& q = o.pose_q[f];
      const Vec3& t = o.pose_t[f];
      out.insert(out.end(), {q[0], q[1], q[2], q[3], t[0], t[1], t[2]});
    }
  }
  out.insert(out.end(), grad.net.begin(), grad.net.end());
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

void write_surfel(std::ostream& os, const Surfel2D& s) {
  for (int i = 0; i < 3; ++i) write_le(os, s.position[i]);
  for (double v : {s.rotation.w, s.rotation.x, s.rotation.y, s.rotation.z}) write_le(os, v);
  write_le(os, s.log_scale[0]);
  write_le(os, s.log_scale[1]);
  write_le(os, s.opacity_logit);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.sh.size()));
  for (double v : s.sh) write_le(os, v);
}

Surfel2D read_surfel(std::istream& is) {
  Surfel2D s;
  for (int i = 0; i < 3; ++i) s.position[i] = read_le<double>(is);
  s.rotation.w = read_le<double>(is);
  s.rotation.x = read_le<double>(is);
  s.rotation.y = read_le<double>(is);
  s.rotation.z = read_le<double>(is);
  s.log_scale[0] = read_le<double>(is);
  s.log_scale[1] = read_le<double>(is);
  s.opacity_logit = read_le<double>(is);
  const auto n = read_le<std::uint32_t>(is);
  if (n > 48 || n % 3 != 0) throw Error(ErrorCode::ParseError, "bad SH coefficient count");
  s.sh.resize(n);
  for (double& v : s.sh) v = read_le<double>(is);
  return s;
}

std::uint64_t read_count(std::istream& is) {
  const auto n = read_le<std::uint64_t>(is);
  if (n > (1ull << 28)) throw Error(ErrorCode::ParseError, "element count out of range");
  return n;
}

SourceKind read_kind(std::istream& is) {
  const auto k = read_le<std::uint8_t>(is);
  if (k > 2) throw Error(ErrorCode::ParseError, "bad source kind");
  return static_cast<SourceKind>(k);
}

}  // namespace

void SceneModel::write(std::ostream& os) const {
  write_le<std::int32_t>(os, sh_degree);
  write_le<std::uint8_t>(os, use_refinement ? 1 : 0);
  write_le<std::uint64_t>(os, hands.size());
  for (const HandModel& h : hands) {
    write_le<std::uint8_t>(os, static_cast<std::uint8_t>(h.side));
    write_le<std::uint64_t>(os, h.local.size());
    for (std::size_t i = 0; i < h.local.size(); ++i) {
      write_surfel(os, h.local[i]);
      write_le<std::uint32_t>(os, h.bindings[i].triangle_id);
      write_le<std::uint8_t>(os, static_cast<std::uint8_t>(h.bindings[i].owner));
    }
  }
  write_le<std::uint64_t>(os, objects.size());
  for (const ObjectModel& o : objects) {
    write_le<std::uint64_t>(os, o.surfels.size());
    for (const Surfel2D& s : o.surfels) write_surfel(os, s);
    write_le<std::uint64_t>(os, o.pose_track.size());
    for (const ObjectPose& p : o.pose_track) {
      for (double v : {p.q.w, p.q.x, p.q.y, p.q.z}) write_le(os, v);
      for (int i = 0; i < 3; ++i) write_le(os, p.t[i]);
    }
  }
  net.write(os);
}

SceneModel SceneModel::read(std::istream& is) {
  SceneModel m;
  m.sh_degree = read_le<std::int32_t>(is);
  if (m.sh_degree < 0 || m.sh_degree > 3) throw Error(ErrorCode::ParseError, "bad SH degree");
  m.use_refinement = read_le<std::uint8_t>(is) != 0;
  m.hands.resize(read_count(is));
  for (HandModel& h : m.hands) {
    h.side = read_kind(is);
    const auto n = read_count(is);
    for (std::uint64_t i = 0; i < n; ++i) {
      h.local.push_back(read_surfel(is));
      TriangleBinding b;
      b.triangle_id = read_le<std::uint32_t>(is);
      b.owner = read_kind(is);
      h.bindings.push_back(b);
    }
  }
  m.objects.resize(read_count(is));
  for (ObjectModel& o : m.objects) {
    const auto n = read_count(is);
    for (std::uint64_t i = 0; i < n; ++i) o.surfels.push_back(read_surfel(is));
    o.pose_track.resize(read_count(is));
    for (ObjectPose& p : o.pose_track) {
      p.q.w = read_le<double>(is);
      p.q.x = read_le<double>(is);
      p.q.y = read_le<double>(is);
      p.q.z = read_le<double>(is);
      for (int i = 0; i < 3; ++i) p.t[i] = read_le<double>(is);
    }
  }
  m.net = RefinementNet::read(is);
  return m;
}

}  // namespace surfcap
