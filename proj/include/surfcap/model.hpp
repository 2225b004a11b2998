// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "surfcap/core_geom.hpp"
#include "surfcap/surfel.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace surfcap {

using Face = std::array<std::uint32_t, 3>;

struct Topology {
  std::size_t vertex_count = 0;
  std::vector<Face> faces;

  /// Throws TopologyOutOfRange when a face references a missing vertex.
  void validate() const;
};

struct TemplateFrame {
  std::size_t t = 0;
  std::vector<Vec3> vertices;
  /// Free-form record of whatever produced the vertices (pose/shape fit).
  std::string provenance;
};

/// A tracked hand mesh: fixed topology, one vertex buffer per frame.
struct TemplateSequence {
  SourceKind side = SourceKind::HandRight;
  Topology topology;
  std::vector<TemplateFrame> frames;

  /// Vertex counts must match the topology and coordinates be finite.
  void validate() const;
  std::vector<TriangleFrame> triangle_frames(std::size_t t) const;
};

struct TriangleBinding {
  std::uint32_t triangle_id = 0;
  SourceKind owner = SourceKind::HandRight;
};

/// Hand surfels in triangle-local coordinates. Local rotation, log-scales and
/// positions are relative to the bound triangle's frame.
struct HandModel {
  SourceKind side = SourceKind::HandRight;
  std::vector<Surfel2D> local;
  std::vector<TriangleBinding> bindings;
};

struct ObjectPose {
  Quaternion q;
  Vec3 t = Vec3::Zero();
};

struct ObjectModel {
  std::vector<Surfel2D> surfels;  // canonical frame
  std::vector<ObjectPose> pose_track;
};

struct RefinementConfig {
  int layers = 4;  // hidden layers
  int hidden = 64;
  int lx = 8;
  int lr = 4;
  int ls = 4;
  int lj = 4;
};

/// Time-conditioned MLP producing (dx, dr, ds) offsets for rigged hand
/// surfels. Parameters live in one flat vector: per layer W (column-major,
/// out x in) followed by b.
class RefinementNet {
 public:
  static constexpr int kOutputDim = 9;

  RefinementNet() = default;
  RefinementNet(const RefinementConfig& config, std::uint64_t seed);

  const RefinementConfig& config() const { return config_; }
  int input_dim() const;
  std::size_t parameter_count() const { return params_.size(); }
  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }

  /// Writes the encoded network input for one surfel.
  void encode(const Vec3& x, const Vec4& r, const Vec2& log_scale, double t_norm,
              std::span<double> out) const;

  struct Cache {
    std::vector<Eigen::MatrixXd> activations;  // input, then each hidden output
  };

  /// Columns are samples. Returns kOutputDim x N offsets.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& input, Cache* cache = nullptr) const;
  /// Adds dL/dparams into grad (size parameter_count()).
  void backward(const Cache& cache, const Eigen::MatrixXd& grad_output,
                std::span<double> grad) const;

  void write(std::ostream& os) const;
  static RefinementNet read(std::istream& is);

 private:
  struct LayerView {
    std::size_t offset;
    int in;
    int out;
  };
  std::vector<LayerView> layout() const;

  RefinementConfig config_;
  std::vector<double> params_;
};

struct RefinementOffsets {
  Vec3 dx = Vec3::Zero();
  Vec4 dr = Vec4::Zero();
  Vec2 ds = Vec2::Zero();
};

/// Samples k surfels per non-degenerate face from N(0, v I) in local
/// coordinates. Surfel normals start aligned with the face normal.
struct HandInit {
  HandModel hand;
  std::size_t skipped_faces = 0;
};
HandInit init_hand_surfels(const TemplateSequence& tmpl, std::size_t frame, int k, double v,
                           std::mt19937_64& rng, int sh_degree = 0, double gray = 0.5);

/// Local rotation whose normal maps onto the face normal of every frame.
Quaternion face_aligned_local_rotation();

Surfel2D rig_to_world(const Surfel2D& local, const TriangleFrame& frame);

/// Offsets for one surfel; encoding inputs are treated as constants.
RefinementOffsets refine(const Surfel2D& world, double t_norm, const RefinementNet& net);
Surfel2D apply_offsets(const Surfel2D& world, const RefinementOffsets& offsets);

/// Throws FrameOutOfRange when t is not covered by the pose track.
std::vector<Surfel2D> object_to_world(const ObjectModel& obj, std::size_t t);

/// Surfels at the seed points, oriented by local PCA and sized by the mean
/// distance to the three nearest neighbours.
ObjectModel init_object_surfels(std::span<const Vec3> points, std::span<const Vec3> colors,
                                std::size_t frame_count, int sh_degree = 0);

/// Everything that gets optimized.
struct SceneModel {
  int sh_degree = 0;
  bool use_refinement = true;
  std::vector<HandModel> hands;
  std::vector<ObjectModel> objects;
  RefinementNet net;

  std::size_t surfel_count() const;
  void write(std::ostream& os) const;
  static SceneModel read(std::istream& is);
};

double normalized_time(std::size_t t, std::size_t frame_count);

/// World-space scene at frame t plus what the backward pass needs.
struct ComposedScene {
  std::size_t t = 0;
  double t_norm = 0.0;
  std::vector<Surfel2D> surfels;
  std::vector<SurfelTag> tags;
  // Hand surfel bookkeeping, in composition order across hands.
  std::vector<std::vector<TriangleFrame>> frames;  // per hand
  std::vector<Quaternion> rig_rotation;            // q_R for each hand surfel
  RefinementNet::Cache net_cache;
  std::size_t hand_count = 0;
};

/// templates[h] drives model.hands[h]. Objects follow hands in the output.
ComposedScene compose_scene(const SceneModel& model, std::span<const TemplateSequence> templates,
                            std::size_t t);

struct ObjectGrad {
  std::vector<SurfelGrad> surfels;
  std::vector<Vec4> pose_q;
  std::vector<Vec3> pose_t;
};

struct SceneGrad {
  std::vector<std::vector<SurfelGrad>> hands;
  std::vector<ObjectGrad> objects;
  std::vector<double> net;

  static SceneGrad zeros_like(const SceneModel& model);
};

/// Chains gradients w.r.t. the composed world surfels back to the model
/// parameters. Accumulates into out.
void compose_backward(const SceneModel& model, const ComposedScene& scene,
                      std::span<const SurfelGrad> world_grads, SceneGrad& out);

/// Flat row layout of one surfel: position(3), rotation wxyz(4),
/// log-scale(2), opacity logit(1), SH coefficients.
inline constexpr std::size_t kSurfelFixedDof = 10;
inline constexpr std::size_t kPoseDof = 7;  // q wxyz, t xyz
inline std::size_t surfel_dof(const Surfel2D& s) { return kSurfelFixedDof + s.sh.size(); }
void surfel_to_row(const Surfel2D& s, std::span<double> row);
void row_to_surfel(std::span<const double> row, Surfel2D& s);
void grad_to_row(const SurfelGrad& g, std::span<double> row);

/// Hands, then per object its surfels and pose track, then the net weights.
std::vector<double> flatten_params(const SceneModel& model);
void assign_params(SceneModel& model, std::span<const double> flat);
std::vector<double> flatten_grad(const SceneGrad& grad);

}  // namespace surfcap
