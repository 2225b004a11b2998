// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "surfcap/core_geom.hpp"
#include "surfcap/surfel.hpp"

#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <vector>

namespace surfcap {

inline constexpr double kDefaultContactTau = 0.004;
inline constexpr std::uint32_t kNoSurfel = std::numeric_limits<std::uint32_t>::max();

/// Hand-indexed nearest-object-surfel distances at one frame.
/// in_contact[i] is exactly distance[i] < tau.
struct ContactMap {
  double tau = kDefaultContactTau;
  std::vector<char> in_contact;
  std::vector<double> distance;  // +inf when the object set is empty
  std::vector<std::uint32_t> nearest;

  std::size_t size() const { return distance.size(); }
  /// Scalar convertible form: distance when in contact, else 0.
  std::vector<double> scalar() const;
};

/// Nearest object surfel for every hand position via a uniform grid with
/// cell size tau and shell expansion; identical to exhaustive search
/// (ties resolved to the lowest object index).
ContactMap instantaneous_contact(std::span<const Vec3> hand, std::span<const Vec3> object,
                                 double tau);

struct AccumulatedContact {
  double tau = kDefaultContactTau;
  std::vector<char> ever_contact;
  std::vector<double> min_distance;
  /// Per-template-vertex labels, filled by project_to_template.
  std::vector<char> vertex_labels;
};

/// Throws EmptySequence for no maps and LengthMismatch for differing sizes.
AccumulatedContact accumulate(std::span<const ContactMap> maps);

/// A vertex is labeled when any surfel bound to an incident face ever touched.
std::vector<char> project_to_template(std::span<const char> ever_contact,
                                      std::span<const std::uint32_t> triangle_ids,
                                      std::span<const std::array<std::uint32_t, 3>> faces,
                                      std::size_t vertex_count);

using VoxelKey = std::array<std::int64_t, 3>;

struct VoxelCell {
  bool has_hand = false;
  bool has_object = false;
};

struct VoxelGrid {
  double voxel_size = 0.0;  // tau / sqrt(3)
  Vec3 origin = Vec3::Zero();
  std::map<VoxelKey, VoxelCell> occupancy;

  VoxelKey key(const Vec3& x) const;
};

struct ContactVoxels {
  VoxelGrid grid;
  std::vector<VoxelKey> contact_voxels;  // sorted
  std::vector<std::uint32_t> surfels;    // indices into the scene, ascending
};

/// Voxelizes tagged scene positions with voxel size tau/sqrt(3); a voxel is a
/// contact voxel when it holds both hand and object surfels.
ContactVoxels label_contact_voxels(std::span<const Vec3> positions,
                                   std::span<const SurfelTag> tags, double tau);

struct ContactMetrics {
  double iou = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

/// IoU is 1 when both label sets are empty; F1 is 0 when undefined.
ContactMetrics contact_metrics(std::span<const char> pred, std::span<const char> gt);

}  // namespace surfcap
