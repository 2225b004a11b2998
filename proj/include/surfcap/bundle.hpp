// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "surfcap/core_geom.hpp"
#include "surfcap/image.hpp"
#include "surfcap/model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace surfcap {

struct ObjectSeed {
  std::vector<Vec3> points;
  std::vector<Vec3> colors;  // empty or one per point
};

struct BundleMetadata {
  double tau = 0.004;
  std::string units = "meters";
  double frame_rate = 30.0;
};

/// Multi-view sequence with everything fitting needs. Frame indices are
/// zero-based; images[v][t] is view v at frame t.
struct SceneBundle {
  std::vector<std::string> view_names;
  std::vector<Camera> cameras;
  std::size_t frame_count = 0;
  std::vector<std::vector<Image>> images;
  std::vector<std::vector<Image>> masks;
  std::vector<std::string> hand_names;
  std::vector<TemplateSequence> hands;
  std::vector<ObjectSeed> objects;
  BundleMetadata meta;

  /// In-memory consistency checks (shapes, counts, topology).
  void validate() const;
};

/// Writes the canonical on-disk layout:
///   manifest.json, cameras.json,
///   images/<view>/<frame:05>.ppm, masks/<view>/<frame:05>.pgm,
///   template/<hand>/topology.obj, template/<hand>/frames.bin,
///   object/seed.ply (and seed_<k>.ply for further objects).
void save_bundle(const SceneBundle& bundle, const std::filesystem::path& root);

/// Loads and validates a bundle. Every problem found is listed in the
/// thrown error: MissingFile, ParseError, GridIncomplete (naming view and
/// frame) or TopologyOutOfRange.
SceneBundle load_bundle(const std::filesystem::path& root);

}  // namespace surfcap
