// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "surfcap/bundle.hpp"
#include "surfcap/contact.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace surfcap {

enum class SynthKind { GripperSphere, PaddleBox };

std::string to_string(SynthKind kind);
SynthKind synth_kind_from_string(const std::string& name);

struct SynthSpec {
  SynthKind kind = SynthKind::GripperSphere;
  std::size_t frames = 20;
  std::size_t views = 8;
  int width = 64;
  int height = 64;
  double noise = 0.0;  // additive Gaussian sigma, color units
  std::uint64_t seed = 0;
  double tau = kDefaultContactTau;
  /// False keeps the hinge open with a gap well above tau in every frame.
  bool closing = true;
  /// Time-varying bump on the outer faces of the true mesh. The template
  /// sequence handed to fitting stays un-bumped.
  bool bulge = false;
  double bulge_amplitude = 0.003;
  /// Target template edge length (meters); sets the mesh resolution. Keep it
  /// below tau: contact is projected to vertices through whole faces.
  double edge_length = 0.003;
  std::size_t object_points = 2000;
  /// Spacing of the dense surfel covering used to render ground truth.
  double gt_spacing = 0.001;

  void validate() const;
};

/// Analytic contact truth on template vertices.
struct SynthGroundTruth {
  double tau = kDefaultContactTau;
  std::vector<std::vector<char>> vertex_contact;          // [hand][vertex]
  std::vector<std::vector<double>> vertex_min_distance;   // [hand][vertex]
  std::vector<std::vector<std::vector<double>>> distance;  // [hand][frame][vertex]
};

struct SynthResult {
  SceneBundle bundle;
  SynthGroundTruth truth;
};

/// Distance from p to a solid (zero inside).
double sphere_distance(const Vec3& p, const Vec3& center, double radius);
double box_distance(const Vec3& p, const Vec3& center, const Vec3& half_extent);

SynthResult generate(const SynthSpec& spec);

/// JSON with per-hand vertex labels and minimum distances.
void write_ground_truth(const std::filesystem::path& path, const SynthGroundTruth& truth,
                        const std::vector<std::string>& hand_names);
/// Reads the per-hand labels written by write_ground_truth (or by `contact`).
std::vector<std::vector<char>> read_vertex_labels(const std::filesystem::path& path);

}  // namespace surfcap
