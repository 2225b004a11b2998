// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "surfcap/bundle.hpp"
#include "surfcap/contact.hpp"
#include "surfcap/losses.hpp"
#include "surfcap/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace surfcap {

struct TrainConfig {
  int iterations = 5000;
  std::uint64_t seed = 0;
  double tau = kDefaultContactTau;
  int image_subsample = 1;
  int sh_degree = 0;
  int init_k = 5;
  double init_variance = 0.5;

  // Per-group Adam learning rates. Object positions are scaled by the
  // scene extent; positions decay exponentially to lr_position_final.
  double lr_position = 1.6e-4;
  double lr_position_final = 1.6e-6;
  double lr_rotation = 1e-3;
  double lr_scale = 5e-3;
  double lr_opacity = 5e-2;
  double lr_color = 2.5e-3;
  double lr_net = 1e-4;
  double lr_pose = 1e-4;

  int densify_interval = 100;
  int densify_from = 500;
  double densify_until = 0.7;  // fraction of iterations
  double densify_grad_threshold = 2e-4;
  double dense_percent = 0.01;  // clone/split boundary, fraction of extent
  double prune_opacity = 0.005;
  std::size_t max_surfels = 10000;
  bool final_prune = true;

  int contact_refresh = 50;
  bool use_refinement = true;
  bool use_isotropic = true;
  RefinementConfig net;
  LossWeights weights;
  Vec3 background = Vec3::Zero();
  std::vector<int> holdout_views;
  int log_interval = 10;

  /// Throws InvalidArgument for out-of-range settings.
  void validate() const;
};

/// JSON carrying every TrainConfig field.
std::string config_to_json(const TrainConfig& config);
/// Overrides the keys present in the document; unknown keys are an error.
void apply_config_json(TrainConfig& config, const std::string& text);

struct Moments {
  std::vector<double> m;
  std::vector<double> v;
};

struct OptimizerState {
  std::int64_t step = 0;
  std::vector<Moments> hands;    // row-major, surfel_dof per row
  std::vector<Moments> objects;  // surfels
  std::vector<Moments> poses;    // kPoseDof per frame
  Moments net;

  static OptimizerState zeros_like(const SceneModel& model);
};

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update with per-entry learning rates, using the
/// given (already incremented) step count. Throws ShapeMismatch.
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                 std::span<double> v, std::span<const double> lr, std::int64_t step,
                 const AdamSettings& s = {});

struct LearningRates {
  double hand_position = 0.0;
  double object_position = 0.0;
  double rotation = 0.0;
  double scale = 0.0;
  double opacity = 0.0;
  double color = 0.0;
  double net = 0.0;
  double pose = 0.0;
};

LearningRates learning_rates(const TrainConfig& config, std::int64_t iteration, double extent);

/// Applies one Adam step to the whole model. Returns false, leaving model
/// and moments untouched, when any gradient is not finite.
bool adam_step(SceneModel& model, OptimizerState& opt, const SceneGrad& grad,
               const LearningRates& lr, const AdamSettings& s = {});

/// Screen-space gradient statistics in composition order (hands, objects).
struct DensityStats {
  std::vector<double> grad_accum;
  std::vector<std::uint32_t> count;

  void reset(std::size_t n);
  void add(std::span<const double> screen_grad, std::span<const char> visible);
};

struct DensityReport {
  std::size_t cloned = 0;
  std::size_t split = 0;
  std::size_t pruned = 0;
  bool capped = false;
};

/// Clone/split surfels whose mean screen gradient exceeds the threshold and
/// prune transparent ones. Hand children keep the parent's binding. New rows
/// get zero moments; statistics are reset.
DensityReport density_control(SceneModel& model, OptimizerState& opt, DensityStats& stats,
                              std::span<const TemplateSequence> templates,
                              const TrainConfig& config, double extent, std::mt19937_64& rng,
                              bool densify = true);

struct TrainState {
  SceneModel model;
  OptimizerState opt;
  DensityStats stats;
  std::int64_t iteration = 0;
  double extent = 1.0;
  std::mt19937_64 rng;
};

/// Radius of the camera rig around its centroid, times 1.1.
double scene_extent(std::span<const Camera> cameras);

TrainState init_train_state(const SceneBundle& bundle, const TrainConfig& config);

struct LogRow {
  std::int64_t iteration = 0;
  LossComponents components;
  double total = 0.0;
  std::size_t hand_surfels = 0;
  std::size_t object_surfels = 0;
  double psnr = 0.0;
};

/// Runs iterations state.iteration .. config.iterations - 1, then applies the
/// final prune. `on_row` sees every logged row.
void train(const SceneBundle& bundle, const TrainConfig& config, TrainState& state,
           std::vector<LogRow>& log, const std::function<void(const LogRow&)>& on_row = {});

void write_log_csv(const std::filesystem::path& path, std::span<const LogRow> log);

/// Binary checkpoint; layout documented in docs/checkpoint.md.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

struct ImageMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t images = 0;
};

/// Mean PSNR/SSIM of renders against the stored images over the given views
/// and all frames.
ImageMetrics evaluate_views(const SceneBundle& bundle, const SceneModel& model,
                            std::span<const int> views, const Vec3& background,
                            int subsample = 1);

struct HandContact {
  std::vector<ContactMap> frames;
  AccumulatedContact accumulated;
};

/// Instantaneous and accumulated contact of each hand against all object
/// surfels, with per-vertex labels.
std::vector<HandContact> infer_contact(const SceneModel& model,
                                       std::span<const TemplateSequence> templates, double tau);

/// Camera matching a box-downsampled image.
Camera subsample_camera(const Camera& camera, int factor);

}  // namespace surfcap
