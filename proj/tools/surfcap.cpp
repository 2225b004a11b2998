// SPDX-License-Identifier: Apache-2.0
// Command-line front end: gen-synth, fit, render, contact, eval, gradcheck.
#include "surfcap/bundle.hpp"
#include "surfcap/error.hpp"
#include "surfcap/gradcheck.hpp"
#include "surfcap/rasterizer.hpp"
#include "surfcap/synth.hpp"
#include "surfcap/train.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace surfcap;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw Error(ErrorCode::MissingFile, "cannot read " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw Error(ErrorCode::MissingFile, "cannot write " + p.string());
  os << j.dump(1) << '\n';
}

std::vector<int> parse_views(const std::string& list) {
  std::vector<int> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::InvalidArgument, "bad view index '" + item + "'");
    }
  }
  return out;
}

// Flags shared by every command that reads a config. Each one set on the
// command line wins over the file.
struct ConfigFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau;
  std::optional<int> iters;
  std::optional<std::string> holdout;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON config (keys of TrainConfig)");
    app->add_option("--seed", seed, "random seed");
    app->add_option("--tau", tau, "contact threshold in meters");
    app->add_option("--iters", iters, "training iterations");
    app->add_option("--views-holdout", holdout, "comma list of held-out view indices");
  }

  TrainConfig resolve(const fs::path& fallback = {}) const {
    TrainConfig c;
    if (!config.empty())
      apply_config_json(c, read_text(config));
    else if (!fallback.empty() && fs::exists(fallback))
      apply_config_json(c, read_text(fallback));
    if (seed) c.seed = *seed;
    if (tau) c.tau = *tau;
    if (iters) c.iterations = *iters;
    if (holdout) c.holdout_views = parse_views(*holdout);
    c.validate();
    return c;
  }
};

// Depth mapped to gray over the covered range; uncovered pixels are black.
Image depth_image(const RenderOutput& o) {
  double lo = 1e300, hi = -1e300;
  for (std::size_t i = 0; i < o.alpha.data.size(); ++i)
    if (o.alpha.data[i] > 0.5) {
      lo = std::min(lo, o.depth.data[i]);
      hi = std::max(hi, o.depth.data[i]);
    }
  Image img(o.depth.width, o.depth.height, 3);
  for (std::size_t i = 0; i < o.alpha.data.size(); ++i) {
    if (!(o.alpha.data[i] > 0.5)) continue;
    const double g = hi > lo ? 1.0 - (o.depth.data[i] - lo) / (hi - lo) : 1.0;
    for (int c = 0; c < 3; ++c) img.data[3 * i + c] = g;
  }
  return img;
}

Image normal_image(const RenderOutput& o) {
  Image img(o.normal.width, o.normal.height, 3);
  for (std::size_t i = 0; i < o.alpha.data.size(); ++i) {
    const Vec3 n(o.normal.data[3 * i], o.normal.data[3 * i + 1], o.normal.data[3 * i + 2]);
    const double len = n.norm();
    if (len < 1e-12) continue;
    for (int c = 0; c < 3; ++c) img.data[3 * i + c] = 0.5 * (n[c] / len + 1.0);
  }
  return img;
}

// Blue (far, >= tau) to red (touching).
Vec3 heat(double d, double tau) {
  const double a = std::clamp(1.0 - d / tau, 0.0, 1.0);
  return {a, 0.15 * (1.0 - std::abs(2.0 * a - 1.0)), 1.0 - a};
}

Surfel2D painted(Surfel2D s, const Vec3& rgb) {
  std::fill(s.sh.begin(), s.sh.end(), 0.0);
  for (int c = 0; c < 3; ++c) s.sh[c] = rgb_to_sh0(rgb[c]);
  s.opacity_logit = std::max(s.opacity_logit, logit(0.9));
  return s;
}

fs::path sibling(const fs::path& file, const char* name) {
  return file.has_parent_path() ? file.parent_path() / name : fs::path(name);
}

struct Options {
  // gen-synth
  std::string kind = "gripper-sphere";
  SynthSpec spec;
  bool open = false;
  // shared paths
  std::string out;
  std::string bundle;
  std::string checkpoint;
  std::string resume;
  std::string pred;
  std::string gt;
  int view = 0;
  std::size_t frame = 0;
  int heatmap_view = 0;
  // gradcheck
  GradcheckOptions grad;
  ConfigFlags flags;
};

int cmd_gen_synth(Options& o) {
  SynthSpec s = o.spec;
  s.kind = synth_kind_from_string(o.kind);
  s.closing = !o.open;
  if (o.flags.seed) s.seed = *o.flags.seed;
  if (o.flags.tau) s.tau = *o.flags.tau;
  s.validate();
  const SynthResult r = generate(s);
  save_bundle(r.bundle, o.out);
  fs::create_directories(fs::path(o.out) / "gt");
  write_ground_truth(fs::path(o.out) / "gt" / "contact.json", r.truth, r.bundle.hand_names);
  std::cout << "wrote " << o.out << " (" << r.bundle.cameras.size() << " views, "
            << r.bundle.frame_count << " frames)\n";
  return 0;
}

int cmd_fit(Options& o) {
  const TrainConfig cfg = o.flags.resolve();
  const SceneBundle b = load_bundle(o.bundle);
  const fs::path out(o.out);
  fs::create_directories(out);
  std::ofstream(out / "config.json") << config_to_json(cfg) << '\n';
  TrainState st = o.resume.empty() ? init_train_state(b, cfg) : load_checkpoint(o.resume);
  std::vector<LogRow> log;
  const auto start = std::chrono::steady_clock::now();
  train(b, cfg, st, log, [&](const LogRow& r) {
    if (r.iteration % 500 == 0 || r.iteration + 1 == cfg.iterations)
      std::cout << "iter " << r.iteration << " loss " << r.total << " psnr " << r.psnr
                << " surfels " << r.hand_surfels << "+" << r.object_surfels << std::endl;
  });
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  save_checkpoint(out / "checkpoint.bin", st);
  write_log_csv(out / "log.csv", log);
  std::cout << "fit done in " << secs << " s\n";
  return 0;
}

int cmd_render(Options& o) {
  const TrainState st = load_checkpoint(o.checkpoint);
  const TrainConfig cfg = o.flags.resolve(sibling(o.checkpoint, "config.json"));
  const SceneBundle b = load_bundle(o.bundle);
  if (o.view < 0 || static_cast<std::size_t>(o.view) >= b.cameras.size())
    throw Error(ErrorCode::InvalidArgument, "view index out of range");
  if (o.frame >= b.frame_count)
    throw Error(ErrorCode::FrameOutOfRange, "frame " + std::to_string(o.frame));
  RenderSettings rs;
  rs.background = cfg.background;
  rs.sh_degree = st.model.sh_degree;
  const ComposedScene sc = compose_scene(st.model, b.hands, o.frame);
  const RenderOutput r = render(sc.surfels, b.cameras[o.view], rs);
  const fs::path out(o.out);
  fs::create_directories(out);
  write_ppm(out / "color.ppm", r.color);
  write_ppm(out / "depth.ppm", depth_image(r));
  write_ppm(out / "normal.ppm", normal_image(r));
  write_pgm(out / "alpha.pgm", r.alpha);
  return 0;
}

int cmd_contact(Options& o) {
  const TrainState st = load_checkpoint(o.checkpoint);
  const TrainConfig cfg = o.flags.resolve(sibling(o.checkpoint, "config.json"));
  const SceneBundle b = load_bundle(o.bundle);
  const double tau = cfg.tau;
  const auto contact = infer_contact(st.model, b.hands, tau);

  const double tau_v = tau / std::sqrt(3.0);
  auto finite_or_null = [](std::span<const double> v) {
    json a = json::array();
    for (double d : v) a.push_back(std::isfinite(d) ? json(d) : json(nullptr));
    return a;
  };
  auto hand_name = [&](std::size_t h) {
    return h < b.hand_names.size() ? b.hand_names[h] : std::to_string(h);
  };
  const fs::path out(o.out);

  // One document per frame with surfel-level results.
  for (std::size_t t = 0; t < b.frame_count; ++t) {
    json f;
    f["schema_version"] = 1;
    f["frame"] = t;
    f["tau"] = tau;
    f["tau_v"] = tau_v;
    f["units"] = "meters";
    f["hands"] = json::array();
    for (std::size_t h = 0; h < contact.size(); ++h) {
      const ContactMap& m = contact[h].frames[t];
      json nearest = json::array();
      for (std::uint32_t k : m.nearest) nearest.push_back(k == kNoSurfel ? json(nullptr) : json(k));
      f["hands"].push_back({{"name", hand_name(h)},
                            {"in_contact", std::vector<int>(m.in_contact.begin(), m.in_contact.end())},
                            {"distance", finite_or_null(m.distance)},
                            {"nearest_object_surfel", nearest}});
    }
    char name[32];
    std::snprintf(name, sizeof name, "%05zu.json", t);
    write_json(out / "frames" / name, f);
  }

  // Sequence document: accumulated surfel state and vertex labels, plus
  // metrics when ground truth is given.
  json j;
  j["schema_version"] = 1;
  j["frame_count"] = b.frame_count;
  j["tau"] = tau;
  j["tau_v"] = tau_v;
  j["units"] = "meters";
  j["hands"] = json::array();
  std::vector<std::vector<char>> gt;
  if (!o.gt.empty()) gt = read_vertex_labels(o.gt);
  if (!gt.empty() && gt.size() != contact.size())
    throw Error(ErrorCode::LengthMismatch, "ground truth hand count differs");
  for (std::size_t h = 0; h < contact.size(); ++h) {
    const auto& acc = contact[h].accumulated;
    json hj{{"name", hand_name(h)},
            {"ever_contact", std::vector<int>(acc.ever_contact.begin(), acc.ever_contact.end())},
            {"min_distance", finite_or_null(acc.min_distance)},
            {"vertex_labels", std::vector<int>(acc.vertex_labels.begin(), acc.vertex_labels.end())}};
    if (!gt.empty()) {
      const ContactMetrics m = contact_metrics(acc.vertex_labels, gt[h]);
      hj["metrics"] = {{"iou", m.iou}, {"f1", m.f1}, {"precision", m.precision}, {"recall", m.recall}};
    }
    j["hands"].push_back(hj);
  }
  write_json(out / "contact.json", j);

  // Heatmaps: hand surfels colored by their distance at each frame, objects gray.
  if (o.heatmap_view < 0 || static_cast<std::size_t>(o.heatmap_view) >= b.cameras.size())
    throw Error(ErrorCode::InvalidArgument, "heatmap view out of range");
  RenderSettings rs;
  rs.background = Vec3::Constant(1.0);
  fs::create_directories(out / "heatmaps");
  for (std::size_t t = 0; t < b.frame_count; ++t) {
    ComposedScene sc = compose_scene(st.model, b.hands, t);
    std::vector<std::size_t> offset(contact.size(), 0);
    for (std::size_t i = 0; i < sc.surfels.size(); ++i) {
      const SurfelTag& tag = sc.tags[i];
      Vec3 rgb(0.6, 0.6, 0.6);
      if (tag.is_hand()) rgb = heat(contact[tag.group].frames[t].distance[tag.index], tau);
      sc.surfels[i] = painted(sc.surfels[i], rgb);
    }
    char name[32];
    std::snprintf(name, sizeof name, "%05zu.ppm", t);
    write_ppm(out / "heatmaps" / name, render(sc.surfels, b.cameras[o.heatmap_view], rs).color);
  }
  std::cout << "wrote " << (out / "contact.json").string() << '\n';
  return 0;
}

int cmd_eval(Options& o) {
  json j;
  j["schema_version"] = 1;
  j["units"] = "meters";
  const auto pred = read_vertex_labels(o.pred);
  const auto gt = read_vertex_labels(o.gt);
  const json gt_doc = json::parse(read_text(o.gt));
  const json pred_doc = json::parse(read_text(o.pred));
  j["tau"] = gt_doc.value("tau", kDefaultContactTau);
  j["tau_pred"] = pred_doc.value("tau", kDefaultContactTau);
  if (pred.size() != gt.size())
    throw Error(ErrorCode::LengthMismatch, "prediction and ground truth hand counts differ");
  double iou = 0.0, f1 = 0.0;
  j["hands"] = json::array();
  for (std::size_t h = 0; h < gt.size(); ++h) {
    if (pred[h].size() != gt[h].size())
      throw Error(ErrorCode::LengthMismatch, "vertex label counts differ for hand " + std::to_string(h));
    const ContactMetrics m = contact_metrics(pred[h], gt[h]);
    iou += m.iou;
    f1 += m.f1;
    j["hands"].push_back({{"iou", m.iou}, {"f1", m.f1}, {"precision", m.precision}, {"recall", m.recall}});
  }
  const double n = gt.empty() ? 1.0 : static_cast<double>(gt.size());
  j["mIoU"] = iou / n;
  j["F1"] = f1 / n;

  j["PSNR"] = nullptr;
  j["SSIM"] = nullptr;
  if (!o.checkpoint.empty()) {
    const TrainConfig cfg = o.flags.resolve(sibling(o.checkpoint, "config.json"));
    const SceneBundle b = load_bundle(o.bundle);
    const TrainState st = load_checkpoint(o.checkpoint);
    const ImageMetrics im =
        evaluate_views(b, st.model, cfg.holdout_views, cfg.background, cfg.image_subsample);
    j["PSNR"] = im.psnr;
    j["SSIM"] = im.ssim;
    j["PSNR_units"] = "dB";
    j["eval_views"] = cfg.holdout_views;
    j["eval_images"] = im.images;
  }
  if (o.out.empty())
    std::cout << j.dump(1) << '\n';
  else
    write_json(o.out, j);
  return 0;
}

int cmd_gradcheck(Options& o) {
  GradcheckOptions g = o.grad;
  if (o.flags.seed) g.seed = *o.flags.seed;
  const GradcheckReport r = run_gradcheck(g);
  json j;
  j["schema_version"] = 1;
  j["h"] = g.h;
  j["tolerance"] = r.tolerance;
  j["seconds"] = r.seconds;
  j["classes"] = json::array();
  for (const auto& c : r.classes) {
    std::printf("%-7s max_rel_error %.3e  scenes %zu  params %zu  rejected %zu\n", c.name.c_str(),
                c.max_rel_error, c.scenes, c.parameters, c.rejected);
    j["classes"].push_back({{"name", c.name},
                            {"max_rel_error", c.max_rel_error},
                            {"scenes", c.scenes},
                            {"parameters", c.parameters},
                            {"rejected", c.rejected}});
  }
  j["passed"] = r.passed();
  if (!o.out.empty()) write_json(o.out, j);
  if (!r.passed()) throw Error(ErrorCode::GradientCheckFailed, "max relative error above tolerance");
  return 0;
}

void error_line(std::string_view code, const std::string& msg) {
  std::cerr << json{{"error", code}, {"message", msg}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"surfel-based hand-object capture"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic bundle and contact truth");
  gen->add_option("--kind", o.kind, "gripper-sphere | paddle-box")->capture_default_str();
  gen->add_option("--frames", o.spec.frames)->capture_default_str();
  gen->add_option("--views", o.spec.views)->capture_default_str();
  gen->add_option("--width", o.spec.width)->capture_default_str();
  gen->add_option("--height", o.spec.height)->capture_default_str();
  gen->add_option("--noise", o.spec.noise, "Gaussian image noise sigma")->capture_default_str();
  gen->add_option("--edge-length", o.spec.edge_length, "template edge length (m)")->capture_default_str();
  gen->add_flag("--bulge", o.spec.bulge, "time-varying bump on the true mesh");
  gen->add_flag("--open", o.open, "keep the hinge open (no contact)");
  gen->add_option("--seed", o.flags.seed);
  gen->add_option("--tau", o.flags.tau);
  gen->add_option("--out", o.out)->required();

  auto* fit = app.add_subcommand("fit", "optimize surfels against a bundle");
  fit->add_option("--bundle", o.bundle)->required();
  fit->add_option("--out", o.out)->required();
  fit->add_option("--resume", o.resume, "checkpoint to continue from");
  o.flags.attach(fit);

  auto* ren = app.add_subcommand("render", "render color, depth, normal and alpha");
  ren->add_option("--checkpoint", o.checkpoint)->required();
  ren->add_option("--bundle", o.bundle)->required();
  ren->add_option("--view", o.view)->capture_default_str();
  ren->add_option("--frame", o.frame)->capture_default_str();
  ren->add_option("--out", o.out)->required();
  o.flags.attach(ren);

  auto* con = app.add_subcommand("contact", "per-frame and accumulated contact");
  con->add_option("--checkpoint", o.checkpoint)->required();
  con->add_option("--bundle", o.bundle)->required();
  con->add_option("--heatmap-view", o.heatmap_view)->capture_default_str();
  con->add_option("--gt", o.gt, "ground-truth labels; adds metrics to the sequence document");
  con->add_option("--out", o.out)->required();
  o.flags.attach(con);

  auto* ev = app.add_subcommand("eval", "contact and held-out image metrics");
  ev->add_option("--pred", o.pred)->required();
  ev->add_option("--gt", o.gt)->required();
  auto* ck = ev->add_option("--checkpoint", o.checkpoint, "enables PSNR/SSIM on held-out views");
  ev->add_option("--bundle", o.bundle)->needs(ck);
  ck->needs("--bundle");
  ev->add_option("--out", o.out, "metrics JSON (stdout when omitted)");
  o.flags.attach(ev);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  gc->add_option("--seed", o.flags.seed);
  gc->add_option("--scenes", o.grad.scenes)->capture_default_str();
  gc->add_option("--max-surfels", o.grad.max_surfels)->capture_default_str();
  gc->add_option("--step", o.grad.h, "finite-difference step")->capture_default_str();
  gc->add_option("--out", o.out, "report JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    error_line("InvalidArgument", e.what());
    return 2;
  }

  try {
    if (*gen) return cmd_gen_synth(o);
    if (*fit) return cmd_fit(o);
    if (*ren) return cmd_render(o);
    if (*con) return cmd_contact(o);
    if (*ev) return cmd_eval(o);
    if (*gc) return cmd_gradcheck(o);
  } catch (const Error& e) {
    error_line(to_string(e.code()), e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    error_line("ParseError", e.what());
    return 1;
  } catch (const std::exception& e) {
    error_line("Internal", e.what());
    return 1;
  }
  return 1;
}
