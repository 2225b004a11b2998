#include "surfcap/error.hpp"
#include "surfcap/train.hpp"

#include "doctest.h"

#include <cmath>
#include <filesystem>

using namespace surfcap;

TEST_CASE("Adam zero gradient keeps parameters and decays moments") {
  std::vector<double> p{1.0, -2.0}, g{0.0, 0.0}, m{0.5, 0.1}, v{0.2, 0.3}, lr{0.1, 0.1};
  // With nonzero first moment the parameter would move, so start from m = 0.
  std::vector<double> m0{0.0, 0.0};
  adam_update(p, g, m0, v, lr, 3);
  CHECK(p[0] == 1.0);
  CHECK(p[1] == -2.0);
  CHECK(v[0] == doctest::Approx(0.2 * 0.999));
  adam_update(p, g, m, v, lr, 4);
  CHECK(m[0] == doctest::Approx(0.45));
}

TEST_CASE("Adam first step closed form") {
  std::vector<double> p{0.3, 0.3, 0.3}, g{2.0, -0.5, 1e-3}, m(3, 0.0), v(3, 0.0), lr(3, 0.01);
  adam_update(p, g, m, v, lr, 1);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  for (int i = 0; i < 3; ++i)
    CHECK(p[i] == doctest::Approx(0.3 - 0.01 * g[i] / (std::abs(g[i]) + 1e-8)).epsilon(1e-14));
  std::vector<double> short_grad{1.0};
  CHECK_THROWS_AS(adam_update(p, short_grad, m, v, lr, 2), Error);
}

TEST_CASE("Adam minimizes x^2") {
  std::vector<double> x{1.0}, m{0.0}, v{0.0}, lr{0.05};
  for (int s = 1; s <= 500; ++s) {
    const std::vector<double> g{2.0 * x[0]};
    adam_update(x, g, m, v, lr, s);
  }
  CHECK(std::abs(x[0]) < 1e-3);
}

namespace {

TemplateSequence square_template() {
  TemplateSequence t;
  t.topology.vertex_count = 4;
  t.topology.faces = {{0, 1, 2}, {0, 2, 3}};
  TemplateFrame f;
  f.vertices = {{0, 0, 0}, {0.01, 0, 0}, {0.01, 0.01, 0}, {0, 0.01, 0}};
  t.frames = {f};
  return t;
}

struct Fixture {
  std::vector<TemplateSequence> templates{square_template()};
  SceneModel model;
  OptimizerState opt;
  DensityStats stats;
  TrainConfig config;
  std::mt19937_64 rng{7};

  Fixture() {
    std::mt19937_64 r(1);
    model.hands.push_back(init_hand_surfels(templates[0], 0, 2, 0.5, r).hand);
    ObjectModel obj;
    Surfel2D s;
    s.log_scale = Vec2::Constant(std::log(0.05));
    s.sh = {0.1, 0.2, 0.3};
    obj.surfels.assign(3, s);
    obj.surfels[1].log_scale = Vec2::Constant(std::log(0.001));
    obj.pose_track.assign(1, {});
    model.objects.push_back(obj);
    opt = OptimizerState::zeros_like(model);
    for (auto& x : opt.objects[0].m) x = 1.0;
    stats.reset(model.surfel_count());
  }
};

}  // namespace

TEST_CASE("density control clones small and splits large surfels") {
  Fixture f;
  const std::size_t hands = f.model.hands[0].local.size();
  REQUIRE(hands == 4);
  std::vector<double> grad(f.model.surfel_count(), 0.0);
  std::vector<char> vis(grad.size(), 1);
  grad[hands + 0] = 1e-3;  // large object surfel: split
  grad[hands + 1] = 1e-3;  // small: clone
  grad[hands + 2] = 1e-5;  // below threshold
  f.stats.add(grad, vis);
  const auto rep = density_control(f.model, f.opt, f.stats, f.templates, f.config, 1.0, f.rng);
  CHECK(rep.split == 1);
  CHECK(rep.cloned == 1);
  CHECK(rep.pruned == 0);
  const auto& obj = f.model.objects[0].surfels;
  REQUIRE(obj.size() == 5);
  // Survivors keep order and moments; children are appended with zero moments.
  CHECK(obj[0].log_scale[0] == doctest::Approx(std::log(0.001)));
  CHECK(obj[4].position == obj[0].position);  // exact clone
  CHECK(obj[2].log_scale[0] == doctest::Approx(std::log(0.05 / 1.6)));
  const std::size_t dof = surfel_dof(obj[0]);
  CHECK(f.opt.objects[0].m.size() == 5 * dof);
  CHECK(f.opt.objects[0].m[0] == 1.0);
  CHECK(f.opt.objects[0].m[2 * dof] == 0.0);
  CHECK(f.stats.grad_accum.size() == f.model.surfel_count());
}

TEST_CASE("density control prunes and respects the cap") {
  Fixture f;
  f.model.hands[0].local[1].opacity_logit = logit(0.001);
  std::vector<double> grad(f.model.surfel_count(), 1.0);
  std::vector<char> vis(grad.size(), 1);
  f.stats.add(grad, vis);
  f.config.max_surfels = f.model.surfel_count() + 2;
  const auto rep = density_control(f.model, f.opt, f.stats, f.templates, f.config, 1.0, f.rng);
  CHECK(rep.capped);
  CHECK(rep.cloned + rep.split == 2);
  CHECK(rep.pruned >= 1);
  CHECK(f.model.surfel_count() <= f.config.max_surfels);
  const auto& hand = f.model.hands[0];
  CHECK(hand.bindings.size() == hand.local.size());
  for (const auto& s : hand.local) CHECK(s.opacity() >= 0.005);
  CHECK(f.opt.hands[0].m.size() == hand.local.size() * surfel_dof(hand.local[0]));
}

TEST_CASE("prune-only pass leaves healthy surfels alone") {
  Fixture f;
  const SceneModel before = f.model;
  const auto rep =
      density_control(f.model, f.opt, f.stats, f.templates, f.config, 1.0, f.rng, false);
  CHECK(rep.pruned == 0);
  CHECK(flatten_params(f.model) == flatten_params(before));
}

TEST_CASE("adam_step skips non-finite gradients") {
  Fixture f;
  SceneGrad g = SceneGrad::zeros_like(f.model);
  g.objects[0].surfels[0].position[0] = std::nan("");
  const auto before = flatten_params(f.model);
  CHECK_FALSE(adam_step(f.model, f.opt, g, learning_rates(f.config, 0, 1.0)));
  CHECK(f.opt.step == 0);
  CHECK(flatten_params(f.model) == before);
  g.objects[0].surfels[0].position[0] = 1.0;
  CHECK(adam_step(f.model, f.opt, g, learning_rates(f.config, 0, 1.0)));
  CHECK(f.model.objects[0].surfels[0].position[0] < 0.0);
}

TEST_CASE("position learning rate decays") {
  TrainConfig c;
  CHECK(learning_rates(c, 0, 2.0).hand_position == doctest::Approx(1.6e-4));
  CHECK(learning_rates(c, 0, 2.0).object_position == doctest::Approx(3.2e-4));
  CHECK(learning_rates(c, c.iterations, 1.0).hand_position == doctest::Approx(1.6e-6));
  CHECK(learning_rates(c, c.iterations / 2, 1.0).hand_position == doctest::Approx(1.6e-5));
}

TEST_CASE("config JSON round trip and validation") {
  TrainConfig c;
  c.iterations = 123;
  c.weights.isotropic = 0.7;
  c.holdout_views = {7};
  TrainConfig d;
  apply_config_json(d, config_to_json(c));
  CHECK(config_to_json(d) == config_to_json(c));
  CHECK_THROWS_AS(apply_config_json(d, R"({"nope": 1})"), Error);
  CHECK_THROWS_AS(apply_config_json(d, "{"), Error);
  d.tau = -1.0;
  CHECK_THROWS_AS(d.validate(), Error);
}

TEST_CASE("checkpoint round trip") {
  Fixture f;
  TrainState st;
  st.model = f.model;
  st.opt = f.opt;
  st.stats = f.stats;
  st.iteration = 42;
  st.extent = 0.33;
  st.rng.seed(5);
  st.rng();
  const auto dir = std::filesystem::temp_directory_path() / "surfcap_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "a.bin", st);
  const TrainState back = load_checkpoint(dir / "a.bin");
  CHECK(back.iteration == 42);
  CHECK(back.extent == 0.33);
  CHECK(back.rng == st.rng);
  CHECK(flatten_params(back.model) == flatten_params(st.model));
  CHECK(back.opt.objects[0].m == st.opt.objects[0].m);
  save_checkpoint(dir / "b.bin", back);
  const auto size = std::filesystem::file_size(dir / "a.bin");
  CHECK(size == std::filesystem::file_size(dir / "b.bin"));
  std::filesystem::resize_file(dir / "b.bin", size / 2);
  CHECK_THROWS_AS(load_checkpoint(dir / "b.bin"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("subsampled camera matches box-filtered pixels") {
  const Camera cam = look_at_camera({0, 0, -1}, {0, 0, 0}, {0, -1, 0}, 64, 64, 160, 160);
  const Camera half = subsample_camera(cam, 2);
  CHECK(half.width == 32);
  const Vec3 p(0.01, -0.02, 0.1);
  const auto a = project(cam, p), b = project(half, p);
  // Full-res pixel centre u maps to (u - 0.5) / 2 in the half-res image.
  CHECK(b.u == doctest::Approx((a.u - 0.5) / 2.0));
}
