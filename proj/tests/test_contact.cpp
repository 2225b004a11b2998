#include "surfcap/contact.hpp"
#include "surfcap/error.hpp"
#include "surfcap/oracle.hpp"

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

using namespace surfcap;

namespace {

std::vector<Vec3> cloud(std::mt19937_64& rng, std::size_t n, double extent, const Vec3& offset = Vec3::Zero()) {
  std::uniform_real_distribution<double> u(-extent, extent);
  std::vector<Vec3> pts(n);
  for (Vec3& p : pts) p = Vec3(u(rng), u(rng), u(rng)) + offset;
  return pts;
}

void require_equal(const ContactMap& a, const ContactMap& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.in_contact[i] == b.in_contact[i]);
    CHECK(a.nearest[i] == b.nearest[i]);
    CHECK(std::abs(a.distance[i] - b.distance[i]) <= 1e-12);
  }
}

}  // namespace

TEST_CASE("instantaneous contact examples") {
  const std::vector<Vec3> hand{{0, 0, 0}};
  const std::vector<Vec3> obj{{0, 0, 0.005}};
  const ContactMap m = instantaneous_contact(hand, obj, 0.01);
  CHECK(m.in_contact[0]);
  CHECK(m.distance[0] == doctest::Approx(0.005));
  CHECK(m.nearest[0] == 0);

  // Exactly tau apart is not contact.
  const std::vector<Vec3> at{{0, 0, 0.25}};
  const ContactMap edge = instantaneous_contact(hand, at, 0.25);
  CHECK(edge.distance[0] == 0.25);
  CHECK_FALSE(edge.in_contact[0]);

  const ContactMap none = instantaneous_contact(hand, {}, 0.01);
  CHECK_FALSE(none.in_contact[0]);
  CHECK(std::isinf(none.distance[0]));
  CHECK(none.scalar()[0] == 0.0);
  CHECK_THROWS_AS(instantaneous_contact(hand, obj, 0.0), Error);
}

TEST_CASE("brute force on a 3x3 grid") {
  std::vector<Vec3> hand, obj;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      hand.push_back({0.01 * i, 0.01 * j, 0.0});
      obj.push_back({0.01 * i, 0.01 * j, 0.003 * (i + 1)});
    }
  const ContactMap m = brute_force_contact(hand, obj, 0.0065);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const std::size_t k = 3 * i + j;
      CHECK(m.nearest[k] == k);
      CHECK(m.distance[k] == doctest::Approx(0.003 * (i + 1)));
      CHECK(m.in_contact[k] == (i < 2));
    }
}

TEST_CASE("spatial grid equals brute force") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    const double tau = 0.002 + 0.01 * (trial % 5);
    const auto hand = cloud(rng, 300, 0.05);
    const auto obj = cloud(rng, 200 + trial * 10, 0.04, Vec3(0.01, 0, 0));
    require_equal(instantaneous_contact(hand, obj, tau), brute_force_contact(hand, obj, tau));
  }
  // Queries far outside the object box and exact duplicates.
  const auto obj = cloud(rng, 50, 0.01);
  std::vector<Vec3> hand = cloud(rng, 50, 1.0);
  hand.push_back(obj[3]);
  std::vector<Vec3> dup = obj;
  dup.push_back(obj[3]);
  require_equal(instantaneous_contact(hand, dup, 0.004), brute_force_contact(hand, dup, 0.004));
}

TEST_CASE("contact pairs are symmetric and invariant to rigid motion") {
  std::mt19937_64 rng(78);
  const double tau = 0.01;
  const auto a = cloud(rng, 150, 0.05);
  const auto b = cloud(rng, 120, 0.05);
  // Pairs within tau computed both ways agree.
  std::set<std::pair<std::size_t, std::size_t>> ab, ba;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      if ((a[i] - b[j]).norm() < tau) ab.insert({i, j});
  for (std::size_t j = 0; j < b.size(); ++j)
    for (std::size_t i = 0; i < a.size(); ++i)
      if ((b[j] - a[i]).norm() < tau) ba.insert({i, j});
  CHECK(ab == ba);
  const ContactMap ma = instantaneous_contact(a, b, tau);
  const ContactMap mb = instantaneous_contact(b, a, tau);
  for (const auto& [i, j] : ab) {
    CHECK(ma.in_contact[i]);
    CHECK(mb.in_contact[j]);
  }

  const Mat3 R = Quaternion{0.3, -0.5, 0.2, 0.8}.normalized().to_matrix();
  const Vec3 t(1.5, -2.0, 0.7);
  std::vector<Vec3> a2 = a, b2 = b;
  for (Vec3& p : a2) p = R * p + t;
  for (Vec3& p : b2) p = R * p + t;
  const ContactMap mr = instantaneous_contact(a2, b2, tau);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(mr.in_contact[i] == ma.in_contact[i]);
    CHECK(std::abs(mr.distance[i] - ma.distance[i]) < 1e-9);
  }

  const ContactMap small = instantaneous_contact(a, b, 0.5 * tau);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (small.in_contact[i]) CHECK(ma.in_contact[i]);
}

TEST_CASE("accumulate folds frames") {
  std::mt19937_64 rng(79);
  std::vector<ContactMap> maps;
  const auto obj = cloud(rng, 80, 0.05);
  for (int f = 0; f < 10; ++f) maps.push_back(instantaneous_contact(cloud(rng, 60, 0.05), obj, 0.01));
  const AccumulatedContact acc = accumulate(maps);
  for (std::size_t i = 0; i < 60; ++i) {
    bool any = false;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& m : maps) {
      any = any || m.in_contact[i];
      best = std::min(best, m.distance[i]);
    }
    CHECK(static_cast<bool>(acc.ever_contact[i]) == any);
    CHECK(acc.min_distance[i] == best);
  }
  const AccumulatedContact one = accumulate(std::span(maps).first(1));
  CHECK(one.ever_contact == maps[0].in_contact);
  CHECK(one.min_distance == maps[0].distance);

  // Contact in a single frame is enough.
  std::vector<ContactMap> seq(20);
  for (auto& m : seq) {
    m.in_contact = {0};
    m.distance = {1.0};
    m.nearest = {0};
  }
  seq[7].in_contact = {1};
  CHECK(accumulate(seq).ever_contact[0]);

  CHECK_THROWS_AS(accumulate({}), Error);
  maps[3].distance.push_back(0.0);
  CHECK_THROWS_AS(accumulate(maps), Error);
}

TEST_CASE("project_to_template matches an incidence oracle") {
  const std::vector<std::array<std::uint32_t, 3>> faces{{0, 1, 2}, {1, 2, 3}, {2, 3, 4}, {4, 5, 0}};
  CHECK(project_to_template(std::vector<char>{0, 0}, std::vector<std::uint32_t>{0, 1}, faces, 6) ==
        std::vector<char>(6, 0));
  CHECK(project_to_template(std::vector<char>{1}, std::vector<std::uint32_t>{2}, faces, 6) ==
        std::vector<char>{0, 0, 1, 1, 1, 0});

  std::mt19937_64 rng(80);
  std::uniform_int_distribution<std::uint32_t> tri(0, 3);
  std::bernoulli_distribution coin(0.3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<char> flags(12);
    std::vector<std::uint32_t> ids(12);
    for (std::size_t i = 0; i < 12; ++i) {
      flags[i] = coin(rng);
      ids[i] = tri(rng);
    }
    // labels = (incidence^T * (binding^T * flags)) > 0
    Eigen::MatrixXd bind = Eigen::MatrixXd::Zero(12, 4), inc = Eigen::MatrixXd::Zero(4, 6);
    Eigen::VectorXd fl(12);
    for (std::size_t i = 0; i < 12; ++i) {
      bind(i, ids[i]) = 1;
      fl[i] = flags[i];
    }
    for (std::size_t f = 0; f < 4; ++f)
      for (auto v : faces[f]) inc(f, v) = 1;
    const Eigen::VectorXd counts = inc.transpose() * (bind.transpose() * fl);
    const auto labels = project_to_template(flags, ids, faces, 6);
    for (int v = 0; v < 6; ++v) CHECK(static_cast<bool>(labels[v]) == (counts[v] > 0));
  }
  CHECK_THROWS_AS(project_to_template(std::vector<char>{1}, std::vector<std::uint32_t>{9}, faces, 6), Error);
}

TEST_CASE("contact voxels") {
  const double tau = 0.01;
  const std::vector<Vec3> pos{{0, 0, 0}, {0.001, 0.001, 0.001}, {0.5, 0.5, 0.5}};
  const std::vector<SurfelTag> tags{{SourceKind::HandRight, 0, 0}, {SourceKind::Object, 0, 0},
                                    {SourceKind::Object, 0, 1}};
  const ContactVoxels cv = label_contact_voxels(pos, tags, tau);
  CHECK(cv.grid.voxel_size == doctest::Approx(0.0057735026919));
  CHECK(cv.grid.voxel_size == tau / std::sqrt(3.0));
  CHECK(cv.contact_voxels.size() == 1);
  CHECK(cv.surfels == std::vector<std::uint32_t>{0, 1});

  std::mt19937_64 rng(81);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = cloud(rng, 400, 0.03);
    std::vector<SurfelTag> tg(p.size());
    for (auto& t : tg) t.kind = coin(rng) ? SourceKind::HandLeft : SourceKind::Object;
    const ContactVoxels got = label_contact_voxels(p, tg, tau);
    // Brute-force scan over every voxel key that holds a point.
    std::set<VoxelKey> keys, expected;
    for (const Vec3& x : p) keys.insert(got.grid.key(x));
    for (const VoxelKey& k : keys) {
      bool h = false, o = false;
      for (std::size_t i = 0; i < p.size(); ++i)
        if (got.grid.key(p[i]) == k) (tg[i].is_hand() ? h : o) = true;
      if (h && o) expected.insert(k);
    }
    CHECK(std::set<VoxelKey>(got.contact_voxels.begin(), got.contact_voxels.end()) == expected);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const bool in = expected.count(got.grid.key(p[i])) > 0;
      CHECK(std::binary_search(got.surfels.begin(), got.surfels.end(), static_cast<std::uint32_t>(i)) == in);
    }
    // Pairs closer than the voxel size land in the same or adjacent voxels.
    for (std::size_t i = 0; i < 50; ++i)
      for (std::size_t j = 0; j < p.size(); ++j)
        if ((p[i] - p[j]).norm() < got.grid.voxel_size) {
          const VoxelKey a = got.grid.key(p[i]), b = got.grid.key(p[j]);
          for (int ax = 0; ax < 3; ++ax) CHECK(std::abs(a[ax] - b[ax]) <= 1);
        }
  }
}

TEST_CASE("contact metrics") {
  const std::vector<char> a{1, 1, 0, 0}, b{0, 0, 1, 1}, half{1, 0, 0, 0}, gt{1, 1, 0, 0};
  auto m = contact_metrics(a, a);
  CHECK(m.iou == 1.0);
  CHECK(m.f1 == 1.0);
  m = contact_metrics(a, b);
  CHECK(m.iou == 0.0);
  CHECK(m.f1 == 0.0);
  m = contact_metrics(half, gt);
  CHECK(m.iou == doctest::Approx(0.5));
  CHECK(m.f1 == doctest::Approx(2.0 / 3.0));
  const std::vector<char> empty(4, 0);
  m = contact_metrics(empty, empty);
  CHECK(m.iou == 1.0);
  CHECK(m.f1 == 0.0);
  CHECK_THROWS_AS(contact_metrics(a, std::vector<char>{1}), Error);
}

TEST_CASE("finite-difference oracle examples") {
  const std::vector<double> x{3.0};
  auto sq = [](std::span<const double> v) { return v[0] * v[0]; };
  CHECK(std::abs(fd_gradient(sq, x, 1e-5)[0] - 6.0) < 1e-6);
  const std::vector<double> z{0.0};
  auto sn = [](std::span<const double> v) { return std::sin(v[0]); };
  CHECK(std::abs(fd_gradient(sn, z, 1e-5)[0] - 1.0) < 1e-8);
  auto bad = [](std::span<const double> v) { return std::log(v[0]); };
  CHECK_THROWS_AS(fd_gradient(bad, z, 1e-5), Error);
}
