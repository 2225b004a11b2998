// SPDX-License-Identifier: Apache-2.0
#include "surfcap/contact.hpp"

#include "surfcap/error.hpp"

#include <algorithm>
#include <cmath>

namespace surfcap {

std::vector<double> ContactMap::scalar() const {
  std::vector<double> out(distance.size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (in_contact[i]) out[i] = distance[i];
  return out;
}

namespace {

// Dense CSR grid over the object bounding box.
class UniformGrid {
 public:
  UniformGrid(std::span<const Vec3> points, double cell) : points_(points) {
    lo_ = points[0];
    Vec3 hi = points[0];
    for (const Vec3& p : points) {
      lo_ = lo_.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    // Keep the dense table bounded for sparse, wide clouds.
    constexpr double kMaxCells = 1 << 22;
    cell_ = cell;
    for (;;) {
      std::int64_t total = 1;
      for (int a = 0; a < 3; ++a) {
        dims_[a] = static_cast<std::int64_t>(std::floor((hi[a] - lo_[a]) / cell_)) + 1;
        total *= dims_[a];
      }
      if (static_cast<double>(total) <= kMaxCells) break;
      cell_ *= std::cbrt(static_cast<double>(total) / kMaxCells) * 1.01;
    }
    const std::size_t ncells = static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]);
    start_.assign(ncells + 1, 0);
    std::vector<std::size_t> cell_of(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
      const auto c = coords(points[i]);
      cell_of[i] = linear(c[0], c[1], c[2]);
      ++start_[cell_of[i] + 1];
    }
    for (std::size_t c = 0; c < ncells; ++c) start_[c + 1] += start_[c];
    items_.resize(points.size());
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (std::size_t i = 0; i < points.size(); ++i)
      items_[fill[cell_of[i]]++] = static_cast<std::uint32_t>(i);
  }

  std::array<std::int64_t, 3> coords(const Vec3& p) const {
    std::array<std::int64_t, 3> c;
    for (int a = 0; a < 3; ++a) c[a] = static_cast<std::int64_t>(std::floor((p[a] - lo_[a]) / cell_));
    return c;
  }

  // Exact nearest neighbour by expanding Chebyshev shells.
  void nearest(const Vec3& p, double& best_d2, std::uint32_t& best_idx) const {
    best_d2 = std::numeric_limits<double>::infinity();
    best_idx = kNoSurfel;
    const auto c = coords(p);
    std::int64_t k_min = 0, k_max = 0;
    for (int a = 0; a < 3; ++a) {
      const std::int64_t outside = c[a] < 0 ? -c[a] : (c[a] >= dims_[a] ? c[a] - dims_[a] + 1 : 0);
      k_min = std::max(k_min, outside);
      k_max = std::max({k_max, std::abs(c[a]), std::abs(c[a] - (dims_[a] - 1))});
    }
    for (std::int64_t k = k_min; k <= k_max; ++k) {
      scan_shell(p, c, k, best_d2, best_idx);
      // Unscanned cells lie at least k cells away.
      const double bound = static_cast<double>(k) * cell_ * (1.0 - 1e-12);
      if (best_idx != kNoSurfel && best_d2 < bound * bound) return;
    }
  }

 private:
  std::size_t linear(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return static_cast<std::size_t>((z * dims_[1] + y) * dims_[0] + x);
  }

  void scan_cell(const Vec3& p, std::int64_t x, std::int64_t y, std::int64_t z, double& best_d2,
                 std::uint32_t& best_idx) const {
    const std::size_t cell = linear(x, y, z);
    for (std::size_t s = start_[cell]; s < start_[cell + 1]; ++s) {
      const std::uint32_t j = items_[s];
      const double d2 = (p - points_[j]).squaredNorm();
      if (d2 < best_d2 || (d2 == best_d2 && j < best_idx)) {
        best_d2 = d2;
        best_idx = j;
      }
    }
  }

  void scan_shell(const Vec3& p, const std::array<std::int64_t, 3>& c, std::int64_t k,
                  double& best_d2, std::uint32_t& best_idx) const {
    const std::int64_t x0 = std::max<std::int64_t>(c[0] - k, 0);
    const std::int64_t x1 = std::min<std::int64_t>(c[0] + k, dims_[0] - 1);
    const std::int64_t y0 = std::max<std::int64_t>(c[1] - k, 0);
    const std::int64_t y1 = std::min<std::int64_t>(c[1] + k, dims_[1] - 1);
    const std::int64_t z0 = std::max<std::int64_t>(c[2] - k, 0);
    const std::int64_t z1 = std::min<std::int64_t>(c[2] + k, dims_[2] - 1);
    for (std::int64_t x = x0; x <= x1; ++x)
      for (std::int64_t y = y0; y <= y1; ++y) {
        if (std::abs(x - c[0]) == k || std::abs(y - c[1]) == k) {
          for (std::int64_t z = z0; z <= z1; ++z) scan_cell(p, x, y, z, best_d2, best_idx);
        } else {
          if (c[2] - k >= 0 && c[2] - k < dims_[2]) scan_cell(p, x, y, c[2] - k, best_d2, best_idx);
          if (k > 0 && c[2] + k >= 0 && c[2] + k < dims_[2])
            scan_cell(p, x, y, c[2] + k, best_d2, best_idx);
        }
      }
  }

  std::span<const Vec3> points_;
  Vec3 lo_;
  double cell_ = 1.0;
  std::array<std::int64_t, 3> dims_{};
  std::vector<std::size_t> start_;
  std::vector<std::uint32_t> items_;
};

}  // namespace

ContactMap instantaneous_contact(std::span<const Vec3> hand, std::span<const Vec3> object,
                                 double tau) {
  if (!(tau > 0.0)) throw Error(ErrorCode::InvalidArgument, "contact threshold must be positive");
  ContactMap map;
  map.tau = tau;
  map.in_contact.assign(hand.size(), 0);
  map.distance.assign(hand.size(), std::numeric_limits<double>::infinity());
  map.nearest.assign(hand.size(), kNoSurfel);
  if (object.empty()) return map;
  const UniformGrid grid(object, tau);
  for (std::size_t i = 0; i < hand.size(); ++i) {
    double d2;
    std::uint32_t idx;
    grid.nearest(hand[i], d2, idx);
    map.distance[i] = std::sqrt(d2);
    map.nearest[i] = idx;
    map.in_contact[i] = map.distance[i] < tau ? 1 : 0;
  }
  return map;
}

AccumulatedContact accumulate(std::span<const ContactMap> maps) {
  if (maps.empty()) throw Error(ErrorCode::EmptySequence, "no contact maps to accumulate");
  AccumulatedContact acc;
  acc.tau = maps[0].tau;
  acc.ever_contact = maps[0].in_contact;
  acc.min_distance = maps[0].distance;
  for (std::size_t f = 1; f < maps.size(); ++f) {
    if (maps[f].size() != acc.min_distance.size())
      throw Error(ErrorCode::LengthMismatch, "contact maps cover different surfel arrays");
    for (std::size_t i = 0; i < acc.min_distance.size(); ++i) {
      acc.ever_contact[i] = acc.ever_contact[i] || maps[f].in_contact[i];
      acc.min_distance[i] = std::min(acc.min_distance[i], maps[f].distance[i]);
    }
  }
  return acc;
}

std::vector<char> project_to_template(std::span<const char> ever_contact,
                                      std::span<const std::uint32_t> triangle_ids,
                                      std::span<const std::array<std::uint32_t, 3>> faces,
                                      std::size_t vertex_count) {
  if (ever_contact.size() != triangle_ids.size())
    throw Error(ErrorCode::LengthMismatch, "contact flags and bindings differ in length");
  std::vector<char> labels(vertex_count, 0);
  for (std::size_t i = 0; i < ever_contact.size(); ++i) {
    if (!ever_contact[i]) continue;
    if (triangle_ids[i] >= faces.size())
      throw Error(ErrorCode::TopologyOutOfRange, "surfel bound to a missing face");
    for (std::uint32_t v : faces[triangle_ids[i]]) {
      if (v >= vertex_count) throw Error(ErrorCode::TopologyOutOfRange, "face vertex out of range");
      labels[v] = 1;
    }
  }
  return labels;
}

VoxelKey VoxelGrid::key(const Vec3& x) const {
  VoxelKey k;
  for (int a = 0; a < 3; ++a)
    k[a] = static_cast<std::int64_t>(std::floor((x[a] - origin[a]) / voxel_size));
  return k;
}

ContactVoxels label_contact_voxels(std::span<const Vec3> positions,
                                   std::span<const SurfelTag> tags, double tau) {
  if (!(tau > 0.0)) throw Error(ErrorCode::InvalidArgument, "contact threshold must be positive");
  if (positions.size() != tags.size())
    throw Error(ErrorCode::LengthMismatch, "positions and tags differ in length");
  ContactVoxels out;
  out.grid.voxel_size = tau / std::sqrt(3.0);
  if (positions.empty()) return out;
  Vec3 lo = positions[0];
  for (const Vec3& p : positions) lo = lo.cwiseMin(p);
  out.grid.origin = lo - Vec3::Constant(0.5 * out.grid.voxel_size);
  std::vector<VoxelKey> keys(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    keys[i] = out.grid.key(positions[i]);
    VoxelCell& cell = out.grid.occupancy[keys[i]];
    if (tags[i].is_hand())
      cell.has_hand = true;
    else
      cell.has_object = true;
  }
  for (const auto& [key, cell] : out.grid.occupancy)
    if (cell.has_hand && cell.has_object) out.contact_voxels.push_back(key);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const VoxelCell& cell = out.grid.occupancy.at(keys[i]);
    if (cell.has_hand && cell.has_object) out.surfels.push_back(static_cast<std::uint32_t>(i));
  }
  return out;
}

ContactMetrics contact_metrics(std::span<const char> pred, std::span<const char> gt) {
  if (pred.size() != gt.size())
    throw Error(ErrorCode::LengthMismatch, "prediction and ground truth differ in length");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
  }
  ContactMetrics m;
  const std::size_t uni = tp + fp + fn;
  m.iou = uni == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(uni);
  m.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  m.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

}  // namespace surfcap
