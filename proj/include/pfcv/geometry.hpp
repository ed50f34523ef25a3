/* Copyright 2026 The pfcv Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef PFCV_GEOMETRY_HPP_
#define PFCV_GEOMETRY_HPP_

#include <Eigen/Eigenvalues>

#include <array>
#include <optional>
#include <span>
#include <unordered_map>

#include "pfcv/core.hpp"

namespace pfcv {

struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<Vec3> normals;  // empty or positions.size()
  std::vector<int> labels;    // empty or positions.size()
  std::optional<int> class_id;

  std::size_t size() const { return positions.size(); }
  bool has_normals() const { return !normals.empty(); }
  bool has_labels() const { return !labels.empty(); }

  void validate() const {
    if (positions.empty()) throw InvalidArgument("point cloud is empty");
    for (const auto& p : positions)
      if (!p.allFinite()) throw InvalidArgument("non-finite coordinate");
    if (has_normals()) {
      if (normals.size() != positions.size())
        throw InvalidArgument("normals/positions length mismatch");
      for (const auto& n : normals) {
        const double len = n.norm();
        if (!(len >= 1.0 - 1e-6 && len <= 1.0 + 1e-6))
          throw InvalidArgument("normal is not unit length");
      }
    }
    if (has_labels() && labels.size() != positions.size())
      throw InvalidArgument("labels/positions length mismatch");
  }

  // Subset in the order given by idx.
  PointCloud select(std::span<const Index> idx) const {
    PointCloud out;
    out.class_id = class_id;
    out.positions.reserve(idx.size());
    for (Index i : idx) out.positions.push_back(positions.at(i));
    if (has_normals())
      for (Index i : idx) out.normals.push_back(normals.at(i));
    if (has_labels())
      for (Index i : idx) out.labels.push_back(labels.at(i));
    return out;
  }
};

// Zero centroid, max distance from centroid 1.
inline void normalize_unit_ball(PointCloud& cloud) {
  if (cloud.positions.empty()) return;
  Vec3 c = Vec3::Zero();
  for (const auto& p : cloud.positions) c += p;
  c /= static_cast<double>(cloud.size());
  double rmax = 0.0;
  for (auto& p : cloud.positions) {
    p -= c;
    rmax = std::max(rmax, p.norm());
  }
  if (rmax > 0.0)
    for (auto& p : cloud.positions) p /= rmax;
}

// Compressed neighbor lists: neighbors of query q are
// indices[offsets[q] .. offsets[q+1]).
struct NeighborIndex {
  double radius = 0.0;
  std::optional<std::size_t> max_k;
  std::vector<std::size_t> offsets{0};
  std::vector<Index> indices;

  std::size_t queries() const { return offsets.size() - 1; }
  std::size_t total() const { return indices.size(); }
  std::span<const Index> operator[](std::size_t q) const {
    return {indices.data() + offsets[q], offsets[q + 1] - offsets[q]};
  }
  std::size_t count(std::size_t q) const { return offsets[q + 1] - offsets[q]; }

  void push(std::span<const Index> list) {
    indices.insert(indices.end(), list.begin(), list.end());
    offsets.push_back(indices.size());
  }
};

namespace detail {

inline void check_radius_args(std::span<const Vec3> queries, double r) {
  if (!(r > 0.0) || !std::isfinite(r))
    throw InvalidArgument("radius must be positive and finite");
  for (const auto& q : queries)
    if (!q.allFinite()) throw InvalidArgument("non-finite query coordinate");
}

inline void check_positions(const std::vector<Vec3>& pts) {
  for (const auto& p : pts)
    if (!p.allFinite()) throw InvalidArgument("non-finite coordinate");
}

struct Candidate {
  double d2;
  Index idx;
  bool operator<(const Candidate& o) const {
    return d2 < o.d2 || (d2 == o.d2 && idx < o.idx);
  }
};

// Orders nearest first (ties by index) and applies the optional cap.
inline void finish_list(std::vector<Candidate>& cand,
                        std::optional<std::size_t> max_k,
                        std::vector<Index>& out) {
  std::sort(cand.begin(), cand.end());
  std::size_t keep = cand.size();
  if (max_k) keep = std::min(keep, *max_k);
  out.clear();
  for (std::size_t i = 0; i < keep; ++i) out.push_back(cand[i].idx);
}

}  // namespace detail

// Exhaustive O(n * Q) reference search.
inline NeighborIndex brute_force_radius(const PointCloud& cloud,
                                        std::span<const Vec3> queries, double r,
                                        std::optional<std::size_t> max_k = {}) {
  detail::check_radius_args(queries, r);
  detail::check_positions(cloud.positions);
  NeighborIndex nb;
  nb.radius = r;
  nb.max_k = max_k;
  const double r2 = r * r;
  std::vector<detail::Candidate> cand;
  std::vector<Index> list;
  for (const auto& q : queries) {
    cand.clear();
    for (std::size_t j = 0; j < cloud.size(); ++j) {
      const double d2 = (cloud.positions[j] - q).squaredNorm();
      if (d2 <= r2) cand.push_back({d2, static_cast<Index>(j)});
    }
    detail::finish_list(cand, max_k, list);
    nb.push(list);
  }
  return nb;
}

// Uniform grid hash with cell edge equal to the search radius; a query
// inspects the 27 cells around its own.
class GridHash {
 public:
  GridHash(std::span<const Vec3> points, double cell) : points_(points), cell_(cell) {
    if (!(cell > 0.0) || !std::isfinite(cell))
      throw InvalidArgument("radius must be positive and finite");
    std::vector<std::pair<std::uint64_t, Index>> keyed;
    keyed.reserve(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (!points[i].allFinite()) throw InvalidArgument("non-finite coordinate");
      keyed.emplace_back(key(coord(points[i])), static_cast<Index>(i));
    }
    std::sort(keyed.begin(), keyed.end());
    sorted_.reserve(keyed.size());
    for (std::size_t i = 0; i < keyed.size(); ++i) {
      if (i == 0 || keyed[i].first != keyed[i - 1].first)
        cells_.emplace(keyed[i].first, std::make_pair(i, i));
      cells_[keyed[i].first].second = i + 1;
      sorted_.push_back(keyed[i].second);
    }
  }

  // Appends (squared distance, index) of every point with distance <= r.
  void query(const Vec3& q, double r, std::vector<detail::Candidate>& out) const {
    const double r2 = r * r;
    const auto c = coord(q);
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz) {
          auto it = cells_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
          if (it == cells_.end()) continue;
          for (std::size_t s = it->second.first; s < it->second.second; ++s) {
            const Index j = sorted_[s];
            const double d2 = (points_[j] - q).squaredNorm();
            if (d2 <= r2) out.push_back({d2, j});
          }
        }
  }

 private:
  std::array<std::int64_t, 3> coord(const Vec3& p) const {
    // Clamping is monotone, so neighboring cells stay neighbors.
    constexpr double lim = 0x1p52;
    auto c = [&](double v) {
      return static_cast<std::int64_t>(std::clamp(std::floor(v / cell_), -lim, lim));
    };
    return {c(p.x()), c(p.y()), c(p.z())};
  }
  static std::uint64_t key(const std::array<std::int64_t, 3>& c) {
    // 21 bits per axis; wraparound only merges far-apart cells, which the
    // distance test then rejects.
    constexpr std::uint64_t mask = (1ULL << 21) - 1;
    return (static_cast<std::uint64_t>(c[0]) & mask) |
           ((static_cast<std::uint64_t>(c[1]) & mask) << 21) |
           ((static_cast<std::uint64_t>(c[2]) & mask) << 42);
  }

  std::span<const Vec3> points_;
  double cell_;
  std::vector<Index> sorted_;
  std::unordered_map<std::uint64_t, std::pair<std::size_t, std::size_t>> cells_;
};

// Radius neighborhoods, nearest first. With max_k the max_k nearest are kept
// (ties by lower index).
inline NeighborIndex radius_neighbors(const PointCloud& cloud,
                                      std::span<const Vec3> queries, double r,
                                      std::optional<std::size_t> max_k = {}) {
  detail::check_radius_args(queries, r);
  NeighborIndex nb;
  nb.radius = r;
  nb.max_k = max_k;
  if (queries.empty()) return nb;
  GridHash grid(cloud.positions, r);
  std::vector<detail::Candidate> cand;
  std::vector<Index> list;
  for (const auto& q : queries) {
    cand.clear();
    grid.query(q, r, cand);
    detail::finish_list(cand, max_k, list);
    nb.push(list);
  }
  return nb;
}

// y = x_j - x_q for every listed neighbor, flattened in neighbor order.
inline std::vector<Vec3> recenter(const PointCloud& cloud, const NeighborIndex& nb,
                                  std::span<const Vec3> query_positions) {
  if (query_positions.size() != nb.queries())
    throw StructuralError("query count does not match neighbor index");
  std::vector<Vec3> local;
  local.reserve(nb.total());
  for (std::size_t q = 0; q < nb.queries(); ++q)
    for (Index j : nb[q]) {
      if (j >= cloud.size()) throw StructuralError("neighbor index out of bounds");
      local.push_back(cloud.positions[j] - query_positions[q]);
    }
  return local;
}

// Greedy farthest point sampling starting at seed_index; ties go to the
// lower index.
inline std::vector<Index> farthest_point_sampling(const PointCloud& cloud,
                                                  std::size_t m,
                                                  std::size_t seed_index = 0) {
  const std::size_t n = cloud.size();
  if (m < 1 || m > n) throw InvalidArgument("sample count out of range");
  if (seed_index >= n) throw InvalidArgument("seed index out of range");
  std::vector<Index> out;
  out.reserve(m);
  std::vector<double> mind(n, std::numeric_limits<double>::infinity());
  std::size_t cur = seed_index;
  for (std::size_t s = 0; s < m; ++s) {
    out.push_back(static_cast<Index>(cur));
    mind[cur] = -std::numeric_limits<double>::infinity();
    const Vec3 c = cloud.positions[cur];
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = (cloud.positions[j] - c).squaredNorm();
      if (d < mind[j]) mind[j] = d;
      if (mind[j] > best_d) {
        best_d = mind[j];
        best = j;
      }
    }
    cur = best;
  }
  return out;
}

struct NormalEstimate {
  std::vector<Vec3> normals;
  std::size_t degenerate = 0;  // points that received the fallback normal
};

// PCA normals over radius neighborhoods. The sign is chosen so the largest
// magnitude component is positive.
inline NormalEstimate estimate_normals(const PointCloud& cloud, double r) {
  std::span<const Vec3> pts(cloud.positions);
  NeighborIndex nb = radius_neighbors(cloud, pts, r);
  NormalEstimate est;
  est.normals.resize(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    auto list = nb[i];
    if (list.size() < 3) {
      est.normals[i] = Vec3::UnitZ();
      ++est.degenerate;
      continue;
    }
    Vec3 mean = Vec3::Zero();
    for (Index j : list) mean += cloud.positions[j];
    mean /= static_cast<double>(list.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (Index j : list) {
      const Vec3 d = cloud.positions[j] - mean;
      cov += d * d.transpose();
    }
    cov /= static_cast<double>(list.size());
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
    const Vec3 ev = eig.eigenvalues();  // ascending
    if (ev[1] <= 1e-12 * std::max(ev[2], 1e-300)) {
      est.normals[i] = Vec3::UnitZ();
      ++est.degenerate;
      continue;
    }
    Vec3 n = eig.eigenvectors().col(0).normalized();
    Eigen::Index arg = 0;
    n.cwiseAbs().maxCoeff(&arg);
    if (n[arg] < 0) n = -n;
    est.normals[i] = n;
  }
  return est;
}

}  // namespace pfcv

#endif  // PFCV_GEOMETRY_HPP_
