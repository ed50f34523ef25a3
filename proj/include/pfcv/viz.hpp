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

#ifndef PFCV_VIZ_HPP_
#define PFCV_VIZ_HPP_

#include "pfcv/fields.hpp"
#include "pfcv/io.hpp"

namespace pfcv {

inline constexpr std::size_t kPaletteSize = 64;
inline constexpr Rgb kGray{160, 160, 160};

// Fixed 64-color palette: golden-ratio hue steps at alternating brightness.
inline const std::array<Rgb, kPaletteSize>& palette() {
  static const std::array<Rgb, kPaletteSize> colors = [] {
    std::array<Rgb, kPaletteSize> c{};
    for (std::size_t i = 0; i < kPaletteSize; ++i) {
      const double h = std::fmod(static_cast<double>(i) * 0.61803398874989485, 1.0) * 6.0;
      const double v = i % 2 == 0 ? 0.95 : 0.7;
      const double s = i % 4 < 2 ? 0.85 : 0.6;
      const double f = h - std::floor(h);
      const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
      double r = 0, g = 0, b = 0;
      switch (static_cast<int>(h) % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
      }
      c[i] = {static_cast<std::uint8_t>(std::lround(r * 255)),
              static_cast<std::uint8_t>(std::lround(g * 255)),
              static_cast<std::uint8_t>(std::lround(b * 255))};
    }
    return c;
  }();
  return colors;
}

// Uniform samples in the ball of radius r.
inline std::vector<Vec3> probe_ball(std::size_t n, double r, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Vec3> pts;
  pts.reserve(n);
  while (pts.size() < n) {
    const Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    if (p.squaredNorm() <= 1.0) pts.push_back(p * r);
  }
  return pts;
}

template <typename S>
Mat<S> to_rows(std::span<const Vec3> pts) {
  Mat<S> Y(static_cast<Eigen::Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i)
    Y.row(static_cast<Eigen::Index>(i)) = pts[i].cast<S>().transpose();
  return Y;
}

// Bank restricted to the given fields, in order.
template <typename S>
FieldBank<S> select_fields(const FieldBank<S>& bank, std::span<const Eigen::Index> fields) {
  for (auto k : fields)
    if (k < 0 || k >= bank.fields()) throw InvalidArgument("field index out of range");
  FieldBank<S> out = bank;
  const auto n = static_cast<Eigen::Index>(fields.size());
  auto rows = [&](const Mat<S>& m) {
    Mat<S> r(n, m.cols());
    for (Eigen::Index i = 0; i < n; ++i) r.row(i) = m.row(fields[static_cast<std::size_t>(i)]);
    return r;
  };
  auto entries = [&](const Vec<S>& v) {
    Vec<S> r(n);
    for (Eigen::Index i = 0; i < n; ++i) r(i) = v(fields[static_cast<std::size_t>(i)]);
    return r;
  };
  if (bank.kind == FieldKind::mlp) {
    out.W2 = rows(bank.W2);
    out.c2 = entries(bank.c2);
  } else {
    out.A = rows(bank.A);
    if (bank.B.rows() != 0) out.B = rows(bank.B);
    out.bias = entries(bank.bias);
  }
  return out;
}

// Colors each local point by its most correlated field. Normal-augmented
// fields are evaluated with zero normals.
template <typename S>
ColoredPoints color_by_argmax(const FieldBank<S>& bank, std::span<const Vec3> pts) {
  const Mat<S> Y = to_rows<S>(pts);
  const Mat<S> zeros = Mat<S>::Zero(Y.rows(), 3);
  const auto idx = argmax_field(bank, Y, bank.uses_normals() ? &zeros : nullptr);
  ColoredPoints out;
  out.points.assign(pts.begin(), pts.end());
  for (auto k : idx) out.colors.push_back(palette()[static_cast<std::size_t>(k) % kPaletteSize]);
  return out;
}

// Mean over points of the fraction of their k nearest other points that
// carry the same color.
inline double color_coherence(const ColoredPoints& cp, std::size_t k = 8) {
  const std::size_t n = cp.points.size();
  if (cp.colors.size() != n) throw InvalidArgument("colors must align with points");
  if (n < 2 || k == 0) return 1.0;
  k = std::min(k, n - 1);
  std::vector<double> share(n);
  parallel_for(n, [&](std::size_t b, std::size_t e) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t i = b; i < e; ++i) {
      d.clear();
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) d.emplace_back((cp.points[i] - cp.points[j]).squaredNorm(), j);
      std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
      std::size_t same = 0;
      for (std::size_t t = 0; t < k; ++t) same += cp.colors[d[t].second] == cp.colors[i];
      share[i] = static_cast<double>(same) / static_cast<double>(k);
    }
  });
  double s = 0.0;
  for (double v : share) s += v;
  return s / static_cast<double>(n);
}

struct IsosurfaceOptions {
  double eta = 0.5;
  double band = 0.02;
  int grid = 48;
  std::vector<Eigen::Index> fields;  // empty: all fields
};

// Grid points over the ball of radius r whose |potential| lies within
// [eta - band, eta + band] for any selected field.
template <typename S>
std::vector<Vec3> isosurface_points(const FieldBank<S>& bank, double r,
                                    const IsosurfaceOptions& opt) {
  if (!(opt.eta > 0.0)) throw InvalidArgument("eta must be positive");
  if (opt.grid < 2) throw InvalidArgument("grid must have at least 2 samples per axis");
  std::vector<Eigen::Index> fields = opt.fields;
  if (fields.empty())
    for (Eigen::Index k = 0; k < bank.fields(); ++k) fields.push_back(k);
  for (auto k : fields)
    if (k < 0 || k >= bank.fields()) throw InvalidArgument("field index out of range");
  std::vector<Vec3> cells;
  const double step = 2.0 * r / (opt.grid - 1);
  for (int i = 0; i < opt.grid; ++i)
    for (int j = 0; j < opt.grid; ++j)
      for (int k = 0; k < opt.grid; ++k) {
        const Vec3 y(-r + i * step, -r + j * step, -r + k * step);
        if (y.norm() <= r) cells.push_back(y);
      }
  const Mat<S> Y = to_rows<S>(cells);
  const Mat<S> zeros = Mat<S>::Zero(Y.rows(), 3);
  const Mat<S> P = potentials_batched(bank, Y, bank.uses_normals() ? &zeros : nullptr);
  std::vector<Vec3> out;
  for (Eigen::Index i = 0; i < P.rows(); ++i)
    for (auto k : fields) {
      const double a = std::abs(static_cast<double>(P(i, k)));
      if (a >= opt.eta - opt.band && a <= opt.eta + opt.band) {
        out.push_back(cells[static_cast<std::size_t>(i)]);
        break;
      }
    }
  return out;
}

}  // namespace pfcv

#endif  // PFCV_VIZ_HPP_
