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

#ifndef PFCV_IO_HPP_
#define PFCV_IO_HPP_

#include <array>
#include <charconv>
#include <cstdio>

#include "pfcv/geometry.hpp"

namespace pfcv {

struct MeshOff {
  std::vector<Vec3> vertices;
  std::vector<std::array<Index, 3>> faces;
};

namespace detail {

// Iterates non-empty lines with '#' comments removed, split on whitespace.
class LineTokens {
 public:
  explicit LineTokens(std::string_view text) : text_(text) {}

  // False at end of input.
  bool next() {
    while (pos_ < text_.size()) {
      const auto nl = text_.find('\n', pos_);
      std::string_view line =
          text_.substr(pos_, nl == std::string_view::npos ? std::string_view::npos : nl - pos_);
      pos_ = nl == std::string_view::npos ? text_.size() : nl + 1;
      ++line_;
      if (const auto h = line.find('#'); h != std::string_view::npos) line = line.substr(0, h);
      tokens_.clear();
      std::size_t i = 0;
      while (i < line.size()) {
        while (i < line.size() && is_space(line[i])) ++i;
        const std::size_t b = i;
        while (i < line.size() && !is_space(line[i])) ++i;
        if (i > b) tokens_.push_back(line.substr(b, i - b));
      }
      if (!tokens_.empty()) return true;
    }
    return false;
  }

  const std::vector<std::string_view>& tokens() const { return tokens_; }
  std::size_t line() const { return line_; }

 private:
  static bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\v' || c == '\f';
  }
  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 0;
  std::vector<std::string_view> tokens_;
};

inline double to_double(std::string_view tok, std::size_t line) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || p != tok.data() + tok.size() || !std::isfinite(v))
    throw ParseError(line, "bad number '" + std::string(tok.substr(0, 32)) + "'");
  return v;
}

inline std::uint64_t to_count(std::string_view tok, std::size_t line) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || p != tok.data() + tok.size())
    throw ParseError(line, "bad integer '" + std::string(tok.substr(0, 32)) + "'");
  return v;
}

}  // namespace detail

// OFF text. The header may be fused with the counts ("OFF492 1000 0") as in
// ModelNet files; only triangle faces are accepted.
inline MeshOff parse_off(std::string_view bytes) {
  detail::LineTokens lt(bytes);
  if (!lt.next()) throw ParseError(0, "empty OFF input");
  std::vector<std::string_view> counts = lt.tokens();
  if (counts.front().substr(0, 3) == "OFF") {
    const std::string_view rest = counts.front().substr(3);
    counts.erase(counts.begin());
    if (!rest.empty()) counts.insert(counts.begin(), rest);
    if (counts.empty()) {
      if (!lt.next()) throw ParseError(lt.line(), "missing counts line");
      counts = lt.tokens();
    }
  }
  const std::size_t counts_line = lt.line();
  if (counts.size() < 2 || counts.size() > 3)
    throw ParseError(counts_line, "malformed counts line, expected V F E");
  const std::uint64_t nv = detail::to_count(counts[0], counts_line);
  const std::uint64_t nf = detail::to_count(counts[1], counts_line);
  if (counts.size() == 3) detail::to_count(counts[2], counts_line);
  if (nv == 0) throw ParseError(counts_line, "mesh needs at least one vertex");

  MeshOff mesh;
  // Counts come from untrusted input; grow only with actual lines.
  for (std::uint64_t i = 0; i < nv; ++i) {
    if (!lt.next()) throw ParseError(lt.line(), "unexpected end of input in vertices");
    const auto& t = lt.tokens();
    if (t.size() < 3) throw ParseError(lt.line(), "vertex needs 3 coordinates");
    mesh.vertices.emplace_back(detail::to_double(t[0], lt.line()),
                               detail::to_double(t[1], lt.line()),
                               detail::to_double(t[2], lt.line()));
  }
  for (std::uint64_t i = 0; i < nf; ++i) {
    if (!lt.next()) throw ParseError(lt.line(), "unexpected end of input in faces");
    const auto& t = lt.tokens();
    const std::uint64_t n = detail::to_count(t[0], lt.line());
    if (n != 3) throw ParseError(lt.line(), "non-triangle face (" + std::to_string(n) + ")");
    if (t.size() < 4) throw ParseError(lt.line(), "face needs 3 indices");
    std::array<Index, 3> f{};
    for (int k = 0; k < 3; ++k) {
      const std::uint64_t idx = detail::to_count(t[1 + k], lt.line());
      if (idx >= nv) throw ParseError(lt.line(), "face index out of range");
      f[k] = static_cast<Index>(idx);
    }
    mesh.faces.push_back(f);
  }
  return mesh;
}

struct SurfaceSamples {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
  std::vector<std::size_t> faces;  // source triangle per sample
};

// Area-weighted triangle choice, then uniform barycentric coordinates.
inline SurfaceSamples sample_mesh_points(const MeshOff& mesh, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("need at least one sample");
  std::vector<double> cdf;
  cdf.reserve(mesh.faces.size());
  double total = 0.0;
  for (const auto& f : mesh.faces) {
    for (Index v : f)
      if (v >= mesh.vertices.size()) throw InvalidArgument("face index out of range");
    const Vec3 e1 = mesh.vertices[f[1]] - mesh.vertices[f[0]];
    const Vec3 e2 = mesh.vertices[f[2]] - mesh.vertices[f[0]];
    total += 0.5 * e1.cross(e2).norm();
    cdf.push_back(total);
  }
  if (!(total > 0.0) || !std::isfinite(total))
    throw InvalidArgument("mesh has zero surface area");
  Rng rng(seed);
  SurfaceSamples s;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform() * total;
    // first face whose cumulative area exceeds u; never a zero-area face
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) --it;
    const auto fi = static_cast<std::size_t>(it - cdf.begin());
    const auto& f = mesh.faces[fi];
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    const double r1 = std::sqrt(rng.uniform()), r2 = rng.uniform();
    s.points.push_back((1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c);
    s.normals.push_back((b - a).cross(c - a).normalized());
    s.faces.push_back(fi);
  }
  return s;
}

// Samples with face normals, normalized to zero centroid and unit max radius.
inline PointCloud sample_mesh_surface(const MeshOff& mesh, std::size_t n, std::uint64_t seed) {
  SurfaceSamples s = sample_mesh_points(mesh, n, seed);
  PointCloud pc;
  pc.positions = std::move(s.points);
  pc.normals = std::move(s.normals);
  normalize_unit_ball(pc);
  return pc;
}

// Whitespace-separated "x y z [nx ny nz] [label]" per line.
inline PointCloud parse_xyz(std::string_view bytes) {
  detail::LineTokens lt(bytes);
  PointCloud pc;
  std::size_t cols = 0;
  while (lt.next()) {
    const auto& t = lt.tokens();
    if (cols == 0) {
      cols = t.size();
      if (cols != 3 && cols != 4 && cols != 6 && cols != 7)
        throw ParseError(lt.line(), "expected 3, 4, 6 or 7 columns, got " +
                                        std::to_string(cols));
    } else if (t.size() != cols) {
      throw ParseError(lt.line(), "inconsistent column count " + std::to_string(t.size()) +
                                      ", expected " + std::to_string(cols));
    }
    pc.positions.emplace_back(detail::to_double(t[0], lt.line()),
                              detail::to_double(t[1], lt.line()),
                              detail::to_double(t[2], lt.line()));
    if (cols >= 6) {
      Vec3 n(detail::to_double(t[3], lt.line()), detail::to_double(t[4], lt.line()),
             detail::to_double(t[5], lt.line()));
      const double len = n.norm();
      if (!(len > 0.0) || !std::isfinite(len)) throw ParseError(lt.line(), "zero normal");
      pc.normals.push_back(n / len);
    }
    if (cols == 4 || cols == 7) {
      const std::uint64_t lab = detail::to_count(t[cols - 1], lt.line());
      if (lab > static_cast<std::uint64_t>(std::numeric_limits<int>::max()))
        throw ParseError(lt.line(), "label out of range");
      pc.labels.push_back(static_cast<int>(lab));
    }
  }
  if (pc.positions.empty()) throw ParseError(lt.line(), "no points");
  return pc;
}

inline std::string write_xyz(const PointCloud& cloud) {
  std::string out;
  char buf[256];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.positions[i];
    int n = std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g", p.x(), p.y(), p.z());
    out.append(buf, static_cast<std::size_t>(n));
    if (cloud.has_normals()) {
      const Vec3& q = cloud.normals[i];
      n = std::snprintf(buf, sizeof buf, " %.9g %.9g %.9g", q.x(), q.y(), q.z());
      out.append(buf, static_cast<std::size_t>(n));
    }
    if (cloud.has_labels()) out += " " + std::to_string(cloud.labels[i]);
    out += '\n';
  }
  return out;
}

using Rgb = std::array<std::uint8_t, 3>;

// ASCII PLY with float positions and uchar colors.
inline std::string write_ply_colored(std::span<const Vec3> points, std::span<const Rgb> colors) {
  if (points.size() != colors.size())
    throw InvalidArgument("colors must align with points");
  std::string out = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(points.size()) +
                    "\nproperty float x\nproperty float y\nproperty float z\n"
                    "property uchar red\nproperty uchar green\nproperty uchar blue\n"
                    "end_header\n";
  char buf[256];
  for (std::size_t i = 0; i < points.size(); ++i) {
    const int n = std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g %u %u %u\n", points[i].x(),
                                points[i].y(), points[i].z(), unsigned(colors[i][0]),
                                unsigned(colors[i][1]), unsigned(colors[i][2]));
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

struct ColoredPoints {
  std::vector<Vec3> points;
  std::vector<Rgb> colors;
};

// Reader for the files write_ply_colored produces.
inline ColoredPoints parse_ply_colored(std::string_view bytes) {
  detail::LineTokens lt(bytes);
  if (!lt.next() || lt.tokens()[0] != "ply") throw ParseError(lt.line(), "missing ply magic");
  std::uint64_t count = 0;
  bool have_count = false;
  while (true) {
    if (!lt.next()) throw ParseError(lt.line(), "missing end_header");
    const auto& t = lt.tokens();
    if (t[0] == "end_header") break;
    if (t[0] == "format" && (t.size() < 2 || t[1] != "ascii"))
      throw ParseError(lt.line(), "only ascii PLY is supported");
    if (t[0] == "element" && t.size() == 3 && t[1] == "vertex") {
      count = detail::to_count(t[2], lt.line());
      have_count = true;
    }
  }
  if (!have_count) throw ParseError(lt.line(), "missing vertex element");
  ColoredPoints cp;
  for (std::uint64_t i = 0; i < count; ++i) {
    if (!lt.next()) throw ParseError(lt.line(), "unexpected end of vertex data");
    const auto& t = lt.tokens();
    if (t.size() != 6) throw ParseError(lt.line(), "expected x y z r g b");
    cp.points.emplace_back(detail::to_double(t[0], lt.line()), detail::to_double(t[1], lt.line()),
                           detail::to_double(t[2], lt.line()));
    Rgb c{};
    for (int k = 0; k < 3; ++k) {
      const auto v = detail::to_count(t[3 + k], lt.line());
      if (v > 255) throw ParseError(lt.line(), "color out of range");
      c[k] = static_cast<std::uint8_t>(v);
    }
    cp.colors.push_back(c);
  }
  return cp;
}

}  // namespace pfcv

#endif  // PFCV_IO_HPP_
