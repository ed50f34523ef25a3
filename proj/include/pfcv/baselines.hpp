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

#ifndef PFCV_BASELINES_HPP_
#define PFCV_BASELINES_HPP_

#include "pfcv/layers.hpp"

namespace pfcv {

// Shell radius of the rigid kernel arrangement, relative to the search radius.
inline constexpr double kShellFraction = 0.66;
// Default kernel influence distance, relative to the search radius.
inline constexpr double kDiscreteInfluence = 0.3;
inline constexpr int kContinuousHidden = 16;

// Fixed kernel points: a center point plus a shell at 0.66 r. Supported sizes
// are 1 (center), 7 (+ octahedron), 9 (+ cube), 13 (+ icosahedron) and
// 15 (+ octahedron and cube, i.e. the rhombic dodecahedron vertices).
inline std::vector<Vec3> make_rigid_dispositions(std::size_t m, double r) {
  if (!(r > 0.0)) throw InvalidArgument("radius must be positive");
  std::vector<Vec3> dirs;
  const auto octa = [&] {
    for (int a = 0; a < 3; ++a)
      for (int s : {1, -1}) {
        Vec3 v = Vec3::Zero();
        v[a] = s;
        dirs.push_back(v);
      }
  };
  const auto cube = [&] {
    for (int x : {1, -1})
      for (int y : {1, -1})
        for (int z : {1, -1}) dirs.push_back(Vec3(x, y, z).normalized());
  };
  switch (m) {
    case 1: break;
    case 7: octa(); break;
    case 9: cube(); break;
    case 13: {
      const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
      for (int s1 : {1, -1})
        for (int s2 : {1, -1}) {
          dirs.push_back(Vec3(0, s1, s2 * phi).normalized());
          dirs.push_back(Vec3(s1, s2 * phi, 0).normalized());
          dirs.push_back(Vec3(s2 * phi, 0, s1).normalized());
        }
      break;
    }
    case 15: octa(); cube(); break;
    default: throw InvalidArgument("unsupported kernel point count " + std::to_string(m));
  }
  std::vector<Vec3> pts{Vec3::Zero()};
  for (const auto& d : dirs) pts.push_back(d * (kShellFraction * r));
  return pts;
}

// ---------------------------------------------------------------------------
// Discrete kernel: out[q] = sum_i sum_m max(0, 1 - |y_i - x_m| / sigma) W_m f_i

template <typename S>
struct DiscreteKernel {
  Mat<S> points;   // M x 3
  Mat<S> weights;  // (M * D') x D; rows [m D', (m+1) D') hold W_m
  S sigma = S(1);
  Eigen::Index out_channels = 0;

  Eigen::Index size() const { return points.rows(); }
  auto weight(Eigen::Index m) { return weights.middleRows(m * out_channels, out_channels); }
  auto weight(Eigen::Index m) const {
    return weights.middleRows(m * out_channels, out_channels);
  }

  static DiscreteKernel make(std::size_t m, double r, Eigen::Index in, Eigen::Index out,
                             double sigma_fraction = kDiscreteInfluence) {
    DiscreteKernel k;
    const auto pts = make_rigid_dispositions(m, r);
    k.points.resize(static_cast<Eigen::Index>(pts.size()), 3);
    for (std::size_t i = 0; i < pts.size(); ++i)
      k.points.row(static_cast<Eigen::Index>(i)) = pts[i].cast<S>().transpose();
    k.out_channels = out;
    k.weights = Mat<S>::Zero(k.points.rows() * out, in);
    k.sigma = static_cast<S>(sigma_fraction * r);
    return k;
  }

  void validate() const {
    if (points.rows() < 1 || points.cols() != 3) throw InvalidArgument("need >= 1 kernel point");
    if (weights.rows() != points.rows() * out_channels)
      throw InvalidArgument("kernel weights do not match kernel points");
    if (!(sigma > S(0))) throw InvalidArgument("kernel influence must be positive");
    if (!all_finite(weights) || !all_finite(points))
      throw InvalidArgument("kernel has non-finite entries");
  }
};

// Linear correlation of every local point against every kernel point (K x M).
template <typename S>
Mat<S> discrete_correlation(const DiscreteKernel<S>& kernel, const Mat<S>& Y) {
  Mat<S> c(Y.rows(), kernel.size());
  for (Eigen::Index i = 0; i < Y.rows(); ++i)
    for (Eigen::Index m = 0; m < kernel.size(); ++m)
      c(i, m) = std::max(S(0), S(1) - (Y.row(i) - kernel.points.row(m)).norm() / kernel.sigma);
  return c;
}

template <typename S>
struct DiscreteTape {
  TapeHeader header;
  Aggregation aggregation = Aggregation::sum;
  NeighborIndex neighbors;
  Mat<S> F, corr, Z;
};

template <typename S>
std::pair<Mat<S>, DiscreteTape<S>> discrete_conv_forward(const DiscreteKernel<S>& kernel,
                                                         const Mat<S>& F,
                                                         const ConvGraph<S>& graph,
                                                         Aggregation agg = Aggregation::sum) {
  kernel.validate();
  graph.validate(F.rows());
  if (F.cols() != kernel.weights.cols())
    throw InvalidArgument("feature width does not match kernel weights");
  DiscreteTape<S> t;
  t.header.open();
  t.aggregation = agg;
  const Eigen::Index dout = kernel.out_channels;
  t.Z.noalias() = F * kernel.weights.transpose();  // N x (M D')
  t.corr = discrete_correlation(kernel, graph.local);
  const auto& nb = graph.neighbors;
  Mat<S> out = Mat<S>::Zero(static_cast<Eigen::Index>(nb.queries()), dout);
  for (std::size_t q = 0; q < nb.queries(); ++q) {
    auto row = out.row(static_cast<Eigen::Index>(q));
    for (std::size_t r = nb.offsets[q]; r < nb.offsets[q + 1]; ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      for (Eigen::Index m = 0; m < kernel.size(); ++m)
        if (t.corr(ri, m) > S(0))
          row += t.corr(ri, m) * t.Z.row(nb.indices[r]).segment(m * dout, dout);
    }
    row *= detail::aggregation_scale<S>(agg, nb.count(q));
  }
  t.neighbors = nb;
  t.F = F;
  return {std::move(out), std::move(t)};
}

template <typename S>
struct DiscreteGrads {
  Mat<S> weights;
  Mat<S> F;
};

template <typename S>
DiscreteGrads<S> discrete_conv_backward(const DiscreteKernel<S>& kernel, DiscreteTape<S>& tape,
                                        const Mat<S>& dOut) {
  const Eigen::Index dout = kernel.out_channels;
  if (dOut.rows() != static_cast<Eigen::Index>(tape.neighbors.queries()) ||
      dOut.cols() != dout || tape.Z.cols() != kernel.size() * dout)
    throw StructuralError("upstream gradient does not match the tape");
  tape.header.consume();
  const auto& nb = tape.neighbors;
  Mat<S> dZ = Mat<S>::Zero(tape.Z.rows(), tape.Z.cols());
  for (std::size_t q = 0; q < nb.queries(); ++q) {
    const RowVec<S> s = dOut.row(static_cast<Eigen::Index>(q)) *
                        detail::aggregation_scale<S>(tape.aggregation, nb.count(q));
    for (std::size_t r = nb.offsets[q]; r < nb.offsets[q + 1]; ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      for (Eigen::Index m = 0; m < kernel.size(); ++m)
        if (tape.corr(ri, m) > S(0))
          dZ.row(nb.indices[r]).segment(m * dout, dout) += tape.corr(ri, m) * s;
    }
  }
  DiscreteGrads<S> g;
  g.weights.noalias() = dZ.transpose() * tape.F;
  g.F.noalias() = dZ * kernel.weights;
  return g;
}

// ---------------------------------------------------------------------------
// Continuous kernel: an MLP maps y to a D' x D weight matrix,
//   out[q] = sum_i reshape(W2 lrelu(W1 y_i + c1) + c2) f_i.
// Writing reshape(W2 s + c2) = sum_h s_h M_h + C lets the products M_h f_i be
// formed once per source point.

template <typename S>
struct ContinuousKernel {
  Mat<S> W1;  // 16 x 3
  Vec<S> c1;  // 16
  Mat<S> W2;  // (D' D) x 16, row k D + d is entry (k, d)
  Vec<S> c2;  // D' D
  Eigen::Index in_channels = 0, out_channels = 0;

  static ContinuousKernel zeros(Eigen::Index in, Eigen::Index out) {
    ContinuousKernel k;
    k.in_channels = in;
    k.out_channels = out;
    k.W1 = Mat<S>::Zero(kContinuousHidden, 3);
    k.c1 = Vec<S>::Zero(kContinuousHidden);
    k.W2 = Mat<S>::Zero(in * out, kContinuousHidden);
    k.c2 = Vec<S>::Zero(in * out);
    return k;
  }

  void validate() const {
    if (W1.rows() != kContinuousHidden || W1.cols() != 3 || c1.size() != kContinuousHidden ||
        W2.rows() != in_channels * out_channels || W2.cols() != kContinuousHidden ||
        c2.size() != W2.rows())
      throw InvalidArgument("continuous kernel has inconsistent shapes");
    if (!all_finite(W1) || !all_finite(c1) || !all_finite(W2) || !all_finite(c2))
      throw InvalidArgument("continuous kernel has non-finite entries");
  }

  // The D' x D weight matrix regressed for one local point.
  Mat<S> weights_at(const Vec3T<S>& y) const {
    Vec<S> h = W1 * y + c1;
    for (auto& v : h) v = detail::lrelu(v);
    const Vec<S> flat = W2 * h + c2;
    return Eigen::Map<const Mat<S>>(flat.data(), out_channels, in_channels);
  }

  // Stacked [M_0; ...; M_15; C], (17 D') x D.
  Mat<S> stacked() const {
    const Eigen::Index h = kContinuousHidden;
    Mat<S> T(out_channels * (h + 1), in_channels);
    for (Eigen::Index j = 0; j < h; ++j)
      T.middleRows(j * out_channels, out_channels) =
          Eigen::Map<const Mat<S>>(W2.col(j).eval().data(), out_channels, in_channels);
    T.middleRows(h * out_channels, out_channels) =
        Eigen::Map<const Mat<S>>(c2.data(), out_channels, in_channels);
    return T;
  }
};

template <typename S>
struct ContinuousTape {
  TapeHeader header;
  Aggregation aggregation = Aggregation::sum;
  NeighborIndex neighbors;
  Mat<S> F, local, hidden, act, Z, T;
};

template <typename S>
std::pair<Mat<S>, ContinuousTape<S>> continuous_conv_forward(
    const ContinuousKernel<S>& kernel, const Mat<S>& F, const ConvGraph<S>& graph,
    Aggregation agg = Aggregation::sum) {
  kernel.validate();
  graph.validate(F.rows());
  if (F.cols() != kernel.in_channels)
    throw InvalidArgument("feature width does not match kernel");
  ContinuousTape<S> t;
  t.header.open();
  t.aggregation = agg;
  const Eigen::Index dout = kernel.out_channels;
  const Eigen::Index h = kContinuousHidden;
  t.T = kernel.stacked();
  t.Z.noalias() = F * t.T.transpose();  // N x (17 D')
  t.hidden = (graph.local * kernel.W1.transpose()).rowwise() + kernel.c1.transpose();
  t.act = t.hidden.unaryExpr([](S v) { return detail::lrelu(v); });
  const auto& nb = graph.neighbors;
  Mat<S> out = Mat<S>::Zero(static_cast<Eigen::Index>(nb.queries()), dout);
  for (std::size_t q = 0; q < nb.queries(); ++q) {
    auto row = out.row(static_cast<Eigen::Index>(q));
    for (std::size_t r = nb.offsets[q]; r < nb.offsets[q + 1]; ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      const auto z = t.Z.row(nb.indices[r]);
      for (Eigen::Index j = 0; j < h; ++j) row += t.act(ri, j) * z.segment(j * dout, dout);
      row += z.segment(h * dout, dout);
    }
    row *= detail::aggregation_scale<S>(agg, nb.count(q));
  }
  t.neighbors = nb;
  t.F = F;
  t.local = graph.local;
  return {std::move(out), std::move(t)};
}

template <typename S>
struct ContinuousGrads {
  ContinuousKernel<S> kernel;
  Mat<S> F;
};

template <typename S>
ContinuousGrads<S> continuous_conv_backward(const ContinuousKernel<S>& kernel,
                                            ContinuousTape<S>& tape, const Mat<S>& dOut) {
  const Eigen::Index dout = kernel.out_channels;
  const Eigen::Index din = kernel.in_channels;
  const Eigen::Index h = kContinuousHidden;
  if (dOut.rows() != static_cast<Eigen::Index>(tape.neighbors.queries()) ||
      dOut.cols() != dout || tape.T.rows() != (h + 1) * dout || tape.T.cols() != din)
    throw StructuralError("upstream gradient does not match the tape");
  tape.header.consume();
  const auto& nb = tape.neighbors;
  Mat<S> dZ = Mat<S>::Zero(tape.Z.rows(), tape.Z.cols());
  Mat<S> dact = Mat<S>::Zero(tape.act.rows(), h);
  for (std::size_t q = 0; q < nb.queries(); ++q) {
    const RowVec<S> s = dOut.row(static_cast<Eigen::Index>(q)) *
                        detail::aggregation_scale<S>(tape.aggregation, nb.count(q));
    for (std::size_t r = nb.offsets[q]; r < nb.offsets[q + 1]; ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      const Index i = nb.indices[r];
      for (Eigen::Index j = 0; j < h; ++j) {
        dZ.row(i).segment(j * dout, dout) += tape.act(ri, j) * s;
        dact(ri, j) = s.dot(tape.Z.row(i).segment(j * dout, dout));
      }
      dZ.row(i).segment(h * dout, dout) += s;
    }
  }
  ContinuousGrads<S> g;
  g.kernel = ContinuousKernel<S>::zeros(din, dout);
  const Mat<S> dT = dZ.transpose() * tape.F;  // (17 D') x D
  for (Eigen::Index j = 0; j < h; ++j) {
    const Mat<S> blk = dT.middleRows(j * dout, dout);
    g.kernel.W2.col(j) = Eigen::Map<const Vec<S>>(blk.data(), dout * din);
  }
  const Mat<S> cblk = dT.middleRows(h * dout, dout);
  g.kernel.c2 = Eigen::Map<const Vec<S>>(cblk.data(), dout * din);
  const Mat<S> dz = dact.cwiseProduct(
      tape.hidden.unaryExpr([](S v) { return detail::lrelu_grad(v); }));
  g.kernel.W1.noalias() = dz.transpose() * tape.local;
  g.kernel.c1 = dz.colwise().sum().transpose();
  g.F.noalias() = dZ * tape.T;
  return g;
}

}  // namespace pfcv

#endif  // PFCV_BASELINES_HPP_
