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

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace pfcv {
namespace {

ConvGraph<double> single_neighbor_graph(const Vec3& offset) {
  PointCloud c;
  c.positions = {offset};
  const std::vector<Vec3> q{Vec3::Zero()};
  return make_graph<double>(c, q, radius_neighbors(c, q, 2.0), false);
}

DiscreteKernel<double> random_discrete(Rng& rng, std::size_t m, double r, Eigen::Index in,
                                       Eigen::Index out) {
  auto k = DiscreteKernel<double>::make(m, r, in, out);
  k.weights = testing::random_matrix<double>(rng, k.weights.rows(), in);
  return k;
}

ContinuousKernel<double> random_continuous(Rng& rng, Eigen::Index in, Eigen::Index out) {
  auto k = ContinuousKernel<double>::zeros(in, out);
  k.W1 = testing::random_matrix<double>(rng, kContinuousHidden, 3);
  k.c1 = testing::random_matrix<double>(rng, kContinuousHidden, 1, 0.5);
  k.W2 = testing::random_matrix<double>(rng, in * out, kContinuousHidden, 0.3);
  k.c2 = testing::random_matrix<double>(rng, in * out, 1, 0.3);
  return k;
}

TEST(RigidDispositions, CenterOnly) {
  const auto p = make_rigid_dispositions(1, 0.4);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0], Vec3::Zero());
}

TEST(RigidDispositions, ShellRadiusAndDeterminism) {
  for (std::size_t m : {7u, 9u, 13u, 15u}) {
    const auto p = make_rigid_dispositions(m, 0.4);
    ASSERT_EQ(p.size(), m);
    EXPECT_EQ(p[0], Vec3::Zero());
    for (std::size_t i = 1; i < m; ++i) EXPECT_NEAR(p[i].norm(), 0.66 * 0.4, 1e-9);
    EXPECT_EQ(p, make_rigid_dispositions(m, 0.4));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j) EXPECT_GT((p[i] - p[j]).norm(), 1e-3);
  }
}

TEST(RigidDispositions, Unsupported) {
  EXPECT_THROW(make_rigid_dispositions(4, 1.0), InvalidArgument);
  EXPECT_THROW(make_rigid_dispositions(0, 1.0), InvalidArgument);
  EXPECT_THROW(make_rigid_dispositions(15, 0.0), InvalidArgument);
}

TEST(DiscreteConv, NeighborOnKernelPoint) {
  Rng rng(1);
  const auto k = random_discrete(rng, 15, 1.0, 3, 4);
  const Vec3 at = k.points.row(3).transpose();
  const auto g = single_neighbor_graph(at);
  const Mat<double> F = testing::random_matrix<double>(rng, 1, 3);
  const Mat<double> out = discrete_conv_forward(k, F, g).first;
  const Mat<double> expect = F * k.weight(3).transpose();
  EXPECT_LE((out - expect).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(DiscreteConv, UncoveredNeighborsGiveZero) {
  Rng rng(2);
  auto k = random_discrete(rng, 7, 1.0, 3, 4);
  // Octahedron shell: the direction (1,1,1)/sqrt(3) at the shell radius is
  // farther than sigma from every kernel point.
  const auto g = single_neighbor_graph(Vec3(1, 1, 1).normalized() * 0.66);
  const Mat<double> out = discrete_conv_forward(k, testing::random_matrix<double>(rng, 1, 3), g).first;
  EXPECT_TRUE(out.isZero(0.0));
}

TEST(DiscreteConv, MatchesLoopOracle) {
  Rng rng(3);
  const auto inst = testing::random_conv_instance(4, FieldKind::linear, 30, 5, 6, 12, 0.8);
  const auto k = random_discrete(rng, 15, 0.8, 5, 6);
  const Mat<double> out = discrete_conv_forward(k, inst.F, inst.graph).first;
  const auto& nb = inst.graph.neighbors;
  Mat<double> ref = Mat<double>::Zero(12, 6);
  for (std::size_t q = 0; q < nb.queries(); ++q)
    for (std::size_t r = nb.offsets[q]; r < nb.offsets[q + 1]; ++r) {
      const Vec3 y = inst.graph.local.row(static_cast<Eigen::Index>(r)).transpose();
      for (Eigen::Index m = 0; m < k.size(); ++m) {
        const double h =
            std::max(0.0, 1.0 - (y - Vec3(k.points.row(m).transpose())).norm() / k.sigma);
        ref.row(static_cast<Eigen::Index>(q)) +=
            h * (k.weight(m) * inst.F.row(nb.indices[r]).transpose()).transpose();
      }
    }
  EXPECT_LE((out - ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DiscreteConv, ContinuousAwayFromKinks) {
  Rng rng(5);
  const auto k = random_discrete(rng, 15, 1.0, 2, 3);
  const Mat<double> F = testing::random_matrix<double>(rng, 1, 2);
  const Vec3 y(0.11, 0.07, 0.05);
  const Mat<double> a = discrete_conv_forward(k, F, single_neighbor_graph(y)).first;
  const Mat<double> b =
      discrete_conv_forward(k, F, single_neighbor_graph(y + Vec3(1e-7, -1e-7, 1e-7))).first;
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(DiscreteConv, ShapeMismatch) {
  Rng rng(6);
  const auto k = random_discrete(rng, 7, 1.0, 3, 4);
  const auto g = single_neighbor_graph(Vec3::Zero());
  EXPECT_THROW(discrete_conv_forward(k, Mat<double>(Mat<double>::Zero(1, 2)), g), InvalidArgument);
  EXPECT_THROW(discrete_conv_forward(k, Mat<double>(Mat<double>::Zero(2, 3)), g), InvalidArgument);
}

TEST(ContinuousConv, ZeroOutputLayer) {
  Rng rng(7);
  auto k = random_continuous(rng, 3, 4);
  k.W2.setZero();
  k.c2.setZero();
  const auto inst = testing::random_conv_instance(8, FieldKind::linear, 20, 3, 4, 10);
  EXPECT_TRUE(continuous_conv_forward(k, inst.F, inst.graph).first.isZero(0.0));
}

TEST(ContinuousConv, SingleNeighbor) {
  Rng rng(9);
  const auto k = random_continuous(rng, 3, 5);
  const Vec3 y(0.2, -0.1, 0.3);
  const Mat<double> F = testing::random_matrix<double>(rng, 1, 3);
  const Mat<double> out = continuous_conv_forward(k, F, single_neighbor_graph(y)).first;
  const Mat<double> expect = (k.weights_at(y) * F.transpose()).transpose();
  EXPECT_LE((out - expect).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(ContinuousConv, MatchesLoopOracle) {
  Rng rng(10);
  const auto inst = testing::random_conv_instance(11, FieldKind::linear, 30, 4, 6, 12, 0.8);
  const auto k = random_continuous(rng, 4, 6);
  const Mat<double> out =
      continuous_conv_forward(k, inst.F, inst.graph, Aggregation::mean).first;
  const auto& nb = inst.graph.neighbors;
  Mat<double> ref = Mat<double>::Zero(12, 6);
  for (std::size_t q = 0; q < nb.queries(); ++q) {
    for (std::size_t r = nb.offsets[q]; r < nb.offsets[q + 1]; ++r) {
      const Vec3 y = inst.graph.local.row(static_cast<Eigen::Index>(r)).transpose();
      ref.row(static_cast<Eigen::Index>(q)) +=
          (k.weights_at(y) * inst.F.row(nb.indices[r]).transpose()).transpose();
    }
    if (nb.count(q) > 0) ref.row(static_cast<Eigen::Index>(q)) /= static_cast<double>(nb.count(q));
  }
  EXPECT_LE((out - ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ContinuousConv, ShapeMismatch) {
  Rng rng(12);
  const auto k = random_continuous(rng, 3, 4);
  EXPECT_THROW(continuous_conv_forward(k, Mat<double>(Mat<double>::Zero(1, 2)),
                                       single_neighbor_graph(Vec3::Zero())),
               InvalidArgument);
}

TEST(Baselines, GradientsMatchFiniteDifferences) {
  GradcheckOptions opt;
  opt.include_model = false;
  for (auto family : {KernelFamily::discrete, KernelFamily::continuous}) {
    const auto report = gradcheck_family(family, opt);
    EXPECT_LE(report.worst(), 1e-5) << to_string(family);
    const bool has_conv = std::any_of(report.groups.begin(), report.groups.end(),
                                      [](const GroupError& e) { return e.group == "conv.input"; });
    EXPECT_TRUE(has_conv);
  }
}

TEST(Baselines, InterchangeableShapes) {
  Rng rng(13);
  const auto inst = testing::random_conv_instance(14, FieldKind::quadratic, 25, 4, 7, 9, 0.6);
  const auto pot = potconv_forward(inst.params, inst.F, inst.graph).first;
  const auto dis = discrete_conv_forward(random_discrete(rng, 15, 0.6, 4, 7), inst.F, inst.graph).first;
  const auto con = continuous_conv_forward(random_continuous(rng, 4, 7), inst.F, inst.graph).first;
  EXPECT_EQ(pot.rows(), 9);
  EXPECT_EQ(pot.cols(), 7);
  EXPECT_EQ(dis.rows(), pot.rows());
  EXPECT_EQ(dis.cols(), pot.cols());
  EXPECT_EQ(con.rows(), pot.rows());
  EXPECT_EQ(con.cols(), pot.cols());
}

TEST(Baselines, TapesConsumedOnce) {
  Rng rng(15);
  const auto inst = testing::random_conv_instance(16, FieldKind::linear, 15, 3, 4, 5);
  const auto dk = random_discrete(rng, 7, 0.7, 3, 4);
  auto [dout, dtape] = discrete_conv_forward(dk, inst.F, inst.graph);
  discrete_conv_backward(dk, dtape, dout);
  EXPECT_THROW(discrete_conv_backward(dk, dtape, dout), StructuralError);
  const auto ck = random_continuous(rng, 3, 4);
  auto [cout, ctape] = continuous_conv_forward(ck, inst.F, inst.graph);
  continuous_conv_backward(ck, ctape, cout);
  EXPECT_THROW(continuous_conv_backward(ck, ctape, cout), StructuralError);
}

}  // namespace
}  // namespace pfcv
