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

#ifndef PFCV_LAYERS_HPP_
#define PFCV_LAYERS_HPP_

#include <atomic>
#include <utility>

#include "pfcv/fields.hpp"
#include "pfcv/geometry.hpp"

namespace pfcv {

enum class Aggregation { sum, mean };
enum class Mode { train, eval };

// Bookkeeping shared by every tape: a forward invocation gets a fresh token
// and its tape may be consumed by exactly one backward call.
struct TapeHeader {
  std::uint64_t token = 0;
  bool consumed = false;

  static std::uint64_t next_token() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }
  void open() {
    token = next_token();
    consumed = false;
  }
  void consume() {
    if (token == 0) throw StructuralError("backward called without a forward tape");
    if (consumed) throw StructuralError("tape already consumed by a backward call");
    consumed = true;
  }
};

// Neighborhood structure of one convolution call in layer-ready form.
// Row r of `local` (and `normals`) belongs to the r-th flattened neighbor.
template <typename S>
struct ConvGraph {
  NeighborIndex neighbors;
  Mat<S> local;    // total x 3
  Mat<S> normals;  // total x 3, or empty
  std::size_t sources = 0;

  std::size_t queries() const { return neighbors.queries(); }

  void validate(Eigen::Index feature_rows) const {
    if (static_cast<std::size_t>(feature_rows) != sources)
      throw InvalidArgument("feature rows do not match the source cloud");
    if (local.rows() != static_cast<Eigen::Index>(neighbors.total()) || local.cols() != 3)
      throw StructuralError("local coordinates do not match neighbor lists");
    if (normals.size() != 0 && normals.rows() != local.rows())
      throw StructuralError("neighbor normals do not match neighbor lists");
    for (Index j : neighbors.indices)
      if (j >= sources) throw StructuralError("neighbor index out of bounds");
  }
};

// Builds the layer-ready graph for queries against a source cloud.
template <typename S>
ConvGraph<S> make_graph(const PointCloud& source, std::span<const Vec3> queries,
                        NeighborIndex nb, bool with_normals) {
  ConvGraph<S> g;
  g.sources = source.size();
  const auto local = recenter(source, nb, queries);
  g.local.resize(static_cast<Eigen::Index>(local.size()), 3);
  for (std::size_t r = 0; r < local.size(); ++r)
    g.local.row(static_cast<Eigen::Index>(r)) = local[r].cast<S>().transpose();
  if (with_normals) {
    if (!source.has_normals()) throw InvalidArgument("cloud has no normals");
    g.normals.resize(g.local.rows(), 3);
    for (std::size_t r = 0; r < nb.indices.size(); ++r)
      g.normals.row(static_cast<Eigen::Index>(r)) =
          source.normals[nb.indices[r]].cast<S>().transpose();
  }
  g.neighbors = std::move(nb);
  return g;
}

// Named view of a trainable array (or a persistent buffer) and its gradient.
template <typename S>
struct Param {
  std::string name;
  S* value = nullptr;
  S* grad = nullptr;  // null for buffers
  Eigen::Index size = 0;
  bool decay = false;  // weight decay applies
};
template <typename S>
using ParamList = std::vector<Param<S>>;

template <typename S, typename M>
void add_param(ParamList<S>& out, std::string name, M& value, M& grad, bool decay) {
  if (value.size() == 0) return;
  out.push_back({std::move(name), value.data(), grad.data(), value.size(), decay});
}
template <typename S, typename M>
void add_buffer(ParamList<S>& out, std::string name, M& value) {
  out.push_back({std::move(name), value.data(), nullptr, value.size(), false});
}

// ---------------------------------------------------------------------------
// Potential convolution
//
//   out[q, k] = sum_{i in N(q)} h(p_k(x_i - x_q)) * (W f_i)[k]
//
// The feature term W f_i is shared by every query that sees point i, so it is
// computed once per source point.

template <typename S>
struct ConvParams {
  FieldBank<S> bank;
  Mat<S> W;  // D' x D
  Aggregation aggregation = Aggregation::sum;

  void validate() const {
    bank.validate();
    if (W.rows() != bank.fields())
      throw InvalidArgument("W rows must equal the number of potential fields");
    if (!all_finite(W)) throw InvalidArgument("W has non-finite entries");
  }
};

template <typename S>
struct PotConvTape {
  TapeHeader header;
  Eigen::Index in_channels = 0, out_channels = 0;
  FieldKind kind = FieldKind::linear;
  Aggregation aggregation = Aggregation::sum;
  NeighborIndex neighbors;
  Mat<S> F, local, normals;
  Mat<S> G;  // N x D'   (F W^T)
};

template <typename S>
struct ConvGrads {
  FieldBank<S> bank;
  Mat<S> W;
  Mat<S> F;
};

namespace detail {

template <typename S>
S aggregation_scale(Aggregation agg, std::size_t count) {
  return agg == Aggregation::mean && count > 0 ? S(1) / static_cast<S>(count) : S(1);
}

template <typename S>
using RowArr = Eigen::Array<S, 1, Eigen::Dynamic>;
template <typename S>
using RowMajorArr = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Field coefficients transposed so one local point is evaluated with
// contiguous length-D' row operations.
template <typename S>
struct FieldRows {
  FieldKind kind;
  RowMajorArr<S> A, B, W2;  // 3 x D', 3 x D', 8 x D'
  RowArr<S> bias;           // bias (analytic kinds) or c2 (mlp)
  Mat<S> W1;
  Vec<S> c1;

  explicit FieldRows(const FieldBank<S>& b) : kind(b.kind) {
    if (kind == FieldKind::mlp) {
      W2 = b.W2.transpose().array();
      bias = b.c2.transpose().array();
      W1 = b.W1;
      c1 = b.c1;
    } else {
      A = b.A.transpose().array();
      if (kind == FieldKind::quadratic) B = b.B.transpose().array();
      bias = b.bias.transpose().array();
    }
  }

  // u receives the coordinates the linear terms act on; z the mlp
  // pre-activations.
  void eval(const S* y, const S* n, RowArr<S>& p, S* u, S* z) const {
    u[0] = y[0];
    u[1] = y[1];
    u[2] = y[2];
    switch (kind) {
      case FieldKind::linear_normal:
        u[0] += n[0];
        u[1] += n[1];
        u[2] += n[2];
        [[fallthrough]];
      case FieldKind::linear:
        p = bias + u[0] * A.row(0) + u[1] * A.row(1) + u[2] * A.row(2);
        return;
      case FieldKind::quadratic:
        p = bias + u[0] * A.row(0) + u[1] * A.row(1) + u[2] * A.row(2) +
            (u[0] * u[0]) * B.row(0) + (u[1] * u[1]) * B.row(1) + (u[2] * u[2]) * B.row(2);
        return;
      case FieldKind::mlp:
        p = bias;
        for (int m = 0; m < kMlpHidden; ++m) {
          z[m] = W1(m, 0) * y[0] + W1(m, 1) * y[1] + W1(m, 2) * y[2] + c1[m];
          p += lrelu(z[m]) * W2.row(m);
        }
        return;
    }
  }
};

}  // namespace detail

template <typename S>
std::pair<Mat<S>, PotConvTape<S>> potconv_forward(const ConvParams<S>& params,
                                                  const Mat<S>& F,
                                                  const ConvGraph<S>& graph) {
  params.validate();
  graph.validate(F.rows());
  if (F.cols() != params.W.cols())
    throw InvalidArgument("feature width does not match W columns");
  const bool use_normals = params.bank.uses_normals();
  if (use_normals && graph.normals.size() == 0 && graph.local.rows() > 0)
    throw InvalidArgument("linear_normal fields need neighbor normals");

  PotConvTape<S> t;
  t.header.open();
  t.in_channels = F.cols();
  t.out_channels = params.W.rows();
  t.kind = params.bank.kind;
  t.aggregation = params.aggregation;
  t.G.noalias() = F * params.W.transpose();
  const detail::FieldRows<S> rows(params.bank);

  const auto& nb = graph.neighbors;
  const Eigen::Index dout = t.out_channels;
  Mat<S> out(static_cast<Eigen::Index>(nb.queries()), dout);
  parallel_for(nb.queries(), [&](std::size_t b, std::size_t e) {
    detail::RowArr<S> p(dout), acc(dout);
    S u[3], z[kMlpHidden];
    for (std::size_t q = b; q < e; ++q) {
      acc.setZero();
      for (std::size_t r = nb.offsets[q]; r < nb.offsets[q + 1]; ++r) {
        const auto ri = static_cast<Eigen::Index>(r);
        rows.eval(&graph.local(ri, 0), use_normals ? &graph.normals(ri, 0) : nullptr, p, u, z);
        acc += (-p.square()).exp() * t.G.row(nb.indices[r]).array();
      }
      out.row(static_cast<Eigen::Index>(q)) =
          acc.matrix() * detail::aggregation_scale<S>(params.aggregation, nb.count(q));
    }
  });

  t.neighbors = nb;
  t.F = F;
  t.local = graph.local;
  if (use_normals) t.normals = graph.normals;
  return {std::move(out), std::move(t)};
}

// Potentials and correlations are recomputed from the local coordinates
// rather than stored on the tape.
template <typename S>
ConvGrads<S> potconv_backward(const ConvParams<S>& params, PotConvTape<S>& tape,
                              const Mat<S>& dOut) {
  if (params.bank.kind != tape.kind || params.W.rows() != tape.out_channels ||
      params.W.cols() != tape.in_channels || params.aggregation != tape.aggregation)
    throw StructuralError("tape does not belong to these parameters");
  if (dOut.rows() != static_cast<Eigen::Index>(tape.neighbors.queries()) ||
      dOut.cols() != tape.out_channels)
    throw StructuralError("upstream gradient does not match the tape");
  tape.header.consume();

  const auto& nb = tape.neighbors;
  const Eigen::Index dout = tape.out_channels;
  const FieldKind kind = params.bank.kind;
  const bool use_normals = params.bank.uses_normals();
  const detail::FieldRows<S> rows(params.bank);

  Mat<S> dG = Mat<S>::Zero(tape.G.rows(), dout);
  detail::RowMajorArr<S> dA = detail::RowMajorArr<S>::Zero(3, dout);
  detail::RowMajorArr<S> dB = detail::RowMajorArr<S>::Zero(3, dout);
  detail::RowMajorArr<S> dW2 = detail::RowMajorArr<S>::Zero(kMlpHidden, dout);
  detail::RowArr<S> dbias = detail::RowArr<S>::Zero(dout);
  Mat<S> dW1 = Mat<S>::Zero(kMlpHidden, 3);
  Vec<S> dc1 = Vec<S>::Zero(kMlpHidden);

  detail::RowArr<S> p(dout), h(dout), s(dout), dP(dout);
  S u[3], z[kMlpHidden];
  for (std::size_t q = 0; q < nb.queries(); ++q) {
    s = dOut.row(static_cast<Eigen::Index>(q)).array() *
        detail::aggregation_scale<S>(tape.aggregation, nb.count(q));
    for (std::size_t r = nb.offsets[q]; r < nb.offsets[q + 1]; ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      const Index j = nb.indices[r];
      const S* y = &tape.local(ri, 0);
      rows.eval(y, use_normals ? &tape.normals(ri, 0) : nullptr, p, u, z);
      h = (-p.square()).exp();
      dG.row(j).array() += s * h;
      // dh/dp = -2 p h
      dP = S(-2) * p * h * s * tape.G.row(j).array();
      dbias += dP;
      if (kind == FieldKind::mlp) {
        for (int m = 0; m < kMlpHidden; ++m) {
          dW2.row(m) += detail::lrelu(z[m]) * dP;
          const S dz = (dP * rows.W2.row(m)).sum() * detail::lrelu_grad(z[m]);
          dW1(m, 0) += dz * y[0];
          dW1(m, 1) += dz * y[1];
          dW1(m, 2) += dz * y[2];
          dc1[m] += dz;
        }
        continue;
      }
      for (int c = 0; c < 3; ++c) dA.row(c) += u[c] * dP;
      if (kind == FieldKind::quadratic)
        for (int c = 0; c < 3; ++c) dB.row(c) += (u[c] * u[c]) * dP;
    }
  }

  ConvGrads<S> g;
  g.bank = FieldBank<S>::zeros(kind, dout);
  if (kind == FieldKind::mlp) {
    g.bank.W1 = dW1;
    g.bank.c1 = dc1;
    g.bank.W2 = dW2.matrix().transpose();
    g.bank.c2 = dbias.matrix().transpose();
  } else {
    g.bank.A = dA.matrix().transpose();
    if (kind == FieldKind::quadratic) g.bank.B = dB.matrix().transpose();
    g.bank.bias = dbias.matrix().transpose();
  }
  g.W.noalias() = dG.transpose() * tape.F;
  g.F.noalias() = dG * params.W;
  return g;
}

// ---------------------------------------------------------------------------
// Point-wise convolution: out = F W^T + bias.

template <typename S>
struct PointwiseTape {
  TapeHeader header;
  Mat<S> F;
};

template <typename S>
std::pair<Mat<S>, PointwiseTape<S>> pointwise_forward(const Mat<S>& W, const Vec<S>& bias,
                                                      const Mat<S>& F) {
  if (F.cols() != W.cols()) throw InvalidArgument("feature width does not match W");
  if (bias.size() != 0 && bias.size() != W.rows())
    throw InvalidArgument("bias length does not match W rows");
  PointwiseTape<S> t;
  t.header.open();
  t.F = F;
  Mat<S> out = F * W.transpose();
  if (bias.size() != 0) out.rowwise() += bias.transpose();
  return {std::move(out), std::move(t)};
}

template <typename S>
struct PointwiseGrads {
  Mat<S> W;
  Vec<S> bias;
  Mat<S> F;
};

template <typename S>
PointwiseGrads<S> pointwise_backward(const Mat<S>& W, bool has_bias, PointwiseTape<S>& tape,
                                     const Mat<S>& dOut) {
  if (dOut.rows() != tape.F.rows() || dOut.cols() != W.rows() || tape.F.cols() != W.cols())
    throw StructuralError("upstream gradient does not match the tape");
  tape.header.consume();
  PointwiseGrads<S> g;
  g.W.noalias() = dOut.transpose() * tape.F;
  if (has_bias) g.bias = dOut.colwise().sum().transpose();
  g.F.noalias() = dOut * W;
  return g;
}

// ---------------------------------------------------------------------------
// Batch normalization over rows.

template <typename S>
struct BatchNorm {
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.9;

  Vec<S> gamma, beta, running_mean, running_var;
  Vec<S> dgamma, dbeta;

  static BatchNorm make(Eigen::Index channels) {
    BatchNorm bn;
    bn.gamma = Vec<S>::Ones(channels);
    bn.beta = Vec<S>::Zero(channels);
    bn.running_mean = Vec<S>::Zero(channels);
    bn.running_var = Vec<S>::Ones(channels);
    bn.dgamma = Vec<S>::Zero(channels);
    bn.dbeta = Vec<S>::Zero(channels);
    return bn;
  }
  Eigen::Index channels() const { return gamma.size(); }
};

template <typename S>
struct BatchNormTape {
  TapeHeader header;
  Mode mode = Mode::train;
  Mat<S> xhat;
  Vec<S> inv_std;
};

template <typename S>
std::pair<Mat<S>, BatchNormTape<S>> batch_norm_forward(BatchNorm<S>& bn, const Mat<S>& X,
                                                       Mode mode, bool update_running = true) {
  if (X.cols() != bn.channels())
    throw InvalidArgument("feature width does not match normalization channels");
  BatchNormTape<S> t;
  t.header.open();
  t.mode = mode;
  const S eps = S(BatchNorm<S>::kEps);
  RowVec<S> mean, var;
  if (mode == Mode::train && X.rows() > 0) {
    const auto n = static_cast<S>(X.rows());
    mean = X.colwise().mean();
    var = (X.rowwise() - mean).array().square().colwise().sum().matrix() / n;
    if (update_running) {
      const S m = S(BatchNorm<S>::kMomentum);
      const S unbias = X.rows() > 1 ? n / (n - S(1)) : S(1);
      bn.running_mean = m * bn.running_mean + (S(1) - m) * mean.transpose();
      bn.running_var = m * bn.running_var + (S(1) - m) * unbias * var.transpose();
    }
  } else {
    mean = bn.running_mean.transpose();
    var = bn.running_var.transpose();
  }
  t.inv_std = (var.array() + eps).rsqrt().matrix().transpose();
  t.xhat = ((X.rowwise() - mean).array().rowwise() * t.inv_std.transpose().array()).matrix();
  Mat<S> out = (t.xhat.array().rowwise() * bn.gamma.transpose().array()).matrix();
  out.rowwise() += bn.beta.transpose();
  return {std::move(out), std::move(t)};
}

// Accumulates dgamma/dbeta into bn and returns dX.
template <typename S>
Mat<S> batch_norm_backward(BatchNorm<S>& bn, BatchNormTape<S>& tape, const Mat<S>& dOut) {
  if (dOut.rows() != tape.xhat.rows() || dOut.cols() != bn.channels())
    throw StructuralError("upstream gradient does not match the tape");
  tape.header.consume();
  bn.dgamma += dOut.cwiseProduct(tape.xhat).colwise().sum().transpose();
  bn.dbeta += dOut.colwise().sum().transpose();
  const Mat<S> dxhat = (dOut.array().rowwise() * bn.gamma.transpose().array()).matrix();
  if (tape.mode == Mode::eval || dOut.rows() == 0)
    return (dxhat.array().rowwise() * tape.inv_std.transpose().array()).matrix();
  const auto n = static_cast<S>(dOut.rows());
  const RowVec<S> mean_d = dxhat.colwise().mean();
  const RowVec<S> mean_dx = dxhat.cwiseProduct(tape.xhat).colwise().sum() / n;
  Mat<S> dX = dxhat.rowwise() - mean_d;
  dX -= (tape.xhat.array().rowwise() * mean_dx.array()).matrix();
  return (dX.array().rowwise() * tape.inv_std.transpose().array()).matrix();
}

// ---------------------------------------------------------------------------
// Activations

template <typename S>
struct ActivationTape {
  TapeHeader header;
  Mat<S> X;
  S slope = S(0);
};

template <typename S>
std::pair<Mat<S>, ActivationTape<S>> leaky_relu_forward(const Mat<S>& X, S slope) {
  ActivationTape<S> t;
  t.header.open();
  t.X = X;
  t.slope = slope;
  Mat<S> out = X.unaryExpr([slope](S v) { return v > S(0) ? v : slope * v; });
  return {std::move(out), std::move(t)};
}

template <typename S>
Mat<S> leaky_relu_backward(ActivationTape<S>& tape, const Mat<S>& dOut) {
  if (dOut.rows() != tape.X.rows() || dOut.cols() != tape.X.cols())
    throw StructuralError("upstream gradient does not match the tape");
  tape.header.consume();
  const S slope = tape.slope;
  return dOut.binaryExpr(tape.X, [slope](S d, S x) { return x > S(0) ? d : slope * d; });
}

template <typename S>
std::pair<Mat<S>, ActivationTape<S>> relu_forward(const Mat<S>& X) {
  return leaky_relu_forward<S>(X, S(0));
}
template <typename S>
Mat<S> relu_backward(ActivationTape<S>& tape, const Mat<S>& dOut) {
  return leaky_relu_backward(tape, dOut);
}

// ---------------------------------------------------------------------------
// Global max pooling, one output row per segment [offsets[s], offsets[s+1]).

template <typename S>
struct MaxPoolTape {
  TapeHeader header;
  Eigen::Index rows = 0;
  Mat<Eigen::Index> argmax;  // segments x D, -1 for empty segments
};

template <typename S>
std::pair<Mat<S>, MaxPoolTape<S>> max_pool_forward(const Mat<S>& X,
                                                   std::span<const std::size_t> offsets) {
  if (offsets.size() < 2 || offsets.front() != 0 ||
      offsets.back() != static_cast<std::size_t>(X.rows()))
    throw InvalidArgument("segment offsets do not cover the input");
  const auto segs = static_cast<Eigen::Index>(offsets.size() - 1);
  MaxPoolTape<S> t;
  t.header.open();
  t.rows = X.rows();
  t.argmax = Mat<Eigen::Index>::Constant(segs, X.cols(), -1);
  Mat<S> out = Mat<S>::Zero(segs, X.cols());
  for (Eigen::Index s = 0; s < segs; ++s) {
    const auto b = static_cast<Eigen::Index>(offsets[s]);
    const auto e = static_cast<Eigen::Index>(offsets[s + 1]);
    if (e < b) throw InvalidArgument("segment offsets must be non-decreasing");
    if (b == e) continue;
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
      Eigen::Index best = b;
      for (Eigen::Index r = b + 1; r < e; ++r)
        if (X(r, c) > X(best, c)) best = r;
      t.argmax(s, c) = best;
      out(s, c) = X(best, c);
    }
  }
  return {std::move(out), std::move(t)};
}

// Single-cloud convenience: N x D -> 1 x D.
template <typename S>
std::pair<Mat<S>, MaxPoolTape<S>> max_pool_global(const Mat<S>& X) {
  const std::size_t offsets[2] = {0, static_cast<std::size_t>(X.rows())};
  return max_pool_forward(X, std::span<const std::size_t>(offsets, 2));
}

template <typename S>
Mat<S> max_pool_backward(MaxPoolTape<S>& tape, const Mat<S>& dOut) {
  if (dOut.rows() != tape.argmax.rows() || dOut.cols() != tape.argmax.cols())
    throw StructuralError("upstream gradient does not match the tape");
  tape.header.consume();
  Mat<S> dX = Mat<S>::Zero(tape.rows, dOut.cols());
  for (Eigen::Index s = 0; s < dOut.rows(); ++s)
    for (Eigen::Index c = 0; c < dOut.cols(); ++c)
      if (tape.argmax(s, c) >= 0) dX(tape.argmax(s, c), c) += dOut(s, c);
  return dX;
}

// ---------------------------------------------------------------------------
// Mean softmax cross-entropy over rows.

template <typename S>
struct LossResult {
  S loss = S(0);
  Mat<S> dlogits;
  std::vector<int> predictions;
};

template <typename S>
LossResult<S> softmax_cross_entropy(const Mat<S>& logits, std::span<const int> labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size())
    throw InvalidArgument("label count does not match logits rows");
  LossResult<S> res;
  res.dlogits.resize(logits.rows(), logits.cols());
  res.predictions.resize(labels.size());
  const S inv_n = logits.rows() > 0 ? S(1) / static_cast<S>(logits.rows()) : S(0);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) throw InvalidArgument("label out of class range");
    Eigen::Index arg = 0;
    const S mx = logits.row(i).maxCoeff(&arg);
    res.predictions[static_cast<std::size_t>(i)] = static_cast<int>(arg);
    RowVec<S> e = (logits.row(i).array() - mx).exp().matrix();
    const S z = e.sum();
    res.loss += (std::log(z) - (logits(i, y) - mx)) * inv_n;
    res.dlogits.row(i) = e / z;
    res.dlogits(i, y) -= S(1);
    res.dlogits.row(i) *= inv_n;
  }
  return res;
}

}  // namespace pfcv

#endif  // PFCV_LAYERS_HPP_
