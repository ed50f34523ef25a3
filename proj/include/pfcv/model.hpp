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

#ifndef PFCV_MODEL_HPP_
#define PFCV_MODEL_HPP_

#include <bit>
#include <cstring>
#include <memory>

#include "pfcv/baselines.hpp"
#include "pfcv/config.hpp"

namespace pfcv {

// ---------------------------------------------------------------------------
// One convolution interface over the three kernel families.

template <typename S>
class ConvLayer {
 public:
  virtual ~ConvLayer() = default;
  virtual Mat<S> forward(const Mat<S>& F, const ConvGraph<S>& graph) = 0;
  // Accumulates parameter gradients and returns dLoss/dF.
  virtual Mat<S> backward(const Mat<S>& dOut) = 0;
  virtual void collect(ParamList<S>& out, const std::string& prefix) = 0;
  virtual void zero_grad() = 0;
  virtual Eigen::Index in_channels() const = 0;
  virtual Eigen::Index out_channels() const = 0;
  virtual const FieldBank<S>* field_bank() const { return nullptr; }
  virtual FieldBank<S>* field_bank() { return nullptr; }
};

template <typename S>
class PotentialConvLayer final : public ConvLayer<S> {
 public:
  PotentialConvLayer(FieldKind kind, Eigen::Index in, Eigen::Index out, Aggregation agg) {
    params.bank = FieldBank<S>::zeros(kind, out);
    params.W = Mat<S>::Zero(out, in);
    params.aggregation = agg;
    zero_grad();
  }

  Mat<S> forward(const Mat<S>& F, const ConvGraph<S>& graph) override {
    auto [out, t] = potconv_forward(params, F, graph);
    tape = std::move(t);
    return out;
  }
  Mat<S> backward(const Mat<S>& dOut) override {
    ConvGrads<S> g = potconv_backward(params, tape, dOut);
    auto acc = [](auto& dst, const auto& src) {
      if (src.size() != 0) dst += src;
    };
    acc(grads.bank.A, g.bank.A);
    acc(grads.bank.B, g.bank.B);
    acc(grads.bank.bias, g.bank.bias);
    acc(grads.bank.W1, g.bank.W1);
    acc(grads.bank.c1, g.bank.c1);
    acc(grads.bank.W2, g.bank.W2);
    acc(grads.bank.c2, g.bank.c2);
    grads.W += g.W;
    return std::move(g.F);
  }
  void collect(ParamList<S>& out, const std::string& p) override {
    auto& b = params.bank;
    auto& g = grads.bank;
    add_param<S>(out, p + "A", b.A, g.A, false);
    add_param<S>(out, p + "B", b.B, g.B, false);
    add_param<S>(out, p + "bias", b.bias, g.bias, false);
    add_param<S>(out, p + "mlp.W1", b.W1, g.W1, false);
    add_param<S>(out, p + "mlp.c1", b.c1, g.c1, false);
    add_param<S>(out, p + "mlp.W2", b.W2, g.W2, false);
    add_param<S>(out, p + "mlp.c2", b.c2, g.c2, false);
    add_param<S>(out, p + "W", params.W, grads.W, true);
  }
  void zero_grad() override {
    grads.bank = FieldBank<S>::zeros(params.bank.kind, params.W.rows());
    grads.W = Mat<S>::Zero(params.W.rows(), params.W.cols());
  }
  Eigen::Index in_channels() const override { return params.W.cols(); }
  Eigen::Index out_channels() const override { return params.W.rows(); }
  const FieldBank<S>* field_bank() const override { return &params.bank; }
  FieldBank<S>* field_bank() override { return &params.bank; }

  ConvParams<S> params;
  ConvParams<S> grads;
  PotConvTape<S> tape;
};

template <typename S>
class DiscreteConvLayer final : public ConvLayer<S> {
 public:
  DiscreteConvLayer(std::size_t points, double r, Eigen::Index in, Eigen::Index out,
                    Aggregation agg)
      : kernel(DiscreteKernel<S>::make(points, r, in, out)), agg_(agg) {
    zero_grad();
  }
  Mat<S> forward(const Mat<S>& F, const ConvGraph<S>& graph) override {
    auto [out, t] = discrete_conv_forward(kernel, F, graph, agg_);
    tape = std::move(t);
    return out;
  }
  Mat<S> backward(const Mat<S>& dOut) override {
    auto g = discrete_conv_backward(kernel, tape, dOut);
    dweights += g.weights;
    return std::move(g.F);
  }
  void collect(ParamList<S>& out, const std::string& p) override {
    add_param<S>(out, p + "weights", kernel.weights, dweights, true);
  }
  void zero_grad() override {
    dweights = Mat<S>::Zero(kernel.weights.rows(), kernel.weights.cols());
  }
  Eigen::Index in_channels() const override { return kernel.weights.cols(); }
  Eigen::Index out_channels() const override { return kernel.out_channels; }

  DiscreteKernel<S> kernel;
  Mat<S> dweights;
  DiscreteTape<S> tape;

 private:
  Aggregation agg_;
};

template <typename S>
class ContinuousConvLayer final : public ConvLayer<S> {
 public:
  ContinuousConvLayer(Eigen::Index in, Eigen::Index out, Aggregation agg)
      : kernel(ContinuousKernel<S>::zeros(in, out)), agg_(agg) {
    zero_grad();
  }
  Mat<S> forward(const Mat<S>& F, const ConvGraph<S>& graph) override {
    auto [out, t] = continuous_conv_forward(kernel, F, graph, agg_);
    tape = std::move(t);
    return out;
  }
  Mat<S> backward(const Mat<S>& dOut) override {
    auto g = continuous_conv_backward(kernel, tape, dOut);
    grads.W1 += g.kernel.W1;
    grads.c1 += g.kernel.c1;
    grads.W2 += g.kernel.W2;
    grads.c2 += g.kernel.c2;
    return std::move(g.F);
  }
  void collect(ParamList<S>& out, const std::string& p) override {
    add_param<S>(out, p + "mlp.W1", kernel.W1, grads.W1, true);
    add_param<S>(out, p + "mlp.c1", kernel.c1, grads.c1, false);
    add_param<S>(out, p + "mlp.W2", kernel.W2, grads.W2, true);
    add_param<S>(out, p + "mlp.c2", kernel.c2, grads.c2, false);
  }
  void zero_grad() override {
    grads = ContinuousKernel<S>::zeros(kernel.in_channels, kernel.out_channels);
  }
  Eigen::Index in_channels() const override { return kernel.in_channels; }
  Eigen::Index out_channels() const override { return kernel.out_channels; }

  ContinuousKernel<S> kernel;
  ContinuousKernel<S> grads;
  ContinuousTape<S> tape;

 private:
  Aggregation agg_;
};

template <typename S>
std::unique_ptr<ConvLayer<S>> make_conv_layer(const ModelConfig& cfg, std::size_t block,
                                              Eigen::Index in, Eigen::Index out) {
  switch (cfg.kernel) {
    case KernelFamily::discrete:
      return std::make_unique<DiscreteConvLayer<S>>(
          static_cast<std::size_t>(cfg.kernel_points), cfg.radii[block], in, out,
          cfg.aggregation);
    case KernelFamily::continuous:
      return std::make_unique<ContinuousConvLayer<S>>(in, out, cfg.aggregation);
    default:
      return std::make_unique<PotentialConvLayer<S>>(field_kind(cfg.kernel), in, out,
                                                     cfg.aggregation);
  }
}

// ---------------------------------------------------------------------------
// Hierarchy of neighborhoods for a batch of clouds. Clouds are concatenated;
// each level's queries are a farthest-point subset of the previous level
// (classification) or every point (segmentation).

template <typename S>
struct BatchGraph {
  std::vector<ConvGraph<S>> levels;
  // Row offsets of each cloud, per level (index 0: input points).
  std::vector<std::vector<std::size_t>> offsets;
  // Positions of each level's queries, per cloud, for inspection.
  std::vector<std::vector<PointCloud>> level_clouds;

  std::size_t clouds() const { return offsets.front().size() - 1; }
  std::size_t input_points() const { return offsets.front().back(); }
};

// Single-cloud hierarchy; batches are formed by merging these.
template <typename S>
BatchGraph<S> build_cloud_graph(const PointCloud& cloud, const ModelConfig& cfg) {
  cloud.validate();
  const bool normals = cfg.kernel == KernelFamily::potential_linear_normal;
  if (normals && !cloud.has_normals())
    throw InvalidArgument("kernel potential_linear_normal needs clouds with normals");
  const std::size_t nblocks = cfg.widths.size();
  BatchGraph<S> bg;
  bg.levels.reserve(nblocks);
  bg.offsets.assign(nblocks + 1, std::vector<std::size_t>{0});
  bg.level_clouds.assign(nblocks + 1, {});
  PointCloud src = cloud;
  bg.offsets[0].push_back(src.size());
  for (std::size_t b = 0; b < nblocks; ++b) {
    PointCloud qry;
    if (cfg.task == Task::classify) {
      const std::size_t m =
          std::min<std::size_t>(static_cast<std::size_t>(cfg.subsample[b]), src.size());
      qry = src.select(farthest_point_sampling(src, m, 0));
    } else {
      qry = src;
    }
    NeighborIndex nb = radius_neighbors(src, qry.positions, cfg.radii[b],
                                        static_cast<std::size_t>(cfg.max_neighbors));
    bg.levels.push_back(make_graph<S>(src, qry.positions, std::move(nb), normals));
    bg.offsets[b + 1].push_back(qry.size());
    bg.level_clouds[b].push_back(std::move(src));
    src = std::move(qry);
  }
  bg.level_clouds[nblocks].push_back(std::move(src));
  return bg;
}

// Concatenates single- or multi-cloud graphs, offsetting neighbor indices.
template <typename S>
BatchGraph<S> merge_batch_graphs(std::span<const BatchGraph<S>* const> parts) {
  if (parts.empty()) throw InvalidArgument("empty batch");
  const std::size_t nlev = parts.front()->levels.size();
  BatchGraph<S> bg;
  bg.levels.resize(nlev);
  bg.offsets.assign(nlev + 1, std::vector<std::size_t>{0});
  bg.level_clouds.assign(nlev + 1, {});
  for (const auto* part : parts) {
    if (part->levels.size() != nlev) throw StructuralError("batch graphs differ in depth");
    for (std::size_t l = 0; l <= nlev; ++l) {
      const std::size_t base = bg.offsets[l].back();
      for (std::size_t c = 1; c < part->offsets[l].size(); ++c)
        bg.offsets[l].push_back(base + part->offsets[l][c]);
      bg.level_clouds[l].insert(bg.level_clouds[l].end(), part->level_clouds[l].begin(),
                                part->level_clouds[l].end());
    }
  }
  for (std::size_t l = 0; l < nlev; ++l) {
    ConvGraph<S>& g = bg.levels[l];
    const bool normals = parts.front()->levels[l].normals.size() != 0;
    std::size_t total = 0;
    for (const auto* part : parts) total += part->levels[l].neighbors.total();
    g.local.resize(static_cast<Eigen::Index>(total), 3);
    if (normals) g.normals.resize(static_cast<Eigen::Index>(total), 3);
    g.neighbors.radius = parts.front()->levels[l].neighbors.radius;
    g.neighbors.max_k = parts.front()->levels[l].neighbors.max_k;
    g.neighbors.indices.reserve(total);
    g.neighbors.offsets.reserve(bg.offsets[l + 1].back() + 1);
    std::size_t row = 0, src_off = 0;
    for (const auto* part : parts) {
      const auto& pg = part->levels[l];
      for (std::size_t q = 0; q < pg.neighbors.queries(); ++q) {
        for (Index j : pg.neighbors[q])
          g.neighbors.indices.push_back(j + static_cast<Index>(src_off));
        g.neighbors.offsets.push_back(g.neighbors.indices.size());
      }
      const auto k = pg.local.rows();
      g.local.middleRows(static_cast<Eigen::Index>(row), k) = pg.local;
      if (normals) g.normals.middleRows(static_cast<Eigen::Index>(row), k) = pg.normals;
      row += static_cast<std::size_t>(k);
      src_off += pg.sources;
    }
    g.sources = src_off;
  }
  return bg;
}

template <typename S>
BatchGraph<S> build_batch_graph(std::span<const PointCloud* const> clouds,
                                const ModelConfig& cfg) {
  if (clouds.empty()) throw InvalidArgument("empty batch");
  std::vector<BatchGraph<S>> parts;
  parts.reserve(clouds.size());
  for (const PointCloud* c : clouds) parts.push_back(build_cloud_graph<S>(*c, cfg));
  if (parts.size() == 1) return std::move(parts.front());
  std::vector<const BatchGraph<S>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  return merge_batch_graphs<S>(ptrs);
}

// ---------------------------------------------------------------------------
// Host network: [conv -> batch-norm -> leaky-ReLU] per block, then
//   classify: global max-pool -> fc -> batch-norm -> leaky-ReLU -> fc
//   segment:  per point fc -> batch-norm -> leaky-ReLU -> fc

template <typename S>
class Model {
 public:
  struct Block {
    std::unique_ptr<ConvLayer<S>> conv;
    BatchNorm<S> bn;
    BatchNormTape<S> bn_tape;
    ActivationTape<S> act_tape;
  };

  explicit Model(ModelConfig cfg) : config_(std::move(cfg)) {
    config_.validate();
    Eigen::Index in = 1;
    for (std::size_t b = 0; b < config_.widths.size(); ++b) {
      const Eigen::Index out = config_.widths[b];
      Block blk;
      blk.conv = make_conv_layer<S>(config_, b, in, out);
      blk.bn = BatchNorm<S>::make(out);
      blocks_.push_back(std::move(blk));
      in = out;
    }
    fc1_W = Mat<S>::Zero(config_.head_width, in);
    fc1_b = Vec<S>::Zero(config_.head_width);
    head_bn = BatchNorm<S>::make(config_.head_width);
    fc2_W = Mat<S>::Zero(config_.classes, config_.head_width);
    fc2_b = Vec<S>::Zero(config_.classes);
    zero_grad();
  }

  const ModelConfig& config() const { return config_; }
  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  // Trainable parameters followed by normalization buffers, in a fixed order.
  ParamList<S> params() {
    ParamList<S> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      blocks_[b].conv->collect(out, p + "conv.");
      add_param<S>(out, p + "bn.gamma", blocks_[b].bn.gamma, blocks_[b].bn.dgamma, false);
      add_param<S>(out, p + "bn.beta", blocks_[b].bn.beta, blocks_[b].bn.dbeta, false);
    }
    add_param<S>(out, "head.fc1.W", fc1_W, d_fc1_W, true);
    add_param<S>(out, "head.fc1.b", fc1_b, d_fc1_b, false);
    add_param<S>(out, "head.bn.gamma", head_bn.gamma, head_bn.dgamma, false);
    add_param<S>(out, "head.bn.beta", head_bn.beta, head_bn.dbeta, false);
    add_param<S>(out, "head.fc2.W", fc2_W, d_fc2_W, true);
    add_param<S>(out, "head.fc2.b", fc2_b, d_fc2_b, false);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string p = "block" + std::to_string(b) + ".bn.";
      add_buffer<S>(out, p + "running_mean", blocks_[b].bn.running_mean);
      add_buffer<S>(out, p + "running_var", blocks_[b].bn.running_var);
    }
    add_buffer<S>(out, "head.bn.running_mean", head_bn.running_mean);
    add_buffer<S>(out, "head.bn.running_var", head_bn.running_var);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto& p : params())
      if (p.grad) n += static_cast<std::size_t>(p.size);
    return n;
  }

  void zero_grad() {
    for (auto& b : blocks_) {
      b.conv->zero_grad();
      b.bn.dgamma.setZero();
      b.bn.dbeta.setZero();
    }
    d_fc1_W = Mat<S>::Zero(fc1_W.rows(), fc1_W.cols());
    d_fc1_b = Vec<S>::Zero(fc1_b.size());
    d_fc2_W = Mat<S>::Zero(fc2_W.rows(), fc2_W.cols());
    d_fc2_b = Vec<S>::Zero(fc2_b.size());
    head_bn.dgamma.setZero();
    head_bn.dbeta.setZero();
  }

  BatchGraph<S> graph(std::span<const PointCloud* const> clouds) const {
    return build_batch_graph<S>(clouds, config_);
  }

  // Logits: one row per cloud (classify) or per input point (segment).
  Mat<S> forward(const BatchGraph<S>& bg, Mode mode, bool update_running = true) {
    if (bg.levels.size() != blocks_.size())
      throw StructuralError("batch graph depth does not match the model");
    const S slope = S(kLeakySlope);
    Mat<S> F = Mat<S>::Ones(static_cast<Eigen::Index>(bg.input_points()), 1);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      Block& blk = blocks_[b];
      Mat<S> x = blk.conv->forward(F, bg.levels[b]);
      auto [y, bt] = batch_norm_forward(blk.bn, x, mode, update_running);
      blk.bn_tape = std::move(bt);
      auto [z, at] = leaky_relu_forward<S>(y, slope);
      blk.act_tape = std::move(at);
      F = std::move(z);
    }
    if (config_.task == Task::classify) {
      auto [pooled, pt] = max_pool_forward<S>(F, bg.offsets.back());
      pool_tape_ = std::move(pt);
      F = std::move(pooled);
    }
    auto [h1, t1] = pointwise_forward<S>(fc1_W, fc1_b, F);
    fc1_tape_ = std::move(t1);
    auto [h2, bt] = batch_norm_forward(head_bn, h1, mode, update_running);
    head_bn_tape_ = std::move(bt);
    auto [h3, at] = leaky_relu_forward<S>(h2, slope);
    head_act_tape_ = std::move(at);
    auto [logits, t2] = pointwise_forward<S>(fc2_W, fc2_b, h3);
    fc2_tape_ = std::move(t2);
    return logits;
  }

  Mat<S> forward(std::span<const PointCloud* const> clouds, Mode mode,
                 bool update_running = true) {
    return forward(graph(clouds), mode, update_running);
  }

  // Accumulates gradients of the last forward.
  void backward(const Mat<S>& dlogits) {
    auto g2 = pointwise_backward<S>(fc2_W, true, fc2_tape_, dlogits);
    d_fc2_W += g2.W;
    d_fc2_b += g2.bias;
    Mat<S> d = leaky_relu_backward(head_act_tape_, g2.F);
    d = batch_norm_backward(head_bn, head_bn_tape_, d);
    auto g1 = pointwise_backward<S>(fc1_W, true, fc1_tape_, d);
    d_fc1_W += g1.W;
    d_fc1_b += g1.bias;
    d = std::move(g1.F);
    if (config_.task == Task::classify) d = max_pool_backward(pool_tape_, d);
    for (std::size_t b = blocks_.size(); b-- > 0;) {
      Block& blk = blocks_[b];
      d = leaky_relu_backward(blk.act_tape, d);
      d = batch_norm_backward(blk.bn, blk.bn_tape, d);
      d = blk.conv->backward(d);
    }
  }

  std::uint64_t step = 0;

  Mat<S> fc1_W, d_fc1_W;
  Vec<S> fc1_b, d_fc1_b;
  BatchNorm<S> head_bn;
  Mat<S> fc2_W, d_fc2_W;
  Vec<S> fc2_b, d_fc2_b;

 private:
  ModelConfig config_;
  std::vector<Block> blocks_;
  MaxPoolTape<S> pool_tape_;
  PointwiseTape<S> fc1_tape_, fc2_tape_;
  BatchNormTape<S> head_bn_tape_;
  ActivationTape<S> head_act_tape_;
};

// ---------------------------------------------------------------------------
// Initialization

namespace detail {
template <typename M>
void fill_uniform(M& m, Rng& rng, double bound) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<typename M::Scalar>(rng.uniform(-bound, bound));
}
template <typename M>
void fill_directions(M& m, Rng& rng, double scale) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    m.row(i) = (rng.unit_vector() * scale).cast<typename M::Scalar>().transpose();
}
inline double glorot(Eigen::Index in, Eigen::Index out) {
  return std::sqrt(6.0 / static_cast<double>(in + out));
}
}  // namespace detail

// Feature matrices: uniform in +-sqrt(6 / (D + D')). Field directions a_k:
// random unit vectors scaled by 1/r so potentials are O(1) over the ball.
// b_k = 0, d_k uniform in +-0.5.
template <typename S>
void init_params(Model<S>& model, std::uint64_t seed) {
  Rng rng(seed);
  const auto& cfg = model.config();
  for (std::size_t b = 0; b < model.blocks().size(); ++b) {
    auto& blk = model.blocks()[b];
    const double r = cfg.radii[b];
    ConvLayer<S>* conv = blk.conv.get();
    const Eigen::Index in = conv->in_channels(), out = conv->out_channels();
    if (auto* pc = dynamic_cast<PotentialConvLayer<S>*>(conv)) {
      auto& bank = pc->params.bank;
      if (bank.kind == FieldKind::mlp) {
        detail::fill_directions(bank.W1, rng, 1.0 / r);
        detail::fill_uniform(bank.c1, rng, 0.5);
        detail::fill_uniform(bank.W2, rng, detail::glorot(kMlpHidden, out));
        detail::fill_uniform(bank.c2, rng, 0.5);
      } else {
        detail::fill_directions(bank.A, rng, 1.0 / r);
        if (bank.B.size() != 0) bank.B.setZero();
        detail::fill_uniform(bank.bias, rng, 0.5);
      }
      detail::fill_uniform(pc->params.W, rng, detail::glorot(in, out));
    } else if (auto* dc = dynamic_cast<DiscreteConvLayer<S>*>(conv)) {
      detail::fill_uniform(dc->kernel.weights, rng, detail::glorot(in, out));
    } else if (auto* cc = dynamic_cast<ContinuousConvLayer<S>*>(conv)) {
      detail::fill_directions(cc->kernel.W1, rng, 1.0 / r);
      detail::fill_uniform(cc->kernel.c1, rng, 0.5);
      detail::fill_uniform(cc->kernel.W2, rng, detail::glorot(in, out) / 4.0);
      detail::fill_uniform(cc->kernel.c2, rng, detail::glorot(in, out));
    }
    blk.bn = BatchNorm<S>::make(out);
  }
  detail::fill_uniform(model.fc1_W, rng, detail::glorot(model.fc1_W.cols(), model.fc1_W.rows()));
  model.fc1_b.setZero();
  model.head_bn = BatchNorm<S>::make(model.fc1_W.rows());
  detail::fill_uniform(model.fc2_W, rng, detail::glorot(model.fc2_W.cols(), model.fc2_W.rows()));
  model.fc2_b.setZero();
  model.step = 0;
  model.zero_grad();
}

template <typename S>
std::unique_ptr<Model<S>> build_model(const ModelConfig& cfg) {
  auto m = std::make_unique<Model<S>>(cfg);
  init_params(*m, cfg.seed);
  return m;
}

// Copies parameters and buffers by name between models of equal shape.
template <typename To, typename From>
void copy_params(Model<From>& from, Model<To>& to) {
  auto src = from.params();
  auto dst = to.params();
  if (src.size() != dst.size()) throw StructuralError("models differ in parameter layout");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != dst[i].name || src[i].size != dst[i].size)
      throw StructuralError("models differ at " + src[i].name);
    for (Eigen::Index k = 0; k < src[i].size; ++k)
      dst[i].value[k] = static_cast<To>(src[i].value[k]);
  }
  to.step = from.step;
}

// ---------------------------------------------------------------------------
// Checkpoint file, little-endian:
//   "PFCV" | u32 version | u32 config length | config text (key = value)
//   then until EOF: u32 key length | key | u64 count | count x f32

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}
  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) throw CorruptFile("checkpoint truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};
}  // namespace detail

template <typename S>
std::string serialize_checkpoint(Model<S>& model) {
  std::string out = "PFCV";
  detail::put_u32(out, kCheckpointVersion);
  KeyValues kv = model.config().to_key_values();
  kv["step"] = std::to_string(model.step);
  const std::string cfg = format_key_values(kv);
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  for (const auto& p : model.params()) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put_u64(out, static_cast<std::uint64_t>(p.size));
    for (Eigen::Index i = 0; i < p.size; ++i)
      detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(p.value[i])));
  }
  return out;
}

template <typename S>
void save_checkpoint(Model<S>& model, const std::filesystem::path& path) {
  atomic_write(path, serialize_checkpoint(model));
}

template <typename S = float>
std::unique_ptr<Model<S>> deserialize_checkpoint(std::string_view bytes) {
  detail::ByteReader rd(bytes);
  if (rd.remaining() < 4 || rd.take(4) != "PFCV") throw CorruptFile("bad magic");
  const auto version = static_cast<std::uint32_t>(rd.uint(4));
  if (version != kCheckpointVersion)
    throw VersionMismatch("checkpoint format version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  const auto cfg_len = static_cast<std::size_t>(rd.uint(4));
  const std::string_view cfg_text = rd.take(cfg_len);
  ModelConfig cfg;
  std::uint64_t step = 0;
  try {
    KeyValues kv = parse_key_values(cfg_text);
    if (auto it = kv.find("step"); it != kv.end()) {
      step = static_cast<std::uint64_t>(detail::parse_int("step", it->second));
      kv.erase(it);
    }
    cfg.apply(kv);
    if (!kv.empty()) throw InvalidArgument(kv.begin()->first + ": unknown config key");
    cfg.validate();
  } catch (const std::exception& e) {
    throw CorruptFile(std::string("checkpoint config: ") + e.what());
  }
  auto model = std::make_unique<Model<S>>(cfg);
  auto params = model->params();
  std::vector<bool> seen(params.size(), false);
  while (!rd.done()) {
    const auto klen = static_cast<std::size_t>(rd.uint(4));
    const std::string key(rd.take(klen));
    const std::uint64_t count = rd.uint(8);
    if (count > rd.remaining() / 4) throw CorruptFile("checkpoint truncated in " + key);
    auto it = std::find_if(params.begin(), params.end(),
                           [&](const Param<S>& p) { return p.name == key; });
    if (it == params.end()) throw CorruptFile("unexpected parameter block " + key);
    if (static_cast<std::uint64_t>(it->size) != count)
      throw CorruptFile("size mismatch for " + key);
    for (std::uint64_t i = 0; i < count; ++i)
      it->value[i] = static_cast<S>(std::bit_cast<float>(static_cast<std::uint32_t>(rd.uint(4))));
    seen[static_cast<std::size_t>(it - params.begin())] = true;
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!seen[i]) throw MissingKey("checkpoint lacks parameter " + params[i].name);
  model->step = step;
  return model;
}

template <typename S = float>
std::unique_ptr<Model<S>> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint<S>(read_file(path));
}

}  // namespace pfcv

#endif  // PFCV_MODEL_HPP_
