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

#ifndef PFCV_TRAIN_HPP_
#define PFCV_TRAIN_HPP_

#include <functional>
#include <numeric>

#include "pfcv/model.hpp"

namespace pfcv {

// ---------------------------------------------------------------------------
// Optimizers

struct OptimizerState {
  static constexpr double kMomentum = 0.9;
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::map<std::string, std::vector<double>> m, v;
  std::uint64_t t = 0;
};

// One update from the accumulated gradients. Weight decay (L2 added to the
// gradient) applies only to parameters flagged for it: feature-mixing and
// fully connected weight matrices, never field coefficients or biases.
template <typename S>
void optimizer_step(Model<S>& model, OptimizerState& state, const TrainConfig& cfg,
                    double lr) {
  auto params = model.params();
  for (const auto& p : params) {
    if (!p.grad) continue;
    for (Eigen::Index i = 0; i < p.size; ++i)
      if (!std::isfinite(static_cast<double>(p.grad[i])))
        throw NumericError("non-finite gradient in " + p.name);
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(OptimizerState::kBeta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(OptimizerState::kBeta2, static_cast<double>(state.t));
  for (const auto& p : params) {
    if (!p.grad) continue;
    auto& m = state.m[p.name];
    m.resize(static_cast<std::size_t>(p.size), 0.0);
    std::vector<double>* v = nullptr;
    if (cfg.optimizer == OptimizerKind::adam) {
      v = &state.v[p.name];
      v->resize(static_cast<std::size_t>(p.size), 0.0);
    }
    for (Eigen::Index i = 0; i < p.size; ++i) {
      const auto k = static_cast<std::size_t>(i);
      double g = static_cast<double>(p.grad[i]);
      if (p.decay) g += cfg.weight_decay * static_cast<double>(p.value[i]);
      double delta;
      if (cfg.optimizer == OptimizerKind::adam) {
        m[k] = OptimizerState::kBeta1 * m[k] + (1.0 - OptimizerState::kBeta1) * g;
        (*v)[k] = OptimizerState::kBeta2 * (*v)[k] + (1.0 - OptimizerState::kBeta2) * g * g;
        delta = -lr * (m[k] / bc1) / (std::sqrt((*v)[k] / bc2) + OptimizerState::kEps);
      } else {
        m[k] = OptimizerState::kMomentum * m[k] + g;
        delta = -lr * m[k];
      }
      p.value[i] = static_cast<S>(static_cast<double>(p.value[i]) + delta);
    }
  }
  ++model.step;
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double loss = 0.0;
  double oa = 0.0;
  double macc = 0.0;
  double miou = 0.0;
  std::vector<double> iou;  // NaN for classes absent from labels and predictions
  std::vector<std::vector<std::size_t>> confusion;  // [truth][prediction]
};

inline Metrics compute_metrics(std::span<const int> predictions, std::span<const int> labels,
                               int classes) {
  if (predictions.size() != labels.size())
    throw InvalidArgument("predictions and labels differ in length");
  if (labels.empty()) throw InvalidArgument("no predictions to score");
  if (classes < 1) throw InvalidArgument("class count must be positive");
  const auto c = static_cast<std::size_t>(classes);
  Metrics m;
  m.confusion.assign(c, std::vector<std::size_t>(c, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i], p = predictions[i];
    if (y < 0 || y >= classes || p < 0 || p >= classes)
      throw InvalidArgument("class id out of range");
    ++m.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)];
  }
  std::size_t correct = 0;
  double acc_sum = 0.0, iou_sum = 0.0;
  int acc_n = 0, iou_n = 0;
  m.iou.assign(c, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t k = 0; k < c; ++k) {
    const std::size_t tp = m.confusion[k][k];
    std::size_t truth = 0, pred = 0;
    for (std::size_t j = 0; j < c; ++j) {
      truth += m.confusion[k][j];
      pred += m.confusion[j][k];
    }
    correct += tp;
    if (truth > 0) {
      acc_sum += static_cast<double>(tp) / static_cast<double>(truth);
      ++acc_n;
    }
    const std::size_t uni = truth + pred - tp;
    if (uni > 0) {
      m.iou[k] = static_cast<double>(tp) / static_cast<double>(uni);
      iou_sum += m.iou[k];
      ++iou_n;
    }
  }
  m.oa = static_cast<double>(correct) / static_cast<double>(labels.size());
  m.macc = acc_n ? acc_sum / acc_n : 0.0;
  m.miou = iou_n ? iou_sum / iou_n : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class Shape { sphere, cube, torus, cylinder };

inline const char* to_string(Shape s) {
  switch (s) {
    case Shape::sphere: return "sphere";
    case Shape::cube: return "cube";
    case Shape::torus: return "torus";
    case Shape::cylinder: return "cylinder";
  }
  return "?";
}

inline int part_count(Shape s) { return s == Shape::cube ? 6 : 2; }

struct SyntheticSpec {
  std::vector<Shape> classes{Shape::sphere, Shape::cube, Shape::torus, Shape::cylinder};
  std::size_t n_points = 256;
  std::size_t count = 100;  // clouds; class i % classes.size()
  double noise = 0.01;
  bool density_bias = false;
  bool random_rotation = false;  // uniform SO(3) pose per cloud
  std::uint64_t seed = 0;

  int part_labels() const {
    int n = 0;
    for (auto s : classes) n += part_count(s);
    return n;
  }

  void validate() const {
    if (classes.empty()) throw InvalidArgument("synthetic spec needs at least one class");
    if (n_points < 16) throw InvalidArgument("synthetic spec needs n_points >= 16");
    if (!(noise >= 0.0) || !std::isfinite(noise))
      throw InvalidArgument("synthetic noise must be finite and >= 0");
  }
};

// Shape dimensions; every shape fits the unit ball centered at the origin.
inline constexpr double kCubeHalf = 0.57735026918962573;  // 1/sqrt(3)
inline constexpr double kTorusMajor = 0.7, kTorusMinor = 0.3;
inline constexpr double kCylRadius = 0.6, kCylHalfHeight = 0.8;

namespace detail {

// Surface point, analytic normal and local part id of one shape.
inline void sample_shape(Shape s, Rng& rng, Vec3& p, Vec3& n, int& part) {
  switch (s) {
    case Shape::sphere:
      p = rng.unit_vector();
      n = p;
      part = p.z() >= 0.0 ? 1 : 0;
      return;
    case Shape::cube: {
      const int f = static_cast<int>(rng.below(6));
      const int axis = f / 2;
      const double sign = f % 2 == 0 ? 1.0 : -1.0;
      p = Vec3(rng.uniform(-kCubeHalf, kCubeHalf), rng.uniform(-kCubeHalf, kCubeHalf),
               rng.uniform(-kCubeHalf, kCubeHalf));
      p[axis] = sign * kCubeHalf;
      n = Vec3::Zero();
      n[axis] = sign;
      part = f;
      return;
    }
    case Shape::torus: {
      double theta;
      do {
        theta = rng.uniform(0.0, 2.0 * M_PI);
      } while (rng.uniform() * (kTorusMajor + kTorusMinor) >
               kTorusMajor + kTorusMinor * std::cos(theta));
      const double phi = rng.uniform(0.0, 2.0 * M_PI);
      const double ring = kTorusMajor + kTorusMinor * std::cos(theta);
      p = Vec3(ring * std::cos(phi), ring * std::sin(phi), kTorusMinor * std::sin(theta));
      n = Vec3(std::cos(theta) * std::cos(phi), std::cos(theta) * std::sin(phi),
               std::sin(theta));
      part = std::cos(theta) < 0.0 ? 0 : 1;
      return;
    }
    case Shape::cylinder: {
      const double side = 2.0 * M_PI * kCylRadius * 2.0 * kCylHalfHeight;
      const double caps = 2.0 * M_PI * kCylRadius * kCylRadius;
      const double phi = rng.uniform(0.0, 2.0 * M_PI);
      if (rng.uniform() * (side + caps) < side) {
        p = Vec3(kCylRadius * std::cos(phi), kCylRadius * std::sin(phi),
                 rng.uniform(-kCylHalfHeight, kCylHalfHeight));
        n = Vec3(std::cos(phi), std::sin(phi), 0.0);
        part = 1;
      } else {
        const double rho = kCylRadius * std::sqrt(rng.uniform());
        const double sign = rng.uniform() < 0.5 ? 1.0 : -1.0;
        p = Vec3(rho * std::cos(phi), rho * std::sin(phi), sign * kCylHalfHeight);
        n = Vec3(0.0, 0.0, sign);
        part = 0;
      }
      return;
    }
  }
}

}  // namespace detail

// Surface-sampled shapes with analytic normals. class_id is the index into
// spec.classes; labels hold part ids in a space shared by all classes.
inline std::vector<PointCloud> gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<int> part_offset;
  int off = 0;
  for (auto s : spec.classes) {
    part_offset.push_back(off);
    off += part_count(s);
  }
  std::vector<PointCloud> out;
  out.reserve(spec.count);
  Rng rng(spec.seed);
  for (std::size_t c = 0; c < spec.count; ++c) {
    const std::size_t cls = c % spec.classes.size();
    const Shape shape = spec.classes[cls];
    PointCloud pc;
    pc.class_id = static_cast<int>(cls);
    pc.positions.reserve(spec.n_points);
    while (pc.positions.size() < spec.n_points) {
      Vec3 p, n;
      int part = 0;
      detail::sample_shape(shape, rng, p, n, part);
      if (spec.density_bias && p.z() < 0.0 && rng.uniform() >= 0.25) continue;
      if (spec.noise > 0.0)
        p += Vec3(rng.normal(), rng.normal(), rng.normal()) * spec.noise;
      pc.positions.push_back(p);
      pc.normals.push_back(n);
      pc.labels.push_back(part_offset[cls] + part);
    }
    if (spec.random_rotation) {
      const Eigen::Quaterniond q =
          Eigen::Quaterniond(rng.normal(), rng.normal(), rng.normal(), rng.normal()).normalized();
      const Eigen::Matrix3d R = q.toRotationMatrix();
      for (std::size_t i = 0; i < pc.size(); ++i) {
        pc.positions[i] = R * pc.positions[i];
        pc.normals[i] = R * pc.normals[i];
      }
    }
    out.push_back(std::move(pc));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct Dataset {
  std::vector<PointCloud> train, test;
  int classes = 0;  // class count for the task the dataset is used with
};

struct EpochLog {
  int epoch = 0;
  std::string split;
  Metrics metrics;
};

inline std::string metrics_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,split,loss,oa,macc,miou\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%d,%s,%.6f,%.6f,%.6f,%.6f\n", e.epoch, e.split.c_str(),
                  e.metrics.loss, e.metrics.oa, e.metrics.macc, e.metrics.miou);
    out += buf;
  }
  return out;
}

namespace detail {

inline std::vector<int> batch_labels(std::span<const PointCloud* const> clouds, Task task) {
  std::vector<int> labels;
  for (const PointCloud* c : clouds) {
    if (task == Task::classify) {
      if (!c->class_id) throw InvalidArgument("cloud has no class id");
      labels.push_back(*c->class_id);
    } else {
      if (!c->has_labels()) throw InvalidArgument("cloud has no per-point labels");
      labels.insert(labels.end(), c->labels.begin(), c->labels.end());
    }
  }
  return labels;
}

// Random rotation about z, anisotropic scale in [0.9, 1.1], jitter 0.005,
// density drop to n / 2^u with u ~ U(0, 4).
inline PointCloud augment(const PointCloud& in, const TrainConfig& cfg, Rng& rng) {
  PointCloud out = in;
  if (cfg.augment_density && in.size() > 1) {
    const double keep = std::exp2(-rng.uniform(0.0, 4.0));
    const auto m = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(keep * static_cast<double>(in.size()))), 1,
        in.size());
    out = in.select(farthest_point_sampling(in, m, rng.below(in.size())));
  }
  Eigen::Matrix3d T = Eigen::Matrix3d::Identity();
  if (cfg.augment_rotate)
    T = Eigen::AngleAxisd(rng.uniform(0.0, 2.0 * M_PI), Vec3::UnitZ()).toRotationMatrix();
  if (cfg.augment_scale) {
    const Vec3 s(rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1));
    T = s.asDiagonal() * T;
  }
  const Eigen::Matrix3d N = T.inverse().transpose();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.positions[i] = T * out.positions[i];
    if (cfg.augment_jitter)
      out.positions[i] += Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.005;
    if (out.has_normals()) out.normals[i] = (N * out.normals[i]).normalized();
  }
  return out;
}

}  // namespace detail

// Per-cloud neighborhood graphs, built on first use and reused across epochs.
template <typename S>
class GraphCache {
 public:
  GraphCache(const ModelConfig& cfg, std::span<const PointCloud> clouds)
      : cfg_(cfg), clouds_(clouds), graphs_(clouds.size()) {}

  BatchGraph<S> batch(std::span<const std::size_t> idx) {
    std::vector<const BatchGraph<S>*> parts;
    parts.reserve(idx.size());
    for (std::size_t i : idx) {
      if (i >= graphs_.size()) throw InvalidArgument("cloud index out of range");
      if (!graphs_[i]) graphs_[i] = build_cloud_graph<S>(clouds_[i], cfg_);
      parts.push_back(&*graphs_[i]);
    }
    return merge_batch_graphs<S>(parts);
  }

 private:
  ModelConfig cfg_;
  std::span<const PointCloud> clouds_;
  std::vector<std::optional<BatchGraph<S>>> graphs_;
};

// Eval-mode metrics over a set of clouds. `cache` must have been built over
// the same clouds.
template <typename S>
Metrics evaluate(Model<S>& model, std::span<const PointCloud> clouds, int batch_size = 16,
                 GraphCache<S>* cache = nullptr) {
  if (batch_size < 1) throw InvalidArgument("batch_size: must be positive");
  const Task task = model.config().task;
  std::vector<int> preds, labels;
  double loss_sum = 0.0;
  std::size_t rows = 0;
  for (std::size_t b = 0; b < clouds.size(); b += static_cast<std::size_t>(batch_size)) {
    std::vector<const PointCloud*> batch;
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < std::min(clouds.size(), b + batch_size); ++i) {
      batch.push_back(&clouds[i]);
      idx.push_back(i);
    }
    const auto y = detail::batch_labels(batch, task);
    const Mat<S> logits = cache ? model.forward(cache->batch(idx), Mode::eval, false)
                                : model.forward(batch, Mode::eval, false);
    const auto res = softmax_cross_entropy<S>(logits, y);
    loss_sum += static_cast<double>(res.loss) * static_cast<double>(y.size());
    rows += y.size();
    preds.insert(preds.end(), res.predictions.begin(), res.predictions.end());
    labels.insert(labels.end(), y.begin(), y.end());
  }
  Metrics m = compute_metrics(preds, labels, model.config().classes);
  m.loss = loss_sum / static_cast<double>(std::max<std::size_t>(rows, 1));
  return m;
}

using EpochCallback = std::function<void(const EpochLog&)>;

// Epoch 0 logs the untrained test metrics. An epoch whose learning rate is
// zero leaves parameters and normalization statistics untouched.
template <typename S>
std::vector<EpochLog> train_loop(Model<S>& model, const Dataset& data, const TrainConfig& cfg,
                                 const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.train.empty()) throw InvalidArgument("training split is empty");
  const Task task = model.config().task;
  std::vector<EpochLog> log;
  auto emit = [&](EpochLog e) {
    if (on_epoch) on_epoch(e);
    log.push_back(std::move(e));
  };
  GraphCache<S> test_cache(model.config(), data.test);
  GraphCache<S> train_cache(model.config(), data.train);
  if (!data.test.empty())
    emit({0, "test", evaluate(model, data.test, cfg.batch_size, &test_cache)});

  Rng shuffle_rng(cfg.seed ^ 0x5eed5eedULL);
  Rng aug_rng(cfg.seed ^ 0xa06a06ULL);
  OptimizerState opt;
  const bool augmenting = cfg.augment_rotate || cfg.augment_scale || cfg.augment_jitter || cfg.augment_density;
  std::vector<std::size_t> order(data.train.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(order);
    std::vector<int> preds, labels;
    double loss_sum = 0.0;
    std::size_t rows = 0, batch_no = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<PointCloud> augmented;
      std::vector<const PointCloud*> batch;
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + b, e - b);
      if (augmenting) {
        for (std::size_t i : idx) augmented.push_back(detail::augment(data.train[i], cfg, aug_rng));
        for (const auto& c : augmented) batch.push_back(&c);
      } else {
        for (std::size_t i : idx) batch.push_back(&data.train[i]);
      }
      const auto y = detail::batch_labels(batch, task);
      model.zero_grad();
      const Mat<S> logits = augmenting ? model.forward(batch, Mode::train, lr > 0.0)
                                       : model.forward(train_cache.batch(idx), Mode::train, lr > 0.0);
      const auto res = softmax_cross_entropy<S>(logits, y);
      if (!std::isfinite(static_cast<double>(res.loss)))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) +
                           ", batch " + std::to_string(batch_no));
      if (lr > 0.0) {
        model.backward(res.dlogits);
        optimizer_step(model, opt, cfg, lr);
      }
      loss_sum += static_cast<double>(res.loss) * static_cast<double>(y.size());
      rows += y.size();
      preds.insert(preds.end(), res.predictions.begin(), res.predictions.end());
      labels.insert(labels.end(), y.begin(), y.end());
      ++batch_no;
    }
    Metrics tm = compute_metrics(preds, labels, model.config().classes);
    tm.loss = loss_sum / static_cast<double>(rows);
    emit({epoch + 1, "train", std::move(tm)});
    if (!data.test.empty())
      emit({epoch + 1, "test", evaluate(model, data.test, cfg.batch_size, &test_cache)});
  }
  return log;
}

// ---------------------------------------------------------------------------
// Sparse-input sweep: evaluate trained models on FPS-downsampled clouds.

struct SweepRow {
  std::string family;
  std::size_t points = 0;
  double oa = 0.0;
};

inline std::vector<PointCloud> downsample_all(std::span<const PointCloud> clouds,
                                              std::size_t count) {
  std::vector<PointCloud> out;
  out.reserve(clouds.size());
  for (const auto& c : clouds) {
    if (count >= c.size()) {
      out.push_back(c);
      continue;
    }
    const auto idx = farthest_point_sampling(c, count, 0);
    out.push_back(c.select(idx));
  }
  return out;
}

template <typename S>
std::vector<SweepRow> sparse_sweep(
    const std::vector<std::pair<std::string, Model<S>*>>& models,
    std::span<const PointCloud> test, std::span<const std::size_t> counts) {
  std::vector<SweepRow> rows;
  for (const auto& [name, model] : models) {
    if (model == nullptr) throw InvalidArgument("missing model for family " + name);
    for (std::size_t n : counts) {
      if (n == 0) throw InvalidArgument("point count must be positive");
      const auto sparse = downsample_all(test, n);
      rows.push_back({name, n, evaluate(*model, sparse).oa});
    }
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "family,points,oa\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6f\n", r.family.c_str(), r.points, r.oa);
    out += buf;
  }
  return out;
}

}  // namespace pfcv

#endif  // PFCV_TRAIN_HPP_
