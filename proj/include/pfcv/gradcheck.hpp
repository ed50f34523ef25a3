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

#ifndef PFCV_GRADCHECK_HPP_
#define PFCV_GRADCHECK_HPP_

#include <cstdio>
#include <functional>
#include <ostream>

#include "pfcv/model.hpp"

namespace pfcv {

// Central finite-difference verification of every backward pass, in double
// precision. Loss for a single layer is sum(R * out) with a fixed random R.
struct GradcheckOptions {
  int trials = 10;
  std::uint64_t seed = 1;
  double step = 1e-6;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-3;
  bool include_model = true;
  // Negates the analytic gradient of this group (negative control).
  std::string sabotage;
};

struct GroupError {
  std::string group;
  double max_rel = 0.0;
  std::size_t entries = 0;
};

struct GradcheckReport {
  std::vector<GroupError> groups;

  void merge(const std::string& group, double rel, std::size_t entries) {
    for (auto& g : groups)
      if (g.group == group) {
        g.max_rel = std::max(g.max_rel, rel);
        g.entries += entries;
        return;
      }
    groups.push_back({group, rel, entries});
  }
  double worst() const {
    double w = 0.0;
    for (const auto& g : groups) w = std::max(w, g.max_rel);
    return w;
  }
  std::vector<std::string> violations(double tolerance) const {
    std::vector<std::string> out;
    for (const auto& g : groups)
      if (!(g.max_rel <= tolerance)) out.push_back(g.group);
    return out;
  }
  void print(std::ostream& os, double tolerance) const {
    for (const auto& g : groups) {
      char line[256];
      std::snprintf(line, sizeof line, "%-28s %10zu  max_rel=%.3e  %s\n", g.group.c_str(),
                    g.entries, g.max_rel, g.max_rel <= tolerance ? "ok" : "VIOLATION");
      os << line;
    }
  }
};

namespace detail {

struct GradSlot {
  std::string name;
  double* value = nullptr;
  Eigen::Index size = 0;
  std::vector<double> analytic;
};

template <typename M, typename G>
void add_slot(std::vector<GradSlot>& slots, std::string name, M& value, const G& grad) {
  if (value.size() == 0) return;
  if (grad.size() != value.size()) throw StructuralError("gradient shape mismatch: " + name);
  slots.push_back({std::move(name), value.data(), value.size(),
                   std::vector<double>(grad.data(), grad.data() + grad.size())});
}

inline void check_slots(std::vector<GradSlot>& slots, const std::function<double()>& loss,
                        const GradcheckOptions& opt, GradcheckReport& report) {
  const double h = opt.step;
  for (auto& s : slots) {
    if (s.name == opt.sabotage)
      for (auto& a : s.analytic) a = -a;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < s.size; ++i) {
      const double v = s.value[i];
      s.value[i] = v + h;
      const double lp = loss();
      s.value[i] = v - h;
      const double lm = loss();
      s.value[i] = v;
      const double num = (lp - lm) / (2.0 * h);
      const double a = s.analytic[static_cast<std::size_t>(i)];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), opt.floor});
      worst = std::max(worst, std::isfinite(rel) ? rel : HUGE_VAL);
    }
    report.merge(s.name, worst, static_cast<std::size_t>(s.size));
  }
}

inline Mat<double> random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * scale;
  return m;
}
inline Vec<double> random_vec(Rng& rng, Eigen::Index n, double scale = 1.0) {
  Vec<double> v(n);
  for (auto& x : v) x = rng.normal() * scale;
  return v;
}

inline PointCloud random_cloud(Rng& rng, std::size_t n, bool normals) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 p;
    do p = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    while (p.squaredNorm() > 1.0);
    c.positions.push_back(p);
    if (normals) c.normals.push_back(rng.unit_vector());
  }
  return c;
}

inline ConvGraph<double> random_graph(Rng& rng, bool normals) {
  const PointCloud src = random_cloud(rng, 10, true);
  std::vector<Vec3> queries(src.positions.begin(), src.positions.begin() + 5);
  auto nb = radius_neighbors(src, queries, 0.8, 8);
  return make_graph<double>(src, queries, std::move(nb), normals);
}

inline FieldBank<double> random_bank(Rng& rng, FieldKind kind, Eigen::Index fields) {
  auto b = FieldBank<double>::zeros(kind, fields);
  for (auto* m : {&b.A, &b.B, &b.W1, &b.W2})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = rng.normal();
  for (auto* v : {&b.bias, &b.c1, &b.c2})
    for (auto& x : *v) x = rng.normal() * 0.5;
  return b;
}

inline void bank_slots(std::vector<GradSlot>& s, const std::string& p, FieldBank<double>& bank,
                       const FieldBank<double>& g) {
  add_slot(s, p + "A", bank.A, g.A);
  add_slot(s, p + "B", bank.B, g.B);
  add_slot(s, p + "bias", bank.bias, g.bias);
  add_slot(s, p + "mlp.W1", bank.W1, g.W1);
  add_slot(s, p + "mlp.c1", bank.c1, g.c1);
  add_slot(s, p + "mlp.W2", bank.W2, g.W2);
  add_slot(s, p + "mlp.c2", bank.c2, g.c2);
}

inline double dot(const Mat<double>& a, const Mat<double>& b) { return a.cwiseProduct(b).sum(); }

inline void check_conv(KernelFamily family, Rng& rng, Aggregation agg,
                       const GradcheckOptions& opt, GradcheckReport& report) {
  constexpr Eigen::Index din = 3, dout = 4;
  const bool normals = family == KernelFamily::potential_linear_normal;
  const auto graph = random_graph(rng, normals);
  Mat<double> F = random_mat(rng, static_cast<Eigen::Index>(graph.sources), din);
  const Mat<double> R = random_mat(rng, static_cast<Eigen::Index>(graph.queries()), dout);
  std::vector<GradSlot> slots;
  std::function<double()> loss;

  if (is_potential(family)) {
    auto params = std::make_shared<ConvParams<double>>();
    params->bank = random_bank(rng, field_kind(family), dout);
    params->W = random_mat(rng, dout, din, 0.5);
    params->aggregation = agg;
    auto [out, tape] = potconv_forward(*params, F, graph);
    const auto g = potconv_backward(*params, tape, R);
    bank_slots(slots, "conv.", params->bank, g.bank);
    add_slot(slots, "conv.W", params->W, g.W);
    add_slot(slots, "conv.input", F, g.F);
    loss = [params, &F, &graph, &R] { return dot(potconv_forward(*params, F, graph).first, R); };
    check_slots(slots, loss, opt, report);
  } else if (family == KernelFamily::discrete) {
    auto kernel = std::make_shared<DiscreteKernel<double>>(
        DiscreteKernel<double>::make(15, 0.8, din, dout));
    kernel->weights = random_mat(rng, kernel->weights.rows(), din, 0.5);
    auto [out, tape] = discrete_conv_forward(*kernel, F, graph, agg);
    const auto g = discrete_conv_backward(*kernel, tape, R);
    add_slot(slots, "conv.weights", kernel->weights, g.weights);
    add_slot(slots, "conv.input", F, g.F);
    loss = [kernel, &F, &graph, &R, agg] {
      return dot(discrete_conv_forward(*kernel, F, graph, agg).first, R);
    };
    check_slots(slots, loss, opt, report);
  } else {
    auto kernel =
        std::make_shared<ContinuousKernel<double>>(ContinuousKernel<double>::zeros(din, dout));
    kernel->W1 = random_mat(rng, kernel->W1.rows(), 3);
    kernel->c1 = random_vec(rng, kernel->c1.size(), 0.5);
    kernel->W2 = random_mat(rng, kernel->W2.rows(), kernel->W2.cols(), 0.3);
    kernel->c2 = random_vec(rng, kernel->c2.size(), 0.3);
    auto [out, tape] = continuous_conv_forward(*kernel, F, graph, agg);
    const auto g = continuous_conv_backward(*kernel, tape, R);
    add_slot(slots, "conv.mlp.W1", kernel->W1, g.kernel.W1);
    add_slot(slots, "conv.mlp.c1", kernel->c1, g.kernel.c1);
    add_slot(slots, "conv.mlp.W2", kernel->W2, g.kernel.W2);
    add_slot(slots, "conv.mlp.c2", kernel->c2, g.kernel.c2);
    add_slot(slots, "conv.input", F, g.F);
    loss = [kernel, &F, &graph, &R, agg] {
      return dot(continuous_conv_forward(*kernel, F, graph, agg).first, R);
    };
    check_slots(slots, loss, opt, report);
  }
}

inline void check_pointwise(Rng& rng, const GradcheckOptions& opt, GradcheckReport& report) {
  Mat<double> W = random_mat(rng, 4, 3);
  Vec<double> b = random_vec(rng, 4);
  Mat<double> F = random_mat(rng, 6, 3);
  const Mat<double> R = random_mat(rng, 6, 4);
  auto [out, tape] = pointwise_forward(W, b, F);
  const auto g = pointwise_backward(W, true, tape, R);
  std::vector<GradSlot> slots;
  add_slot(slots, "pointwise.W", W, g.W);
  add_slot(slots, "pointwise.bias", b, g.bias);
  add_slot(slots, "pointwise.input", F, g.F);
  check_slots(slots, [&] { return dot(pointwise_forward(W, b, F).first, R); }, opt, report);
}

inline void check_batch_norm(Rng& rng, Mode mode, const GradcheckOptions& opt,
                             GradcheckReport& report) {
  auto bn = BatchNorm<double>::make(3);
  bn.gamma = random_vec(rng, 3);
  bn.beta = random_vec(rng, 3);
  bn.running_mean = random_vec(rng, 3);
  bn.running_var = random_vec(rng, 3).cwiseAbs().array() + 0.5;
  Mat<double> X = random_mat(rng, 7, 3);
  const Mat<double> R = random_mat(rng, 7, 3);
  auto [out, tape] = batch_norm_forward(bn, X, mode, false);
  const Mat<double> dX = batch_norm_backward(bn, tape, R);
  const std::string p = mode == Mode::train ? "bn." : "bn_eval.";
  std::vector<GradSlot> slots;
  add_slot(slots, p + "gamma", bn.gamma, bn.dgamma);
  add_slot(slots, p + "beta", bn.beta, bn.dbeta);
  add_slot(slots, p + "input", X, dX);
  check_slots(slots, [&] { return dot(batch_norm_forward(bn, X, mode, false).first, R); }, opt,
              report);
}

inline void check_activation_pool_loss(Rng& rng, const GradcheckOptions& opt,
                                       GradcheckReport& report) {
  {
    Mat<double> X = random_mat(rng, 6, 4);
    const Mat<double> R = random_mat(rng, 6, 4);
    auto [out, tape] = leaky_relu_forward<double>(X, kLeakySlope);
    const Mat<double> dX = leaky_relu_backward(tape, R);
    std::vector<GradSlot> slots;
    add_slot(slots, "lrelu.input", X, dX);
    check_slots(slots, [&] { return dot(leaky_relu_forward<double>(X, kLeakySlope).first, R); },
                opt, report);
  }
  {
    Mat<double> X = random_mat(rng, 9, 4);
    const std::vector<std::size_t> offsets{0, 4, 9};
    const Mat<double> R = random_mat(rng, 2, 4);
    auto [out, tape] = max_pool_forward<double>(X, offsets);
    const Mat<double> dX = max_pool_backward(tape, R);
    std::vector<GradSlot> slots;
    add_slot(slots, "maxpool.input", X, dX);
    check_slots(slots, [&] { return dot(max_pool_forward<double>(X, offsets).first, R); }, opt,
                report);
  }
  {
    Mat<double> L = random_mat(rng, 5, 4, 2.0);
    std::vector<int> labels(5);
    for (auto& y : labels) y = static_cast<int>(rng.below(4));
    const auto res = softmax_cross_entropy<double>(L, labels);
    std::vector<GradSlot> slots;
    add_slot(slots, "xent.logits", L, res.dlogits);
    check_slots(slots, [&] { return softmax_cross_entropy<double>(L, labels).loss; }, opt,
                report);
  }
}

inline void check_model(KernelFamily family, Rng& rng, int trial, const GradcheckOptions& opt,
                        GradcheckReport& report) {
  ModelConfig cfg;
  cfg.task = trial % 2 == 0 ? Task::classify : Task::segment;
  cfg.kernel = family;
  cfg.widths = {4, 5};
  cfg.radii = {0.5, 0.9};
  cfg.subsample = {10, 5};
  cfg.classes = 3;
  cfg.head_width = 6;
  cfg.max_neighbors = 8;
  cfg.kernel_points = 7;
  cfg.aggregation = trial % 4 < 2 ? Aggregation::sum : Aggregation::mean;
  cfg.seed = rng.next();
  Model<double> model(cfg);
  init_params(model, cfg.seed);
  for (auto& blk : model.blocks()) {
    blk.bn.gamma = random_vec(rng, blk.bn.channels(), 0.3).array() + 1.0;
    blk.bn.beta = random_vec(rng, blk.bn.channels(), 0.3);
  }

  std::vector<PointCloud> clouds;
  for (int c = 0; c < 3; ++c) clouds.push_back(random_cloud(rng, 14, true));
  std::vector<const PointCloud*> ptrs;
  for (const auto& c : clouds) ptrs.push_back(&c);
  const auto bg = model.graph(ptrs);
  std::vector<int> labels(cfg.task == Task::classify ? clouds.size() : bg.input_points());
  for (auto& y : labels) y = static_cast<int>(rng.below(3));

  model.zero_grad();
  const auto res = softmax_cross_entropy<double>(model.forward(bg, Mode::train, false), labels);
  model.backward(res.dlogits);
  std::vector<GradSlot> slots;
  for (const auto& p : model.params()) {
    if (!p.grad) continue;
    Eigen::Map<Vec<double>> value(p.value, p.size);
    Eigen::Map<Vec<double>> grad(p.grad, p.size);
    add_slot(slots, "model." + p.name.substr(p.name.find('.') + 1), value, grad);
  }
  check_slots(
      slots,
      [&] {
        return softmax_cross_entropy<double>(model.forward(bg, Mode::train, false), labels).loss;
      },
      opt, report);
}

}  // namespace detail

// Runs every layer suite for one kernel family over opt.trials seeds.
inline GradcheckReport gradcheck_family(KernelFamily family, const GradcheckOptions& opt) {
  if (opt.trials < 1) throw InvalidArgument("trials: must be at least 1");
  if (!(opt.step > 0.0)) throw InvalidArgument("step: must be positive");
  GradcheckReport report;
  for (int t = 0; t < opt.trials; ++t) {
    Rng rng(opt.seed * 1000003ULL + static_cast<std::uint64_t>(t) * 7919ULL +
            static_cast<std::uint64_t>(family));
    const Aggregation agg = t % 2 == 0 ? Aggregation::sum : Aggregation::mean;
    detail::check_conv(family, rng, agg, opt, report);
    detail::check_pointwise(rng, opt, report);
    detail::check_batch_norm(rng, Mode::train, opt, report);
    detail::check_batch_norm(rng, Mode::eval, opt, report);
    detail::check_activation_pool_loss(rng, opt, report);
    if (opt.include_model) detail::check_model(family, rng, t, opt, report);
  }
  return report;
}

}  // namespace pfcv

#endif  // PFCV_GRADCHECK_HPP_
