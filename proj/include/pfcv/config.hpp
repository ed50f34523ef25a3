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

#ifndef PFCV_CONFIG_HPP_
#define PFCV_CONFIG_HPP_

#include <charconv>
#include <map>
#include <sstream>

#include "pfcv/core.hpp"
#include "pfcv/fields.hpp"
#include "pfcv/layers.hpp"

namespace pfcv {

enum class Task { classify, segment };

enum class KernelFamily {
  potential_linear,
  potential_linear_normal,
  potential_quadratic,
  potential_mlp,
  discrete,
  continuous,
};

inline constexpr KernelFamily kAllFamilies[] = {
    KernelFamily::potential_linear, KernelFamily::potential_linear_normal,
    KernelFamily::potential_quadratic, KernelFamily::potential_mlp,
    KernelFamily::discrete, KernelFamily::continuous};

inline const char* to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::potential_linear: return "potential_linear";
    case KernelFamily::potential_linear_normal: return "potential_linear_normal";
    case KernelFamily::potential_quadratic: return "potential_quadratic";
    case KernelFamily::potential_mlp: return "potential_mlp";
    case KernelFamily::discrete: return "discrete";
    case KernelFamily::continuous: return "continuous";
  }
  return "?";
}

inline KernelFamily parse_family(std::string_view s) {
  for (auto f : kAllFamilies)
    if (s == to_string(f)) return f;
  throw InvalidArgument("kernel: unknown kernel family '" + std::string(s) + "'");
}

inline bool is_potential(KernelFamily f) {
  return f != KernelFamily::discrete && f != KernelFamily::continuous;
}

inline FieldKind field_kind(KernelFamily f) {
  switch (f) {
    case KernelFamily::potential_linear: return FieldKind::linear;
    case KernelFamily::potential_linear_normal: return FieldKind::linear_normal;
    case KernelFamily::potential_quadratic: return FieldKind::quadratic;
    case KernelFamily::potential_mlp: return FieldKind::mlp;
    default: throw InvalidArgument("kernel family has no potential fields");
  }
}

inline const char* to_string(Task t) { return t == Task::classify ? "classify" : "segment"; }
inline Task parse_task(std::string_view s) {
  if (s == "classify") return Task::classify;
  if (s == "segment") return Task::segment;
  throw InvalidArgument("task: expected classify or segment, got '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// key = value text

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line =
        text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos)
      line = line.substr(0, hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(line_no, "expected key = value");
    std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ParseError(line_no, "empty key");
    kv[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    throw InvalidArgument(key + ": not a number '" + v + "'");
  }
  if (used != v.size()) throw InvalidArgument(key + ": not a number '" + v + "'");
  return d;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  long long x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size())
    throw InvalidArgument(key + ": not an integer '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InvalidArgument(key + ": expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split(const std::string& v, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::string fmt(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct ModelConfig {
  Task task = Task::classify;
  KernelFamily kernel = KernelFamily::potential_quadratic;
  std::vector<int> widths{64, 128, 256};
  std::vector<double> radii{0.2, 0.4, 0.8};
  std::vector<int> subsample{256, 128, 64};
  int classes = 4;
  std::uint64_t seed = 0;
  int max_neighbors = 64;
  Aggregation aggregation = Aggregation::sum;
  int head_width = 128;
  int kernel_points = 15;

  void validate() const {
    if (widths.empty()) throw InvalidArgument("widths: at least one block required");
    if (radii.size() != widths.size())
      throw InvalidArgument("radii: need one radius per block");
    if (subsample.size() != widths.size())
      throw InvalidArgument("subsample: need one count per block");
    for (int w : widths)
      if (w <= 0) throw InvalidArgument("widths: must be positive");
    for (std::size_t i = 0; i < radii.size(); ++i) {
      if (!(radii[i] > 0.0) || !std::isfinite(radii[i]))
        throw InvalidArgument("radii: must be positive and finite");
      if (i > 0 && radii[i] < radii[i - 1])
        throw InvalidArgument("radii: must be non-decreasing across blocks");
    }
    for (int s : subsample)
      if (s <= 0) throw InvalidArgument("subsample: must be positive");
    if (classes < 1) throw InvalidArgument("classes: must be positive");
    if (max_neighbors < 1) throw InvalidArgument("max_neighbors: must be positive");
    if (head_width < 1) throw InvalidArgument("head_width: must be positive");
    if (kernel == KernelFamily::discrete) make_rigid_points_check();
  }

  KeyValues to_key_values() const {
    return {{"task", to_string(task)},
            {"kernel", to_string(kernel)},
            {"widths", detail::join(widths)},
            {"radii", detail::join(radii)},
            {"subsample", detail::join(subsample)},
            {"classes", std::to_string(classes)},
            {"model_seed", std::to_string(seed)},
            {"max_neighbors", std::to_string(max_neighbors)},
            {"aggregation", aggregation == Aggregation::sum ? "sum" : "mean"},
            {"head_width", std::to_string(head_width)},
            {"kernel_points", std::to_string(kernel_points)}};
  }

  // Consumes the keys it knows from kv.
  void apply(KeyValues& kv) {
    auto take = [&](const char* key, auto&& fn) {
      if (auto it = kv.find(key); it != kv.end()) {
        const std::string name(key);
        fn(name, it->second);
        kv.erase(it);
      }
    };
    take("task", [&](auto&, auto& v) { task = parse_task(v); });
    take("kernel", [&](auto&, auto& v) { kernel = parse_family(v); });
    take("widths", [&](auto& k, auto& v) {
      widths.clear();
      for (auto& s : detail::split(v, ',')) widths.push_back(int(detail::parse_int(k, s)));
    });
    take("radii", [&](auto& k, auto& v) {
      radii.clear();
      for (auto& s : detail::split(v, ',')) radii.push_back(detail::parse_double(k, s));
    });
    take("subsample", [&](auto& k, auto& v) {
      subsample.clear();
      for (auto& s : detail::split(v, ',')) subsample.push_back(int(detail::parse_int(k, s)));
    });
    take("classes", [&](auto& k, auto& v) { classes = int(detail::parse_int(k, v)); });
    take("model_seed",
         [&](auto& k, auto& v) { seed = std::uint64_t(detail::parse_int(k, v)); });
    take("max_neighbors",
         [&](auto& k, auto& v) { max_neighbors = int(detail::parse_int(k, v)); });
    take("aggregation", [&](auto& k, auto& v) {
      if (v == "sum") aggregation = Aggregation::sum;
      else if (v == "mean") aggregation = Aggregation::mean;
      else throw InvalidArgument(k + ": expected sum or mean");
    });
    take("head_width", [&](auto& k, auto& v) { head_width = int(detail::parse_int(k, v)); });
    take("kernel_points",
         [&](auto& k, auto& v) { kernel_points = int(detail::parse_int(k, v)); });
  }

 private:
  void make_rigid_points_check() const {
    switch (kernel_points) {
      case 1: case 7: case 9: case 13: case 15: return;
      default: throw InvalidArgument("kernel_points: unsupported count");
    }
  }
};

enum class OptimizerKind { sgd_momentum, adam };

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  double lr_decay = 0.7;
  int decay_every = 10;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  bool augment_rotate = false;
  bool augment_scale = false;
  bool augment_jitter = false;
  // Random farthest-point downsampling to between 1/16 and all points.
  bool augment_density = false;

  void validate() const {
    if (epochs < 0) throw InvalidArgument("epochs: must be non-negative");
    if (batch_size < 1) throw InvalidArgument("batch_size: must be positive");
    if (!std::isfinite(lr) || lr < 0.0) throw InvalidArgument("lr: must be finite and >= 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0))
      throw InvalidArgument("lr_decay: must be in (0, 1]");
    if (decay_every < 1) throw InvalidArgument("decay_every: must be positive");
    if (!std::isfinite(weight_decay) || weight_decay < 0.0)
      throw InvalidArgument("weight_decay: must be finite and >= 0");
  }

  double lr_at(int epoch) const {
    return lr * std::pow(lr_decay, static_cast<double>(epoch / decay_every));
  }

  KeyValues to_key_values() const {
    return {{"epochs", std::to_string(epochs)},
            {"batch_size", std::to_string(batch_size)},
            {"optimizer", optimizer == OptimizerKind::adam ? "adam" : "sgd_momentum"},
            {"lr", detail::fmt(lr)},
            {"lr_decay", detail::fmt(lr_decay)},
            {"decay_every", std::to_string(decay_every)},
            {"weight_decay", detail::fmt(weight_decay)},
            {"seed", std::to_string(seed)},
            {"augment_rotate", augment_rotate ? "true" : "false"},
            {"augment_scale", augment_scale ? "true" : "false"},
            {"augment_jitter", augment_jitter ? "true" : "false"},
            {"augment_density", augment_density ? "true" : "false"}};
  }

  void apply(KeyValues& kv) {
    auto take = [&](const char* key, auto&& fn) {
      if (auto it = kv.find(key); it != kv.end()) {
        const std::string name(key);
        fn(name, it->second);
        kv.erase(it);
      }
    };
    take("epochs", [&](auto& k, auto& v) { epochs = int(detail::parse_int(k, v)); });
    take("batch_size", [&](auto& k, auto& v) { batch_size = int(detail::parse_int(k, v)); });
    take("optimizer", [&](auto& k, auto& v) {
      if (v == "adam") optimizer = OptimizerKind::adam;
      else if (v == "sgd_momentum") optimizer = OptimizerKind::sgd_momentum;
      else throw InvalidArgument(k + ": expected adam or sgd_momentum");
    });
    take("lr", [&](auto& k, auto& v) { lr = detail::parse_double(k, v); });
    take("lr_decay", [&](auto& k, auto& v) { lr_decay = detail::parse_double(k, v); });
    take("decay_every", [&](auto& k, auto& v) { decay_every = int(detail::parse_int(k, v)); });
    take("weight_decay", [&](auto& k, auto& v) { weight_decay = detail::parse_double(k, v); });
    take("seed", [&](auto& k, auto& v) { seed = std::uint64_t(detail::parse_int(k, v)); });
    take("augment_rotate", [&](auto& k, auto& v) { augment_rotate = detail::parse_bool(k, v); });
    take("augment_scale", [&](auto& k, auto& v) { augment_scale = detail::parse_bool(k, v); });
    take("augment_jitter", [&](auto& k, auto& v) { augment_jitter = detail::parse_bool(k, v); });
    take("augment_density",
         [&](auto& k, auto& v) { augment_density = detail::parse_bool(k, v); });
  }
};

// Applies a config file to both configs; leftover keys are rejected.
inline void apply_config_text(std::string_view text, ModelConfig& model, TrainConfig& train) {
  KeyValues kv = parse_key_values(text);
  model.apply(kv);
  train.apply(kv);
  if (!kv.empty()) throw InvalidArgument(kv.begin()->first + ": unknown config key");
  model.validate();
  train.validate();
}

}  // namespace pfcv

#endif  // PFCV_CONFIG_HPP_
