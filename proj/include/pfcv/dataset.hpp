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

#ifndef PFCV_DATASET_HPP_
#define PFCV_DATASET_HPP_

#include <filesystem>

#include "pfcv/io.hpp"
#include "pfcv/train.hpp"

namespace pfcv {

// Either a directory written by save_dataset or "synthetic:4class[,key=value...]".
struct DataSource {
  bool synthetic = true;
  SyntheticSpec spec;
  std::size_t train = 2000, test = 400;
  std::filesystem::path dir;

  KeyValues to_key_values() const {
    if (!synthetic) return {{"data", dir.string()}};
    return {{"data", "synthetic:4class"},
            {"data.train", std::to_string(train)},
            {"data.test", std::to_string(test)},
            {"data.n_points", std::to_string(spec.n_points)},
            {"data.noise", detail::fmt(spec.noise)},
            {"data.density_bias", spec.density_bias ? "true" : "false"},
            {"data.rotate", spec.random_rotation ? "true" : "false"},
            {"data.seed", std::to_string(spec.seed)}};
  }
};

inline DataSource parse_data_source(std::string_view text) {
  DataSource src;
  constexpr std::string_view prefix = "synthetic:";
  if (text.substr(0, prefix.size()) != prefix) {
    if (text.empty()) throw InvalidArgument("data: empty source");
    src.synthetic = false;
    src.dir = std::filesystem::path(std::string(text));
    return src;
  }
  const auto parts = detail::split(std::string(text.substr(prefix.size())), ',');
  if (parts.empty() || trim(parts[0]) != "4class")
    throw InvalidArgument("data: unknown synthetic benchmark, expected synthetic:4class");
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto eq = parts[i].find('=');
    if (eq == std::string::npos) throw InvalidArgument("data: expected key=value, got " + parts[i]);
    const std::string key = trim(std::string_view(parts[i]).substr(0, eq));
    const std::string val = trim(std::string_view(parts[i]).substr(eq + 1));
    const std::string name = "data." + key;
    auto count = [&] {
      const long long v = detail::parse_int(name, val);
      if (v < 0) throw InvalidArgument(name + ": must be non-negative");
      return static_cast<std::size_t>(v);
    };
    if (key == "train") src.train = count();
    else if (key == "test") src.test = count();
    else if (key == "n_points" || key == "points") src.spec.n_points = count();
    else if (key == "noise") src.spec.noise = detail::parse_double(name, val);
    else if (key == "density_bias") src.spec.density_bias = detail::parse_bool(name, val);
    else if (key == "rotate") src.spec.random_rotation = detail::parse_bool(name, val);
    else if (key == "seed") src.spec.seed = static_cast<std::uint64_t>(count());
    else throw InvalidArgument(name + ": unknown key");
  }
  src.spec.validate();
  return src;
}

namespace detail {

inline std::string cloud_file_name(std::size_t i, const PointCloud& c) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%05zu_c%d.xyz", i, c.class_id.value_or(-1));
  return buf;
}

inline std::vector<PointCloud> load_split(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) return {};
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".xyz") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<PointCloud> out;
  for (const auto& f : files) {
    PointCloud c;
    try {
      c = parse_xyz(read_file(f));
    } catch (const ParseError& e) {
      throw ParseError(e.line(), f.filename().string() + ": " + e.what());
    }
    const std::string stem = f.stem().string();
    if (const auto p = stem.rfind("_c"); p != std::string::npos) {
      const int cls = std::atoi(stem.c_str() + p + 2);
      if (cls >= 0) c.class_id = cls;
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace detail

// Clouds are normalized to zero centroid and unit max radius on ingestion.
inline Dataset load_dataset(const DataSource& src, Task task) {
  Dataset d;
  if (src.synthetic) {
    SyntheticSpec s = src.spec;
    s.count = src.train;
    d.train = gen_synthetic(s);
    s.count = src.test;
    s.seed = src.spec.seed ^ 0x7e577e57ULL;
    d.test = gen_synthetic(s);
    d.classes = task == Task::classify ? static_cast<int>(s.classes.size()) : s.part_labels();
  } else {
    if (!std::filesystem::is_directory(src.dir))
      throw InvalidArgument("data: no such directory " + src.dir.string());
    KeyValues kv;
    const auto meta = src.dir / "dataset.txt";
    if (std::filesystem::exists(meta)) kv = parse_key_values(read_file(meta));
    d.train = detail::load_split(src.dir / "train");
    d.test = detail::load_split(src.dir / "test");
    const std::string key = task == Task::classify ? "classes" : "parts";
    if (auto it = kv.find(key); it != kv.end()) {
      d.classes = static_cast<int>(detail::parse_int(key, it->second));
    } else {
      int hi = -1;
      for (const auto* split : {&d.train, &d.test})
        for (const auto& c : *split) {
          if (task == Task::classify && c.class_id) hi = std::max(hi, *c.class_id);
          for (int l : c.labels) if (task == Task::segment) hi = std::max(hi, l);
        }
      d.classes = hi + 1;
    }
    if (d.train.empty() && d.test.empty())
      throw InvalidArgument("data: no .xyz clouds under " + src.dir.string());
  }
  for (auto* split : {&d.train, &d.test})
    for (auto& c : *split) normalize_unit_ball(c);
  return d;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir, int parts) {
  for (const auto& [name, split] : {std::pair{"train", &d.train}, std::pair{"test", &d.test}}) {
    const auto sub = dir / name;
    std::filesystem::create_directories(sub);
    for (std::size_t i = 0; i < split->size(); ++i)
      atomic_write(sub / detail::cloud_file_name(i, (*split)[i]), write_xyz((*split)[i]));
  }
  atomic_write(dir / "dataset.txt",
               format_key_values({{"classes", std::to_string(d.classes)},
                                  {"parts", std::to_string(parts)},
                                  {"train", std::to_string(d.train.size())},
                                  {"test", std::to_string(d.test.size())}}));
}

}  // namespace pfcv

#endif  // PFCV_DATASET_HPP_
