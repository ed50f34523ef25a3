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
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pfcv/pfcv.hpp"

namespace fs = std::filesystem;
using namespace pfcv;

namespace {

struct RunResult {
  int code = -1;
  std::string output;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(PFCV_CLI_PATH) + " " + args + " 2>&1";
  RunResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (p == nullptr) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("pfcv_cli_" + std::to_string(::getpid()) + "_" + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(path(name)) << text;
    return path(name);
  }

  fs::path dir_;
};

const char* kTinyData = "synthetic:4class,train=16,test=8,points=64";
const char* kTinyConfig =
    "widths = 8,16\nradii = 0.3,0.6\nsubsample = 32,16\nhead_width = 16\nepochs = 2\n";

ModelConfig tiny_model(KernelFamily f) {
  ModelConfig c;
  c.kernel = f;
  c.widths = {8, 16};
  c.radii = {0.3, 0.6};
  c.subsample = {32, 16};
  c.head_width = 16;
  return c;
}

// One block, one field, radius 1.2: covers both the plane pair and the unit sphere.
std::string analytic_checkpoint(const std::string& file, FieldKind kind) {
  ModelConfig c;
  c.kernel = kind == FieldKind::linear ? KernelFamily::potential_linear
                                       : KernelFamily::potential_quadratic;
  c.widths = {1};
  c.radii = {1.2};
  c.subsample = {16};
  c.head_width = 4;
  auto m = build_model<double>(c);
  auto* bank = m->blocks()[0].conv->field_bank();
  if (kind == FieldKind::linear) {
    bank->A.row(0) << 0, 0, 1;
    bank->bias(0) = 0;
  } else {
    bank->A.row(0).setZero();
    bank->B.row(0) << 1, 1, 1;
    bank->bias(0) = -1;
  }
  save_checkpoint(*m, file);
  return file;
}

std::vector<Vec3> read_ply_points(const std::string& file) {
  std::ifstream in(file);
  std::string line;
  while (std::getline(in, line) && line != "end_header") {
  }
  std::vector<Vec3> pts;
  double x, y, z;
  int r, g, b;
  while (in >> x >> y >> z >> r >> g >> b) pts.emplace_back(x, y, z);
  return pts;
}

std::size_t count_lines(const std::string& file) {
  std::ifstream in(file);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_F(Cli, HelpExitsZero) { EXPECT_EQ(run("--help").code, 0); }

TEST_F(Cli, MissingSubcommandIsConfigError) { EXPECT_EQ(run("").code, 2); }

TEST_F(Cli, UnknownFlagRejected) {
  const auto r = run("gradcheck --kernel potential_linear --bogus 3");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("bogus"), std::string::npos);
}

TEST_F(Cli, TrainMissingOutIsConfigError) {
  EXPECT_EQ(run(std::string("train --data ") + kTinyData).code, 2);
}

TEST_F(Cli, TrainNanLearningRateNamesField) {
  const auto cfg = write("bad.cfg", std::string(kTinyConfig) + "lr = nan\n");
  const auto r = run(std::string("train --data ") + kTinyData + " --config " + cfg +
                     " --out " + path("m.ckpt"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("lr"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("m.ckpt")));
}

TEST_F(Cli, TrainUnknownConfigKeyIsConfigError) {
  const auto cfg = write("bad.cfg", std::string(kTinyConfig) + "learning_rate = 0.1\n");
  const auto r = run(std::string("train --data ") + kTinyData + " --config " + cfg +
                     " --out " + path("m.ckpt"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("learning_rate"), std::string::npos);
}

TEST_F(Cli, TrainWritesCheckpointAndMetrics) {
  const auto cfg = write("tiny.cfg", kTinyConfig);
  const auto r = run(std::string("train --data ") + kTinyData +
                     " --kernel potential_quadratic --seed 7 --config " + cfg + " --out " +
                     path("m.ckpt"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(path("m.ckpt")));
  ASSERT_TRUE(fs::exists(path("m.ckpt.metrics.csv")));
  // header + epoch 0 test + 2 epochs x (train, test)
  EXPECT_EQ(count_lines(path("m.ckpt.metrics.csv")), 6u);
  EXPECT_NE(r.output.find("model.kernel = potential_quadratic"), std::string::npos);
  EXPECT_NE(r.output.find("train.seed = 7"), std::string::npos);
  EXPECT_NE(r.output.find("train.lr = "), std::string::npos);
  const auto m = load_checkpoint<float>(path("m.ckpt"));
  EXPECT_EQ(m->config().kernel, KernelFamily::potential_quadratic);
  EXPECT_EQ(m->config().seed, 7u);
}

TEST_F(Cli, TrainIsDeterministic) {
  const auto cfg = write("tiny.cfg", kTinyConfig);
  const std::string base = std::string("train --data ") + kTinyData + " --seed 3 --config " + cfg;
  ASSERT_EQ(run(base + " --out " + path("a.ckpt")).code, 0);
  ASSERT_EQ(run(base + " --out " + path("b.ckpt")).code, 0);
  EXPECT_EQ(read_file(path("a.ckpt")), read_file(path("b.ckpt")));
  EXPECT_EQ(read_file(path("a.ckpt.metrics.csv")), read_file(path("b.ckpt.metrics.csv")));
}

TEST_F(Cli, GenDataThenTrainAndEvalFromDirectory) {
  ASSERT_EQ(run(std::string("gen-data --data ") + kTinyData + " --out " + path("ds")).code, 0);
  EXPECT_TRUE(fs::exists(path("ds/dataset.txt")));
  EXPECT_EQ(std::distance(fs::directory_iterator(path("ds/train")), fs::directory_iterator{}), 16);
  const auto cfg = write("tiny.cfg", kTinyConfig);
  ASSERT_EQ(run("train --data " + path("ds") + " --config " + cfg + " --out " + path("m.ckpt")).code, 0);
  const auto r = run("eval --ckpt " + path("m.ckpt") + " --data " + path("ds") + " --points 32 --out " +
                     path("eval.csv"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("test loss"), std::string::npos);
  EXPECT_EQ(count_lines(path("eval.csv")), 2u);
}

TEST_F(Cli, EvalMissingCheckpointIsConfigError) {
  EXPECT_EQ(run("eval --ckpt " + path("nope.ckpt")).code, 2);
}

TEST_F(Cli, EvalCorruptCheckpointIsConfigError) {
  write("bad.ckpt", "PFCVgarbage");
  EXPECT_EQ(run("eval --ckpt " + path("bad.ckpt") + " --data " + kTinyData).code, 2);
}

TEST_F(Cli, GradcheckDefaultPassesOnPotentialKinds) {
  for (const char* k : {"potential_linear", "potential_linear_normal", "potential_quadratic",
                        "potential_mlp"}) {
    const auto r = run(std::string("gradcheck --kernel ") + k);
    EXPECT_EQ(r.code, 0) << k << "\n" << r.output;
    EXPECT_NE(r.output.find("model.conv"), std::string::npos);
  }
}

TEST_F(Cli, GradcheckSabotageExitsOneAndNamesGroup) {
  const auto r = run("gradcheck --kernel potential_linear --trials 2 --sabotage conv.W");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("violation: potential_linear conv.W"), std::string::npos);
}

TEST_F(Cli, GradcheckZeroTrialsIsConfigError) {
  EXPECT_EQ(run("gradcheck --kernel potential_linear --trials 0").code, 2);
}

TEST_F(Cli, GradcheckUnknownKernelIsConfigError) {
  EXPECT_EQ(run("gradcheck --kernel potential_cubic").code, 2);
}

TEST_F(Cli, SparseSweepShapes) {
  fs::create_directories(path("ck"));
  for (auto f : {KernelFamily::potential_quadratic, KernelFamily::discrete, KernelFamily::continuous})
    save_checkpoint(*build_model<float>(tiny_model(f)), path(std::string("ck/") + to_string(f) + ".ckpt"));
  const std::string data = " --data synthetic:4class,train=4,test=6,points=128";
  auto r = run("sparse-sweep --ckpt-dir " + path("ck") + data + " --counts 16,32,64,96,128 --out " +
               path("sweep.csv"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(count_lines(path("sweep.csv")), 16u);
  EXPECT_NE(r.output.find("ordering at 16 points"), std::string::npos);
  r = run("sparse-sweep --ckpt-dir " + path("ck") + data + " --counts 64 --out " + path("one.csv"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(count_lines(path("one.csv")), 4u);
}

TEST_F(Cli, SparseSweepMissingCheckpointIsConfigError) {
  fs::create_directories(path("ck"));
  save_checkpoint(*build_model<float>(tiny_model(KernelFamily::discrete)), path("ck/discrete.ckpt"));
  const auto r = run("sparse-sweep --ckpt-dir " + path("ck") + " --out " + path("s.csv"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("potential_quadratic"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("s.csv")));
}

TEST_F(Cli, VizIsosurfacePlanePair) {
  const auto ck = analytic_checkpoint(path("lin.ckpt"), FieldKind::linear);
  ASSERT_EQ(run("viz-fields --ckpt " + ck + " --mode isosurface --eta 0.5 --out " + path("p.ply")).code, 0);
  const auto pts = read_ply_points(path("p.ply"));
  ASSERT_GT(pts.size(), 100u);
  for (const auto& p : pts) EXPECT_LT(std::abs(std::abs(p.z()) - 0.5), 0.03);
}

TEST_F(Cli, VizIsosurfaceUnitSphere) {
  const auto ck = analytic_checkpoint(path("quad.ckpt"), FieldKind::quadratic);
  ASSERT_EQ(run("viz-fields --ckpt " + ck + " --mode isosurface --eta 0.02 --out " + path("s.ply")).code, 0);
  const auto pts = read_ply_points(path("s.ply"));
  ASSERT_GT(pts.size(), 100u);
  for (const auto& p : pts) EXPECT_LT(std::abs(p.norm() - 1.0), 0.03);
}

TEST_F(Cli, VizArgmaxSingleFieldIsUniform) {
  const auto ck = analytic_checkpoint(path("lin.ckpt"), FieldKind::linear);
  const auto r = run("viz-fields --ckpt " + ck + " --probe 500 --out " + path("a.ply"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(count_lines(path("a.ply")), 510u);
  std::ifstream in(path("a.ply"));
  std::string line;
  std::set<std::string> colors;
  bool body = false;
  while (std::getline(in, line)) {
    if (body) colors.insert(line.substr(line.find(' ', line.find(' ', line.find(' ') + 1) + 1)));
    body = body || line == "end_header";
  }
  EXPECT_EQ(colors.size(), 1u);
}

TEST_F(Cli, VizLayerOutOfRangeIsConfigError) {
  const auto ck = analytic_checkpoint(path("lin.ckpt"), FieldKind::linear);
  const auto r = run("viz-fields --ckpt " + ck + " --layer 3 --out " + path("x.ply"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("layer"), std::string::npos);
}

TEST_F(Cli, VizRejectsNonPotentialKernel) {
  save_checkpoint(*build_model<float>(tiny_model(KernelFamily::discrete)), path("d.ckpt"));
  EXPECT_EQ(run("viz-fields --ckpt " + path("d.ckpt") + " --out " + path("x.ply")).code, 2);
}

TEST_F(Cli, VizIsDeterministic) {
  save_checkpoint(*build_model<float>(tiny_model(KernelFamily::potential_quadratic)), path("q.ckpt"));
  ASSERT_EQ(run("viz-fields --ckpt " + path("q.ckpt") + " --probe 300 --out " + path("a.ply")).code, 0);
  ASSERT_EQ(run("viz-fields --ckpt " + path("q.ckpt") + " --probe 300 --out " + path("b.ply")).code, 0);
  EXPECT_EQ(read_file(path("a.ply")), read_file(path("b.ply")));
}
