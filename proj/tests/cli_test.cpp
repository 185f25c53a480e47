// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <unistd.h>

#include "soekit/checkpoint.hpp"
#include "soekit/image.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path work_dir() {
  static const fs::path dir = [] {
    // Per process: ctest runs each test case as its own process.
    auto d = fs::temp_directory_path() / ("soekit_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Result run(const std::string& args, const std::string& env = "") {
  const auto out = work_dir() / "stdout.txt", err = work_dir() / "stderr.txt";
  const std::string cmd = env + " " + SOEKIT_CLI_PATH + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// Small enough that the whole pipeline takes seconds.
const std::string kTiny =
    " --set model.vae_width=4 --set model.unet_width=8 --set model.groups=4 --set model.cond_dim=8"
    " --set model.temb_dim=16 --set train.batch_size=2 --set eval.ddim_steps=2 --set eval.max_samples=4"
    " --set eval.probe_steps=5 --set eval.probe_batch_size=4";

// gen-data -> pretrain -> train, shared by the tests below.
const fs::path& pipeline() {
  static const fs::path dir = [] {
    const auto d = work_dir() / "pipe";
    const std::string tiny = kTiny + " --seed 3";
    EXPECT_EQ(run("gen-data --out " + (d / "data").string() + " --count 12" + tiny).code, 0);
    EXPECT_EQ(run("pretrain-teacher --data " + (d / "data").string() + " --out " + (d / "teacher.ckpt").string() +
                  " --steps 4 --vae-steps 4" + tiny)
                  .code,
              0);
    EXPECT_EQ(run("train --data " + (d / "data").string() + " --teacher " + (d / "teacher.ckpt").string() + " --out " +
                  (d / "student.ckpt").string() + " --steps 3 --no-timing" + tiny)
                  .code,
              0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, EffectiveAreaRow) {
  const auto r = run("analyze-effective-area --image-side 512 --latent-factor 8 --depths 3 --mask-sides 64");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("\n64,1\n"), std::string::npos) << r.out;
}

TEST(Cli, EffectiveAreaCsv) {
  const auto csv = work_dir() / "ea.csv";
  const auto r = run("analyze-effective-area --out " + csv.string());
  EXPECT_EQ(r.code, 0) << r.err;
  const auto text = slurp(csv);
  EXPECT_EQ(text.rfind("mask_side,depth1,depth2,depth3,depth4\n", 0), 0u) << text;
  EXPECT_NE(text.find("\n64,4,2,1,1\n"), std::string::npos) << text;
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("gen-data").code, 2);  // --out is required
  EXPECT_EQ(run("analyze-effective-area --bogus 1").code, 2);
}

TEST(Cli, HelpListsFlagsWithDefaults) {
  const auto r = run("train --help");
  EXPECT_EQ(r.code, 0);
  for (const char* flag : {"--config", "--set", "--seed", "--data", "--teacher", "--out", "--steps", "--no-timing"})
    EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
  const auto ea = run("analyze-effective-area --help");
  EXPECT_NE(ea.out.find("512"), std::string::npos) << ea.out;
}

TEST(Cli, UnknownConfigKeyExitsOne) {
  const auto cfg = work_dir() / "bad.json";
  std::ofstream(cfg) << R"({"train": {"lr": 0.001, "learning_rate": 0.1}})";
  const auto r = run("gen-data --out " + (work_dir() / "never").string() + " --config " + cfg.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("train.learning_rate"), std::string::npos) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
  EXPECT_EQ(r.err.rfind("error: ", 0), 0u);
  EXPECT_EQ(run("gen-data --out " + (work_dir() / "never").string() + " --set train.lr=-1").code, 1);
  EXPECT_EQ(run("gen-data --out " + (work_dir() / "never").string() + " --set nope.x=1").code, 1);
  EXPECT_FALSE(fs::exists(work_dir() / "never"));
}

TEST(Cli, PipelineProducesArtifacts) {
  const auto& d = pipeline();
  EXPECT_TRUE(fs::exists(d / "data" / "index.jsonl"));
  EXPECT_TRUE(fs::exists(d / "data" / "config.json"));
  const auto log = slurp(d / "student.ckpt.loss.csv");
  EXPECT_EQ(log.rfind("step,L_denoise,L_distill,L_vae,L_total,wall_ms\n", 0), 0u) << log;
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 4);
  const auto ck = soekit::Checkpoint::load(d / "student.ckpt");
  EXPECT_EQ(ck.meta.at("role"), "student");
  EXPECT_EQ(ck.meta.at("config").at("model").at("unet_width"), 8);
}

TEST(Cli, TrainRejectsStudentAsTeacher) {
  const auto& d = pipeline();
  const auto r = run("train --data " + (d / "data").string() + " --teacher " + (d / "student.ckpt").string() +
                     " --out " + (work_dir() / "x.ckpt").string() + " --steps 1" + kTiny);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("teacher not frozen"), std::string::npos) << r.err;
}

TEST(Cli, TrainIsByteReproducible) {
  const auto& d = pipeline();
  const auto again = work_dir() / "again.ckpt";
  ASSERT_EQ(run("train --data " + (d / "data").string() + " --teacher " + (d / "teacher.ckpt").string() + " --out " +
                again.string() + " --steps 3 --no-timing --seed 3" + kTiny)
                .code,
            0);
  EXPECT_EQ(slurp(again), slurp(d / "student.ckpt"));
  EXPECT_EQ(slurp(again.string() + ".loss.csv"), slurp(d / "student.ckpt.loss.csv"));
}

TEST(Cli, SeedFallsBackToEnvironment) {
  const auto a = work_dir() / "env_a", b = work_dir() / "env_b", c = work_dir() / "env_c";
  ASSERT_EQ(run("gen-data --out " + a.string() + " --split val-small --count 2", "SOEKIT_SEED=11").code, 0);
  ASSERT_EQ(run("gen-data --out " + b.string() + " --split val-small --count 2 --seed 11").code, 0);
  ASSERT_EQ(run("gen-data --out " + c.string() + " --split val-small --count 2 --seed 12").code, 0);
  EXPECT_EQ(slurp(a / "index.jsonl"), slurp(b / "index.jsonl"));
  EXPECT_NE(slurp(a / "index.jsonl"), slurp(c / "index.jsonl"));
}

TEST(Cli, EditWritesImageWithConfigEcho) {
  const auto& d = pipeline();
  const auto out = work_dir() / "edited.ppm";
  std::string img;
  for (const auto& e : fs::directory_iterator(d / "data" / "images"))
    if (e.path().filename().string().rfind("val-small", 0) == 0) img = e.path().string();
  ASSERT_FALSE(img.empty());
  const auto r = run("edit --checkpoint " + (d / "student.ckpt").string() + " --image " + img +
                     " --bbox 10,10,8,8 --label ring --color red --steps 2 --seed 1 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto edited = soekit::read_ppm(out), src = soekit::read_ppm(img);
  EXPECT_EQ(edited.width, src.width);
  EXPECT_NE(slurp(out).find("# soekit {"), std::string::npos);
  const auto bad = run("edit --checkpoint " + (d / "student.ckpt").string() + " --image " + img +
                       " --bbox 60,60,8,8 --label ring --color red --out " + out.string());
  EXPECT_EQ(bad.code, 1);
}

TEST(Cli, EvalWritesMetrics) {
  const auto& d = pipeline();
  const auto out = work_dir() / "eval";
  const auto r = run("eval --checkpoint " + (d / "student.ckpt").string() + " --data " + (d / "data").string() +
                     " --out " + out.string() + " --details --seed 2" + kTiny);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto metrics = slurp(out / "metrics.csv");
  EXPECT_EQ(metrics.rfind("style,alignment_mean,frechet,n\n", 0), 0u) << metrics;
  EXPECT_NE(metrics.find(",4\n"), std::string::npos) << metrics;
  EXPECT_TRUE(fs::exists(out / "details.csv"));
  EXPECT_TRUE(fs::exists(out / "config.json"));
}
