// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0
//
// soekit command line: dataset generation, teacher pretraining, training,
// editing, evaluation and the effective-area table.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "soekit/soekit.hpp"

namespace fs = std::filesystem;
using namespace soekit;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  int workers = 1;
};

void add_common(CLI::App* cmd, Common& c, bool with_seed = true) {
  cmd->add_option("--config", c.config, "JSON config file (sections data, schedule, model, lora, train, eval)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "Override one config field, e.g. --set train.lr=0.0005 (repeatable)");
  if (with_seed) cmd->add_option("--seed", c.seed, "Seed (fallback: $SOEKIT_SEED, then train.seed in the config)");
  cmd->add_option("--workers", c.workers, "Cap on worker threads (work currently runs on one thread)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
}

// Config file, then --set overrides, then the seed fallback chain.
RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (!c.sets.empty()) {
    nlohmann::json patch = nlohmann::json::object();
    for (const auto& s : c.sets) {
      const auto eq = s.find('='), dot = s.find('.');
      if (eq == std::string::npos || dot == std::string::npos || dot > eq)
        throw Error("--set expects section.key=value, got '" + s + "'");
      const std::string sec = s.substr(0, dot), key = s.substr(dot + 1, eq - dot - 1), raw = s.substr(eq + 1);
      nlohmann::json v;
      try {
        v = nlohmann::json::parse(raw);
      } catch (const nlohmann::json::exception&) {
        v = raw;  // bare strings
      }
      patch[sec][key] = v;
    }
    cfg = apply_json(cfg, patch);
  }
  if (c.seed) {
    cfg.seed = *c.seed;
  } else if (const char* env = std::getenv("SOEKIT_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      cfg.seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw Error(std::string("SOEKIT_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  validate(cfg);
  return cfg;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::vector<SoeSample> load_split(const std::string& dir, Split split, const RunConfig& cfg) {
  auto s = read_dataset(dir, split);
  if (s.empty()) throw Error("dataset " + dir + " has no " + split_name(split) + " samples");
  for (const auto& smp : s)
    if (smp.image.width != static_cast<std::size_t>(cfg.model.image_side) ||
        smp.image.height != static_cast<std::size_t>(cfg.model.image_side))
      throw Error("sample " + smp.id + " is " + std::to_string(smp.image.width) + "x" +
                  std::to_string(smp.image.height) + ", config expects model.image_side " +
                  std::to_string(cfg.model.image_side));
  return s;
}

std::vector<int> parse_int_list(const std::string& s, const char* what) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw Error(std::string(what) + ": bad integer '" + tok + "'");
    }
  }
  if (out.empty()) throw Error(std::string(what) + ": empty list");
  return out;
}

int label_arg(const std::string& s) {
  if (!s.empty() && std::isdigit(static_cast<unsigned char>(s[0]))) {
    const int v = parse_int_list(s, "--label").at(0);
    if (v < 0 || v >= kNumLabels) throw Error("--label id out of range");
    return v;
  }
  return label_id(s);
}

int color_arg(const std::string& s) {
  if (!s.empty() && std::isdigit(static_cast<unsigned char>(s[0]))) {
    const int v = parse_int_list(s, "--color").at(0);
    if (v < 0 || v >= kNumColors) throw Error("--color id out of range");
    return v;
  }
  return color_id(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"soekit: small-object editing with scale-specific adapters and cross-scale distillation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "soekit 0.1.0");

  // gen-data
  Common gd;
  std::string gd_out, gd_split = "all";
  std::optional<int> gd_count;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset (index.jsonl + images/*.ppm)");
  add_common(gen, gd);
  gen->add_option("--out", gd_out, "Dataset directory (merged with an existing index)")->required();
  gen->add_option("--split", gd_split, "train-small, train-generic, val-small or all")->capture_default_str();
  gen->add_option("--count", gd_count, "Samples per split (default: data.count_* from the config)")
      ->check(CLI::NonNegativeNumber);

  // pretrain-teacher
  Common pt;
  std::string pt_data, pt_out, pt_log;
  std::optional<long> pt_steps, pt_vae_steps;
  auto* pre = app.add_subcommand("pretrain-teacher", "Train the base model on generic-size objects and freeze it");
  add_common(pre, pt);
  pre->add_option("--data", pt_data, "Dataset directory (uses the train-generic split)")
      ->required()
      ->check(CLI::ExistingDirectory);
  pre->add_option("--out", pt_out, "Teacher checkpoint path")->required();
  pre->add_option("--steps", pt_steps, "Denoiser steps (overrides train.pretrain_steps)");
  pre->add_option("--vae-steps", pt_vae_steps, "Autoencoder steps (overrides train.pretrain_vae_steps)");
  pre->add_option("--log", pt_log, "CSV of pretraining losses (phase,step,loss)");

  // train
  Common tr;
  std::string tr_data, tr_teacher, tr_out, tr_csv;
  std::optional<long> tr_steps;
  bool tr_no_timing = false;
  auto* train = app.add_subcommand("train", "Train the student (adapters, optionally the VAE) against a frozen teacher");
  add_common(train, tr);
  train->add_option("--data", tr_data, "Dataset directory (uses the train-small split)")
      ->required()
      ->check(CLI::ExistingDirectory);
  train->add_option("--teacher", tr_teacher, "Frozen teacher checkpoint")->required()->check(CLI::ExistingFile);
  train->add_option("--out", tr_out, "Student checkpoint path")->required();
  train->add_option("--loss-csv", tr_csv, "Loss log (default: <out>.loss.csv)");
  train->add_option("--steps", tr_steps, "Training steps (overrides train.steps)");
  train->add_flag("--no-timing", tr_no_timing, "Write wall_ms as 0 so the loss log is reproducible");

  // edit
  Common ed;
  std::string ed_ckpt, ed_image, ed_bbox, ed_label, ed_color, ed_style = "color_label", ed_out;
  std::optional<int> ed_steps;
  auto* edit_cmd = app.add_subcommand("edit", "Inpaint an object into a bbox of a P6 PPM image");
  add_common(edit_cmd, ed);
  edit_cmd->add_option("--checkpoint", ed_ckpt, "Model checkpoint (teacher or student)")
      ->required()
      ->check(CLI::ExistingFile);
  edit_cmd->add_option("--image", ed_image, "Input image (P6 PPM)")->required();
  edit_cmd->add_option("--bbox", ed_bbox, "Edit region x,y,w,h in pixels")->required();
  edit_cmd->add_option("--label", ed_label, "Object label (name or id)")->required();
  edit_cmd->add_option("--color", ed_color, "Object colour (name or id); needed for color_label prompts");
  edit_cmd->add_option("--style", ed_style, "Prompt style: label or color_label")->capture_default_str();
  edit_cmd->add_option("--steps", ed_steps, "DDIM steps (default: eval.ddim_steps)");
  edit_cmd->add_option("--out", ed_out, "Output image (P6 PPM)")->required();

  // eval
  Common ev;
  std::string ev_ckpt, ev_data, ev_out, ev_style = "all", ev_probe;
  bool ev_details = false;
  auto* eval = app.add_subcommand("eval", "Edit every val-small sample and score the masked crops");
  add_common(eval, ev);
  eval->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", ev_data, "Dataset directory (uses the val-small split)")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--style", ev_style, "label, color_label or all (all = eval.styles)")->capture_default_str();
  eval->add_option("--probe", ev_probe, "Probe classifier checkpoint (default: train one from eval.probe_*)")
      ->check(CLI::ExistingFile);
  eval->add_option("--out", ev_out, "Output directory for metrics.csv")->required();
  eval->add_flag("--details", ev_details, "Also write per-sample details.csv");

  // train-probe
  Common tp;
  std::string tp_out;
  auto* probe_cmd = app.add_subcommand("train-probe", "Train and save the probe classifier used by eval");
  add_common(probe_cmd, tp);
  probe_cmd->add_option("--out", tp_out, "Probe checkpoint path")->required();

  // analyze-effective-area
  int ea_image = 512, ea_factor = 8;
  std::string ea_depths = "1,2,3,4", ea_masks = "16,32,64,128,256,512", ea_out;
  auto* ea = app.add_subcommand("analyze-effective-area",
                                "Feature-map side an object keeps at each U-Net depth (stdout + optional CSV)");
  ea->add_option("--image-side", ea_image, "Image side in pixels")->capture_default_str()->check(CLI::PositiveNumber);
  ea->add_option("--latent-factor", ea_factor, "Autoencoder downsampling factor")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  ea->add_option("--depths", ea_depths, "Comma-separated U-Net depths")->capture_default_str();
  ea->add_option("--mask-sides", ea_masks, "Comma-separated mask sides in pixels")->capture_default_str();
  ea->add_option("--out", ea_out, "CSV output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      const RunConfig cfg = resolve(gd);
      std::vector<Split> splits;
      if (gd_split == "all") splits.assign(kSplits.begin(), kSplits.end());
      else splits.push_back(parse_split(gd_split));
      std::vector<SoeSample> all;
      for (auto sp : splits) {
        int n = sp == Split::TrainSmall     ? cfg.data.count_train_small
                : sp == Split::TrainGeneric ? cfg.data.count_train_generic
                                            : cfg.data.count_val_small;
        if (gd_count) n = *gd_count;
        auto s = generate_split(sp, static_cast<std::size_t>(n), cfg.seed, cfg.data);
        std::printf("%s: %zu samples\n", split_name(sp).c_str(), s.size());
        for (auto& smp : s) all.push_back(std::move(smp));
      }
      write_dataset(all, gd_out);
      write_json(fs::path(gd_out) / "config.json", to_json(cfg));
      return 0;
    }

    if (*pre) {
      RunConfig cfg = resolve(pt);
      if (pt_steps) cfg.train.pretrain_steps = *pt_steps;
      if (pt_vae_steps) cfg.train.pretrain_vae_steps = *pt_vae_steps;
      const auto data = load_split(pt_data, Split::TrainGeneric, cfg);
      PretrainLog log;
      auto model = pretrain_teacher(data, cfg.model, cfg.schedule, cfg.train, cfg.seed, &log,
                                    [](const char* phase, long s, double l) {
                                      if (s % 100 == 0) std::fprintf(stderr, "%s step %ld loss %.5f\n", phase, s, l);
                                    });
      ensure_parent(pt_out);
      model_checkpoint(model, to_json(cfg)).save(pt_out);
      if (!pt_log.empty()) {
        ensure_parent(pt_log);
        std::ofstream out(pt_log, std::ios::binary);
        if (!out) throw Error("cannot write " + pt_log);
        out << "phase,step,loss\n";
        char buf[96];
        for (std::size_t i = 0; i < log.vae_loss.size(); ++i) {
          std::snprintf(buf, sizeof buf, "vae,%zu,%.8g\n", i + 1, log.vae_loss[i]);
          out << buf;
        }
        for (std::size_t i = 0; i < log.unet_loss.size(); ++i) {
          std::snprintf(buf, sizeof buf, "unet,%zu,%.8g\n", i + 1, log.unet_loss[i]);
          out << buf;
        }
      }
      std::printf("teacher: %s\n", pt_out.c_str());
      return 0;
    }

    if (*train) {
      RunConfig cfg = resolve(tr);
      if (tr_steps) cfg.train.steps = *tr_steps;
      const auto teacher = model_from_checkpoint(Checkpoint::load(tr_teacher));
      if (!teacher.frozen) throw Error("teacher not frozen");
      if (teacher.config.image_side != cfg.model.image_side)
        throw Error("teacher image side differs from config model.image_side");
      auto data = load_split(tr_data, Split::TrainSmall, cfg);
      Trainer trainer(teacher, cfg.train, cfg.lora, std::move(data), cfg.seed);
      ensure_parent(tr_out);
      const std::string csv = tr_csv.empty() ? tr_out + ".loss.csv" : tr_csv;
      ensure_parent(csv);
      LossLog log(csv, !tr_no_timing);
      trainer.run([&](const LossReport& r) {
        if (r.step % cfg.train.log_every == 0 || r.step == cfg.train.steps) log.write(r);
        if (r.step % 100 == 0) std::fprintf(stderr, "step %ld total %.5f\n", r.step, r.total);
      });
      trainer.checkpoint(to_json(cfg)).save(tr_out);
      std::printf("student: %s\nloss log: %s\n", tr_out.c_str(), csv.c_str());
      return 0;
    }

    if (*edit_cmd) {
      const RunConfig cfg = resolve(ed);
      const auto model = model_from_checkpoint(Checkpoint::load(ed_ckpt));
      const auto img = read_ppm(ed_image);
      const auto b = parse_int_list(ed_bbox, "--bbox");
      if (b.size() != 4) throw Error("--bbox expects x,y,w,h");
      const BBox box{b[0], b[1], b[2], b[3]};
      if (box.w < 1 || box.h < 1) throw Error("--bbox must have positive width and height");
      const PromptStyle style = parse_style(ed_style);
      if (style == PromptStyle::ColorLabel && ed_color.empty()) throw Error("--color is required for color_label");
      const int label = label_arg(ed_label), color = ed_color.empty() ? 0 : color_arg(ed_color);
      const int steps = ed_steps.value_or(cfg.eval.ddim_steps);
      const auto out = edit(model, img, box, label, color, style, steps, cfg.seed);
      nlohmann::ordered_json echo = {{"bbox", box.str()},
                                     {"label", std::string(kLabels[label])},
                                     {"color", std::string(kPalette[color].name)},
                                     {"style", std::string(style_name(style))},
                                     {"steps", steps},
                                     {"seed", cfg.seed}};
      ensure_parent(ed_out);
      write_ppm(ed_out, out, "soekit " + echo.dump());
      std::printf("%s\n", ed_out.c_str());
      return 0;
    }

    if (*eval) {
      RunConfig cfg = resolve(ev);
      if (ev_style != "all") {
        parse_style(ev_style);
        cfg.eval.styles = {ev_style};
      }
      const auto model = model_from_checkpoint(Checkpoint::load(ev_ckpt));
      const auto val = load_split(ev_data, Split::ValSmall, cfg);
      const auto probe = ev_probe.empty() ? train_probe(cfg.eval.probe, cfg.eval.probe_seed)
                                          : ProbeClassifier::from_checkpoint(Checkpoint::load(ev_probe));
      const auto rep = evaluate(model, probe, val, cfg.eval, cfg.seed);
      fs::create_directories(ev_out);
      write_metrics_csv(rep, fs::path(ev_out) / "metrics.csv");
      if (ev_details) {
        auto used = val;
        if (cfg.eval.max_samples > 0 && used.size() > static_cast<std::size_t>(cfg.eval.max_samples))
          used.resize(cfg.eval.max_samples);
        write_details_csv(rep, used, fs::path(ev_out) / "details.csv");
      }
      write_json(fs::path(ev_out) / "config.json", to_json(cfg));
      for (const auto& r : rep.rows)
        std::printf("%s alignment_mean=%.6f frechet=%.6f n=%zu\n", std::string(style_name(r.style)).c_str(),
                    r.alignment_mean, r.frechet, r.n);
      return 0;
    }

    if (*probe_cmd) {
      const RunConfig cfg = resolve(tp);
      const std::uint64_t seed = tp.seed ? *tp.seed : cfg.eval.probe_seed;
      const auto probe = train_probe(cfg.eval.probe, seed);
      ensure_parent(tp_out);
      probe.checkpoint(to_json(cfg)).save(tp_out);
      std::printf("probe: %s\n", tp_out.c_str());
      return 0;
    }

    if (*ea) {
      const auto depths = parse_int_list(ea_depths, "--depths");
      const auto masks = parse_int_list(ea_masks, "--mask-sides");
      for (int d : depths)
        if (d < 0) throw Error("--depths must be non-negative");
      for (int m : masks)
        if (m < 1 || m > ea_image) throw Error("--mask-sides must lie in [1, image side]");
      std::ostringstream table;
      table << "mask_side";
      for (int d : depths) table << ",depth" << d;
      table << "\n";
      for (int m : masks) {
        table << m;
        for (int d : depths) table << "," << effective_area(ea_image, m, ea_factor, d);
        table << "\n";
      }
      std::fputs(table.str().c_str(), stdout);
      if (!ea_out.empty()) {
        ensure_parent(ea_out);
        std::ofstream out(ea_out, std::ios::binary);
        if (!out) throw Error("cannot write " + ea_out);
        out << table.str();
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& ch : msg)
      if (ch == '\n') ch = ' ';
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    return 1;
  }
  return 2;
}
