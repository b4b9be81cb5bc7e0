// Copyright (c) 2026, The ldet Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// ldet command-line entry point.
//
//   ldet synthesize --config cfg.json [--limit N] [--out DIR] [--set k=v ...]
//   ldet train      --config cfg.json [--set k=v ...]
//   ldet evaluate   --config cfg.json (--checkpoint F | --detections F)
//   ldet plot       --metrics metrics.jsonl --out DIR
//   ldet generate-shapes --out DIR [--images N] [--train N] [--size S] [--seed S]
//
// Exit status: 0 success, 1 invalid configuration or arguments, 2 runtime error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ldet/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

int report_validation(const ldet::ValidationError& e) {
  std::cerr << "error: invalid configuration\n";
  for (const auto& p : e.problems()) std::cerr << "  - " << p << "\n";
  return kInvalid;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-world instance detector: augmentation, training and evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Experiment configuration (JSON)")->required();
    cmd->add_option("--set", overrides, "Override a configuration key, e.g. train.lr=0.005");
  };

  auto* synth = app.add_subcommand("synthesize", "Write background-erased copies of training images");
  add_config(synth);
  std::optional<std::size_t> limit;
  std::string synth_out;
  synth->add_option("--limit", limit, "Maximum number of images to synthesize");
  synth->add_option("--out", synth_out, "Output directory (default <output_dir>/synth)");

  auto* train = app.add_subcommand("train", "Train a detector; writes checkpoint and metrics log");
  add_config(train);

  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint or a detections file");
  add_config(evaluate);
  std::string checkpoint, detections;
  evaluate->add_option("--checkpoint", checkpoint, "Detector checkpoint");
  evaluate->add_option("--detections", detections, "COCO-style results file");

  auto* plot = app.add_subcommand("plot", "Plot loss and recall curves from a metrics log");
  std::string metrics, plot_out;
  plot->add_option("--metrics", metrics, "metrics.jsonl written by train")->required();
  plot->add_option("--out", plot_out, "Output directory")->required();

  auto* shapes = app.add_subcommand("generate-shapes", "Write the toy shapes dataset");
  ldet::ShapesConfig shapes_cfg;
  std::size_t shapes_train = 320;
  std::string shapes_out;
  shapes->add_option("--out", shapes_out, "Output directory")->required();
  shapes->add_option("--images", shapes_cfg.num_images, "Total number of images");
  shapes->add_option("--train", shapes_train, "Images in the training part");
  shapes->add_option("--size", shapes_cfg.image_size, "Image side length");
  shapes->add_option("--seed", shapes_cfg.seed, "Generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*shapes) {
      ldet::cmd_generate_shapes(shapes_cfg, shapes_train, shapes_out);
      return kOk;
    }
    if (*plot) {
      for (const auto& p : ldet::cmd_plot(metrics, plot_out)) std::cout << p.string() << "\n";
      return kOk;
    }
    const ldet::ExperimentConfig cfg = ldet::load_experiment_config(config_path, overrides);
    if (*synth) {
      const auto out = synth_out.empty() ? cfg.output_dir / "synth" : std::filesystem::path(synth_out);
      const auto summary = ldet::cmd_synthesize(cfg, limit, out);
      std::cout << "synthesized " << summary.images << " images into " << out.string() << "\n";
    } else if (*train) {
      ldet::cmd_train(cfg);
      std::cout << "checkpoint written to " << (cfg.output_dir / "checkpoint.ldet").string() << "\n";
    } else if (*evaluate) {
      std::optional<std::filesystem::path> ck, det;
      if (!checkpoint.empty()) ck = checkpoint;
      if (!detections.empty()) det = detections;
      const auto report = ldet::cmd_evaluate(cfg, ck, det);
      std::cout << report.to_json(cfg.eval).dump(2) << "\n";
    }
  } catch (const ldet::ValidationError& e) {
    return report_validation(e);
  } catch (const ldet::ConfigError& e) {
    std::cerr << "error: invalid configuration\n  - " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
