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

// Experiment configuration and the commands behind the `ldet` executable.
// Every command reads one JSON document; all randomness is derived from its
// top-level "seed".

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ldet/annotations.hpp"
#include "ldet/backerase.hpp"
#include "ldet/detector.hpp"
#include "ldet/inference.hpp"
#include "ldet/openworld_eval.hpp"
#include "ldet/shapes.hpp"
#include "ldet/trainer.hpp"

namespace ldet {

/// Invalid configuration; carries one message per offending key.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct DataConfig {
  std::filesystem::path train_annotations;
  std::filesystem::path train_images;
  std::filesystem::path eval_annotations;
  std::filesystem::path eval_images;
  /// Generate the toy dataset in memory instead of reading files.
  std::optional<ShapesConfig> shapes;
  std::size_t shapes_train_images = 320;
  CategorySplit split;
  /// Train one foreground class instead of the seen categories.
  bool class_agnostic = false;
  std::vector<std::filesystem::path> background_corpus;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  DataConfig data;
  BackEraseConfig backerase;
  DetectorConfig detector;
  TrainMode mode;
  Schedule schedule;
  InferenceConfig inference;
  EvalConfig eval;
  nlohmann::json document;
};

BackEraseConfig backerase_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BackEraseConfig& config);

/// Applies "a.b.c=value"; value is parsed as JSON and kept as a string when
/// it is not valid JSON.
void apply_override(nlohmann::json& document, const std::string& assignment);

/// Validates and resolves the document. The detector's classes are derived
/// from the split. Throws ValidationError listing every problem found.
ExperimentConfig parse_experiment_config(const nlohmann::json& document);

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});

struct ExperimentData {
  /// Seen-category annotations only.
  Dataset train;
  /// All annotations, with is_seen set.
  Dataset eval;
  std::vector<Image> corpus;
};

ExperimentData load_experiment_data(const ExperimentConfig& config);

/// Fresh detector for the configuration (parameter seed derived from the
/// global seed unless the document sets one).
Detector make_detector(const ExperimentConfig& config);

struct SynthesizeSummary {
  std::size_t images = 0;
};

/// Writes <out>/images/*.png, <out>/annotations.json mirroring the source
/// annotations and <out>/provenance.jsonl with one record per image.
SynthesizeSummary cmd_synthesize(const ExperimentConfig& config, std::optional<std::size_t> limit,
                                 const std::filesystem::path& out);

/// Writes <output_dir>/checkpoint.ldet and <output_dir>/metrics.jsonl.
void cmd_train(const ExperimentConfig& config);

/// Writes <output_dir>/eval_report.json (and detections.json when a
/// checkpoint is evaluated).
EvalReport cmd_evaluate(const ExperimentConfig& config,
                        const std::optional<std::filesystem::path>& checkpoint,
                        const std::optional<std::filesystem::path>& detections);

/// Loss curve (loss_curve.png) and, when the log has evaluation snapshots,
/// AR-vs-iteration (ar_curve.png). Returns the files written.
std::vector<std::filesystem::path> cmd_plot(const std::filesystem::path& metrics,
                                            const std::filesystem::path& out);

/// Writes a generated toy dataset as <out>/train and <out>/eval.
void cmd_generate_shapes(const ShapesConfig& config, std::size_t train_images,
                         const std::filesystem::path& out);

}  // namespace ldet
