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

// Training step and loop. The decoupled variant evaluates the four detection
// losses (rpn_cls, rpn_reg, roi_cls, roi_reg) on background-erased images and
// the mask loss on the real images they came from; both feed one update of
// the shared parameters.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ldet/annotations.hpp"
#include "ldet/backerase.hpp"
#include "ldet/detector.hpp"

namespace ldet {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TrainVariant { plain_real, synth_only, combined, decoupled };

TrainVariant parse_train_variant(const std::string& name);
const char* train_variant_name(TrainVariant v);

struct TrainMode {
  TrainVariant variant = TrainVariant::decoupled;
  bool ioa_sampling = false;
  bool pseudo_labeling = false;

  /// Baseline flags are only meaningful for plain_real.
  void validate() const;
};

enum class Domain { real, synth };
const char* domain_name(Domain d);

struct LossEntry {
  LossKey key;
  Domain domain;
  double value = 0.0;
};

struct LossReport {
  std::vector<LossEntry> entries;
  double total = 0.0;

  bool has(LossKey key, Domain domain) const;
  double value(LossKey key, Domain domain) const;
  /// {"rpn_cls/synth": ..., ..., "total": ...}
  nlohmann::json to_json() const;
};

/// One image as seen by the trainer.
struct TrainImage {
  std::int64_t id = 0;
  const Image* image = nullptr;
  const std::vector<InstanceAnnotation>* annotations = nullptr;
};

ImageTargets make_targets(const DetectorConfig& config,
                          const std::vector<InstanceAnnotation>& annotations);

struct StepOutput {
  LossReport report;
  SamplingTrace trace;
  /// Aligned with detector.parameters(); empty tensors for untouched ones.
  std::vector<ag::Tensor> gradients;
};

/// Losses and gradients of one domain's images under `selection`, averaged
/// over the images. Per-image randomness is derived from (seed, domain, id).
StepOutput domain_gradients(const Detector& detector, std::span<const TrainImage> images,
                            Domain domain, const LossSelection& selection, const TrainMode& mode,
                            std::uint64_t seed);

/// Loss report and gradients of one training step without updating anything.
StepOutput compute_step(const Detector& detector, std::span<const ImageSample> real_batch,
                        std::span<const SynthesizedSample> synth_batch, const TrainMode& mode,
                        std::uint64_t seed);

struct OptimizerState {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<ag::Tensor> velocity;
};

/// v = momentum * v + (g + weight_decay * w);  w -= lr * v
void sgd_update(Detector& detector, const std::vector<ag::Tensor>& gradients,
                OptimizerState& state, double lr);

/// compute_step followed by sgd_update. Throws TrainingError for batches the
/// mode cannot use (e.g. decoupled without synthesized images).
LossReport training_step(Detector& detector, std::span<const ImageSample> real_batch,
                         std::span<const SynthesizedSample> synth_batch, const TrainMode& mode,
                         OptimizerState& optimizer, double lr, std::uint64_t seed,
                         SamplingTrace* trace = nullptr);

struct Schedule {
  int iterations = 0;
  double lr = 0.01;
  std::uint64_t seed = 0;
  int batch_size = 2;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int eval_every = 0;
  /// Train on images without annotations as well (they only contribute
  /// background to detection losses).
  bool keep_unannotated = false;
  bool record_wallclock = true;
};

struct TrainCallbacks {
  /// Called every eval_every steps and after the last one; result is logged
  /// under "eval".
  std::function<nlohmann::json(const Detector&, int step)> evaluate;
  /// Receives every log record as it is produced.
  std::function<void(const nlohmann::json&)> on_record;
  /// Receives the sampling trace of every step.
  std::function<void(int step, const SamplingTrace&)> on_trace;
};

struct TrainResult {
  std::vector<nlohmann::json> records;
  std::vector<double> total_losses;
};

/// Runs the loop over `dataset` (already filtered to training annotations).
/// Synthesized counterparts are produced per step with derived seeds; the
/// corpus is only used for external backgrounds.
TrainResult train(Detector& detector, const Dataset& dataset, const BackEraseConfig& backerase,
                  const TrainMode& mode, const Schedule& schedule,
                  const TrainCallbacks& callbacks = {}, std::span<const Image> corpus = {});

}  // namespace ldet
