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

// Class-agnostic recall and precision against objects of unseen categories.
// Detections that match a seen-category object do not count toward the
// per-image budget, so a detector is not penalized for finding known objects.

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "ldet/annotations.hpp"
#include "ldet/inference.hpp"

namespace ldet {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class MatchTarget { box, mask };
enum class GroundTruthFilter { unseen, all };

struct EvalConfig {
  std::vector<double> iou_thresholds{0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};
  std::vector<int> budgets{10, 30, 50, 100};
  bool exclude_seen_from_budget = true;
  MatchTarget match_target = MatchTarget::box;
  GroundTruthFilter gt_filter = GroundTruthFilter::unseen;
  int ap_max_detections = 100;
  /// Tag detections overlapping seen-category objects as seen. When false,
  /// the detections' own is_seen_class flags are used.
  bool tag_seen_by_overlap = true;
  /// IoU at which a detection is tagged as covering a seen-category object.
  double seen_tag_iou = 0.5;

  void validate() const;
};

nlohmann::json to_json(const EvalConfig& config);
EvalConfig eval_config_from_json(const nlohmann::json& j);

struct EvalObject {
  Box box;
  Mask mask;
};

/// One image prepared for scoring: detections (with is_seen_class set) and the
/// objects recall is measured against.
struct EvalImage {
  std::int64_t image_id = 0;
  std::vector<Detection> detections;
  std::vector<EvalObject> targets;
};

/// For each detection, in the given order, the highest-IoU still unmatched
/// target with IoU >= threshold, or -1. `ious` is row-major [detections x targets].
std::vector<int> match_greedy(std::span<const double> ious, int detections, int targets,
                              double threshold);

/// Row-major IoU matrix of detections against targets by box or by mask.
std::vector<double> iou_matrix(std::span<const Detection> detections,
                               std::span<const EvalObject> targets, MatchTarget target);

/// Marks each detection that greedily matches (score order, IoU >= iou) an
/// object of a seen category.
void tag_seen(std::vector<Detection>& detections, std::span<const EvalObject> seen_objects,
              MatchTarget target, double iou);

/// Detections in scoring order (score descending, ties broken by content),
/// with seen-tagged ones removed when the config excludes them.
std::vector<Detection> ranked(std::vector<Detection> detections, const EvalConfig& config);

struct MatchRecord {
  std::int64_t image_id = 0;
  double iou_threshold = 0.0;
  int detection = 0;
  int target = 0;
  double iou = 0.0;
};

struct EvalReport {
  double ap = 0.0;
  std::map<int, double> ar;
  /// Matches behind the precision figure, per threshold.
  std::vector<MatchRecord> matches;
  nlohmann::json counts;

  nlohmann::json to_json(const EvalConfig& config) const;
};

/// AR@k: recall averaged over IoU thresholds, then over images with at least
/// one target. Throws EvaluationError when no image has a target.
std::map<int, double> average_recall(std::span<const EvalImage> images, const EvalConfig& config);

/// Class-agnostic AP averaged over IoU thresholds, 101-point interpolated,
/// at most ap_max_detections per image.
double average_precision(std::span<const EvalImage> images, const EvalConfig& config,
                         std::vector<MatchRecord>* matches = nullptr);

/// Scores `detections` against `dataset`, an unfiltered view whose
/// annotations carry is_seen. Throws EvaluationError for an empty view.
EvalReport evaluate(const DetectionMap& detections, const Dataset& dataset,
                    const EvalConfig& config);

/// Runs inference over every image of `dataset`, then evaluate().
EvalReport evaluate_detector(const Detector& detector, const Dataset& dataset,
                             const InferenceConfig& inference, const EvalConfig& config,
                             DetectionMap* detections = nullptr);

}  // namespace ldet
