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

// Class-agnostic inference: every region is scored by its foreground
// probability, regardless of which class produced it.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ldet/detector.hpp"

namespace ldet {

class InferenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct InferenceConfig {
  int rpn_pre_nms_topk = 6000;
  int rpn_post_nms_topk = 2000;
  double rpn_nms_threshold = 0.7;
  double roi_nms_threshold = 0.7;
  double score_threshold = 0.0;
  int max_detections = 100;
  double mask_threshold = 0.5;
  bool with_masks = true;

  void validate() const;
};

nlohmann::json to_json(const InferenceConfig& config);
InferenceConfig inference_config_from_json(const nlohmann::json& j);

struct Detection {
  Box box;
  double score = 0.0;
  /// Dataset category id of the arg-max foreground class.
  std::int64_t class_id = 0;
  std::optional<Mask> mask;
  bool is_seen_class = false;
};

struct AgnosticScore {
  double objectness = 0.0;
  /// Contiguous foreground index 1..K.
  int argmax_class = 1;
};

/// objectness = 1 - softmax(logits)[0]; logits has K + 1 entries with the
/// background first.
AgnosticScore class_agnostic_score(std::span<const double> logits);

/// Class-agnostic greedy suppression. Returns survivors in descending score.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold);

/// Runs the detector on one image. Throws InferenceError when the parameters
/// contain non-finite values.
std::vector<Detection> infer(const Detector& detector, const Image& image,
                             const InferenceConfig& config);

using DetectionMap = std::map<std::int64_t, std::vector<Detection>>;

/// COCO results list: {image_id, bbox, score, category_id, segmentation}.
nlohmann::json detections_to_json(const DetectionMap& detections);
/// Inverse of detections_to_json; RLE segmentations become masks.
DetectionMap detections_from_json(const nlohmann::json& j);

void save_detections(const std::filesystem::path& path, const DetectionMap& detections);
DetectionMap load_detections(const std::filesystem::path& path);

}  // namespace ldet
