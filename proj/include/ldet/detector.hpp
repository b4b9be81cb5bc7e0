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

// Small two-stage instance detector: convolutional backbone with a single
// feature level, region proposal network, box head (classification and
// class-specific regression) and mask head, plus the label assignment and
// sampling rules used to train it.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ldet/autograd.hpp"
#include "ldet/boxes.hpp"
#include "ldet/image.hpp"
#include "ldet/random.hpp"

namespace ldet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LossError : public std::runtime_error {
 public:
  LossError(const std::string& key, const std::string& what)
      : std::runtime_error(what), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

enum class SamplingMode { standard, ioa };

struct ConvBlockSpec {
  int channels = 16;
  int stride = 1;
  bool operator==(const ConvBlockSpec&) const = default;
};

/// 3x3 convolution + ReLU blocks applied in order.
struct BackboneSpec {
  std::vector<ConvBlockSpec> blocks{{16, 1}, {32, 2}, {32, 1}, {48, 2}};
  int stride() const;
  int out_channels() const { return blocks.empty() ? 3 : blocks.back().channels; }
  bool operator==(const BackboneSpec&) const = default;
};

struct DetectorConfig {
  /// Foreground classes K; class index 0 is background.
  int num_classes = 1;
  /// Dataset category id of contiguous class k at position k - 1.
  std::vector<std::int64_t> class_ids;

  std::vector<double> anchor_sizes{8.0, 16.0, 32.0};
  std::vector<double> anchor_aspect_ratios{0.5, 1.0, 2.0};
  /// Must equal the backbone's total stride.
  int anchor_stride = 4;

  double rpn_fg_iou = 0.7;
  double rpn_bg_iou = 0.3;
  double roi_fg_iou = 0.5;
  int rpn_batch = 64;
  double rpn_positive_fraction = 0.5;
  int roi_batch = 64;
  double roi_positive_fraction = 0.25;
  SamplingMode sampling_mode = SamplingMode::standard;
  double ioa_threshold = 0.7;
  bool pseudo_label = false;
  double pseudo_threshold = 0.9;

  int train_pre_nms_topk = 2000;
  int train_post_nms_topk = 256;
  double rpn_nms_threshold = 0.7;

  int rpn_channels = 48;
  int pooled_size = 7;
  int mask_size = 14;
  int box_head_dim = 128;
  int mask_head_channels = 32;
  double smooth_l1_beta = 1.0 / 9.0;

  std::uint64_t parameter_seed = 0;
  BackboneSpec backbone;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  int anchors_per_cell() const {
    return static_cast<int>(anchor_sizes.size() * anchor_aspect_ratios.size());
  }
  /// Contiguous class index (1..K) of a category id; throws ConfigError.
  int class_index(std::int64_t category_id) const;
  std::int64_t category_of(int class_index) const;
};

nlohmann::json to_json(const DetectorConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
DetectorConfig detector_config_from_json(const nlohmann::json& j);

enum class ParameterGroup { backbone, rpn, box_head, mask_head };
ParameterGroup parameter_group(const std::string& name);

class Detector {
 public:
  explicit Detector(DetectorConfig config);

  const DetectorConfig& config() const { return config_; }
  std::vector<ag::Parameter>& parameters() { return params_; }
  const std::vector<ag::Parameter>& parameters() const { return params_; }
  int parameter_index(const std::string& name) const;
  bool all_finite() const;

 private:
  DetectorConfig config_;
  std::vector<ag::Parameter> params_;
};

/// Validates the configuration and initializes parameters from
/// config.parameter_seed. Throws ConfigError on inconsistent settings.
Detector build_detector(DetectorConfig config, const BackboneSpec& backbone);

struct RpnOutputs {
  ag::Var objectness;  // [1, A, h, w]
  ag::Var deltas;      // [1, 4A, h, w]
  int feature_height = 0;
  int feature_width = 0;
};

struct HeadOutputs {
  ag::Var class_logits;  // [R, K + 1]
  ag::Var box_deltas;    // [R, 4K]
  ag::Var mask_logits;   // [R, K, S, S]
  int regions = 0;
};

/// A detector attached to one tape. Each parameter becomes a leaf the first
/// time it is used; with track_gradients == false they are constants.
class DetectorGraph {
 public:
  DetectorGraph(const Detector& detector, ag::Tape& tape, bool track_gradients);

  ag::Var features(const Image& image);
  RpnOutputs propose_logits(ag::Var features);
  HeadOutputs roi_forward(ag::Var features, std::span<const Box> boxes, bool with_boxes = true,
                          bool with_masks = true);
  ag::Var box_logits(ag::Var features, std::span<const Box> boxes, ag::Var* deltas);
  ag::Var mask_logits(ag::Var features, std::span<const Box> boxes);

  ag::Tape& tape() { return tape_; }
  const Detector& detector() const { return detector_; }

 private:
  ag::Var param(const std::string& name);

  const Detector& detector_;
  ag::Tape& tape_;
  bool track_;
  std::vector<ag::Var> vars_;
};

struct Proposal {
  Box box;
  double objectness_logit = 0.0;
};

/// Anchors for a feature map, ordered (y, x, anchor).
std::vector<Box> make_anchors(const DetectorConfig& config, int feature_height, int feature_width);

/// Flat offsets into the objectness tensor for anchor `index`, and of its four
/// deltas in the delta tensor.
std::int64_t objectness_offset(int index, int anchors_per_cell, int fh, int fw);
std::int64_t delta_offset(int index, int coord, int anchors_per_cell, int fh, int fw);

using BoxDeltas = std::array<double, 4>;
inline constexpr BoxDeltas kRpnBoxWeights{1.0, 1.0, 1.0, 1.0};
inline constexpr BoxDeltas kRoiBoxWeights{10.0, 10.0, 5.0, 5.0};

/// (dx, dy, dlog w, dlog h) of `target` against `reference`, scaled by weights.
BoxDeltas encode_box(const Box& reference, const Box& target, const BoxDeltas& weights);
Box decode_box(const Box& reference, const BoxDeltas& deltas, const BoxDeltas& weights);

struct ProposalParams {
  int pre_nms_topk = 2000;
  int post_nms_topk = 1000;
  double nms_threshold = 0.7;
};

/// Decodes every anchor, clips to the image, drops boxes under one pixel,
/// keeps the pre_nms_topk highest logits, suppresses at nms_threshold and
/// keeps post_nms_topk. Output sorted by logit, descending.
std::vector<Proposal> propose(const DetectorConfig& config, const ag::Tensor& objectness,
                              const ag::Tensor& deltas, int image_height, int image_width,
                              const ProposalParams& params);

/// Greedy suppression over score-sorted candidates; returns kept indices into
/// `boxes` in descending score order. Ties keep the earlier index first.
std::vector<int> nms_indices(std::span<const Box> boxes, std::span<const double> scores,
                             double iou_threshold);

enum class Stage { rpn, roi };
enum class RegionLabel : std::int8_t { ignore = -1, background = 0, foreground = 1 };

struct Assignment {
  std::vector<RegionLabel> labels;
  std::vector<int> matched_gt;   // -1 without ground truth
  std::vector<double> max_iou;
  std::vector<double> ioa;       // filled in ioa sampling mode
};

Assignment assign_labels(std::span<const Box> proposals, std::span<const Box> gts,
                         const DetectorConfig& config, Stage stage);

/// Up to `batch_size` indices: min(#fg, floor(batch_size * positive_fraction))
/// foregrounds then backgrounds filling the rest, each drawn uniformly.
std::vector<int> sample_minibatch(const Assignment& assignment, int batch_size,
                                  double positive_fraction, Rng& rng);

struct PseudoRelabel {
  int region = 0;
  int new_class = 0;
  double probability = 0.0;
};

struct PseudoLabelResult {
  std::vector<int> targets;
  std::vector<PseudoRelabel> relabeled;
};

/// Background targets whose maximum foreground softmax probability exceeds
/// `threshold` take that foreground class. class_logits is [R, K + 1].
PseudoLabelResult pseudo_label_targets(const ag::Tensor& class_logits, std::vector<int> targets,
                                       double threshold);

struct ImageTargets {
  std::vector<Box> boxes;
  std::vector<int> classes;  // 1..K
  std::vector<Mask> masks;   // image resolution
};

/// Sampling decisions recorded for baseline checks.
struct SamplingTrace {
  std::vector<double> rpn_background_ioa;
  std::vector<double> roi_background_ioa;
  std::vector<PseudoRelabel> pseudo_labels;
};

/// Everything about one image's loss that is decided without gradients:
/// sampled anchors and regions with their targets.
struct ImagePlan {
  int image_height = 0;
  int image_width = 0;
  std::vector<std::int64_t> rpn_indices;
  std::vector<double> rpn_labels;
  std::vector<int> rpn_fg_anchors;
  std::vector<BoxDeltas> rpn_box_targets;

  std::vector<Box> roi_boxes;
  std::vector<int> roi_classes;     // 0 for background
  std::vector<int> roi_fg_rows;     // rows of roi_boxes that are foreground
  std::vector<BoxDeltas> roi_box_targets;
  std::vector<std::vector<double>> mask_targets;  // mask_size^2 per fg row

  SamplingTrace trace;
};

/// Builds the plan from RPN outputs of the current parameters.
ImagePlan plan_image(const DetectorConfig& config, const ag::Tensor& objectness,
                     const ag::Tensor& deltas, int image_height, int image_width,
                     const ImageTargets& targets, Rng& rng);

/// Binary mask target: `mask` resampled to size x size inside `box`
/// (bilinear at bin centers), thresholded at 0.5.
std::vector<double> crop_mask_target(const Mask& mask, const Box& box, int size);

enum LossKey { kRpnCls = 0, kRpnReg, kRoiCls, kRoiReg, kMask, kNumLossKeys };
const char* loss_key_name(LossKey key);

struct LossSelection {
  std::array<bool, kNumLossKeys> enabled{};
  /// Applies pseudo-labels to roi_cls even when the config does not.
  bool pseudo_label = false;
  static LossSelection all() { return {{true, true, true, true, true}}; }
  static LossSelection detection() { return {{true, true, true, true, false}}; }
  static LossSelection mask_only() { return {{false, false, false, false, true}}; }
  bool any() const;
};

struct LossTerms {
  std::array<std::optional<ag::Var>, kNumLossKeys> terms;
};

/// Losses of one image under a fixed plan. Empty sums yield 0. rpn_cls is
/// mean binary cross-entropy over sampled anchors, rpn_reg smooth-L1 over
/// foreground anchors divided by the sample count, roi_cls mean softmax
/// cross-entropy, roi_reg smooth-L1 on the ground-truth class deltas divided
/// by the sample count, mask mean per-pixel binary cross-entropy over
/// foreground regions on the ground-truth class channel. Pseudo-labels are
/// applied to roi_cls when the config enables them. Throws LossError for a
/// non-finite term.
LossTerms image_losses(DetectorGraph& graph, ag::Var features, const RpnOutputs& rpn,
                       const ImagePlan& plan, const LossSelection& selection,
                       SamplingTrace* trace = nullptr);

/// Contiguous image tensor [1, C, H, W] centred around zero.
ag::Tensor image_to_tensor(const Image& image);

}  // namespace ldet
