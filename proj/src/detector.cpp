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

#include "ldet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace ldet {

using json = nlohmann::json;

namespace {

const double kMaxDeltaLog = std::log(1000.0 / 16.0);

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

ag::Parameter make_param(std::string name, std::vector<int> shape, double stddev, Rng& rng) {
  ag::Parameter p{std::move(name), ag::Tensor(std::move(shape), 0.0)};
  if (stddev > 0.0)
    for (double& v : p.value.data) v = rng.normal(0.0, stddev);
  return p;
}

ag::Parameter make_bias(std::string name, int n) {
  return ag::Parameter{std::move(name), ag::Tensor({n}, 0.0)};
}

double he_std(int fan_in) { return std::sqrt(2.0 / fan_in); }

void check_finite(const ag::Tape& tape, ag::Var v, LossKey key) {
  const double x = tape.value(v).data[0];
  if (!std::isfinite(x))
    throw LossError(loss_key_name(key),
                    std::string("non-finite loss for key '") + loss_key_name(key) + "'");
}

}  // namespace

int BackboneSpec::stride() const {
  int s = 1;
  for (const auto& b : blocks) s *= b.stride;
  return s;
}

void DetectorConfig::validate() const {
  require(num_classes >= 1, "detector.num_classes must be >= 1");
  require(class_ids.empty() || static_cast<int>(class_ids.size()) == num_classes,
          "detector.class_ids must list num_classes ids");
  require(!anchor_sizes.empty() && !anchor_aspect_ratios.empty(),
          "detector.anchor_sizes and detector.anchor_aspect_ratios must be non-empty");
  for (double s : anchor_sizes) require(s > 0.0, "detector.anchor_sizes must be positive");
  for (double r : anchor_aspect_ratios)
    require(r > 0.0, "detector.anchor_aspect_ratios must be positive");
  require(!backbone.blocks.empty(), "detector.backbone needs at least one block");
  for (const auto& b : backbone.blocks)
    require(b.channels > 0 && (b.stride == 1 || b.stride == 2),
            "detector.backbone blocks need positive channels and stride 1 or 2");
  require(anchor_stride == backbone.stride(),
          "detector.anchor_stride (" + std::to_string(anchor_stride) +
              ") is inconsistent with the backbone stride (" + std::to_string(backbone.stride()) +
              ")");
  for (double s : anchor_sizes)
    require(s >= anchor_stride, "detector.anchor_sizes must not be smaller than the anchor stride");
  require(in_unit(rpn_fg_iou) && in_unit(rpn_bg_iou) && in_unit(roi_fg_iou) &&
              in_unit(ioa_threshold) && in_unit(pseudo_threshold) && in_unit(rpn_nms_threshold),
          "detector thresholds must lie in [0, 1]");
  require(rpn_bg_iou <= rpn_fg_iou, "detector.rpn_bg_iou must not exceed detector.rpn_fg_iou");
  require(rpn_batch > 0 && roi_batch > 0, "detector batch sizes must be positive");
  require(rpn_positive_fraction > 0.0 && rpn_positive_fraction <= 1.0 &&
              roi_positive_fraction > 0.0 && roi_positive_fraction <= 1.0,
          "detector positive fractions must lie in (0, 1]");
  require(train_pre_nms_topk > 0 && train_post_nms_topk > 0, "detector topk values must be >= 1");
  require(rpn_channels > 0 && pooled_size > 0 && mask_size > 0 && box_head_dim > 0 &&
              mask_head_channels > 0,
          "detector head sizes must be positive");
  require(smooth_l1_beta >= 0.0, "detector.smooth_l1_beta must be non-negative");
}

int DetectorConfig::class_index(std::int64_t category_id) const {
  if (class_ids.empty()) {
    require(category_id >= 1 && category_id <= num_classes,
            "category id " + std::to_string(category_id) + " outside 1..num_classes");
    return static_cast<int>(category_id);
  }
  auto it = std::find(class_ids.begin(), class_ids.end(), category_id);
  require(it != class_ids.end(),
          "category id " + std::to_string(category_id) + " is not a detector class");
  return static_cast<int>(it - class_ids.begin()) + 1;
}

std::int64_t DetectorConfig::category_of(int class_index) const {
  if (class_ids.empty()) return class_index;
  return class_ids.at(class_index - 1);
}

json to_json(const DetectorConfig& c) {
  json blocks = json::array();
  for (const auto& b : c.backbone.blocks) blocks.push_back({{"channels", b.channels}, {"stride", b.stride}});
  return json{{"num_classes", c.num_classes},
              {"class_ids", c.class_ids},
              {"anchor_sizes", c.anchor_sizes},
              {"anchor_aspect_ratios", c.anchor_aspect_ratios},
              {"anchor_stride", c.anchor_stride},
              {"rpn_fg_iou", c.rpn_fg_iou},
              {"rpn_bg_iou", c.rpn_bg_iou},
              {"roi_fg_iou", c.roi_fg_iou},
              {"rpn_batch", c.rpn_batch},
              {"rpn_positive_fraction", c.rpn_positive_fraction},
              {"roi_batch", c.roi_batch},
              {"roi_positive_fraction", c.roi_positive_fraction},
              {"sampling_mode", c.sampling_mode == SamplingMode::ioa ? "ioa" : "standard"},
              {"ioa_threshold", c.ioa_threshold},
              {"pseudo_label", c.pseudo_label},
              {"pseudo_threshold", c.pseudo_threshold},
              {"train_pre_nms_topk", c.train_pre_nms_topk},
              {"train_post_nms_topk", c.train_post_nms_topk},
              {"rpn_nms_threshold", c.rpn_nms_threshold},
              {"rpn_channels", c.rpn_channels},
              {"pooled_size", c.pooled_size},
              {"mask_size", c.mask_size},
              {"box_head_dim", c.box_head_dim},
              {"mask_head_channels", c.mask_head_channels},
              {"smooth_l1_beta", c.smooth_l1_beta},
              {"parameter_seed", c.parameter_seed},
              {"backbone", blocks}};
}

DetectorConfig detector_config_from_json(const json& j) {
  DetectorConfig c;
  if (!j.is_object()) throw ConfigError("detector config must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "num_classes") c.num_classes = v.get<int>();
      else if (key == "class_ids") c.class_ids = v.get<std::vector<std::int64_t>>();
      else if (key == "anchor_sizes") c.anchor_sizes = v.get<std::vector<double>>();
      else if (key == "anchor_aspect_ratios") c.anchor_aspect_ratios = v.get<std::vector<double>>();
      else if (key == "anchor_stride") c.anchor_stride = v.get<int>();
      else if (key == "rpn_fg_iou") c.rpn_fg_iou = v.get<double>();
      else if (key == "rpn_bg_iou") c.rpn_bg_iou = v.get<double>();
      else if (key == "roi_fg_iou") c.roi_fg_iou = v.get<double>();
      else if (key == "rpn_batch") c.rpn_batch = v.get<int>();
      else if (key == "rpn_positive_fraction") c.rpn_positive_fraction = v.get<double>();
      else if (key == "roi_batch") c.roi_batch = v.get<int>();
      else if (key == "roi_positive_fraction") c.roi_positive_fraction = v.get<double>();
      else if (key == "sampling_mode") {
        const auto s = v.get<std::string>();
        if (s == "standard") c.sampling_mode = SamplingMode::standard;
        else if (s == "ioa") c.sampling_mode = SamplingMode::ioa;
        else throw ConfigError("detector.sampling_mode must be 'standard' or 'ioa'");
      } else if (key == "ioa_threshold") c.ioa_threshold = v.get<double>();
      else if (key == "pseudo_label") c.pseudo_label = v.get<bool>();
      else if (key == "pseudo_threshold") c.pseudo_threshold = v.get<double>();
      else if (key == "train_pre_nms_topk") c.train_pre_nms_topk = v.get<int>();
      else if (key == "train_post_nms_topk") c.train_post_nms_topk = v.get<int>();
      else if (key == "rpn_nms_threshold") c.rpn_nms_threshold = v.get<double>();
      else if (key == "rpn_channels") c.rpn_channels = v.get<int>();
      else if (key == "pooled_size") c.pooled_size = v.get<int>();
      else if (key == "mask_size") c.mask_size = v.get<int>();
      else if (key == "box_head_dim") c.box_head_dim = v.get<int>();
      else if (key == "mask_head_channels") c.mask_head_channels = v.get<int>();
      else if (key == "smooth_l1_beta") c.smooth_l1_beta = v.get<double>();
      else if (key == "parameter_seed") c.parameter_seed = v.get<std::uint64_t>();
      else if (key == "backbone") {
        c.backbone.blocks.clear();
        for (const auto& b : v)
          c.backbone.blocks.push_back({b.at("channels").get<int>(), b.at("stride").get<int>()});
      } else {
        throw ConfigError("unknown key 'detector." + key + "'");
      }
    } catch (const json::exception&) {
      throw ConfigError("bad value for 'detector." + key + "'");
    }
  }
  return c;
}

ParameterGroup parameter_group(const std::string& name) {
  if (name.rfind("backbone.", 0) == 0) return ParameterGroup::backbone;
  if (name.rfind("rpn.", 0) == 0) return ParameterGroup::rpn;
  if (name.rfind("box_head.", 0) == 0) return ParameterGroup::box_head;
  if (name.rfind("mask_head.", 0) == 0) return ParameterGroup::mask_head;
  throw std::invalid_argument("unknown parameter " + name);
}

Detector::Detector(DetectorConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.parameter_seed);
  int in = 3;
  for (std::size_t i = 0; i < config_.backbone.blocks.size(); ++i) {
    const int out = config_.backbone.blocks[i].channels;
    const std::string base = "backbone." + std::to_string(i);
    params_.push_back(make_param(base + ".weight", {out, in, 3, 3}, he_std(in * 9), rng));
    params_.push_back(make_bias(base + ".bias", out));
    in = out;
  }
  const int feat = config_.backbone.out_channels();
  const int a = config_.anchors_per_cell();
  const int k = config_.num_classes;
  const int r = config_.rpn_channels;
  params_.push_back(make_param("rpn.conv.weight", {r, feat, 3, 3}, he_std(feat * 9), rng));
  params_.push_back(make_bias("rpn.conv.bias", r));
  params_.push_back(make_param("rpn.objectness.weight", {a, r, 1, 1}, 0.01, rng));
  params_.push_back(make_bias("rpn.objectness.bias", a));
  params_.push_back(make_param("rpn.deltas.weight", {4 * a, r, 1, 1}, 0.01, rng));
  params_.push_back(make_bias("rpn.deltas.bias", 4 * a));

  const int pooled = feat * config_.pooled_size * config_.pooled_size;
  const int d = config_.box_head_dim;
  params_.push_back(make_param("box_head.fc.weight", {d, pooled}, he_std(pooled), rng));
  params_.push_back(make_bias("box_head.fc.bias", d));
  params_.push_back(make_param("box_head.cls.weight", {k + 1, d}, 0.01, rng));
  params_.push_back(make_bias("box_head.cls.bias", k + 1));
  params_.push_back(make_param("box_head.deltas.weight", {4 * k, d}, 0.001, rng));
  params_.push_back(make_bias("box_head.deltas.bias", 4 * k));

  const int m = config_.mask_head_channels;
  params_.push_back(make_param("mask_head.conv.weight", {m, feat, 3, 3}, he_std(feat * 9), rng));
  params_.push_back(make_bias("mask_head.conv.bias", m));
  params_.push_back(make_param("mask_head.logits.weight", {k, m, 1, 1}, he_std(m), rng));
  params_.push_back(make_bias("mask_head.logits.bias", k));
}

int Detector::parameter_index(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return static_cast<int>(i);
  throw std::out_of_range("no parameter named " + name);
}

bool Detector::all_finite() const {
  for (const auto& p : params_)
    for (double v : p.value.data)
      if (!std::isfinite(v)) return false;
  return true;
}

Detector build_detector(DetectorConfig config, const BackboneSpec& backbone) {
  config.backbone = backbone;
  return Detector(std::move(config));
}

ag::Tensor image_to_tensor(const Image& image) {
  ag::Tensor t({1, image.channels, image.height, image.width});
  const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < image.channels; ++c)
        t.data[c * plane + static_cast<std::size_t>(y) * image.width + x] = image.at(y, x, c) - 0.5;
  return t;
}

DetectorGraph::DetectorGraph(const Detector& detector, ag::Tape& tape, bool track_gradients)
    : detector_(detector), tape_(tape), track_(track_gradients),
      vars_(detector.parameters().size()) {}

ag::Var DetectorGraph::param(const std::string& name) {
  const int i = detector_.parameter_index(name);
  if (!vars_[i].valid()) {
    const auto& p = detector_.parameters()[i];
    vars_[i] = track_ ? tape_.parameter(p, i) : tape_.constant(p.value);
  }
  return vars_[i];
}

ag::Var DetectorGraph::features(const Image& image) {
  if (image.channels != 3) throw std::invalid_argument("detector expects 3-channel images");
  ag::Var x = tape_.constant(image_to_tensor(image));
  const auto& blocks = detector_.config().backbone.blocks;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string base = "backbone." + std::to_string(i);
    x = ag::relu(tape_, ag::conv2d(tape_, x, param(base + ".weight"), param(base + ".bias"),
                                   blocks[i].stride, 1));
  }
  return x;
}

RpnOutputs DetectorGraph::propose_logits(ag::Var features) {
  ag::Var t = ag::relu(tape_, ag::conv2d(tape_, features, param("rpn.conv.weight"),
                                         param("rpn.conv.bias"), 1, 1));
  RpnOutputs out;
  out.objectness =
      ag::conv2d(tape_, t, param("rpn.objectness.weight"), param("rpn.objectness.bias"), 1, 0);
  out.deltas = ag::conv2d(tape_, t, param("rpn.deltas.weight"), param("rpn.deltas.bias"), 1, 0);
  out.feature_height = tape_.value(features).dim(2);
  out.feature_width = tape_.value(features).dim(3);
  return out;
}

ag::Var DetectorGraph::box_logits(ag::Var features, std::span<const Box> boxes, ag::Var* deltas) {
  const auto& cfg = detector_.config();
  ag::Var pooled = ag::roi_align(tape_, features, boxes, cfg.pooled_size,
                                 1.0 / cfg.anchor_stride, 2);
  ag::Var hidden = ag::relu(tape_, ag::linear(tape_, ag::flatten(tape_, pooled),
                                              param("box_head.fc.weight"),
                                              param("box_head.fc.bias")));
  if (deltas)
    *deltas = ag::linear(tape_, hidden, param("box_head.deltas.weight"), param("box_head.deltas.bias"));
  return ag::linear(tape_, hidden, param("box_head.cls.weight"), param("box_head.cls.bias"));
}

ag::Var DetectorGraph::mask_logits(ag::Var features, std::span<const Box> boxes) {
  const auto& cfg = detector_.config();
  ag::Var pooled = ag::roi_align(tape_, features, boxes, cfg.mask_size, 1.0 / cfg.anchor_stride, 2);
  ag::Var h = ag::relu(tape_, ag::conv2d(tape_, pooled, param("mask_head.conv.weight"),
                                         param("mask_head.conv.bias"), 1, 1));
  return ag::conv2d(tape_, h, param("mask_head.logits.weight"), param("mask_head.logits.bias"), 1, 0);
}

HeadOutputs DetectorGraph::roi_forward(ag::Var features, std::span<const Box> boxes,
                                       bool with_boxes, bool with_masks) {
  HeadOutputs out;
  out.regions = static_cast<int>(boxes.size());
  if (boxes.empty()) return out;
  if (with_boxes) out.class_logits = box_logits(features, boxes, &out.box_deltas);
  if (with_masks) out.mask_logits = mask_logits(features, boxes);
  return out;
}

std::vector<Box> make_anchors(const DetectorConfig& config, int feature_height, int feature_width) {
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(feature_height) * feature_width * config.anchors_per_cell());
  const double s = config.anchor_stride;
  for (int y = 0; y < feature_height; ++y)
    for (int x = 0; x < feature_width; ++x) {
      const double cx = (x + 0.5) * s, cy = (y + 0.5) * s;
      for (double size : config.anchor_sizes)
        for (double ratio : config.anchor_aspect_ratios) {
          const double w = size / std::sqrt(ratio), h = size * std::sqrt(ratio);
          anchors.push_back(Box{cx - 0.5 * w, cy - 0.5 * h, w, h});
        }
    }
  return anchors;
}

std::int64_t objectness_offset(int index, int anchors_per_cell, int fh, int fw) {
  const int a = index % anchors_per_cell;
  const int cell = index / anchors_per_cell;
  return static_cast<std::int64_t>(a) * fh * fw + cell;
}

std::int64_t delta_offset(int index, int coord, int anchors_per_cell, int fh, int fw) {
  const int a = index % anchors_per_cell;
  const int cell = index / anchors_per_cell;
  return static_cast<std::int64_t>(a * 4 + coord) * fh * fw + cell;
}

BoxDeltas encode_box(const Box& reference, const Box& target, const BoxDeltas& weights) {
  return {weights[0] * (target.cx() - reference.cx()) / reference.w,
          weights[1] * (target.cy() - reference.cy()) / reference.h,
          weights[2] * std::log(target.w / reference.w),
          weights[3] * std::log(target.h / reference.h)};
}

Box decode_box(const Box& reference, const BoxDeltas& deltas, const BoxDeltas& weights) {
  const double dx = deltas[0] / weights[0], dy = deltas[1] / weights[1];
  const double dw = std::min(deltas[2] / weights[2], kMaxDeltaLog);
  const double dh = std::min(deltas[3] / weights[3], kMaxDeltaLog);
  const double cx = reference.cx() + dx * reference.w, cy = reference.cy() + dy * reference.h;
  const double w = reference.w * std::exp(dw), h = reference.h * std::exp(dh);
  return Box{cx - 0.5 * w, cy - 0.5 * h, w, h};
}

std::vector<int> nms_indices(std::span<const Box> boxes, std::span<const double> scores,
                             double iou_threshold) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> kept;
  for (int i : order) {
    bool keep = true;
    for (int k : kept)
      if (iou(boxes[i], boxes[k]) > iou_threshold) {
        keep = false;
        break;
      }
    if (keep) kept.push_back(i);
  }
  return kept;
}

std::vector<Proposal> propose(const DetectorConfig& config, const ag::Tensor& objectness,
                              const ag::Tensor& deltas, int image_height, int image_width,
                              const ProposalParams& params) {
  const int a = config.anchors_per_cell();
  const int fh = objectness.dim(2), fw = objectness.dim(3);
  const std::vector<Box> anchors = make_anchors(config, fh, fw);

  std::vector<Proposal> cands;
  cands.reserve(anchors.size());
  for (int i = 0; i < static_cast<int>(anchors.size()); ++i) {
    BoxDeltas d;
    for (int j = 0; j < 4; ++j) d[j] = deltas.data[delta_offset(i, j, a, fh, fw)];
    const Box b = clip_box(decode_box(anchors[i], d, kRpnBoxWeights), image_height, image_width);
    if (!(b.w >= 1.0 && b.h >= 1.0)) continue;
    cands.push_back(Proposal{b, objectness.data[objectness_offset(i, a, fh, fw)]});
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Proposal& x, const Proposal& y) {
    return x.objectness_logit > y.objectness_logit;
  });
  if (static_cast<int>(cands.size()) > params.pre_nms_topk) cands.resize(params.pre_nms_topk);

  std::vector<Box> boxes;
  std::vector<double> scores;
  for (const auto& p : cands) {
    boxes.push_back(p.box);
    scores.push_back(p.objectness_logit);
  }
  std::vector<Proposal> out;
  for (int i : nms_indices(boxes, scores, params.nms_threshold)) {
    if (static_cast<int>(out.size()) >= params.post_nms_topk) break;
    out.push_back(cands[i]);
  }
  return out;
}

Assignment assign_labels(std::span<const Box> proposals, std::span<const Box> gts,
                         const DetectorConfig& config, Stage stage) {
  const std::size_t n = proposals.size(), g = gts.size();
  Assignment out;
  out.labels.assign(n, RegionLabel::background);
  out.matched_gt.assign(n, -1);
  out.max_iou.assign(n, 0.0);
  if (g > 0) {
    const std::vector<double> m = pairwise_iou(proposals, gts);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < g; ++j)
        if (out.matched_gt[i] < 0 || m[i * g + j] > out.max_iou[i]) {
          out.max_iou[i] = m[i * g + j];
          out.matched_gt[i] = static_cast<int>(j);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double v = out.max_iou[i];
      if (stage == Stage::roi) {
        out.labels[i] = v >= config.roi_fg_iou ? RegionLabel::foreground : RegionLabel::background;
      } else if (v >= config.rpn_fg_iou) {
        out.labels[i] = RegionLabel::foreground;
      } else if (v < config.rpn_bg_iou) {
        out.labels[i] = RegionLabel::background;
      } else {
        out.labels[i] = RegionLabel::ignore;
      }
    }
    if (stage == Stage::rpn) {
      // Every ground truth keeps its best-overlapping anchors as foreground.
      for (std::size_t j = 0; j < g; ++j) {
        double best = 0.0;
        for (std::size_t i = 0; i < n; ++i) best = std::max(best, m[i * g + j]);
        if (best <= 0.0) continue;
        for (std::size_t i = 0; i < n; ++i)
          if (m[i * g + j] == best) out.labels[i] = RegionLabel::foreground;
      }
    }
    for (std::size_t i = 0; i < n; ++i)
      if (out.labels[i] == RegionLabel::background) out.matched_gt[i] = -1;
  }
  if (config.sampling_mode == SamplingMode::ioa) {
    out.ioa.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (out.labels[i] != RegionLabel::background) continue;
      out.ioa[i] = ioa(proposals[i], gts);
      if (!(out.ioa[i] > config.ioa_threshold)) out.labels[i] = RegionLabel::ignore;
    }
  }
  return out;
}

std::vector<int> sample_minibatch(const Assignment& assignment, int batch_size,
                                  double positive_fraction, Rng& rng) {
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < assignment.labels.size(); ++i) {
    if (assignment.labels[i] == RegionLabel::foreground) pos.push_back(static_cast<int>(i));
    else if (assignment.labels[i] == RegionLabel::background) neg.push_back(static_cast<int>(i));
  }
  const int want_pos = static_cast<int>(std::floor(batch_size * positive_fraction + 1e-9));
  const int num_pos = std::min(static_cast<int>(pos.size()), want_pos);
  const int num_neg = std::min(static_cast<int>(neg.size()), batch_size - num_pos);
  std::vector<int> out = rng.choose(pos, num_pos);
  const std::vector<int> n = rng.choose(neg, num_neg);
  out.insert(out.end(), n.begin(), n.end());
  return out;
}

PseudoLabelResult pseudo_label_targets(const ag::Tensor& class_logits, std::vector<int> targets,
                                       double threshold) {
  const int r = class_logits.dim(0), k1 = class_logits.dim(1);
  if (static_cast<int>(targets.size()) != r)
    throw std::invalid_argument("pseudo_label_targets: target count mismatch");
  PseudoLabelResult out;
  for (int i = 0; i < r; ++i) {
    if (targets[i] != 0) continue;
    const double* row = class_logits.data.data() + static_cast<std::size_t>(i) * k1;
    const double mx = *std::max_element(row, row + k1);
    double z = 0.0;
    for (int j = 0; j < k1; ++j) z += std::exp(row[j] - mx);
    int best = 1;
    for (int j = 2; j < k1; ++j)
      if (row[j] > row[best]) best = j;
    const double p = std::exp(row[best] - mx) / z;
    if (p > threshold) {
      targets[i] = best;
      out.relabeled.push_back({i, best, p});
    }
  }
  out.targets = std::move(targets);
  return out;
}

std::vector<double> crop_mask_target(const Mask& mask, const Box& box, int size) {
  std::vector<double> out(static_cast<std::size_t>(size) * size, 0.0);
  auto sample = [&](double y, double x) {
    y = std::clamp(y, 0.0, mask.height - 1.0);
    x = std::clamp(x, 0.0, mask.width - 1.0);
    const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
    const int y1 = std::min(y0 + 1, mask.height - 1), x1 = std::min(x0 + 1, mask.width - 1);
    const double fy = y - y0, fx = x - x0;
    return (1 - fy) * ((1 - fx) * mask.at(y0, x0) + fx * mask.at(y0, x1)) +
           fy * ((1 - fx) * mask.at(y1, x0) + fx * mask.at(y1, x1));
  };
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double y = box.y + (i + 0.5) * box.h / size - 0.5;
      const double x = box.x + (j + 0.5) * box.w / size - 0.5;
      out[i * size + j] = sample(y, x) >= 0.5 ? 1.0 : 0.0;
    }
  return out;
}

ImagePlan plan_image(const DetectorConfig& config, const ag::Tensor& objectness,
                     const ag::Tensor& deltas, int image_height, int image_width,
                     const ImageTargets& targets, Rng& rng) {
  ImagePlan plan;
  plan.image_height = image_height;
  plan.image_width = image_width;
  const int a = config.anchors_per_cell();
  const int fh = objectness.dim(2), fw = objectness.dim(3);
  const bool ioa_mode = config.sampling_mode == SamplingMode::ioa;

  const std::vector<Box> anchors = make_anchors(config, fh, fw);
  const Assignment rpn = assign_labels(anchors, targets.boxes, config, Stage::rpn);
  for (int i : sample_minibatch(rpn, config.rpn_batch, config.rpn_positive_fraction, rng)) {
    plan.rpn_indices.push_back(objectness_offset(i, a, fh, fw));
    const bool fg = rpn.labels[i] == RegionLabel::foreground;
    plan.rpn_labels.push_back(fg ? 1.0 : 0.0);
    if (fg) {
      plan.rpn_fg_anchors.push_back(i);
      plan.rpn_box_targets.push_back(
          encode_box(anchors[i], targets.boxes[rpn.matched_gt[i]], kRpnBoxWeights));
    } else if (ioa_mode) {
      plan.trace.rpn_background_ioa.push_back(rpn.ioa[i]);
    }
  }

  const ProposalParams pp{config.train_pre_nms_topk, config.train_post_nms_topk,
                          config.rpn_nms_threshold};
  std::vector<Box> boxes;
  for (const Proposal& p : propose(config, objectness, deltas, image_height, image_width, pp))
    boxes.push_back(p.box);
  boxes.insert(boxes.end(), targets.boxes.begin(), targets.boxes.end());

  const Assignment roi = assign_labels(boxes, targets.boxes, config, Stage::roi);
  for (int i : sample_minibatch(roi, config.roi_batch, config.roi_positive_fraction, rng)) {
    const bool fg = roi.labels[i] == RegionLabel::foreground;
    if (fg) {
      const int g = roi.matched_gt[i];
      plan.roi_fg_rows.push_back(static_cast<int>(plan.roi_boxes.size()));
      plan.roi_classes.push_back(targets.classes[g]);
      plan.roi_box_targets.push_back(encode_box(boxes[i], targets.boxes[g], kRoiBoxWeights));
      plan.mask_targets.push_back(crop_mask_target(targets.masks[g], boxes[i], config.mask_size));
    } else {
      plan.roi_classes.push_back(0);
      if (ioa_mode) plan.trace.roi_background_ioa.push_back(roi.ioa[i]);
    }
    plan.roi_boxes.push_back(boxes[i]);
  }
  return plan;
}

const char* loss_key_name(LossKey key) {
  switch (key) {
    case kRpnCls: return "rpn_cls";
    case kRpnReg: return "rpn_reg";
    case kRoiCls: return "roi_cls";
    case kRoiReg: return "roi_reg";
    case kMask: return "mask";
    default: return "unknown";
  }
}

bool LossSelection::any() const {
  return std::any_of(enabled.begin(), enabled.end(), [](bool b) { return b; });
}

LossTerms image_losses(DetectorGraph& graph, ag::Var features, const RpnOutputs& rpn,
                       const ImagePlan& plan, const LossSelection& selection,
                       SamplingTrace* trace) {
  ag::Tape& tape = graph.tape();
  const DetectorConfig& cfg = graph.detector().config();
  const int a = cfg.anchors_per_cell();
  const int k = cfg.num_classes;
  const int fh = rpn.feature_height, fw = rpn.feature_width;
  LossTerms out;
  auto zero = [&] { return tape.constant(ag::Tensor({1}, 0.0)); };

  const double n_rpn = static_cast<double>(plan.rpn_indices.size());
  if (selection.enabled[kRpnCls]) {
    if (plan.rpn_indices.empty()) {
      out.terms[kRpnCls] = zero();
    } else {
      ag::Var logits = ag::gather(tape, rpn.objectness, plan.rpn_indices);
      out.terms[kRpnCls] =
          ag::scale(tape, ag::bce_with_logits_sum(tape, logits, plan.rpn_labels), 1.0 / n_rpn);
    }
  }
  if (selection.enabled[kRpnReg]) {
    if (plan.rpn_fg_anchors.empty()) {
      out.terms[kRpnReg] = zero();
    } else {
      std::vector<std::int64_t> idx;
      std::vector<double> tgt;
      for (std::size_t f = 0; f < plan.rpn_fg_anchors.size(); ++f)
        for (int j = 0; j < 4; ++j) {
          idx.push_back(delta_offset(plan.rpn_fg_anchors[f], j, a, fh, fw));
          tgt.push_back(plan.rpn_box_targets[f][j]);
        }
      ag::Var d = ag::gather(tape, rpn.deltas, std::move(idx));
      out.terms[kRpnReg] = ag::scale(
          tape, ag::smooth_l1_sum(tape, d, std::move(tgt), cfg.smooth_l1_beta), 1.0 / n_rpn);
    }
  }

  const double n_roi = static_cast<double>(plan.roi_boxes.size());
  if (selection.enabled[kRoiCls] || selection.enabled[kRoiReg]) {
    if (plan.roi_boxes.empty()) {
      if (selection.enabled[kRoiCls]) out.terms[kRoiCls] = zero();
      if (selection.enabled[kRoiReg]) out.terms[kRoiReg] = zero();
    } else {
      ag::Var deltas;
      ag::Var logits = graph.box_logits(features, plan.roi_boxes, &deltas);
      if (selection.enabled[kRoiCls]) {
        std::vector<int> targets = plan.roi_classes;
        if (cfg.pseudo_label || selection.pseudo_label) {
          PseudoLabelResult pl =
              pseudo_label_targets(tape.value(logits), std::move(targets), cfg.pseudo_threshold);
          targets = std::move(pl.targets);
          if (trace)
            trace->pseudo_labels.insert(trace->pseudo_labels.end(), pl.relabeled.begin(),
                                        pl.relabeled.end());
        }
        out.terms[kRoiCls] = ag::scale(
            tape, ag::softmax_cross_entropy_sum(tape, logits, std::move(targets)), 1.0 / n_roi);
      }
      if (selection.enabled[kRoiReg]) {
        if (plan.roi_fg_rows.empty()) {
          out.terms[kRoiReg] = zero();
        } else {
          std::vector<std::int64_t> idx;
          std::vector<double> tgt;
          for (std::size_t f = 0; f < plan.roi_fg_rows.size(); ++f) {
            const int row = plan.roi_fg_rows[f];
            const int cls = plan.roi_classes[row];
            for (int j = 0; j < 4; ++j) {
              idx.push_back(static_cast<std::int64_t>(row) * 4 * k + (cls - 1) * 4 + j);
              tgt.push_back(plan.roi_box_targets[f][j]);
            }
          }
          ag::Var d = ag::gather(tape, deltas, std::move(idx));
          out.terms[kRoiReg] = ag::scale(
              tape, ag::smooth_l1_sum(tape, d, std::move(tgt), cfg.smooth_l1_beta), 1.0 / n_roi);
        }
      }
    }
  }

  if (selection.enabled[kMask]) {
    if (plan.roi_fg_rows.empty()) {
      out.terms[kMask] = zero();
    } else {
      std::vector<Box> fg_boxes;
      for (int row : plan.roi_fg_rows) fg_boxes.push_back(plan.roi_boxes[row]);
      ag::Var logits = graph.mask_logits(features, fg_boxes);
      const int s2 = cfg.mask_size * cfg.mask_size;
      std::vector<std::int64_t> idx;
      std::vector<double> tgt;
      for (std::size_t f = 0; f < plan.roi_fg_rows.size(); ++f) {
        const int cls = plan.roi_classes[plan.roi_fg_rows[f]];
        const std::int64_t base = (static_cast<std::int64_t>(f) * k + (cls - 1)) * s2;
        for (int p = 0; p < s2; ++p) {
          idx.push_back(base + p);
          tgt.push_back(plan.mask_targets[f][p]);
        }
      }
      const double count = static_cast<double>(idx.size());
      ag::Var sel = ag::gather(tape, logits, std::move(idx));
      out.terms[kMask] =
          ag::scale(tape, ag::bce_with_logits_sum(tape, sel, std::move(tgt)), 1.0 / count);
    }
  }

  for (int key = 0; key < kNumLossKeys; ++key)
    if (out.terms[key]) check_finite(tape, *out.terms[key], static_cast<LossKey>(key));
  return out;
}

}  // namespace ldet
