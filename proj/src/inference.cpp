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

#include "ldet/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <tuple>

#include "ldet/mask_codec.hpp"

namespace ldet {

void InferenceConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("inference." + m); };
  if (rpn_pre_nms_topk <= 0) fail("rpn_pre_nms_topk must be positive");
  if (rpn_post_nms_topk <= 0) fail("rpn_post_nms_topk must be positive");
  if (!(rpn_nms_threshold > 0.0 && rpn_nms_threshold <= 1.0))
    fail("rpn_nms_threshold must be in (0, 1]");
  if (!(roi_nms_threshold > 0.0 && roi_nms_threshold <= 1.0))
    fail("roi_nms_threshold must be in (0, 1]");
  if (max_detections <= 0) fail("max_detections must be positive");
  if (!(mask_threshold > 0.0 && mask_threshold < 1.0)) fail("mask_threshold must be in (0, 1)");
}

nlohmann::json to_json(const InferenceConfig& c) {
  return {{"rpn_pre_nms_topk", c.rpn_pre_nms_topk}, {"rpn_post_nms_topk", c.rpn_post_nms_topk},
          {"rpn_nms_threshold", c.rpn_nms_threshold}, {"roi_nms_threshold", c.roi_nms_threshold},
          {"score_threshold", c.score_threshold},   {"max_detections", c.max_detections},
          {"mask_threshold", c.mask_threshold},     {"with_masks", c.with_masks}};
}

InferenceConfig inference_config_from_json(const nlohmann::json& j) {
  InferenceConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "rpn_pre_nms_topk") c.rpn_pre_nms_topk = v.get<int>();
    else if (key == "rpn_post_nms_topk") c.rpn_post_nms_topk = v.get<int>();
    else if (key == "rpn_nms_threshold") c.rpn_nms_threshold = v.get<double>();
    else if (key == "roi_nms_threshold") c.roi_nms_threshold = v.get<double>();
    else if (key == "score_threshold") c.score_threshold = v.get<double>();
    else if (key == "max_detections") c.max_detections = v.get<int>();
    else if (key == "mask_threshold") c.mask_threshold = v.get<double>();
    else if (key == "with_masks") c.with_masks = v.get<bool>();
    else throw ConfigError("unknown key 'inference." + key + "'");
  }
  c.validate();
  return c;
}

AgnosticScore class_agnostic_score(std::span<const double> logits) {
  if (logits.size() < 2) throw std::invalid_argument("need background and at least one class");
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  AgnosticScore s;
  s.objectness = 1.0 - std::exp(logits[0] - m) / z;
  for (std::size_t k = 2; k < logits.size(); ++k)
    if (logits[k] > logits[s.argmax_class]) s.argmax_class = static_cast<int>(k);
  return s;
}

namespace {

bool ranks_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.box.x, a.box.y, a.box.w, a.box.h, a.class_id) <
         std::tie(b.box.x, b.box.y, b.box.w, b.box.h, b.class_id);
}

// Bilinear sample of a size x size probability grid covering `box`, at every
// image pixel centre inside the box.
Mask paste_mask(const std::vector<double>& probs, int size, const Box& box, int height, int width,
                double threshold) {
  Mask m(height, width);
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x)));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y)));
  const int x1 = std::min(width, static_cast<int>(std::ceil(box.x2())));
  const int y1 = std::min(height, static_cast<int>(std::ceil(box.y2())));
  auto at = [&](int yy, int xx) {
    yy = std::clamp(yy, 0, size - 1);
    xx = std::clamp(xx, 0, size - 1);
    return probs[static_cast<std::size_t>(yy) * size + xx];
  };
  for (int y = y0; y < y1; ++y) {
    const double py = y + 0.5;
    if (py < box.y || py > box.y2()) continue;
    const double gy = (py - box.y) / box.h * size - 0.5;
    const int iy = static_cast<int>(std::floor(gy));
    const double fy = gy - iy;
    for (int x = x0; x < x1; ++x) {
      const double px = x + 0.5;
      if (px < box.x || px > box.x2()) continue;
      const double gx = (px - box.x) / box.w * size - 0.5;
      const int ix = static_cast<int>(std::floor(gx));
      const double fx = gx - ix;
      const double p = (1 - fy) * ((1 - fx) * at(iy, ix) + fx * at(iy, ix + 1)) +
                       fy * ((1 - fx) * at(iy + 1, ix) + fx * at(iy + 1, ix + 1));
      if (p >= threshold) m.data[static_cast<std::size_t>(y) * width + x] = 1;
    }
  }
  return m;
}

}  // namespace

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold) {
  std::stable_sort(detections.begin(), detections.end(), ranks_before);
  std::vector<Detection> kept;
  for (auto& d : detections) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (iou(d.box, k.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(std::move(d));
  }
  return kept;
}

std::vector<Detection> infer(const Detector& detector, const Image& image,
                             const InferenceConfig& config) {
  config.validate();
  if (!detector.all_finite()) throw InferenceError("detector parameters contain NaN or Inf");
  const DetectorConfig& cfg = detector.config();
  const int k = cfg.num_classes;

  ag::Tape tape;
  DetectorGraph graph(detector, tape, false);
  ag::Var feat = graph.features(image);
  RpnOutputs rpn = graph.propose_logits(feat);
  const std::vector<Proposal> proposals =
      propose(cfg, tape.value(rpn.objectness), tape.value(rpn.deltas), image.height, image.width,
              {config.rpn_pre_nms_topk, config.rpn_post_nms_topk, config.rpn_nms_threshold});
  if (proposals.empty()) return {};

  std::vector<Box> boxes;
  for (const auto& p : proposals) boxes.push_back(p.box);
  ag::Var deltas_var;
  const ag::Tensor logits = tape.value(graph.box_logits(feat, boxes, &deltas_var));
  const ag::Tensor deltas = tape.value(deltas_var);

  std::vector<Detection> candidates;
  for (std::size_t r = 0; r < boxes.size(); ++r) {
    const AgnosticScore s = class_agnostic_score(
        std::span<const double>(logits.data.data() + r * (k + 1), static_cast<std::size_t>(k + 1)));
    if (s.objectness < config.score_threshold) continue;
    BoxDeltas d;
    for (int j = 0; j < 4; ++j) d[j] = deltas.data[r * 4 * k + (s.argmax_class - 1) * 4 + j];
    const Box b = clip_box(decode_box(boxes[r], d, kRoiBoxWeights), image.height, image.width);
    if (!(b.w > 0.0 && b.h > 0.0)) continue;
    candidates.push_back({b, s.objectness, cfg.category_of(s.argmax_class), std::nullopt, false});
  }

  std::vector<Detection> out = nms(std::move(candidates), config.roi_nms_threshold);
  if (static_cast<int>(out.size()) > config.max_detections) out.resize(config.max_detections);
  if (!config.with_masks || out.empty()) return out;

  std::vector<Box> final_boxes;
  for (const auto& d : out) final_boxes.push_back(d.box);
  const ag::Tensor masks = tape.value(graph.mask_logits(feat, final_boxes));
  const int s = cfg.mask_size, s2 = s * s;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int cls = cfg.class_index(out[i].class_id);
    const double* src = masks.data.data() + (i * k + (cls - 1)) * s2;
    std::vector<double> probs(s2);
    for (int p = 0; p < s2; ++p) probs[p] = 1.0 / (1.0 + std::exp(-src[p]));
    out[i].mask = paste_mask(probs, s, out[i].box, image.height, image.width, config.mask_threshold);
  }
  return out;
}

nlohmann::json detections_to_json(const DetectionMap& detections) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [image_id, dets] : detections)
    for (const auto& d : dets) {
      nlohmann::json j{{"image_id", image_id},
                       {"bbox", {d.box.x, d.box.y, d.box.w, d.box.h}},
                       {"score", d.score},
                       {"category_id", d.class_id}};
      if (d.is_seen_class) j["is_seen_class"] = true;
      if (d.mask) {
        const Rle rle = encode_rle(*d.mask);
        j["segmentation"] = {{"size", {rle.height, rle.width}},
                             {"counts", rle_counts_to_string(rle)}};
      }
      out.push_back(std::move(j));
    }
  return out;
}

DetectionMap detections_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw InferenceError("detections file must hold a JSON array");
  DetectionMap out;
  for (const auto& e : j) {
    for (const char* key : {"image_id", "bbox", "score", "category_id"})
      if (!e.contains(key)) throw InferenceError(std::string("missing key '") + key + "' in detection");
    Detection d;
    const auto& b = e.at("bbox");
    d.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
             b.at(3).get<double>()};
    d.score = e.at("score").get<double>();
    d.class_id = e.at("category_id").get<std::int64_t>();
    if (e.contains("is_seen_class")) d.is_seen_class = e.at("is_seen_class").get<bool>();
    if (e.contains("segmentation")) {
      const auto& seg = e.at("segmentation");
      const int h = seg.at("size").at(0).get<int>(), w = seg.at("size").at(1).get<int>();
      const auto& counts = seg.at("counts");
      if (counts.is_string()) {
        d.mask = decode_rle(rle_from_string(counts.get<std::string>(), h, w));
      } else {
        Rle rle{h, w, counts.get<std::vector<std::uint32_t>>()};
        d.mask = decode_rle(rle);
      }
    }
    out[e.at("image_id").get<std::int64_t>()].push_back(std::move(d));
  }
  return out;
}

void save_detections(const std::filesystem::path& path, const DetectionMap& detections) {
  std::ofstream out(path);
  if (!out) throw InferenceError("cannot write " + path.string());
  out << detections_to_json(detections).dump();
}

DetectionMap load_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InferenceError("cannot read " + path.string());
  return detections_from_json(nlohmann::json::parse(in));
}

}  // namespace ldet
