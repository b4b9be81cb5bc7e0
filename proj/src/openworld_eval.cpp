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

#include "ldet/openworld_eval.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <tuple>

namespace ldet {

void EvalConfig::validate() const {
  if (iou_thresholds.empty()) throw EvaluationError("eval.iou_thresholds must not be empty");
  for (double t : iou_thresholds)
    if (!(t > 0.0 && t <= 1.0)) throw EvaluationError("eval.iou_thresholds must lie in (0, 1]");
  if (budgets.empty()) throw EvaluationError("eval.budgets must not be empty");
  for (std::size_t i = 0; i < budgets.size(); ++i) {
    if (budgets[i] <= 0) throw EvaluationError("eval.budgets must be positive");
    if (i > 0 && budgets[i] <= budgets[i - 1])
      throw EvaluationError("eval.budgets must be strictly ascending");
  }
  if (ap_max_detections <= 0) throw EvaluationError("eval.ap_max_detections must be positive");
  if (!(seen_tag_iou > 0.0 && seen_tag_iou <= 1.0))
    throw EvaluationError("eval.seen_tag_iou must lie in (0, 1]");
}

nlohmann::json to_json(const EvalConfig& c) {
  return {{"iou_thresholds", c.iou_thresholds},
          {"budgets", c.budgets},
          {"exclude_seen_from_budget", c.exclude_seen_from_budget},
          {"match_target", c.match_target == MatchTarget::box ? "box" : "mask"},
          {"gt_filter", c.gt_filter == GroundTruthFilter::unseen ? "unseen" : "all"},
          {"ap_max_detections", c.ap_max_detections},
          {"tag_seen_by_overlap", c.tag_seen_by_overlap},
          {"seen_tag_iou", c.seen_tag_iou}};
}

EvalConfig eval_config_from_json(const nlohmann::json& j) {
  EvalConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "iou_thresholds") c.iou_thresholds = v.get<std::vector<double>>();
    else if (key == "budgets") c.budgets = v.get<std::vector<int>>();
    else if (key == "exclude_seen_from_budget") c.exclude_seen_from_budget = v.get<bool>();
    else if (key == "match_target") {
      const auto s = v.get<std::string>();
      if (s != "box" && s != "mask") throw EvaluationError("eval.match_target must be box or mask");
      c.match_target = s == "box" ? MatchTarget::box : MatchTarget::mask;
    } else if (key == "gt_filter") {
      const auto s = v.get<std::string>();
      if (s != "unseen" && s != "all") throw EvaluationError("eval.gt_filter must be unseen or all");
      c.gt_filter = s == "unseen" ? GroundTruthFilter::unseen : GroundTruthFilter::all;
    } else if (key == "ap_max_detections") c.ap_max_detections = v.get<int>();
    else if (key == "tag_seen_by_overlap") c.tag_seen_by_overlap = v.get<bool>();
    else if (key == "seen_tag_iou") c.seen_tag_iou = v.get<double>();
    else throw EvaluationError("unknown key 'eval." + key + "'");
  }
  c.validate();
  return c;
}

std::vector<int> match_greedy(std::span<const double> ious, int detections, int targets,
                              double threshold) {
  if (ious.size() != static_cast<std::size_t>(detections) * targets)
    throw std::invalid_argument("match_greedy: matrix size mismatch");
  std::vector<int> out(detections, -1);
  std::vector<bool> taken(targets, false);
  for (int d = 0; d < detections; ++d) {
    int best = -1;
    double best_iou = threshold;
    for (int t = 0; t < targets; ++t) {
      const double v = ious[static_cast<std::size_t>(d) * targets + t];
      if (taken[t] || v < threshold) continue;
      if (best < 0 || v > best_iou) {
        best = t;
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[best] = true;
      out[d] = best;
    }
  }
  return out;
}

namespace {

double mask_iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width)
    throw EvaluationError("mask size mismatch between detection and ground truth");
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    inter += a.data[i] && b.data[i];
    uni += a.data[i] || b.data[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

bool ranks_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.box.x, a.box.y, a.box.w, a.box.h, a.class_id) <
         std::tie(b.box.x, b.box.y, b.box.w, b.box.h, b.class_id);
}

}  // namespace

std::vector<double> iou_matrix(std::span<const Detection> detections,
                               std::span<const EvalObject> targets, MatchTarget target) {
  std::vector<double> out;
  out.reserve(detections.size() * targets.size());
  for (const auto& d : detections)
    for (const auto& t : targets) {
      if (target == MatchTarget::box) {
        out.push_back(iou(d.box, t.box));
      } else {
        if (!d.mask) throw EvaluationError("mask matching needs detection masks");
        out.push_back(mask_iou(*d.mask, t.mask));
      }
    }
  return out;
}

void tag_seen(std::vector<Detection>& detections, std::span<const EvalObject> seen_objects,
              MatchTarget target, double iou_threshold) {
  std::vector<int> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return ranks_before(detections[a], detections[b]); });
  std::vector<Detection> sorted;
  for (int i : order) sorted.push_back(detections[i]);
  const auto ious = iou_matrix(sorted, seen_objects, target);
  const auto m = match_greedy(ious, static_cast<int>(sorted.size()),
                              static_cast<int>(seen_objects.size()), iou_threshold);
  for (std::size_t r = 0; r < order.size(); ++r) detections[order[r]].is_seen_class = m[r] >= 0;
}

std::vector<Detection> ranked(std::vector<Detection> detections, const EvalConfig& config) {
  std::stable_sort(detections.begin(), detections.end(), ranks_before);
  if (config.exclude_seen_from_budget)
    std::erase_if(detections, [](const Detection& d) { return d.is_seen_class; });
  return detections;
}

std::map<int, double> average_recall(std::span<const EvalImage> images, const EvalConfig& config) {
  config.validate();
  std::map<int, double> sums;
  int counted = 0;
  for (const auto& img : images) {
    if (img.targets.empty()) continue;
    ++counted;
    const std::vector<Detection> dets = ranked(img.detections, config);
    const int n_t = static_cast<int>(img.targets.size());
    for (int budget : config.budgets) {
      const int n_d = std::min(budget, static_cast<int>(dets.size()));
      const auto ious =
          iou_matrix(std::span<const Detection>(dets.data(), n_d), img.targets, config.match_target);
      double recall = 0.0;
      for (double thr : config.iou_thresholds) {
        const auto m = match_greedy(ious, n_d, n_t, thr);
        recall += static_cast<double>(std::count_if(m.begin(), m.end(), [](int v) { return v >= 0; })) /
                  n_t;
      }
      sums[budget] += recall / static_cast<double>(config.iou_thresholds.size());
    }
  }
  if (counted == 0) throw EvaluationError("no ground-truth objects to measure recall against");
  for (auto& [k, v] : sums) v /= counted;
  return sums;
}

double average_precision(std::span<const EvalImage> images, const EvalConfig& config,
                         std::vector<MatchRecord>* matches) {
  config.validate();
  struct Scored {
    double score;
    std::size_t image;
    int rank;
    bool tp;
  };
  std::vector<std::vector<Detection>> lists;
  std::vector<std::vector<double>> ious;
  long positives = 0;
  for (const auto& img : images) {
    auto dets = ranked(img.detections, config);
    if (static_cast<int>(dets.size()) > config.ap_max_detections)
      dets.resize(config.ap_max_detections);
    ious.push_back(iou_matrix(dets, img.targets, config.match_target));
    lists.push_back(std::move(dets));
    positives += static_cast<long>(img.targets.size());
  }
  if (positives == 0) throw EvaluationError("no ground-truth objects to measure precision against");

  double total = 0.0;
  for (double thr : config.iou_thresholds) {
    std::vector<Scored> pooled;
    for (std::size_t i = 0; i < lists.size(); ++i) {
      const int n_d = static_cast<int>(lists[i].size());
      const int n_t = static_cast<int>(images[i].targets.size());
      const auto m = match_greedy(ious[i], n_d, n_t, thr);
      for (int d = 0; d < n_d; ++d) {
        pooled.push_back({lists[i][d].score, i, d, m[d] >= 0});
        if (matches && m[d] >= 0)
          matches->push_back({images[i].image_id, thr, d, m[d],
                              ious[i][static_cast<std::size_t>(d) * n_t + m[d]]});
      }
    }
    std::stable_sort(pooled.begin(), pooled.end(), [](const Scored& a, const Scored& b) {
      if (a.score != b.score) return a.score > b.score;
      return std::tie(a.image, a.rank) < std::tie(b.image, b.rank);
    });
    std::vector<double> recall(pooled.size()), precision(pooled.size());
    long tp = 0;
    for (std::size_t i = 0; i < pooled.size(); ++i) {
      tp += pooled[i].tp;
      recall[i] = static_cast<double>(tp) / static_cast<double>(positives);
      precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    }
    for (std::size_t i = pooled.size(); i-- > 1;)
      precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0;
    for (int r = 0; r <= 100; ++r) {
      const double level = r / 100.0;
      const auto it = std::lower_bound(recall.begin(), recall.end(), level);
      if (it != recall.end()) ap += precision[it - recall.begin()];
    }
    total += ap / 101.0;
  }
  return total / static_cast<double>(config.iou_thresholds.size());
}

nlohmann::json EvalReport::to_json(const EvalConfig& config) const {
  nlohmann::json ar_json = nlohmann::json::object();
  for (const auto& [k, v] : ar) ar_json[std::to_string(k)] = v;
  return {{"ap", ap}, {"ar", ar_json}, {"counts", counts}, {"config", ldet::to_json(config)}};
}

EvalReport evaluate(const DetectionMap& detections, const Dataset& dataset,
                    const EvalConfig& config) {
  config.validate();
  if (dataset.empty()) throw EvaluationError("evaluation dataset is empty");
  std::vector<EvalImage> images;
  long seen_objects = 0, unseen_objects = 0, total_dets = 0, seen_tagged = 0;
  for (const auto& rec : dataset.records()) {
    EvalImage img;
    img.image_id = rec.image_id;
    std::vector<EvalObject> seen;
    for (const auto& a : rec.annotations) {
      EvalObject o{a.box, a.mask};
      if (a.is_seen) {
        ++seen_objects;
        seen.push_back(o);
      } else {
        ++unseen_objects;
      }
      if (!a.is_seen || config.gt_filter == GroundTruthFilter::all) img.targets.push_back(o);
    }
    if (auto it = detections.find(rec.image_id); it != detections.end()) img.detections = it->second;
    if (config.tag_seen_by_overlap)
      tag_seen(img.detections, seen, config.match_target, config.seen_tag_iou);
    total_dets += static_cast<long>(img.detections.size());
    for (const auto& d : img.detections) seen_tagged += d.is_seen_class;
    images.push_back(std::move(img));
  }

  EvalReport report;
  report.ar = average_recall(images, config);
  report.ap = average_precision(images, config, &report.matches);
  report.counts = {{"images", images.size()},
                   {"seen_objects", seen_objects},
                   {"unseen_objects", unseen_objects},
                   {"detections", total_dets},
                   {"seen_tagged_detections", seen_tagged}};
  return report;
}

EvalReport evaluate_detector(const Detector& detector, const Dataset& dataset,
                             const InferenceConfig& inference, const EvalConfig& config,
                             DetectionMap* detections) {
  InferenceConfig inf = inference;
  if (config.match_target == MatchTarget::box) inf.with_masks = false;
  DetectionMap dets;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const ImageSample s = dataset.sample(i);
    dets[s.image_id] = infer(detector, s.image, inf);
  }
  EvalReport r = evaluate(dets, dataset, config);
  if (detections) *detections = std::move(dets);
  return r;
}

}  // namespace ldet
