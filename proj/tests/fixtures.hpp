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

// Shared test data: small detectors, shape images, and a loss evaluator that
// builds its own tape so gradients can be checked against the trainer.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ldet/annotations.hpp"
#include "ldet/backerase.hpp"
#include "ldet/detector.hpp"
#include "ldet/shapes.hpp"
#include "ldet/openworld_eval.hpp"
#include "ldet/trainer.hpp"
#include "oracles.hpp"

namespace fixture {

/// Three foreground classes (the seen shapes) and a narrow backbone.
inline ldet::DetectorConfig small_config(std::uint64_t seed = 1) {
  ldet::DetectorConfig c;
  c.num_classes = 3;
  c.class_ids = {ldet::kShapeCircle, ldet::kShapeSquare, ldet::kShapeTriangle};
  c.parameter_seed = seed;
  c.rpn_batch = 32;
  c.roi_batch = 16;
  c.train_post_nms_topk = 48;
  c.backbone.blocks = {{6, 1}, {8, 2}, {8, 2}};
  c.rpn_channels = 8;
  c.box_head_dim = 16;
  c.mask_head_channels = 6;
  c.mask_size = 8;
  c.pooled_size = 4;
  return c;
}

inline ldet::Detector small_detector(std::uint64_t seed = 1) {
  ldet::DetectorConfig c = small_config(seed);
  const ldet::BackboneSpec b = c.backbone;
  return ldet::build_detector(std::move(c), b);
}

/// Shape images restricted to the seen classes, each with at least one
/// annotation.
inline std::vector<ldet::ImageSample> shape_samples(int count, int size, std::uint64_t seed) {
  ldet::ShapesConfig sc;
  sc.num_images = count * 3;
  sc.image_size = size;
  sc.min_extent = size / 4.0;
  sc.max_extent = size / 2.5;
  sc.min_objects = 1;
  sc.max_objects = 3;
  sc.seed = seed;
  const ldet::Dataset ds =
      ldet::apply_split(ldet::generate_shapes(sc), ldet::shapes_split(), ldet::SplitMode::train_seen_only);
  std::vector<ldet::ImageSample> out;
  for (std::size_t i = 0; i < ds.size() && static_cast<int>(out.size()) < count; ++i)
    if (!ds.record(i).annotations.empty()) out.push_back(ds.sample(i));
  return out;
}

inline std::vector<ldet::SynthesizedSample> synthesize_all(const std::vector<ldet::ImageSample>& real,
                                                           std::uint64_t seed, double scale = 0.25) {
  ldet::BackEraseConfig cfg;
  cfg.scale = scale;
  std::vector<ldet::SynthesizedSample> out;
  for (const auto& s : real) {
    ldet::Rng rng(ldet::derive_seed(seed, "fixture", static_cast<std::uint64_t>(s.image_id)));
    out.push_back(ldet::synthesize(s, cfg, rng));
  }
  return out;
}

/// Plan for one image under the detector's current parameters, drawn with
/// the same per-image seed the trainer uses.
inline ldet::ImagePlan plan_for(const ldet::Detector& det, const ldet::DetectorConfig& cfg,
                                const ldet::Image& image,
                                const std::vector<ldet::InstanceAnnotation>& anns,
                                const std::string& stream, std::uint64_t seed, std::int64_t id) {
  ldet::ag::Tape tape;
  ldet::DetectorGraph graph(det, tape, false);
  const ldet::ag::Var feat = graph.features(image);
  const ldet::RpnOutputs rpn = graph.propose_logits(feat);
  ldet::Rng rng(ldet::derive_seed(seed, stream, static_cast<std::uint64_t>(id)));
  return ldet::plan_image(cfg, tape.value(rpn.objectness), tape.value(rpn.deltas), image.height,
                          image.width, ldet::make_targets(det.config(), anns), rng);
}

struct LossAndGrads {
  double value = 0.0;
  std::vector<ldet::ag::Tensor> grads;
};

/// Sum of the selected loss terms of one image under a fixed plan, and its
/// parameter gradients when `with_grads` is set.
inline LossAndGrads loss_under_plan(const ldet::Detector& det, const ldet::Image& image,
                                    const ldet::ImagePlan& plan, const ldet::LossSelection& sel,
                                    bool with_grads) {
  ldet::ag::Tape tape;
  ldet::DetectorGraph graph(det, tape, with_grads);
  const ldet::ag::Var feat = graph.features(image);
  const ldet::RpnOutputs rpn = graph.propose_logits(feat);
  const ldet::LossTerms terms = ldet::image_losses(graph, feat, rpn, plan, sel);
  LossAndGrads out;
  out.grads.resize(det.parameters().size());
  std::vector<ldet::ag::Var> parts;
  for (const auto& t : terms.terms)
    if (t) {
      out.value += tape.value(*t).data[0];
      parts.push_back(*t);
    }
  if (with_grads && !parts.empty()) {
    const ldet::ag::Var root = ldet::ag::sum_scalars(tape, parts);
    if (tape.requires_grad(root)) {
      tape.backward(root);
      tape.accumulate_parameter_grads(out.grads);
    }
  }
  return out;
}

inline double grad_at(const std::vector<ldet::ag::Tensor>& g, std::size_t p, std::size_t k) {
  return g[p].data.empty() ? 0.0 : g[p].data[k];
}

/// |a - b| / max(|a|, |b|), with differences below `floor` treated as equal.
inline double rel_error(double a, double b, double floor = 1e-9) {
  const double d = std::abs(a - b);
  if (d <= floor) return 0.0;
  return d / std::max(std::abs(a), std::abs(b));
}

/// Gradients of the selected losses averaged over `images`, each image
/// planned with the trainer's per-image stream and seed.
inline std::vector<ldet::ag::Tensor> averaged_grads(const ldet::Detector& det,
                                                    const std::vector<const ldet::Image*>& images,
                                                    const std::vector<const std::vector<ldet::InstanceAnnotation>*>& anns,
                                                    const std::vector<std::int64_t>& ids,
                                                    const std::string& stream, std::uint64_t seed,
                                                    const ldet::LossSelection& sel) {
  std::vector<ldet::ag::Tensor> acc(det.parameters().size());
  const double inv = 1.0 / static_cast<double>(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const ldet::ImagePlan plan = plan_for(det, det.config(), *images[i], *anns[i], stream, seed, ids[i]);
    const LossAndGrads r = loss_under_plan(det, *images[i], plan, sel, true);
    for (std::size_t p = 0; p < r.grads.size(); ++p) {
      if (r.grads[p].data.empty()) continue;
      if (acc[p].data.empty()) acc[p] = ldet::ag::Tensor(r.grads[p].shape);
      for (std::size_t k = 0; k < r.grads[p].numel(); ++k) acc[p].data[k] += inv * r.grads[p].data[k];
    }
  }
  return acc;
}

struct RoutingResult {
  double max_rel_mask = 0.0;
  double max_rel_detection = 0.0;
  double max_rel_backbone = 0.0;
  double mask_grad_norm = 0.0;
  double detection_grad_norm = 0.0;
};

/// Compares a decoupled step's gradients with separately computed mask-only
/// gradients on the real images and detection-only gradients on the
/// synthesized ones.
inline RoutingResult check_routing(const ldet::Detector& det, const std::vector<ldet::ImageSample>& real,
                                   const std::vector<ldet::SynthesizedSample>& synth, std::uint64_t seed) {
  ldet::TrainMode mode;
  mode.variant = ldet::TrainVariant::decoupled;
  const ldet::StepOutput step = ldet::compute_step(det, real, synth, mode, seed);

  std::vector<const ldet::Image*> ri, si;
  std::vector<const std::vector<ldet::InstanceAnnotation>*> ra, sa;
  std::vector<std::int64_t> rid, sid;
  for (const auto& s : real) {
    ri.push_back(&s.image);
    ra.push_back(&s.annotations);
    rid.push_back(s.image_id);
  }
  for (const auto& s : synth) {
    si.push_back(&s.image);
    sa.push_back(&s.annotations);
    sid.push_back(s.source_id);
  }
  const auto mask = averaged_grads(det, ri, ra, rid, "plan.real", seed, ldet::LossSelection::mask_only());
  const auto detection =
      averaged_grads(det, si, sa, sid, "plan.synth", seed, ldet::LossSelection::detection());

  RoutingResult out;
  for (std::size_t p = 0; p < det.parameters().size(); ++p) {
    const auto group = ldet::parameter_group(det.parameters()[p].name);
    for (std::size_t k = 0; k < det.parameters()[p].value.numel(); ++k) {
      const double got = grad_at(step.gradients, p, k);
      const double m = grad_at(mask, p, k), d = grad_at(detection, p, k);
      switch (group) {
        case ldet::ParameterGroup::mask_head:
          out.max_rel_mask = std::max(out.max_rel_mask, rel_error(got, m, 1e-12));
          out.mask_grad_norm += m * m;
          break;
        case ldet::ParameterGroup::rpn:
        case ldet::ParameterGroup::box_head:
          out.max_rel_detection = std::max(out.max_rel_detection, rel_error(got, d, 1e-12));
          out.detection_grad_norm += d * d;
          break;
        case ldet::ParameterGroup::backbone:
          out.max_rel_backbone = std::max(out.max_rel_backbone, rel_error(got, m + d, 1e-12));
          break;
      }
    }
  }
  out.mask_grad_norm = std::sqrt(out.mask_grad_norm);
  out.detection_grad_norm = std::sqrt(out.detection_grad_norm);
  return out;
}

/// Random small evaluation problem in both library and oracle form. Boxes sit
/// on a coarse grid so exact IoU ties and threshold hits occur. The first
/// image always has a target.
struct EvalProblem {
  std::vector<ldet::EvalImage> images;
  std::vector<oracle::Img> oracle_images;
};

inline EvalProblem random_eval_problem(ldet::Rng& rng, int num_images, int max_dets, int max_gts) {
  EvalProblem p;
  auto box = [&] {
    const double x = static_cast<double>(rng.uniform_int(0, 8)), y = static_cast<double>(rng.uniform_int(0, 8));
    return ldet::Box{x, y, static_cast<double>(rng.uniform_int(1, 6)), static_cast<double>(rng.uniform_int(1, 6))};
  };
  for (int i = 0; i < num_images; ++i) {
    ldet::EvalImage img;
    img.image_id = i + 1;
    oracle::Img o;
    const int nt = static_cast<int>(rng.uniform_int(i == 0 ? 1 : 0, max_gts));
    for (int t = 0; t < nt; ++t) {
      const ldet::Box b = box();
      img.targets.push_back({b, {}});
      o.gts.push_back(b);
    }
    const int nd = static_cast<int>(rng.uniform_int(0, max_dets));
    for (int d = 0; d < nd; ++d) {
      ldet::Detection det;
      // Half the time reuse a target box, jittered by whole pixels.
      if (nt > 0 && rng.uniform() < 0.5) {
        det.box = img.targets[static_cast<std::size_t>(rng.uniform_int(0, nt - 1))].box;
        det.box.x += static_cast<double>(rng.uniform_int(-1, 1));
      } else {
        det.box = box();
      }
      det.score = static_cast<double>(rng.uniform_int(1, 20)) / 20.0;
      det.class_id = 1;
      det.is_seen_class = rng.uniform() < 0.25;
      img.detections.push_back(det);
      o.dets.push_back({det.box, det.score, det.is_seen_class});
    }
    p.images.push_back(std::move(img));
    p.oracle_images.push_back(std::move(o));
  }
  return p;
}

inline double box_iou(const ldet::Box& a, const ldet::Box& b) { return oracle::pixel_iou(a, b); }

}  // namespace fixture
