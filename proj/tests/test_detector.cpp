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

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "fixtures.hpp"
#include "ldet/autograd.hpp"
#include "ldet/checkpoint.hpp"
#include "ldet/detector.hpp"
#include "oracles.hpp"

using namespace ldet;

namespace {

// Central differences of a scalar function of one tensor, against the tape.
void check_op(const std::function<ag::Var(ag::Tape&, ag::Var)>& op, ag::Tensor input) {
  auto value = [&](const ag::Tensor& x) {
    ag::Tape t;
    return t.value(op(t, t.constant(x))).data[0];
  };
  ag::Tape tape;
  const ag::Parameter p{"x", input};
  const ag::Var x = tape.parameter(p, 0);
  tape.backward(op(tape, x));
  std::vector<ag::Tensor> grads(1);
  tape.accumulate_parameter_grads(grads);
  for (std::size_t k = 0; k < input.numel(); ++k) {
    ag::Tensor a = input, b = input;
    a.data[k] += 1e-6;
    b.data[k] -= 1e-6;
    const double fd = (value(a) - value(b)) / 2e-6;
    CHECK(fixture::rel_error(grads[0].data[k], fd, 1e-7) < 1e-5);
  }
}

ag::Tensor random_tensor(Rng& rng, std::vector<int> shape) {
  ag::Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("autograd operators match finite differences") {
  Rng rng(4);
  const ag::Tensor w = random_tensor(rng, {3, 2, 3, 3});
  const ag::Tensor bias = random_tensor(rng, {3});
  check_op(
      [&](ag::Tape& t, ag::Var x) {
        ag::Var y = ag::conv2d(t, x, t.constant(w), t.constant(bias), 2, 1);
        return ag::bce_with_logits_sum(t, ag::flatten(t, y), std::vector<double>(3 * 3 * 3, 0.3));
      },
      random_tensor(rng, {1, 2, 5, 6}));
  const ag::Tensor x0 = random_tensor(rng, {1, 2, 5, 6});
  check_op(
      [&](ag::Tape& t, ag::Var wv) {
        ag::Var y = ag::conv2d(t, t.constant(x0), wv, t.constant(bias), 1, 1);
        return ag::bce_with_logits_sum(t, ag::flatten(t, y), std::vector<double>(3 * 30, 0.7));
      },
      w);
  const ag::Tensor lw = random_tensor(rng, {4, 6});
  const ag::Tensor lb = random_tensor(rng, {4});
  check_op(
      [&](ag::Tape& t, ag::Var x) {
        ag::Var y = ag::linear(t, x, t.constant(lw), t.constant(lb));
        return ag::softmax_cross_entropy_sum(t, y, {0, 3});
      },
      random_tensor(rng, {2, 6}));
  const std::vector<Box> boxes{{0.5, 1.2, 4.1, 3.3}, {2.0, 0.0, 5.5, 6.0}};
  check_op(
      [&](ag::Tape& t, ag::Var f) {
        ag::Var y = ag::roi_align(t, f, boxes, 3, 0.5, 2);
        return ag::bce_with_logits_sum(t, ag::flatten(t, y), std::vector<double>(2 * 2 * 9, 0.2));
      },
      random_tensor(rng, {1, 2, 5, 6}));
  check_op(
      [&](ag::Tape& t, ag::Var x) {
        return ag::smooth_l1_sum(t, ag::relu(t, x), std::vector<double>(12, 0.05), 0.5);
      },
      random_tensor(rng, {3, 4}));
  check_op(
      [&](ag::Tape& t, ag::Var x) {
        ag::Var g = ag::gather(t, ag::scale(t, x, 2.5), {4, 0, 2});
        ag::Var parts[] = {ag::smooth_l1_sum(t, g, {0.1, 0.2, 0.3}, 0.0),
                           ag::bce_with_logits_sum(t, x, std::vector<double>(5, 1.0))};
        return ag::sum_scalars(t, parts);
      },
      random_tensor(rng, {5}));
}

TEST_CASE("build_detector is deterministic and finite") {
  const Detector a = fixture::small_detector(3), b = fixture::small_detector(3);
  REQUIRE(a.parameters().size() == b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    CHECK(a.parameters()[i].value == b.parameters()[i].value);
  CHECK(a.all_finite());

  ag::Tape tape;
  DetectorGraph g(a, tape, false);
  ag::Var f = g.features(Image(64, 64, 3, 0.0));
  RpnOutputs rpn = g.propose_logits(f);
  for (double v : tape.value(rpn.objectness).data) CHECK(std::isfinite(v));
  const std::vector<Box> boxes{{0, 0, 20, 20}, {10, 5, 30, 40}};
  HeadOutputs h = g.roi_forward(f, boxes);
  CHECK(tape.value(h.class_logits).shape == std::vector<int>{2, 4});
  CHECK(tape.value(h.box_deltas).shape == std::vector<int>{2, 12});
  CHECK(tape.value(h.mask_logits).shape == std::vector<int>{2, 3, 8, 8});
  for (double v : tape.value(h.class_logits).data) CHECK(std::isfinite(v));

  const auto props = propose(a.config(), tape.value(rpn.objectness), tape.value(rpn.deltas), 64,
                             64, {50, 40, 0.7});
  CHECK(props.size() <= 40);
  for (std::size_t i = 1; i < props.size(); ++i)
    CHECK(props[i - 1].objectness_logit >= props[i].objectness_logit);
  for (const auto& p : props) {
    CHECK(p.box.w >= 1.0);
    CHECK(p.box.x >= 0.0);
    CHECK(p.box.x2() <= 64.0);
  }
}

TEST_CASE("config errors name the field") {
  DetectorConfig c = fixture::small_config();
  c.anchor_stride = 8;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("anchor_stride") != std::string::npos);
  }
  c = fixture::small_config();
  c.roi_fg_iou = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = fixture::small_config();
  CHECK(c.class_index(kShapeTriangle) == 3);
  CHECK_THROWS_AS(c.class_index(kShapeCross), ConfigError);
  CHECK_THROWS_AS(detector_config_from_json({{"no_such_key", 1}}), ConfigError);
  const DetectorConfig back = detector_config_from_json(to_json(fixture::small_config()));
  CHECK(to_json(back) == to_json(fixture::small_config()));
}

TEST_CASE("box encoding round trip") {
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    const Box ref{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(1, 30), rng.uniform(1, 30)};
    const Box tgt{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(1, 30), rng.uniform(1, 30)};
    const Box back = decode_box(ref, encode_box(ref, tgt, kRoiBoxWeights), kRoiBoxWeights);
    CHECK(back.x == doctest::Approx(tgt.x));
    CHECK(back.h == doctest::Approx(tgt.h));
  }
}

TEST_CASE("label assignment") {
  DetectorConfig c = fixture::small_config();
  const std::vector<Box> gts{{0, 0, 10, 10}};
  // IoU 0.6 at the region stage is foreground.
  const std::vector<Box> props{{0, 0, 10, 6}, {0, 0, 10, 4}, {40, 40, 5, 5}};
  Assignment a = assign_labels(props, gts, c, Stage::roi);
  CHECK(a.labels[0] == RegionLabel::foreground);
  CHECK(a.matched_gt[0] == 0);
  CHECK(a.labels[1] == RegionLabel::background);
  CHECK(a.labels[2] == RegionLabel::background);

  Assignment r = assign_labels(props, gts, c, Stage::rpn);
  CHECK(r.labels[0] == RegionLabel::foreground);  // best match for the only gt
  CHECK(r.labels[1] == RegionLabel::ignore);
  CHECK(r.labels[2] == RegionLabel::background);

  Assignment none = assign_labels(props, {}, c, Stage::roi);
  for (auto l : none.labels) CHECK(l == RegionLabel::background);

  c.sampling_mode = SamplingMode::ioa;
  // IoA 0.5 background is removed from the pool; IoA 0.8 stays.
  const std::vector<Box> bgs{{0, 5, 10, 10}, {0, -1, 4, 5}, {0, 0, 10, 3}};
  Assignment i = assign_labels(bgs, gts, c, Stage::roi);
  CHECK(i.labels[0] == RegionLabel::ignore);
  CHECK(i.labels[1] == RegionLabel::background);
  CHECK(i.ioa[1] == doctest::Approx(0.8));
  CHECK(i.labels[2] == RegionLabel::background);
  Assignment empty = assign_labels(bgs, {}, c, Stage::roi);
  Rng rng(1);
  CHECK(sample_minibatch(empty, 16, 0.25, rng).empty());
}

TEST_CASE("assignment is permutation-equivariant") {
  Rng rng(8);
  const DetectorConfig c = fixture::small_config();
  auto box = [&] {
    return Box{rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(2, 20), rng.uniform(2, 20)};
  };
  for (int t = 0; t < 30; ++t) {
    std::vector<Box> props(20), gts(4);
    for (auto& b : props) b = box();
    for (auto& b : gts) b = box();
    props[3] = gts[1];
    for (Stage s : {Stage::rpn, Stage::roi}) {
      const Assignment base = assign_labels(props, gts, c, s);
      const std::vector<int> perm = rng.permutation(20);
      std::vector<Box> pp;
      for (int i : perm) pp.push_back(props[i]);
      const Assignment p = assign_labels(pp, gts, c, s);
      for (int i = 0; i < 20; ++i) CHECK(p.labels[i] == base.labels[perm[i]]);
      std::vector<Box> rg(gts.rbegin(), gts.rend());
      const Assignment g = assign_labels(props, rg, c, s);
      CHECK(g.labels == base.labels);
    }
  }
}

TEST_CASE("minibatch sampling counts") {
  Assignment a;
  a.labels.assign(1010, RegionLabel::background);
  for (int i = 0; i < 10; ++i) a.labels[i * 100] = RegionLabel::foreground;
  Rng rng(2), again(2);
  const auto pick = sample_minibatch(a, 64, 0.25, rng);
  int fg = 0;
  for (int i : pick) fg += a.labels[i] == RegionLabel::foreground;
  CHECK(pick.size() == 64);
  CHECK(fg == 10);
  CHECK(sample_minibatch(a, 64, 0.25, again) == pick);

  Assignment many;
  many.labels.assign(100, RegionLabel::foreground);
  Rng r3(1);
  CHECK(sample_minibatch(many, 64, 0.25, r3).size() == 16);

  Assignment bg;
  bg.labels.assign(30, RegionLabel::background);
  Rng r4(1);
  const auto b = sample_minibatch(bg, 16, 0.5, r4);
  CHECK(b.size() == 16);
}

TEST_CASE("pseudo-label targets") {
  ag::Tensor logits({3, 4});
  // Row 0: class 2 at ~0.95.
  const double l = std::log(0.95 / 0.05 * 3.0);
  logits.data = {0, 0, l, 0, /**/ 0, 0, 0, 0, /**/ 0, 9, 0, 0};
  const PseudoLabelResult r = pseudo_label_targets(logits, {0, 0, 3}, 0.9);
  CHECK(r.targets == std::vector<int>{2, 0, 3});
  REQUIRE(r.relabeled.size() == 1);
  CHECK(r.relabeled[0].probability == doctest::Approx(0.95));
  CHECK(r.relabeled[0].probability > 0.9);
}

TEST_CASE("non-maximum suppression matches brute force") {
  Rng rng(10);
  for (int t = 0; t < 50; ++t) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int i = 0; i < 20; ++i) {
      boxes.push_back({rng.uniform(0, 30), rng.uniform(0, 30), rng.uniform(3, 20), rng.uniform(3, 20)});
      scores.push_back(std::round(rng.uniform() * 8) / 8);
    }
    for (double thr : {0.3, 0.5, 0.7})
      CHECK(nms_indices(boxes, scores, thr) ==
            oracle::nms(boxes, scores, thr, [](const Box& a, const Box& b) { return iou(a, b); }));
  }
}

TEST_CASE("mask target crop") {
  Mask m(16, 16);
  for (int y = 4; y < 12; ++y)
    for (int x = 4; x < 12; ++x) m.at(y, x) = 1;
  const auto full = crop_mask_target(m, {4, 4, 8, 8}, 8);
  for (double v : full) CHECK(v == 1.0);
  const auto half = crop_mask_target(m, {0, 4, 8, 8}, 8);
  double total = 0;
  for (double v : half) total += v;
  CHECK(total == 32.0);
}

TEST_CASE("losses are finite, empty sums are zero, mask gradient needs foreground") {
  const Detector det = fixture::small_detector(5);
  const auto samples = fixture::shape_samples(2, 32, 3);
  for (const auto& s : samples) {
    const ImagePlan plan =
        fixture::plan_for(det, det.config(), s.image, s.annotations, "plan.real", 1, s.image_id);
    ag::Tape tape;
    DetectorGraph g(det, tape, true);
    ag::Var f = g.features(s.image);
    RpnOutputs rpn = g.propose_logits(f);
    const LossTerms terms = image_losses(g, f, rpn, plan, LossSelection::all());
    for (const auto& t : terms.terms) {
      REQUIRE(t);
      CHECK(std::isfinite(tape.value(*t).data[0]));
    }
  }

  // Background-only image: no foreground regions, so no mask loss.
  const Image blank(32, 32, 3, 0.5);
  const std::vector<InstanceAnnotation> none;
  const ImagePlan plan = fixture::plan_for(det, det.config(), blank, none, "plan.real", 1, 99);
  CHECK(plan.roi_fg_rows.empty());
  const auto lg = fixture::loss_under_plan(det, blank, plan, LossSelection::all(), true);
  const auto mask_only = fixture::loss_under_plan(det, blank, plan, LossSelection::mask_only(), true);
  CHECK(mask_only.value == 0.0);
  for (std::size_t i = 0; i < det.parameters().size(); ++i) {
    if (parameter_group(det.parameters()[i].name) != ParameterGroup::mask_head) continue;
    for (std::size_t k = 0; k < det.parameters()[i].value.numel(); ++k)
      CHECK(fixture::grad_at(lg.grads, i, k) == 0.0);
  }
}

TEST_CASE("perfect logits give near-zero classification loss") {
  ag::Tape t;
  ag::Tensor x({2, 3});
  x.data = {50, 0, 0, 0, 0, 50};
  CHECK(t.value(ag::softmax_cross_entropy_sum(t, t.constant(x), {0, 2})).data[0] < 1e-12);
}

TEST_CASE("loss gradients on a micro-batch match central differences") {
  Detector det = fixture::small_detector(7);
  const auto samples = fixture::shape_samples(2, 32, 11);
  std::vector<ImagePlan> plans;
  for (const auto& s : samples)
    plans.push_back(fixture::plan_for(det, det.config(), s.image, s.annotations, "plan.real", 2, s.image_id));
  auto total = [&](const Detector& d, bool grads) {
    fixture::LossAndGrads sum;
    sum.grads.resize(d.parameters().size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      auto r = fixture::loss_under_plan(d, samples[i].image, plans[i], LossSelection::all(), grads);
      sum.value += r.value;
      for (std::size_t p = 0; p < r.grads.size(); ++p) {
        if (r.grads[p].data.empty()) continue;
        if (sum.grads[p].data.empty()) sum.grads[p] = ag::Tensor(r.grads[p].shape);
        for (std::size_t k = 0; k < r.grads[p].numel(); ++k) sum.grads[p].data[k] += r.grads[p].data[k];
      }
    }
    return sum;
  };
  const auto base = total(det, true);
  Rng rng(3);
  for (int t = 0; t < 12; ++t) {
    const auto p = static_cast<std::size_t>(rng.uniform_int(0, det.parameters().size() - 1));
    const auto k = static_cast<std::size_t>(rng.uniform_int(0, det.parameters()[p].value.numel() - 1));
    double& w = det.parameters()[p].value.data[k];
    const double w0 = w, eps = 1e-6;
    w = w0 + eps;
    const double up = total(det, false).value;
    w = w0 - eps;
    const double down = total(det, false).value;
    w = w0;
    const double fd = (up - down) / (2 * eps);
    CHECK_MESSAGE(fixture::rel_error(fixture::grad_at(base.grads, p, k), fd, 1e-8) < 1e-3,
                  det.parameters()[p].name);
  }
}

TEST_CASE("checkpoint round trip") {
  const Detector det = fixture::small_detector(9);
  const std::string bytes = serialize_checkpoint(det);
  CHECK(bytes.substr(0, 8) == "LDETCKPT");
  const Detector back = deserialize_checkpoint(bytes);
  CHECK(to_json(back.config()) == to_json(det.config()));
  REQUIRE(back.parameters().size() == det.parameters().size());
  for (std::size_t i = 0; i < det.parameters().size(); ++i) {
    CHECK(back.parameters()[i].name == det.parameters()[i].name);
    CHECK(back.parameters()[i].value == det.parameters()[i].value);
  }
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK_THROWS(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)));
  CHECK_THROWS(deserialize_checkpoint("garbage!"));
  CHECK_THROWS(load_checkpoint("/nonexistent/ckpt.ldet"));
}
