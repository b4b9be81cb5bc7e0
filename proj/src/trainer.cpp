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

#include "ldet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <map>

#include "ldet/random.hpp"

namespace ldet {

TrainVariant parse_train_variant(const std::string& name) {
  if (name == "plain_real") return TrainVariant::plain_real;
  if (name == "synth_only") return TrainVariant::synth_only;
  if (name == "combined") return TrainVariant::combined;
  if (name == "decoupled") return TrainVariant::decoupled;
  throw TrainingError("unknown training variant '" + name +
                      "' (expected plain_real, synth_only, combined or decoupled)");
}

const char* train_variant_name(TrainVariant v) {
  switch (v) {
    case TrainVariant::plain_real: return "plain_real";
    case TrainVariant::synth_only: return "synth_only";
    case TrainVariant::combined: return "combined";
    case TrainVariant::decoupled: return "decoupled";
  }
  return "unknown";
}

void TrainMode::validate() const {
  if ((ioa_sampling || pseudo_labeling) && variant != TrainVariant::plain_real)
    throw TrainingError("ioa_sampling and pseudo_labeling require the plain_real variant");
}

const char* domain_name(Domain d) { return d == Domain::real ? "real" : "synth"; }

bool LossReport::has(LossKey key, Domain domain) const {
  for (const auto& e : entries)
    if (e.key == key && e.domain == domain) return true;
  return false;
}

double LossReport::value(LossKey key, Domain domain) const {
  for (const auto& e : entries)
    if (e.key == key && e.domain == domain) return e.value;
  throw std::out_of_range(std::string("no loss ") + loss_key_name(key) + "/" + domain_name(domain));
}

nlohmann::json LossReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& e : entries)
    j[std::string(loss_key_name(e.key)) + "/" + domain_name(e.domain)] = e.value;
  j["total"] = total;
  return j;
}

ImageTargets make_targets(const DetectorConfig& config,
                          const std::vector<InstanceAnnotation>& annotations) {
  ImageTargets t;
  for (const auto& a : annotations) {
    t.boxes.push_back(a.box);
    t.classes.push_back(config.class_index(a.category_id));
    t.masks.push_back(a.mask);
  }
  return t;
}

namespace {

DetectorConfig effective_config(const DetectorConfig& base, const TrainMode& mode) {
  DetectorConfig c = base;
  if (mode.ioa_sampling) c.sampling_mode = SamplingMode::ioa;
  if (mode.pseudo_labeling) c.pseudo_label = true;
  return c;
}

void add_into(std::vector<ag::Tensor>& acc, const std::vector<ag::Tensor>& g) {
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i].data.empty()) continue;
    if (acc[i].data.empty()) {
      acc[i] = g[i];
      continue;
    }
    for (std::size_t k = 0; k < g[i].data.size(); ++k) acc[i].data[k] += g[i].data[k];
  }
}

void append_trace(SamplingTrace& into, const SamplingTrace& t) {
  into.rpn_background_ioa.insert(into.rpn_background_ioa.end(), t.rpn_background_ioa.begin(),
                                 t.rpn_background_ioa.end());
  into.roi_background_ioa.insert(into.roi_background_ioa.end(), t.roi_background_ioa.begin(),
                                 t.roi_background_ioa.end());
  into.pseudo_labels.insert(into.pseudo_labels.end(), t.pseudo_labels.begin(),
                            t.pseudo_labels.end());
}

}  // namespace

StepOutput domain_gradients(const Detector& detector, std::span<const TrainImage> images,
                            Domain domain, const LossSelection& selection, const TrainMode& mode,
                            std::uint64_t seed) {
  StepOutput out;
  out.gradients.resize(detector.parameters().size());
  if (images.empty() || !selection.any()) return out;

  const DetectorConfig cfg = effective_config(detector.config(), mode);
  LossSelection sel = selection;
  sel.pseudo_label = sel.pseudo_label || mode.pseudo_labeling;
  const double inv_n = 1.0 / static_cast<double>(images.size());
  std::array<double, kNumLossKeys> sums{};

  for (const TrainImage& item : images) {
    ag::Tape tape;
    DetectorGraph graph(detector, tape, true);
    ag::Var feat = graph.features(*item.image);
    RpnOutputs rpn = graph.propose_logits(feat);
    Rng rng(derive_seed(seed, domain == Domain::real ? "plan.real" : "plan.synth",
                        static_cast<std::uint64_t>(item.id)));
    ImagePlan plan = plan_image(cfg, tape.value(rpn.objectness), tape.value(rpn.deltas),
                                item.image->height, item.image->width,
                                make_targets(detector.config(), *item.annotations), rng);
    append_trace(out.trace, plan.trace);
    LossTerms terms = image_losses(graph, feat, rpn, plan, sel, &out.trace);

    std::vector<ag::Var> parts;
    for (int k = 0; k < kNumLossKeys; ++k) {
      if (!terms.terms[k]) continue;
      sums[k] += tape.value(*terms.terms[k]).data[0];
      parts.push_back(*terms.terms[k]);
    }
    ag::Var root = ag::scale(tape, ag::sum_scalars(tape, parts), inv_n);
    if (tape.requires_grad(root)) {
      tape.backward(root);
      tape.accumulate_parameter_grads(out.gradients);
    }
  }

  for (int k = 0; k < kNumLossKeys; ++k) {
    if (!sel.enabled[k]) continue;
    const double v = sums[k] * inv_n;
    out.report.entries.push_back({static_cast<LossKey>(k), domain, v});
    out.report.total += v;
  }
  return out;
}

StepOutput compute_step(const Detector& detector, std::span<const ImageSample> real_batch,
                        std::span<const SynthesizedSample> synth_batch, const TrainMode& mode,
                        std::uint64_t seed) {
  mode.validate();
  const bool needs_real = mode.variant != TrainVariant::synth_only;
  const bool needs_synth = mode.variant != TrainVariant::plain_real;
  if (needs_real && real_batch.empty())
    throw TrainingError(std::string(train_variant_name(mode.variant)) + " needs real images");
  if (needs_synth && synth_batch.empty())
    throw TrainingError(std::string(train_variant_name(mode.variant)) +
                        " needs synthesized images");

  std::vector<TrainImage> real, synth;
  for (const auto& s : real_batch) real.push_back({s.image_id, &s.image, &s.annotations});
  for (const auto& s : synth_batch) synth.push_back({s.source_id, &s.image, &s.annotations});

  LossSelection real_sel{}, synth_sel{};
  switch (mode.variant) {
    case TrainVariant::plain_real: real_sel = LossSelection::all(); break;
    case TrainVariant::synth_only: synth_sel = LossSelection::all(); break;
    case TrainVariant::combined:
      real_sel = LossSelection::all();
      synth_sel = LossSelection::all();
      break;
    case TrainVariant::decoupled:
      real_sel = LossSelection::mask_only();
      synth_sel = LossSelection::detection();
      break;
  }

  StepOutput out;
  out.gradients.resize(detector.parameters().size());
  for (Domain d : {Domain::real, Domain::synth}) {
    const auto& items = d == Domain::real ? real : synth;
    const auto& sel = d == Domain::real ? real_sel : synth_sel;
    if (!sel.any()) continue;
    StepOutput part = domain_gradients(detector, items, d, sel, mode, seed);
    add_into(out.gradients, part.gradients);
    append_trace(out.trace, part.trace);
    out.report.entries.insert(out.report.entries.end(), part.report.entries.begin(),
                              part.report.entries.end());
    out.report.total += part.report.total;
  }
  return out;
}

void sgd_update(Detector& detector, const std::vector<ag::Tensor>& gradients,
                OptimizerState& state, double lr) {
  auto& params = detector.parameters();
  if (gradients.size() != params.size())
    throw std::invalid_argument("gradient count does not match parameters");
  if (state.velocity.size() != params.size()) state.velocity.assign(params.size(), {});
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].value.data;
    auto& v = state.velocity[i];
    const auto& g = gradients[i];
    if (g.data.empty() && v.data.empty() && state.weight_decay == 0.0) continue;
    if (v.data.empty()) v = ag::Tensor(params[i].value.shape, 0.0);
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = (g.data.empty() ? 0.0 : g.data[k]) + state.weight_decay * w[k];
      v.data[k] = state.momentum * v.data[k] + gk;
      w[k] -= lr * v.data[k];
    }
  }
}

LossReport training_step(Detector& detector, std::span<const ImageSample> real_batch,
                         std::span<const SynthesizedSample> synth_batch, const TrainMode& mode,
                         OptimizerState& optimizer, double lr, std::uint64_t seed,
                         SamplingTrace* trace) {
  StepOutput out = compute_step(detector, real_batch, synth_batch, mode, seed);
  if (trace) *trace = std::move(out.trace);
  sgd_update(detector, out.gradients, optimizer, lr);
  return out.report;
}

TrainResult train(Detector& detector, const Dataset& dataset, const BackEraseConfig& backerase,
                  const TrainMode& mode, const Schedule& schedule,
                  const TrainCallbacks& callbacks, std::span<const Image> corpus) {
  mode.validate();
  backerase.validate();
  if (schedule.iterations < 0) throw TrainingError("iterations must be non-negative");
  if (schedule.batch_size <= 0) throw TrainingError("batch_size must be positive");

  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    if (schedule.keep_unannotated || !dataset.record(i).annotations.empty()) pool.push_back(i);
  if (pool.empty() && schedule.iterations > 0)
    throw TrainingError("no training images with annotations");

  const bool needs_real = mode.variant != TrainVariant::synth_only;
  const bool needs_synth = mode.variant != TrainVariant::plain_real;
  OptimizerState opt{schedule.momentum, schedule.weight_decay, {}};
  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  std::map<std::uint64_t, std::vector<int>> epochs;

  auto emit = [&](nlohmann::json rec) {
    if (callbacks.on_record) callbacks.on_record(rec);
    result.records.push_back(std::move(rec));
  };

  for (int step = 0; step < schedule.iterations; ++step) {
    std::vector<ImageSample> real;
    std::vector<SynthesizedSample> synth;
    for (int b = 0; b < schedule.batch_size; ++b) {
      const std::uint64_t pos = static_cast<std::uint64_t>(step) * schedule.batch_size + b;
      const std::uint64_t epoch = pos / pool.size();
      auto it = epochs.find(epoch);
      if (it == epochs.end()) {
        epochs.clear();
        Rng rng(derive_seed(schedule.seed, "epoch", epoch));
        it = epochs.emplace(epoch, rng.permutation(static_cast<int>(pool.size()))).first;
      }
      ImageSample sample = dataset.sample(pool[it->second[pos % pool.size()]]);
      if (needs_synth) {
        Rng rng(derive_seed(derive_seed(schedule.seed ^ backerase.seed, "backerase", pos), "image",
                            static_cast<std::uint64_t>(sample.image_id)));
        synth.push_back(backerase.background_source == BackgroundSource::external_corpus
                            ? synthesize_external(sample, corpus, backerase, rng)
                            : synthesize(sample, backerase, rng));
      }
      if (needs_real) real.push_back(std::move(sample));
    }

    LossReport report;
    SamplingTrace trace;
    try {
      report = training_step(detector, real, synth, mode, opt, schedule.lr,
                             derive_seed(schedule.seed, "step", static_cast<std::uint64_t>(step)),
                             &trace);
    } catch (const LossError& e) {
      throw TrainingError("step " + std::to_string(step) + ": non-finite loss '" + e.key() + "'");
    }
    if (!std::isfinite(report.total))
      throw TrainingError("step " + std::to_string(step) + ": non-finite loss 'total'");
    if (callbacks.on_trace) callbacks.on_trace(step, trace);
    result.total_losses.push_back(report.total);

    nlohmann::json rec{{"step", step}, {"losses", report.to_json()}, {"lr", schedule.lr}};
    if (schedule.record_wallclock)
      rec["wallclock"] =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    emit(std::move(rec));

    const bool last = step + 1 == schedule.iterations;
    if (callbacks.evaluate &&
        ((schedule.eval_every > 0 && (step + 1) % schedule.eval_every == 0) || last))
      emit(nlohmann::json{{"step", step}, {"eval", callbacks.evaluate(detector, step)}});
  }
  return result;
}

}  // namespace ldet
