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

#include "ldet/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "ldet/checkpoint.hpp"
#include "ldet/image_io.hpp"
#include "ldet/random.hpp"

namespace ldet {

using nlohmann::json;

namespace {

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : "; ") + p;
  return out;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

void reject_unknown(const json& j, const std::string& section,
                    std::initializer_list<const char*> known, std::vector<std::string>& problems) {
  if (!j.is_object()) {
    problems.push_back("'" + section + "' must be an object");
    return;
  }
  for (const auto& [key, v] : j.items())
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      problems.push_back("unknown key '" + (section.empty() ? key : section + "." + key) + "'");
}

ShapesConfig shapes_from_json(const json& j) {
  ShapesConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "num_images") c.num_images = v.get<int>();
    else if (key == "image_size") c.image_size = v.get<int>();
    else if (key == "min_objects") c.min_objects = v.get<int>();
    else if (key == "max_objects") c.max_objects = v.get<int>();
    else if (key == "min_extent") c.min_extent = v.get<double>();
    else if (key == "max_extent") c.max_extent = v.get<double>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else throw ValidationError({"unknown key 'data.shapes." + key + "'"});
  }
  return c;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

ValidationError::ValidationError(std::vector<std::string> problems)
    : std::runtime_error("invalid configuration: " + join(problems)),
      problems_(std::move(problems)) {}

BackEraseConfig backerase_config_from_json(const json& j) {
  BackEraseConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "scale") c.scale = v.get<double>();
    else if (key == "pre_smooth_sigma") c.pre_smooth_sigma = v.get<double>();
    else if (key == "mask_smooth_sigma") c.mask_smooth_sigma = v.get<double>();
    else if (key == "post_smooth_sigma") c.post_smooth_sigma = v.get<double>();
    else if (key == "background_source") {
      const auto s = v.get<std::string>();
      if (s == "self_patch") c.background_source = BackgroundSource::self_patch;
      else if (s == "external_corpus") c.background_source = BackgroundSource::external_corpus;
      else throw AugmentationError("backerase.background_source must be self_patch or external_corpus");
    } else if (key == "external_patch_size") c.external_patch_size = v.get<int>();
    else if (key == "max_crop_retries") c.max_crop_retries = v.get<int>();
    else if (key == "overlap_budget") c.overlap_budget = v.get<long>();
    else if (key == "upscale_kernel") {
      const auto s = v.get<std::string>();
      if (s == "bilinear") c.upscale_kernel = UpscaleKernel::bilinear;
      else if (s == "nearest") c.upscale_kernel = UpscaleKernel::nearest;
      else throw AugmentationError("backerase.upscale_kernel must be bilinear or nearest");
    } else if (key == "downsample_kernel") {
      const auto s = v.get<std::string>();
      if (s == "area") c.downsample_kernel = DownsampleKernel::area;
      else if (s == "nearest") c.downsample_kernel = DownsampleKernel::nearest;
      else throw AugmentationError("backerase.downsample_kernel must be area or nearest");
    } else if (key == "empty_policy") {
      const auto s = v.get<std::string>();
      if (s == "error") c.empty_policy = EmptyPolicy::error;
      else if (s == "pure_background") c.empty_policy = EmptyPolicy::pure_background;
      else throw AugmentationError("backerase.empty_policy must be error or pure_background");
    } else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else throw AugmentationError("unknown key 'backerase." + key + "'");
  }
  c.validate();
  return c;
}

json to_json(const BackEraseConfig& c) {
  return {{"scale", c.scale},
          {"pre_smooth_sigma", c.pre_smooth_sigma},
          {"mask_smooth_sigma", c.mask_smooth_sigma},
          {"post_smooth_sigma", c.post_smooth_sigma},
          {"background_source",
           c.background_source == BackgroundSource::self_patch ? "self_patch" : "external_corpus"},
          {"external_patch_size", c.external_patch_size},
          {"max_crop_retries", c.max_crop_retries},
          {"overlap_budget", c.overlap_budget},
          {"upscale_kernel", c.upscale_kernel == UpscaleKernel::bilinear ? "bilinear" : "nearest"},
          {"downsample_kernel", c.downsample_kernel == DownsampleKernel::area ? "area" : "nearest"},
          {"empty_policy", c.empty_policy == EmptyPolicy::error ? "error" : "pure_background"},
          {"seed", c.seed}};
}

void apply_override(json& document, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ValidationError({"override '" + assignment + "' must look like key=value"});
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &document;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ValidationError({"override key '" + path + "' has an empty component"});
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

ExperimentConfig parse_experiment_config(const json& doc) {
  std::vector<std::string> problems;
  ExperimentConfig cfg;
  cfg.document = doc;
  if (!doc.is_object()) throw ValidationError({"configuration must be a JSON object"});
  reject_unknown(doc, "",
                 {"seed", "output_dir", "data", "backerase", "detector", "train", "inference", "eval"},
                 problems);

  auto section = [&](const char* name) { return doc.contains(name) ? doc.at(name) : json::object(); };
  auto guarded = [&](const std::string& where, auto&& fn) {
    try {
      fn();
    } catch (const ValidationError& e) {
      problems.insert(problems.end(), e.problems().begin(), e.problems().end());
    } catch (const json::exception& e) {
      problems.push_back("bad value in '" + where + "': " + e.what());
    } catch (const std::exception& e) {
      problems.push_back(e.what());
    }
  };

  if (!doc.contains("seed")) problems.push_back("missing key 'seed' (the seed must be set explicitly)");
  else guarded("seed", [&] { cfg.seed = doc.at("seed").get<std::uint64_t>(); });
  if (!doc.contains("output_dir")) problems.push_back("missing key 'output_dir'");
  else guarded("output_dir", [&] { cfg.output_dir = doc.at("output_dir").get<std::string>(); });

  const json data = section("data");
  reject_unknown(data, "data",
                 {"train_annotations", "train_images", "eval_annotations", "eval_images", "shapes",
                  "shapes_train_images", "seen_ids", "unseen_ids", "class_agnostic",
                  "background_corpus"},
                 problems);
  guarded("data", [&] {
    auto& d = cfg.data;
    if (data.contains("shapes")) {
      d.shapes = shapes_from_json(data.at("shapes"));
      d.shapes_train_images = get_or<std::size_t>(data, "shapes_train_images", 320);
    } else {
      for (const char* key : {"train_annotations", "train_images"})
        if (!data.contains(key)) problems.push_back(std::string("missing key 'data.") + key + "'");
      d.train_annotations = get_or<std::string>(data, "train_annotations", "");
      d.train_images = get_or<std::string>(data, "train_images", "");
      d.eval_annotations = get_or<std::string>(data, "eval_annotations", d.train_annotations.string());
      d.eval_images = get_or<std::string>(data, "eval_images", d.train_images.string());
      for (const auto& [key, p] : {std::pair{"train_annotations", d.train_annotations},
                                   {"train_images", d.train_images},
                                   {"eval_annotations", d.eval_annotations},
                                   {"eval_images", d.eval_images}})
        if (!p.empty() && !std::filesystem::exists(p))
          problems.push_back(std::string("data.") + key + ": path does not exist: " + p.string());
    }
    if (data.contains("seen_ids") || data.contains("unseen_ids")) {
      for (auto id : get_or<std::vector<std::int64_t>>(data, "seen_ids", {})) d.split.seen_ids.insert(id);
      for (auto id : get_or<std::vector<std::int64_t>>(data, "unseen_ids", {}))
        d.split.unseen_ids.insert(id);
    } else if (d.shapes) {
      d.split = shapes_split();
    } else {
      problems.push_back("missing key 'data.seen_ids'");
    }
    d.split.validate();
    if (d.split.seen_ids.empty()) problems.push_back("data.seen_ids must not be empty");
    d.class_agnostic = get_or<bool>(data, "class_agnostic", false);
    for (const auto& p : get_or<std::vector<std::string>>(data, "background_corpus", {})) {
      if (!std::filesystem::exists(p))
        problems.push_back("data.background_corpus: path does not exist: " + p);
      d.background_corpus.emplace_back(p);
    }
  });

  guarded("backerase", [&] {
    json be = section("backerase");
    if (!be.contains("seed")) be["seed"] = derive_seed(cfg.seed, "backerase", 0);
    cfg.backerase = backerase_config_from_json(be);
    if (cfg.backerase.background_source == BackgroundSource::external_corpus &&
        cfg.data.background_corpus.empty())
      problems.push_back("backerase.background_source is external_corpus but data.background_corpus is empty");
  });

  guarded("detector", [&] {
    const json dj = section("detector");
    cfg.detector = detector_config_from_json(dj);
    if (dj.contains("num_classes") || dj.contains("class_ids"))
      problems.push_back("detector.num_classes and detector.class_ids are derived from data.seen_ids");
    if (cfg.data.class_agnostic) {
      cfg.detector.class_ids = {1};
    } else {
      cfg.detector.class_ids.assign(cfg.data.split.seen_ids.begin(), cfg.data.split.seen_ids.end());
    }
    cfg.detector.num_classes = static_cast<int>(cfg.detector.class_ids.size());
    if (!dj.contains("parameter_seed")) cfg.detector.parameter_seed = derive_seed(cfg.seed, "detector", 0);
    if (cfg.detector.num_classes > 0) cfg.detector.validate();
  });

  const json tr = section("train");
  reject_unknown(tr, "train",
                 {"variant", "ioa_sampling", "pseudo_labeling", "iterations", "lr", "batch_size",
                  "momentum", "weight_decay", "eval_every", "keep_unannotated", "record_wallclock"},
                 problems);
  guarded("train", [&] {
    cfg.mode.variant = parse_train_variant(get_or<std::string>(tr, "variant", "decoupled"));
    cfg.mode.ioa_sampling = get_or<bool>(tr, "ioa_sampling", false);
    cfg.mode.pseudo_labeling = get_or<bool>(tr, "pseudo_labeling", false);
    cfg.mode.validate();
    auto& s = cfg.schedule;
    s.iterations = get_or<int>(tr, "iterations", 1000);
    s.lr = get_or<double>(tr, "lr", 0.01);
    s.batch_size = get_or<int>(tr, "batch_size", 2);
    s.momentum = get_or<double>(tr, "momentum", 0.9);
    s.weight_decay = get_or<double>(tr, "weight_decay", 1e-4);
    s.eval_every = get_or<int>(tr, "eval_every", 0);
    s.keep_unannotated = get_or<bool>(tr, "keep_unannotated", false);
    s.record_wallclock = get_or<bool>(tr, "record_wallclock", true);
    s.seed = derive_seed(cfg.seed, "train", 0);
    if (s.iterations < 0) problems.push_back("train.iterations must be non-negative");
    if (s.batch_size <= 0) problems.push_back("train.batch_size must be positive");
    if (!(s.lr >= 0.0) || !std::isfinite(s.lr)) problems.push_back("train.lr must be a finite non-negative number");
    if (s.eval_every < 0) problems.push_back("train.eval_every must be non-negative");
  });

  guarded("inference", [&] { cfg.inference = inference_config_from_json(section("inference")); });
  guarded("eval", [&] { cfg.eval = eval_config_from_json(section("eval")); });

  if (!problems.empty()) throw ValidationError(problems);
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ValidationError({"cannot read config file " + path.string()});
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ValidationError({"config file " + path.string() + " is not valid JSON"});
  for (const auto& o : overrides) apply_override(doc, o);
  return parse_experiment_config(doc);
}

ExperimentData load_experiment_data(const ExperimentConfig& config) {
  const auto& d = config.data;
  Dataset train_all, eval_all;
  if (d.shapes) {
    auto [tr, ev] = split_images(generate_shapes(*d.shapes), d.shapes_train_images);
    train_all = std::move(tr);
    eval_all = std::move(ev);
  } else {
    train_all = load_coco(d.train_annotations, d.train_images);
    eval_all = d.eval_annotations == d.train_annotations && d.eval_images == d.train_images
                   ? train_all
                   : load_coco(d.eval_annotations, d.eval_images);
  }
  ExperimentData out;
  out.train = apply_split(train_all, d.split, SplitMode::train_seen_only);
  if (d.class_agnostic) out.train = to_class_agnostic(out.train, 1);
  out.eval = apply_split(eval_all, d.split, SplitMode::all);
  for (const auto& p : d.background_corpus) out.corpus.push_back(read_image(p));
  return out;
}

Detector make_detector(const ExperimentConfig& config) {
  return build_detector(config.detector, config.detector.backbone);
}

SynthesizeSummary cmd_synthesize(const ExperimentConfig& config, std::optional<std::size_t> limit,
                                 const std::filesystem::path& out) {
  const ExperimentData data = load_experiment_data(config);
  std::filesystem::create_directories(out / "images");
  std::vector<ImageRecord> records;
  std::string provenance;
  const std::size_t n = limit.value_or(data.train.size());
  for (std::size_t i = 0; i < data.train.size() && records.size() < n; ++i) {
    const ImageSample sample = data.train.sample(i);
    if (sample.annotations.empty() && config.backerase.empty_policy == EmptyPolicy::error) continue;
    const std::uint64_t seed = derive_seed(config.backerase.seed, "synthesize",
                                           static_cast<std::uint64_t>(sample.image_id));
    Rng rng(seed);
    const SynthesizedSample s =
        config.backerase.background_source == BackgroundSource::external_corpus
            ? synthesize_external(sample, data.corpus, config.backerase, rng)
            : synthesize(sample, config.backerase, rng);
    const ImageRecord& rec = data.train.record(i);
    write_png(out / "images" / rec.file_name, s.image);
    records.push_back(rec);
    const auto& r = s.background_rect;
    provenance += json{{"image_id", s.source_id},
                       {"file_name", rec.file_name},
                       {"background_rect", {r.x, r.y, r.width, r.height}},
                       {"corpus_index", s.corpus_index},
                       {"seed", seed}}
                      .dump() +
                  "\n";
  }
  write_text(out / "annotations.json", to_coco_json(data.train.with_records(records)));
  write_text(out / "provenance.jsonl", provenance);
  return {records.size()};
}

void cmd_train(const ExperimentConfig& config) {
  const ExperimentData data = load_experiment_data(config);
  if (data.train.empty()) throw TrainingError("training dataset is empty after split filtering");
  std::filesystem::create_directories(config.output_dir);
  write_text(config.output_dir / "config.json", config.document.dump(2) + "\n");

  Detector detector = make_detector(config);
  std::ofstream metrics(config.output_dir / "metrics.jsonl", std::ios::binary);
  if (!metrics) throw std::runtime_error("cannot write " + (config.output_dir / "metrics.jsonl").string());

  TrainCallbacks cb;
  cb.on_record = [&](const json& rec) { metrics << rec.dump() << "\n" << std::flush; };
  if (config.schedule.eval_every > 0)
    cb.evaluate = [&](const Detector& det, int) {
      const EvalReport r = evaluate_detector(det, data.eval, config.inference, config.eval);
      return r.to_json(config.eval);
    };
  train(detector, data.train, config.backerase, config.mode, config.schedule, cb, data.corpus);
  save_checkpoint(config.output_dir / "checkpoint.ldet", detector);
}

EvalReport cmd_evaluate(const ExperimentConfig& config,
                        const std::optional<std::filesystem::path>& checkpoint,
                        const std::optional<std::filesystem::path>& detections) {
  if (checkpoint.has_value() == detections.has_value())
    throw ValidationError({"evaluate needs exactly one of --checkpoint or --detections"});
  const ExperimentData data = load_experiment_data(config);
  std::filesystem::create_directories(config.output_dir);
  EvalReport report;
  if (checkpoint) {
    if (!std::filesystem::exists(*checkpoint))
      throw std::runtime_error("checkpoint not found: " + checkpoint->string());
    const Detector det = load_checkpoint(*checkpoint);
    DetectionMap dets;
    report = evaluate_detector(det, data.eval, config.inference, config.eval, &dets);
    save_detections(config.output_dir / "detections.json", dets);
  } else {
    if (!std::filesystem::exists(*detections))
      throw std::runtime_error("detections file not found: " + detections->string());
    report = evaluate(load_detections(*detections), data.eval, config.eval);
  }
  write_text(config.output_dir / "eval_report.json", report.to_json(config.eval).dump(2) + "\n");
  return report;
}

namespace {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
  cv::Scalar color;
};

void draw_plot(const std::vector<Series>& series, const std::string& title, const std::string& ylabel,
               const std::filesystem::path& path) {
  const int w = 720, h = 440, left = 70, right = 20, top = 40, bottom = 50;
  cv::Mat canvas(h, w, CV_8UC3, cv::Scalar(255, 255, 255));
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1e-9 + std::abs(y0) * 0.1 + (y0 == 0 ? 1 : 0);
  auto px = [&](double x, double y) {
    return cv::Point(left + static_cast<int>((x - x0) / (x1 - x0) * (w - left - right)),
                     h - bottom - static_cast<int>((y - y0) / (y1 - y0) * (h - top - bottom)));
  };
  const cv::Scalar black(0, 0, 0), grey(200, 200, 200);
  cv::rectangle(canvas, cv::Point(left, top), cv::Point(w - right, h - bottom), black, 1);
  for (int t = 0; t <= 4; ++t) {
    const double yv = y0 + (y1 - y0) * t / 4.0, xv = x0 + (x1 - x0) * t / 4.0;
    const cv::Point py = px(x0, yv), pxx = px(xv, y0);
    cv::line(canvas, cv::Point(left, py.y), cv::Point(w - right, py.y), grey, 1);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", yv);
    cv::putText(canvas, buf, cv::Point(5, py.y + 4), cv::FONT_HERSHEY_SIMPLEX, 0.4, black, 1);
    std::snprintf(buf, sizeof(buf), "%.0f", xv);
    cv::putText(canvas, buf, cv::Point(pxx.x - 10, h - bottom + 18), cv::FONT_HERSHEY_SIMPLEX, 0.4,
                black, 1);
  }
  cv::putText(canvas, title, cv::Point(left, 25), cv::FONT_HERSHEY_SIMPLEX, 0.6, black, 1);
  cv::putText(canvas, "iteration", cv::Point(w / 2 - 30, h - 12), cv::FONT_HERSHEY_SIMPLEX, 0.45,
              black, 1);
  cv::putText(canvas, ylabel, cv::Point(5, top - 8), cv::FONT_HERSHEY_SIMPLEX, 0.45, black, 1);
  int legend_y = top + 18;
  for (const auto& s : series) {
    std::vector<cv::Point> pts;
    for (auto [x, y] : s.points) pts.push_back(px(x, y));
    if (pts.size() == 1) cv::circle(canvas, pts[0], 3, s.color, cv::FILLED);
    else cv::polylines(canvas, pts, false, s.color, 1, cv::LINE_AA);
    cv::line(canvas, cv::Point(w - right - 150, legend_y - 4), cv::Point(w - right - 125, legend_y - 4),
             s.color, 2);
    cv::putText(canvas, s.label, cv::Point(w - right - 120, legend_y), cv::FONT_HERSHEY_SIMPLEX, 0.4,
                black, 1);
    legend_y += 16;
  }
  if (!cv::imwrite(path.string(), canvas)) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

std::vector<std::filesystem::path> cmd_plot(const std::filesystem::path& metrics,
                                            const std::filesystem::path& out) {
  std::ifstream in(metrics);
  if (!in) throw std::runtime_error("cannot read metrics log " + metrics.string());
  std::map<std::string, Series> losses;
  Series ar{"AR@100", {}, cv::Scalar(180, 60, 20)};
  std::string line;
  const std::vector<cv::Scalar> palette{{0, 0, 0},     {200, 80, 0},  {0, 140, 0},  {0, 0, 200},
                                        {160, 0, 160}, {0, 140, 200}, {120, 120, 0}, {90, 90, 90},
                                        {0, 90, 180},  {180, 0, 90},   {60, 160, 60}};
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json rec = json::parse(line);
    const double step = rec.at("step").get<double>();
    if (rec.contains("losses")) {
      for (const auto& [key, v] : rec.at("losses").items()) {
        auto& s = losses[key];
        if (s.label.empty()) s.label = key;
        s.points.emplace_back(step, v.get<double>());
      }
    }
    if (rec.contains("eval") && rec.at("eval").contains("ar") && rec.at("eval").at("ar").contains("100"))
      ar.points.emplace_back(step, rec.at("eval").at("ar").at("100").get<double>());
  }
  std::filesystem::create_directories(out);
  std::vector<std::filesystem::path> written;
  if (!losses.empty()) {
    std::vector<Series> series;
    for (auto& [key, s] : losses) {
      s.color = palette[series.size() % palette.size()];
      series.push_back(s);
    }
    draw_plot(series, "training loss", "loss", out / "loss_curve.png");
    written.push_back(out / "loss_curve.png");
  }
  if (!ar.points.empty()) {
    draw_plot({ar}, "unseen-class recall", "AR@100", out / "ar_curve.png");
    written.push_back(out / "ar_curve.png");
  }
  return written;
}

void cmd_generate_shapes(const ShapesConfig& config, std::size_t train_images,
                         const std::filesystem::path& out) {
  auto [train, eval] = split_images(generate_shapes(config), train_images);
  write_dataset(train, out / "train");
  write_dataset(eval, out / "eval");
}

}  // namespace ldet
