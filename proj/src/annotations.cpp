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

#include "ldet/annotations.hpp"

#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "ldet/image_io.hpp"

namespace ldet {

using json = nlohmann::json;

namespace {

const json& require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    throw DatasetError("malformed COCO json: missing key '" + std::string(key) + "' in " + where);
  return obj.at(key);
}

template <typename T>
T require_as(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw DatasetError("malformed COCO json: bad value for key '" + std::string(key) + "' in " +
                       where);
  }
}

Segmentation parse_segmentation(const json& seg, std::int64_t ann_id, int height, int width) {
  const std::string where = "annotation " + std::to_string(ann_id);
  if (seg.is_array()) {
    std::vector<Polygon> parts;
    for (const json& part : seg) {
      if (!part.is_array())
        throw DatasetError("unsupported segmentation encoding for annotation " +
                           std::to_string(ann_id));
      Polygon p;
      for (const json& v : part) {
        if (!v.is_number())
          throw DatasetError("malformed COCO json: non-numeric polygon coordinate in " + where);
        p.xy.push_back(v.get<double>());
      }
      parts.push_back(std::move(p));
    }
    return parts;
  }
  if (seg.is_object() && seg.contains("counts")) {
    const json& size = require(seg, "size", where + " segmentation");
    if (!size.is_array() || size.size() != 2)
      throw DatasetError("malformed COCO json: bad value for key 'size' in " + where);
    const int h = size[0].get<int>(), w = size[1].get<int>();
    if (h != height || w != width)
      throw DatasetError("RLE size does not match image size for annotation " +
                         std::to_string(ann_id));
    const json& counts = seg.at("counts");
    if (counts.is_string()) {
      try {
        return rle_from_string(counts.get<std::string>(), h, w);
      } catch (const std::invalid_argument& e) {
        throw DatasetError("annotation " + std::to_string(ann_id) + ": " + e.what());
      }
    }
    if (counts.is_array()) {
      Rle rle{h, w, {}};
      for (const json& c : counts) rle.counts.push_back(c.get<std::uint32_t>());
      return rle;
    }
  }
  throw DatasetError("unsupported segmentation encoding for annotation " + std::to_string(ann_id));
}

json segmentation_to_json(const Segmentation& seg) {
  if (const auto* parts = std::get_if<std::vector<Polygon>>(&seg)) {
    json arr = json::array();
    for (const Polygon& p : *parts) arr.push_back(p.xy);
    return arr;
  }
  const Rle& rle = std::get<Rle>(seg);
  return json{{"size", {rle.height, rle.width}}, {"counts", rle_counts_to_string(rle)}};
}

}  // namespace

Mask rasterize_mask(const InstanceAnnotation& annotation, int height, int width) {
  if (const auto* parts = std::get_if<std::vector<Polygon>>(&annotation.segmentation))
    return rasterize_polygons(*parts, height, width);
  const Rle& rle = std::get<Rle>(annotation.segmentation);
  if (rle.height != height || rle.width != width)
    throw std::invalid_argument("RLE size does not match requested raster size");
  return decode_rle(rle);
}

void CategorySplit::validate() const {
  for (auto id : seen_ids)
    if (unseen_ids.count(id))
      throw DatasetError("category " + std::to_string(id) + " is both seen and unseen");
}

Image DirectoryImageSource::load(const ImageRecord& record) const {
  Image img = read_image(root_ / record.file_name);
  if (img.height != record.height || img.width != record.width)
    throw DatasetError("image " + std::to_string(record.image_id) +
                       " has dimensions different from its annotation record");
  return img;
}

Image MemoryImageSource::load(const ImageRecord& record) const {
  auto it = images_.find(record.image_id);
  if (it == images_.end())
    throw DatasetError("no pixels for image " + std::to_string(record.image_id));
  return it->second;
}

std::size_t Dataset::annotation_count() const {
  std::size_t n = 0;
  for (const auto& r : records_) n += r.annotations.size();
  return n;
}

ImageSample Dataset::sample(std::size_t i) const {
  const ImageRecord& r = records_.at(i);
  if (!source_) throw DatasetError("dataset has no image source");
  return ImageSample{r.image_id, source_->load(r), r.annotations};
}

Dataset parse_coco(const std::string& json_text, const std::filesystem::path& image_root,
                   bool check_files) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw DatasetError(std::string("malformed COCO json: ") + e.what());
  }
  const json& images = require(doc, "images", "document");
  const json& annotations = require(doc, "annotations", "document");
  const json& categories = require(doc, "categories", "document");
  if (!images.is_array() || !annotations.is_array() || !categories.is_array())
    throw DatasetError("malformed COCO json: 'images', 'annotations' and 'categories' must be arrays");

  std::vector<Category> cats;
  for (const json& c : categories) {
    Category cat;
    cat.id = require_as<std::int64_t>(c, "id", "category");
    cat.name = c.contains("name") ? c.at("name").get<std::string>() : std::to_string(cat.id);
    cats.push_back(std::move(cat));
  }

  std::vector<ImageRecord> records;
  std::unordered_map<std::int64_t, std::size_t> index;
  for (const json& im : images) {
    ImageRecord r;
    r.image_id = require_as<std::int64_t>(im, "id", "image entry");
    const std::string where = "image " + std::to_string(r.image_id);
    r.file_name = require_as<std::string>(im, "file_name", where);
    r.height = require_as<int>(im, "height", where);
    r.width = require_as<int>(im, "width", where);
    if (r.height <= 0 || r.width <= 0) throw DatasetError("non-positive size for " + where);
    if (check_files && !std::filesystem::exists(image_root / r.file_name))
      throw DatasetError("missing image file for image_id " + std::to_string(r.image_id) + ": " +
                         (image_root / r.file_name).string());
    if (!index.emplace(r.image_id, records.size()).second)
      throw DatasetError("duplicate image id " + std::to_string(r.image_id));
    records.push_back(std::move(r));
  }

  for (const json& a : annotations) {
    InstanceAnnotation ann;
    ann.id = require_as<std::int64_t>(a, "id", "annotation entry");
    const std::string where = "annotation " + std::to_string(ann.id);
    const auto image_id = require_as<std::int64_t>(a, "image_id", where);
    ann.category_id = require_as<std::int64_t>(a, "category_id", where);
    ann.original_category_id = ann.category_id;
    auto it = index.find(image_id);
    if (it == index.end())
      throw DatasetError(where + " refers to unknown image_id " + std::to_string(image_id));
    ImageRecord& rec = records[it->second];

    const json& bbox = require(a, "bbox", where);
    if (!bbox.is_array() || bbox.size() != 4)
      throw DatasetError("malformed COCO json: bad value for key 'bbox' in " + where);
    const Box raw{bbox[0].get<double>(), bbox[1].get<double>(), bbox[2].get<double>(),
                  bbox[3].get<double>()};
    if (!(raw.w > 0.0) || !(raw.h > 0.0))
      throw DatasetError("degenerate bbox (zero width or height) in " + where);
    ann.box = clip_box(raw, rec.height, rec.width);
    if (!(ann.box.w > 0.0) || !(ann.box.h > 0.0))
      throw DatasetError("bbox outside image bounds in " + where);

    ann.segmentation = parse_segmentation(require(a, "segmentation", where), ann.id, rec.height,
                                          rec.width);
    try {
      ann.mask = rasterize_mask(ann, rec.height, rec.width);
    } catch (const std::invalid_argument& e) {
      throw DatasetError(where + ": " + e.what());
    }
    if (ann.mask.area() == 0) throw DatasetError("empty mask in " + where);
    rec.annotations.push_back(std::move(ann));
  }

  return Dataset(std::move(cats), std::move(records),
                 std::make_shared<DirectoryImageSource>(image_root));
}

Dataset load_coco(const std::filesystem::path& annotation_path,
                  const std::filesystem::path& image_root) {
  std::ifstream in(annotation_path);
  if (!in) throw DatasetError("cannot open annotation file " + annotation_path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_coco(ss.str(), image_root, true);
}

std::string to_coco_json(const Dataset& dataset) {
  json images = json::array(), annotations = json::array(), categories = json::array();
  for (const Category& c : dataset.categories())
    categories.push_back({{"id", c.id}, {"name", c.name}});
  for (const ImageRecord& r : dataset.records()) {
    images.push_back(
        {{"id", r.image_id}, {"file_name", r.file_name}, {"height", r.height}, {"width", r.width}});
    for (const InstanceAnnotation& a : r.annotations) {
      annotations.push_back({{"id", a.id},
                             {"image_id", r.image_id},
                             {"category_id", a.category_id},
                             {"bbox", {a.box.x, a.box.y, a.box.w, a.box.h}},
                             {"area", a.mask.area()},
                             {"iscrowd", 0},
                             {"segmentation", segmentation_to_json(a.segmentation)}});
    }
  }
  json doc{{"images", images}, {"annotations", annotations}, {"categories", categories}};
  return doc.dump(1);
}

SplitMode parse_split_mode(const std::string& name) {
  if (name == "train_seen_only") return SplitMode::train_seen_only;
  if (name == "eval_unseen_only") return SplitMode::eval_unseen_only;
  if (name == "all") return SplitMode::all;
  throw DatasetError("unknown split mode '" + name + "'");
}

Dataset apply_split(const Dataset& dataset, const CategorySplit& split, SplitMode mode) {
  split.validate();
  std::set<std::int64_t> missing;
  for (const ImageRecord& r : dataset.records())
    for (const InstanceAnnotation& a : r.annotations)
      if (!split.covers(a.category_id)) missing.insert(a.category_id);
  if (!missing.empty()) {
    std::string ids;
    for (auto id : missing) ids += (ids.empty() ? "" : ", ") + std::to_string(id);
    throw DatasetError("category ids absent from split: " + ids);
  }

  std::vector<ImageRecord> out = dataset.records();
  for (ImageRecord& r : out) {
    std::vector<InstanceAnnotation> kept;
    for (InstanceAnnotation& a : r.annotations) {
      a.is_seen = split.seen_ids.count(a.category_id) > 0;
      if (mode == SplitMode::train_seen_only && !a.is_seen) continue;
      if (mode == SplitMode::eval_unseen_only && a.is_seen) continue;
      kept.push_back(std::move(a));
    }
    r.annotations = std::move(kept);
  }
  return dataset.with_records(std::move(out));
}

Dataset to_class_agnostic(const Dataset& dataset, std::int64_t foreground_id) {
  std::vector<ImageRecord> out = dataset.records();
  for (ImageRecord& r : out)
    for (InstanceAnnotation& a : r.annotations) a.category_id = foreground_id;
  return Dataset({Category{foreground_id, "object"}}, std::move(out), dataset.source());
}

Mask union_mask(const std::vector<InstanceAnnotation>& annotations, int height, int width) {
  Mask out(height, width);
  for (const InstanceAnnotation& a : annotations) {
    if (a.mask.height != height || a.mask.width != width)
      throw std::invalid_argument("annotation mask size does not match image");
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] |= a.mask.data[i];
  }
  return out;
}

}  // namespace ldet
