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

// COCO-format dataset ingestion, instance mask rasterization, and the
// seen/unseen category views used for open-world training and evaluation.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "ldet/boxes.hpp"
#include "ldet/image.hpp"
#include "ldet/mask_codec.hpp"

namespace ldet {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Segmentation = std::variant<std::vector<Polygon>, Rle>;

struct InstanceAnnotation {
  std::int64_t id = 0;
  Box box;
  Segmentation segmentation;
  /// Rasterized at load, same size as the image.
  Mask mask;
  std::int64_t category_id = 0;
  /// Category before any class-agnostic remapping.
  std::int64_t original_category_id = 0;
  bool is_seen = true;

  bool operator==(const InstanceAnnotation&) const = default;
};

/// Rasterizes the annotation's segmentation. Polygons use the even-odd rule
/// at pixel centers; RLE must describe exactly height x width pixels.
Mask rasterize_mask(const InstanceAnnotation& annotation, int height, int width);

struct Category {
  std::int64_t id = 0;
  std::string name;
  bool operator==(const Category&) const = default;
};

struct CategorySplit {
  std::set<std::int64_t> seen_ids;
  std::set<std::int64_t> unseen_ids;

  /// Throws DatasetError when the two sets intersect.
  void validate() const;
  bool covers(std::int64_t id) const { return seen_ids.count(id) || unseen_ids.count(id); }
};

struct ImageRecord {
  std::int64_t image_id = 0;
  std::string file_name;
  int height = 0;
  int width = 0;
  std::vector<InstanceAnnotation> annotations;
  bool operator==(const ImageRecord&) const = default;
};

struct ImageSample {
  std::int64_t image_id = 0;
  Image image;
  std::vector<InstanceAnnotation> annotations;
};

/// Provides pixels for a record on demand.
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  virtual Image load(const ImageRecord& record) const = 0;
};

class DirectoryImageSource : public ImageSource {
 public:
  explicit DirectoryImageSource(std::filesystem::path root) : root_(std::move(root)) {}
  Image load(const ImageRecord& record) const override;
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

class MemoryImageSource : public ImageSource {
 public:
  explicit MemoryImageSource(std::map<std::int64_t, Image> images) : images_(std::move(images)) {}
  Image load(const ImageRecord& record) const override;

 private:
  std::map<std::int64_t, Image> images_;
};

/// Immutable list of image records with annotations; pixels are loaded lazily
/// through a shared ImageSource, so views are cheap to derive.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<Category> categories, std::vector<ImageRecord> records,
          std::shared_ptr<const ImageSource> source)
      : categories_(std::move(categories)), records_(std::move(records)), source_(std::move(source)) {}

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const ImageRecord& record(std::size_t i) const { return records_.at(i); }
  const std::vector<ImageRecord>& records() const { return records_; }
  const std::vector<Category>& categories() const { return categories_; }
  const std::shared_ptr<const ImageSource>& source() const { return source_; }
  std::size_t annotation_count() const;

  ImageSample sample(std::size_t i) const;
  Dataset with_records(std::vector<ImageRecord> records) const {
    return Dataset(categories_, std::move(records), source_);
  }

 private:
  std::vector<Category> categories_;
  std::vector<ImageRecord> records_;
  std::shared_ptr<const ImageSource> source_;
};

/// Parses a COCO-style annotation file. Boxes are clipped to the image; masks
/// are rasterized eagerly; image files are checked for existence but read
/// lazily. Throws DatasetError naming the offending key, image id, or
/// annotation id.
Dataset load_coco(const std::filesystem::path& annotation_path,
                  const std::filesystem::path& image_root);

/// Same as load_coco, from an in-memory JSON string (no image-file checks when
/// `check_files` is false).
Dataset parse_coco(const std::string& json_text, const std::filesystem::path& image_root,
                   bool check_files = true);

/// Serializes records and categories as COCO JSON, keeping each annotation's
/// original segmentation encoding.
std::string to_coco_json(const Dataset& dataset);

enum class SplitMode { train_seen_only, eval_unseen_only, all };

SplitMode parse_split_mode(const std::string& name);

/// Filters annotations by the split and sets `is_seen` on every kept one.
/// Images are always kept. Throws DatasetError listing category ids missing
/// from the split.
Dataset apply_split(const Dataset& dataset, const CategorySplit& split, SplitMode mode);

/// Maps every category id to `foreground_id`; the previous ids remain in
/// `original_category_id`.
Dataset to_class_agnostic(const Dataset& dataset, std::int64_t foreground_id = 1);

/// Pixelwise max of all annotation masks, as a height x width raster.
Mask union_mask(const std::vector<InstanceAnnotation>& annotations, int height, int width);

}  // namespace ldet
