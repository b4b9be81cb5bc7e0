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

#include "ldet/shapes.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "ldet/backerase.hpp"
#include "ldet/image_io.hpp"
#include "ldet/mask_codec.hpp"
#include "ldet/random.hpp"

namespace ldet {

namespace {

using Color = std::array<double, 3>;

Polygon regular_polygon(double cx, double cy, double r, int sides, double angle) {
  Polygon p;
  for (int i = 0; i < sides; ++i) {
    const double t = angle + 2.0 * std::numbers::pi * i / sides;
    p.xy.push_back(cx + r * std::cos(t));
    p.xy.push_back(cy + r * std::sin(t));
  }
  return p;
}

Polygon cross_polygon(double cx, double cy, double r, double angle) {
  const double a = r / 3.0;
  const std::array<std::pair<double, double>, 12> pts{{{-a, -r}, {a, -r}, {a, -a}, {r, -a},
                                                       {r, a}, {a, a}, {a, r}, {-a, r},
                                                       {-a, a}, {-r, a}, {-r, -a}, {-a, -a}}};
  const double c = std::cos(angle), s = std::sin(angle);
  Polygon p;
  for (auto [x, y] : pts) {
    p.xy.push_back(cx + c * x - s * y);
    p.xy.push_back(cy + s * x + c * y);
  }
  return p;
}

Polygon make_shape(std::int64_t kind, double cx, double cy, double extent, Rng& rng) {
  const double r = extent / 2.0;
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  switch (kind) {
    case kShapeCircle: return regular_polygon(cx, cy, r, 32, 0.0);
    case kShapeSquare: return regular_polygon(cx, cy, r, 4, angle);
    case kShapeTriangle: return regular_polygon(cx, cy, r, 3, angle);
    default: return cross_polygon(cx, cy, r, angle);
  }
}

Image background(int size, Rng& rng) {
  Color c0, c1;
  for (int k = 0; k < 3; ++k) {
    c0[k] = rng.uniform(0.15, 0.85);
    c1[k] = std::clamp(c0[k] + rng.uniform(-0.25, 0.25), 0.0, 1.0);
  }
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double dx = std::cos(theta), dy = std::sin(theta);

  Image blotch(6, 6, 3);
  for (double& v : blotch.data) v = rng.uniform(0.0, 1.0);
  blotch = upscale(blotch, size, size, UpscaleKernel::bilinear);

  Image img(size, size, 3);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double t =
          std::clamp(0.5 + ((x - size / 2.0) * dx + (y - size / 2.0) * dy) / size, 0.0, 1.0);
      for (int k = 0; k < 3; ++k)
        img.at(y, x, k) = (1 - t) * c0[k] + t * c1[k] + 0.16 * (blotch.at(y, x, k) - 0.5) +
                          rng.normal(0.0, 0.02);
    }
  return img;
}

Color mean_color(const Image& img, const Mask& m) {
  Color c{0, 0, 0};
  long n = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (m.at(y, x)) {
        ++n;
        for (int k = 0; k < 3; ++k) c[k] += img.at(y, x, k);
      }
  for (double& v : c) v /= std::max(1L, n);
  return c;
}

Box mask_bounds(const Mask& m) {
  int x0 = m.width, y0 = m.height, x1 = -1, y1 = -1;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  return {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 - x0 + 1),
          static_cast<double>(y1 - y0 + 1)};
}

}  // namespace

Dataset generate_shapes(const ShapesConfig& config) {
  if (config.num_images <= 0 || config.image_size < 16 || config.min_objects < 0 ||
      config.max_objects < config.min_objects || config.min_extent < 4.0 ||
      config.max_extent < config.min_extent || config.max_extent >= config.image_size)
    throw DatasetError("invalid shapes configuration");

  const int size = config.image_size;
  std::vector<ImageRecord> records;
  std::map<std::int64_t, Image> pixels;
  std::int64_t next_ann = 1;

  for (int i = 0; i < config.num_images; ++i) {
    Rng rng(derive_seed(config.seed, "shapes", static_cast<std::uint64_t>(i)));
    ImageRecord rec;
    rec.image_id = i + 1;
    char name[32];
    std::snprintf(name, sizeof(name), "%06d.png", i + 1);
    rec.file_name = name;
    rec.height = rec.width = size;

    Image img = background(size, rng);
    const int n = static_cast<int>(rng.uniform_int(config.min_objects, config.max_objects));
    std::vector<Box> placed;
    for (int o = 0; o < n; ++o) {
      const std::int64_t kind = rng.uniform_int(kShapeCircle, kShapeCross);
      const double extent = rng.uniform(config.min_extent, config.max_extent);
      bool ok = false;
      Polygon poly;
      Mask mask;
      for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
        const double cx = rng.uniform(extent / 2 + 1, size - extent / 2 - 1);
        const double cy = rng.uniform(extent / 2 + 1, size - extent / 2 - 1);
        const Box region{cx - extent / 2 - 2, cy - extent / 2 - 2, extent + 4, extent + 4};
        ok = std::none_of(placed.begin(), placed.end(),
                          [&](const Box& b) { return intersection_area(b, region) > 0.0; });
        if (!ok) continue;
        poly = make_shape(kind, cx, cy, extent, rng);
        mask = rasterize_polygons({poly}, size, size);
        ok = mask.area() > 0;
        if (ok) placed.push_back(region);
      }
      if (!ok) continue;

      const Color bg = mean_color(img, mask);
      Color fg;
      double contrast = 0.0;
      do {
        for (double& v : fg) v = rng.uniform(0.05, 0.95);
        contrast = std::abs(fg[0] - bg[0]) + std::abs(fg[1] - bg[1]) + std::abs(fg[2] - bg[2]);
      } while (contrast < 0.6);
      const double sx = rng.uniform(-0.1, 0.1) / extent, sy = rng.uniform(-0.1, 0.1) / extent;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          if (mask.at(y, x))
            for (int k = 0; k < 3; ++k)
              img.at(y, x, k) = fg[k] * (1.0 + sx * (x - size / 2.0) + sy * (y - size / 2.0));

      InstanceAnnotation ann;
      ann.id = next_ann++;
      ann.box = mask_bounds(mask);
      ann.segmentation = std::vector<Polygon>{poly};
      ann.mask = std::move(mask);
      ann.category_id = ann.original_category_id = kind;
      rec.annotations.push_back(std::move(ann));
    }
    for (double& v : img.data) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
    pixels.emplace(rec.image_id, std::move(img));
    records.push_back(std::move(rec));
  }

  std::vector<Category> categories{{kShapeCircle, "circle"},
                                   {kShapeSquare, "square"},
                                   {kShapeTriangle, "triangle"},
                                   {kShapeCross, "cross"}};
  return Dataset(std::move(categories), std::move(records),
                 std::make_shared<MemoryImageSource>(std::move(pixels)));
}

CategorySplit shapes_split() {
  return {{kShapeCircle, kShapeSquare, kShapeTriangle}, {kShapeCross}};
}

std::pair<Dataset, Dataset> split_images(const Dataset& dataset, std::size_t count) {
  count = std::min(count, dataset.size());
  const auto& all = dataset.records();
  return {dataset.with_records({all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count)}),
          dataset.with_records({all.begin() + static_cast<std::ptrdiff_t>(count), all.end()})};
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const ImageSample s = dataset.sample(i);
    write_png(dir / "images" / dataset.record(i).file_name, s.image);
  }
  std::ofstream out(dir / "annotations.json");
  if (!out) throw DatasetError("cannot write " + (dir / "annotations.json").string());
  out << to_coco_json(dataset);
}

}  // namespace ldet
