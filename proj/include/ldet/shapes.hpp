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

// Procedural toy dataset: flat-coloured shapes on smoothly varying, textured
// backgrounds. Categories 1-3 (circle, square, triangle) are meant to be seen
// during training; category 4 (cross) is the held-out shape.

#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>

#include "ldet/annotations.hpp"

namespace ldet {

struct ShapesConfig {
  int num_images = 400;
  int image_size = 64;
  int min_objects = 2;
  int max_objects = 4;
  double min_extent = 14.0;
  double max_extent = 26.0;
  std::uint64_t seed = 0;
};

inline constexpr std::int64_t kShapeCircle = 1;
inline constexpr std::int64_t kShapeSquare = 2;
inline constexpr std::int64_t kShapeTriangle = 3;
inline constexpr std::int64_t kShapeCross = 4;

/// Fully annotated in-memory dataset; pixel values are multiples of 1/255 so
/// the images survive an 8-bit PNG round trip unchanged.
Dataset generate_shapes(const ShapesConfig& config);

/// Seen {circle, square, triangle}, unseen {cross}.
CategorySplit shapes_split();

/// First `count` images and the remainder.
std::pair<Dataset, Dataset> split_images(const Dataset& dataset, std::size_t count);

/// Writes <dir>/images/<file_name> PNGs and <dir>/annotations.json.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);

}  // namespace ldet
