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

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ldet/image.hpp"

namespace ldet {

/// Closed polygon as a flat [x0, y0, x1, y1, ...] list in pixel coordinates,
/// where pixel (i, j) spans [i, i+1) x [j, j+1).
struct Polygon {
  std::vector<double> xy;
  bool operator==(const Polygon&) const = default;
};

/// COCO run-length encoding: column-major runs, starting with a run of zeros.
struct Rle {
  int height = 0;
  int width = 0;
  std::vector<std::uint32_t> counts;
  bool operator==(const Rle&) const = default;
};

/// Fills the union of `parts` with the even-odd rule, sampling at pixel
/// centers (x + 0.5, y + 0.5). Throws std::invalid_argument for a part with
/// fewer than 3 vertices.
Mask rasterize_polygons(const std::vector<Polygon>& parts, int height, int width);

/// Throws std::invalid_argument if the run lengths do not sum to height*width.
Mask decode_rle(const Rle& rle);
Rle encode_rle(const Mask& mask);

/// COCO's compact ASCII form of the counts array.
std::string rle_counts_to_string(const Rle& rle);
Rle rle_from_string(std::string_view counts, int height, int width);

}  // namespace ldet
