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

#include <algorithm>
#include <span>
#include <vector>

namespace ldet {

/// Axis-aligned rectangle in pixel coordinates, COCO (x, y, width, height).
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x2() const { return x + w; }
  double y2() const { return y + h; }
  double area() const { return (w > 0.0 && h > 0.0) ? w * h : 0.0; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }

  static Box from_corners(double x1, double y1, double x2, double y2) {
    return Box{x1, y1, x2 - x1, y2 - y1};
  }
  bool operator==(const Box&) const = default;
};

double intersection_area(const Box& a, const Box& b);

/// Intersection over union; 0 for disjoint or degenerate boxes.
double iou(const Box& a, const Box& b);

/// Area of `proposal` covered by the union of `gts`, divided by the area of
/// `proposal`. Overlapping ground truths are not double counted.
double ioa(const Box& proposal, std::span<const Box> gts);

Box clip_box(const Box& b, int height, int width);

/// Row-major matrix of pairwise IoU, rows indexed by `a`.
std::vector<double> pairwise_iou(std::span<const Box> a, std::span<const Box> b);

}  // namespace ldet
