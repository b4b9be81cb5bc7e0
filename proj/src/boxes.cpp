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

#include "ldet/boxes.hpp"

#include <cmath>

namespace ldet {

double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x, b.x);
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (inter <= 0.0 || uni <= 0.0) return 0.0;
  return inter / uni;
}

double ioa(const Box& proposal, std::span<const Box> gts) {
  const double area = proposal.area();
  if (area <= 0.0) return 0.0;

  // Clip every ground truth to the proposal, then measure the union of the
  // clipped pieces on the grid induced by their edges.
  std::vector<Box> pieces;
  std::vector<double> xs{proposal.x, proposal.x2()};
  std::vector<double> ys{proposal.y, proposal.y2()};
  for (const Box& g : gts) {
    const double x1 = std::max(proposal.x, g.x), x2 = std::min(proposal.x2(), g.x2());
    const double y1 = std::max(proposal.y, g.y), y2 = std::min(proposal.y2(), g.y2());
    if (x2 <= x1 || y2 <= y1) continue;
    pieces.push_back(Box::from_corners(x1, y1, x2, y2));
    xs.push_back(x1);
    xs.push_back(x2);
    ys.push_back(y1);
    ys.push_back(y2);
  }
  if (pieces.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  std::sort(ys.begin(), ys.end());
  ys.erase(std::unique(ys.begin(), ys.end()), ys.end());

  double covered = 0.0;
  for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
    const double mx = 0.5 * (xs[i] + xs[i + 1]);
    for (std::size_t j = 0; j + 1 < ys.size(); ++j) {
      const double my = 0.5 * (ys[j] + ys[j + 1]);
      for (const Box& p : pieces) {
        if (mx > p.x && mx < p.x2() && my > p.y && my < p.y2()) {
          covered += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
          break;
        }
      }
    }
  }
  return std::clamp(covered / area, 0.0, 1.0);
}

Box clip_box(const Box& b, int height, int width) {
  const double x1 = std::clamp(b.x, 0.0, static_cast<double>(width));
  const double y1 = std::clamp(b.y, 0.0, static_cast<double>(height));
  const double x2 = std::clamp(b.x2(), 0.0, static_cast<double>(width));
  const double y2 = std::clamp(b.y2(), 0.0, static_cast<double>(height));
  return Box::from_corners(x1, y1, x2, y2);
}

std::vector<double> pairwise_iou(std::span<const Box> a, std::span<const Box> b) {
  std::vector<double> out(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out[i * b.size() + j] = iou(a[i], b[j]);
  return out;
}

}  // namespace ldet
