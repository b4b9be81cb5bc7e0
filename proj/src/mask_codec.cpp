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

#include "ldet/mask_codec.hpp"

#include <algorithm>
#include <stdexcept>

namespace ldet {

Mask rasterize_polygons(const std::vector<Polygon>& parts, int height, int width) {
  Mask out(height, width);
  std::vector<double> crossings;
  for (const Polygon& poly : parts) {
    if (poly.xy.size() % 2 != 0 || poly.xy.size() < 6)
      throw std::invalid_argument("polygon needs at least 3 vertices");
    const std::size_t n = poly.xy.size() / 2;
    for (int y = 0; y < height; ++y) {
      const double py = y + 0.5;
      crossings.clear();
      for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const double xi = poly.xy[2 * i], yi = poly.xy[2 * i + 1];
        const double xj = poly.xy[2 * j], yj = poly.xy[2 * j + 1];
        if ((yi > py) != (yj > py)) crossings.push_back((xj - xi) * (py - yi) / (yj - yi) + xi);
      }
      if (crossings.empty()) continue;
      std::sort(crossings.begin(), crossings.end());
      // A center is inside iff an odd number of crossings lie strictly right of it.
      for (int x = 0; x < width; ++x) {
        const double px = x + 0.5;
        const auto right = crossings.end() - std::upper_bound(crossings.begin(), crossings.end(), px);
        if (right % 2 == 1) out.at(y, x) = 1;
      }
    }
  }
  return out;
}

Mask decode_rle(const Rle& rle) {
  const std::size_t total = static_cast<std::size_t>(rle.height) * rle.width;
  std::size_t sum = 0;
  for (auto c : rle.counts) sum += c;
  if (sum != total)
    throw std::invalid_argument("RLE counts sum to " + std::to_string(sum) + ", expected " +
                                std::to_string(total));
  Mask out(rle.height, rle.width);
  std::size_t pos = 0;
  std::uint8_t value = 0;
  for (auto c : rle.counts) {
    for (std::uint32_t k = 0; k < c; ++k, ++pos) {
      if (value) {
        const std::size_t x = pos / rle.height, y = pos % rle.height;
        out.at(static_cast<int>(y), static_cast<int>(x)) = 1;
      }
    }
    value ^= 1;
  }
  return out;
}

Rle encode_rle(const Mask& mask) {
  Rle rle{mask.height, mask.width, {}};
  std::uint8_t prev = 0;
  std::uint32_t run = 0;
  for (int x = 0; x < mask.width; ++x) {
    for (int y = 0; y < mask.height; ++y) {
      const std::uint8_t v = mask.at(y, x) ? 1 : 0;
      if (v != prev) {
        rle.counts.push_back(run);
        run = 0;
        prev = v;
      }
      ++run;
    }
  }
  rle.counts.push_back(run);
  return rle;
}

std::string rle_counts_to_string(const Rle& rle) {
  std::string s;
  const auto& cnts = rle.counts;
  for (std::size_t i = 0; i < cnts.size(); ++i) {
    long long x = cnts[i];
    if (i > 2) x -= static_cast<long long>(cnts[i - 2]);
    bool more = true;
    while (more) {
      char c = static_cast<char>(x & 0x1f);
      x >>= 5;
      more = (c & 0x10) ? x != -1 : x != 0;
      if (more) c |= 0x20;
      s.push_back(static_cast<char>(c + 48));
    }
  }
  return s;
}

Rle rle_from_string(std::string_view counts, int height, int width) {
  Rle rle{height, width, {}};
  std::vector<long long> cnts;
  std::size_t p = 0;
  while (p < counts.size()) {
    long long x = 0;
    int k = 0;
    bool more = true;
    while (more) {
      if (p >= counts.size()) throw std::invalid_argument("truncated RLE string");
      const long long c = static_cast<long long>(counts[p]) - 48;
      x |= (c & 0x1f) << (5 * k);
      more = (c & 0x20) != 0;
      ++p;
      ++k;
      if (!more && (c & 0x10)) x |= -1LL << (5 * k);
    }
    if (cnts.size() > 2) x += cnts[cnts.size() - 2];
    if (x < 0) throw std::invalid_argument("negative run in RLE string");
    cnts.push_back(x);
  }
  rle.counts.assign(cnts.begin(), cnts.end());
  return rle;
}

}  // namespace ldet
