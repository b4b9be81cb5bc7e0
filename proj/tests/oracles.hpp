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

// Reference implementations used only by tests. They favour the most literal
// formulation over speed and share no code with the library beyond plain data
// types.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <vector>

#include "ldet/annotations.hpp"
#include "ldet/backerase.hpp"
#include "ldet/image.hpp"

namespace oracle {

// ---- geometry -------------------------------------------------------------

/// Ray casting towards +x from (px, py), counting edges whose y-span straddles
/// py by the half-open rule and whose intersection lies right of px.
inline bool inside_polygon(const std::vector<double>& xy, double px, double py) {
  const std::size_t n = xy.size() / 2;
  int crossings = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ax = xy[2 * i], ay = xy[2 * i + 1];
    const double bx = xy[2 * ((i + 1) % n)], by = xy[2 * ((i + 1) % n) + 1];
    const bool a_above = ay > py, b_above = by > py;
    if (a_above == b_above) continue;
    const double t = (py - ay) / (by - ay);
    if (ax + t * (bx - ax) > px) ++crossings;
  }
  return crossings % 2 == 1;
}

inline ldet::Mask rasterize(const std::vector<std::vector<double>>& parts, int h, int w) {
  ldet::Mask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      for (const auto& p : parts)
        if (inside_polygon(p, x + 0.5, y + 0.5)) m.at(y, x) = 1;
    }
  return m;
}

/// Integer boxes only: counts unit cells.
inline double pixel_iou(const ldet::Box& a, const ldet::Box& b) {
  long inter = 0, ua = 0, ub = 0;
  const int x0 = static_cast<int>(std::min(a.x, b.x)), y0 = static_cast<int>(std::min(a.y, b.y));
  const int x1 = static_cast<int>(std::max(a.x + a.w, b.x + b.w));
  const int y1 = static_cast<int>(std::max(a.y + a.h, b.y + b.h));
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const bool ia = x >= a.x && x < a.x + a.w && y >= a.y && y < a.y + a.h;
      const bool ib = x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h;
      inter += ia && ib;
      ua += ia;
      ub += ib;
    }
  const long uni = ua + ub - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double pixel_ioa(const ldet::Box& p, const std::vector<ldet::Box>& gts) {
  long covered = 0, area = 0;
  for (int y = static_cast<int>(p.y); y < p.y + p.h; ++y)
    for (int x = static_cast<int>(p.x); x < p.x + p.w; ++x) {
      ++area;
      for (const auto& g : gts)
        if (x >= g.x && x < g.x + g.w && y >= g.y && y < g.y + g.h) {
          ++covered;
          break;
        }
    }
  return area == 0 ? 0.0 : static_cast<double>(covered) / static_cast<double>(area);
}

// ---- image operations -----------------------------------------------------

inline int mirror(int i, int n) {
  // Period 2n reflection that repeats the edge sample: d c b a | a b c d.
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

/// Dense 2-D convolution with the outer product of an unnormalized Gaussian,
/// normalized once over the full window.
inline ldet::Image gaussian(const ldet::Image& img, double sigma) {
  if (sigma == 0.0) return img;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  double norm = 0.0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) norm += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
  ldet::Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx)
            acc += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) *
                   img.at(mirror(y + dy, img.height), mirror(x + dx, img.width), c);
        out.at(y, x, c) = std::clamp(acc / norm, 0.0, 1.0);
      }
  return out;
}

inline ldet::Image bilinear(const ldet::Image& src, int h, int w) {
  ldet::Image out(h, w, src.channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double sy = std::clamp((y + 0.5) * src.height / h - 0.5, 0.0, src.height - 1.0);
      const double sx = std::clamp((x + 0.5) * src.width / w - 0.5, 0.0, src.width - 1.0);
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const int y1 = std::min(y0 + 1, src.height - 1), x1 = std::min(x0 + 1, src.width - 1);
      const double fy = sy - y0, fx = sx - x0;
      for (int c = 0; c < src.channels; ++c)
        out.at(y, x, c) = (1 - fy) * (1 - fx) * src.at(y0, x0, c) + (1 - fy) * fx * src.at(y0, x1, c) +
                          fy * (1 - fx) * src.at(y1, x0, c) + fy * fx * src.at(y1, x1, c);
    }
  return out;
}

inline ldet::Image nearest(const ldet::Image& src, int h, int w) {
  ldet::Image out(h, w, src.channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int sy = std::min(src.height - 1, static_cast<int>(std::floor((y + 0.5) * src.height / h)));
      const int sx = std::min(src.width - 1, static_cast<int>(std::floor((x + 0.5) * src.width / w)));
      for (int c = 0; c < src.channels; ++c) out.at(y, x, c) = src.at(sy, sx, c);
    }
  return out;
}

/// Area average: each output pixel is the mean of the source over its
/// footprint, with fractional coverage of boundary pixels.
inline ldet::Image area(const ldet::Image& src, int h, int w) {
  ldet::Image out(h, w, src.channels);
  const double sy = static_cast<double>(src.height) / h, sx = static_cast<double>(src.width) / w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < src.channels; ++c) {
        double acc = 0.0;
        for (int v = 0; v < src.height; ++v) {
          const double oy = std::max(0.0, std::min<double>(v + 1, (y + 1) * sy) - std::max<double>(v, y * sy));
          if (oy <= 0) continue;
          for (int u = 0; u < src.width; ++u) {
            const double ox =
                std::max(0.0, std::min<double>(u + 1, (x + 1) * sx) - std::max<double>(u, x * sx));
            acc += oy * ox * src.at(v, u, c);
          }
        }
        out.at(y, x, c) = acc / (sy * sx);
      }
  return out;
}

/// The augmentation spelled out step by step, given the background crop that
/// the implementation chose.
inline ldet::Image backerase(const ldet::ImageSample& s, const ldet::BackEraseConfig& cfg,
                             const ldet::PixelRect& rect) {
  const int h = s.image.height, w = s.image.width;
  const bool near_up = cfg.upscale_kernel == ldet::UpscaleKernel::nearest;
  const bool near_down = cfg.downsample_kernel == ldet::DownsampleKernel::nearest;
  auto up = [&](const ldet::Image& i) { return near_up ? nearest(i, h, w) : bilinear(i, h, w); };

  // 1. pre-smooth
  const ldet::Image i1 = gaussian(s.image, cfg.pre_smooth_sigma);
  // 2. background crop, upscaled
  ldet::Image patch(rect.height, rect.width, i1.channels);
  for (int y = 0; y < rect.height; ++y)
    for (int x = 0; x < rect.width; ++x)
      for (int c = 0; c < i1.channels; ++c) patch.at(y, x, c) = i1.at(rect.y + y, rect.x + x, c);
  const ldet::Image backg = up(patch);
  // 3. band-limited foreground
  const ldet::Image down = near_down ? nearest(i1, rect.height, rect.width) : area(i1, rect.height, rect.width);
  const ldet::Image fg = up(down);
  // 4. soft union mask
  ldet::Image m(h, w, 1);
  for (const auto& a : s.annotations)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (a.mask.at(y, x)) m.at(y, x, 0) = 1.0;
  m = gaussian(m, cfg.mask_smooth_sigma);
  // 5. blend
  ldet::Image out(h, w, i1.channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < i1.channels; ++c)
        out.at(y, x, c) = fg.at(y, x, c) * m.at(y, x, 0) + backg.at(y, x, c) * (1.0 - m.at(y, x, 0));
  // 6. post-smooth
  return gaussian(out, cfg.post_smooth_sigma);
}

// ---- detection ------------------------------------------------------------

/// Repeatedly take the best remaining box and delete everything that
/// overlaps it by more than the threshold.
inline std::vector<int> nms(const std::vector<ldet::Box>& boxes, const std::vector<double>& scores,
                            double thr, const std::function<double(const ldet::Box&, const ldet::Box&)>& iou) {
  std::vector<int> alive(boxes.size());
  std::iota(alive.begin(), alive.end(), 0);
  std::vector<int> kept;
  while (!alive.empty()) {
    int best = 0;
    for (std::size_t i = 1; i < alive.size(); ++i)
      if (scores[alive[i]] > scores[alive[best]] ||
          (scores[alive[i]] == scores[alive[best]] && alive[i] < alive[best]))
        best = static_cast<int>(i);
    const int b = alive[best];
    kept.push_back(b);
    std::vector<int> next;
    for (int i : alive)
      if (i != b && iou(boxes[i], boxes[b]) <= thr) next.push_back(i);
    alive = std::move(next);
  }
  return kept;
}

inline double objectness(const std::vector<double>& logits) {
  long double z = 0.0L;
  for (double l : logits) z += std::exp(static_cast<long double>(l));
  long double fg = 0.0L;
  for (std::size_t k = 1; k < logits.size(); ++k) fg += std::exp(static_cast<long double>(logits[k])) / z;
  return static_cast<double>(fg);
}

// ---- evaluation -----------------------------------------------------------

/// Greedy one-to-one matching: for each detection in order, scan targets by
/// decreasing IoU (ties to the lower index) and take the first free one that
/// clears the threshold.
inline std::vector<int> greedy(const std::vector<std::vector<double>>& iou, double thr) {
  std::vector<int> out;
  std::vector<char> used(iou.empty() ? 0 : iou[0].size(), 0);
  for (const auto& row : iou) {
    std::vector<int> order(row.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return row[a] > row[b]; });
    int pick = -1;
    for (int t : order)
      if (!used[t] && row[t] >= thr) {
        pick = t;
        break;
      }
    if (pick >= 0) used[pick] = 1;
    out.push_back(pick);
  }
  return out;
}

struct Det {
  ldet::Box box;
  double score;
  bool seen;
};

struct Img {
  std::vector<Det> dets;
  std::vector<ldet::Box> gts;
};

inline std::vector<Det> order(std::vector<Det> d, bool exclude_seen) {
  std::vector<Det> out;
  std::vector<int> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (d[a].score != d[b].score) return d[a].score > d[b].score;
    const auto& x = d[a].box;
    const auto& y = d[b].box;
    if (x.x != y.x) return x.x < y.x;
    if (x.y != y.y) return x.y < y.y;
    if (x.w != y.w) return x.w < y.w;
    return x.h < y.h;
  });
  for (int i : idx)
    if (!(exclude_seen && d[i].seen)) out.push_back(d[i]);
  return out;
}

inline std::vector<std::vector<double>> ious(const std::vector<Det>& d, const std::vector<ldet::Box>& g,
                                             const std::function<double(const ldet::Box&, const ldet::Box&)>& iou) {
  std::vector<std::vector<double>> m(d.size(), std::vector<double>(g.size()));
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < g.size(); ++j) m[i][j] = iou(d[i].box, g[j]);
  return m;
}

inline std::map<int, double> ar(const std::vector<Img>& imgs, const std::vector<double>& thrs,
                                const std::vector<int>& ks, bool exclude_seen,
                                const std::function<double(const ldet::Box&, const ldet::Box&)>& iou) {
  std::map<int, double> out;
  for (int k : ks) {
    double total = 0.0;
    int n = 0;
    for (const auto& im : imgs) {
      if (im.gts.empty()) continue;
      ++n;
      auto d = order(im.dets, exclude_seen);
      if (static_cast<int>(d.size()) > k) d.resize(k);
      const auto m = ious(d, im.gts, iou);
      double r = 0.0;
      for (double t : thrs) {
        const auto g = greedy(m, t);
        r += static_cast<double>(std::count_if(g.begin(), g.end(), [](int v) { return v >= 0; })) /
             static_cast<double>(im.gts.size());
      }
      total += r / static_cast<double>(thrs.size());
    }
    out[k] = total / n;
  }
  return out;
}

/// 101-point interpolated AP with the interpolated precision taken literally
/// as max{precision(j) : recall(j) >= r}.
inline double ap(const std::vector<Img>& imgs, const std::vector<double>& thrs, int max_dets,
                 bool exclude_seen, const std::function<double(const ldet::Box&, const ldet::Box&)>& iou) {
  long npos = 0;
  for (const auto& im : imgs) npos += static_cast<long>(im.gts.size());
  double total = 0.0;
  for (double t : thrs) {
    struct Row {
      double score;
      std::size_t img;
      std::size_t rank;
      bool tp;
    };
    std::vector<Row> rows;
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      auto d = order(imgs[i].dets, exclude_seen);
      if (static_cast<int>(d.size()) > max_dets) d.resize(max_dets);
      const auto g = greedy(ious(d, imgs[i].gts, iou), t);
      for (std::size_t j = 0; j < d.size(); ++j) rows.push_back({d[j].score, i, j, g[j] >= 0});
    }
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.img != b.img) return a.img < b.img;
      return a.rank < b.rank;
    });
    std::vector<double> prec, rec;
    long tp = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      tp += rows[i].tp;
      prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
      rec.push_back(static_cast<double>(tp) / static_cast<double>(npos));
    }
    double sum = 0.0;
    for (int r = 0; r <= 100; ++r) {
      double best = 0.0;
      for (std::size_t j = 0; j < rows.size(); ++j)
        if (rec[j] >= r / 100.0) best = std::max(best, prec[j]);
      sum += best;
    }
    total += sum / 101.0;
  }
  return total / static_cast<double>(thrs.size());
}

}  // namespace oracle
