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

#include "ldet/backerase.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ldet {

namespace {

int mirror_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

int scaled_extent(double scale, int size) {
  return static_cast<int>(std::floor(scale * size + 1e-9));
}

struct AxisWeights {
  std::vector<int> first;   // first source index per output index
  std::vector<std::vector<double>> weights;
};

// Exact fractional coverage of source pixels by each output pixel.
AxisWeights area_weights(int in, int out) {
  AxisWeights aw;
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double lo = o * ratio, hi = (o + 1) * ratio;
    const int s0 = static_cast<int>(std::floor(lo));
    const int s1 = std::min(in - 1, static_cast<int>(std::ceil(hi)) - 1);
    std::vector<double> w;
    for (int s = s0; s <= s1; ++s) {
      const double cover = std::min(hi, s + 1.0) - std::max(lo, static_cast<double>(s));
      w.push_back(std::max(0.0, cover) / ratio);
    }
    aw.first.push_back(s0);
    aw.weights.push_back(std::move(w));
  }
  return aw;
}

int nearest_source(int o, int in, int out) {
  return std::min(in - 1, static_cast<int>(std::floor((o + 0.5) * in / out)));
}

Image resize_to(const Image& image, int height, int width, const BackEraseConfig& config) {
  if (height <= image.height && width <= image.width)
    return downsample(image, height, width, config.downsample_kernel);
  return upscale(image, height, width, config.upscale_kernel);
}

Image mask_to_image(const Mask& m) {
  Image out(m.height, m.width, 1);
  for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] = m.data[i] ? 1.0 : 0.0;
  return out;
}

void check_mask_shape(const Image& mask, const Image& image) {
  if (mask.height != image.height || mask.width != image.width || mask.channels != 1)
    throw AugmentationError("blend mask must be single-channel and match the image size");
}

// Everything after the background canvas is chosen: band-limit the foreground,
// build the soft mask, blend, and smooth.
SynthesizedSample compose(const ImageSample& sample, const Image& smoothed, Image background,
                          const BackEraseConfig& config, const SynthesisOverrides& overrides) {
  const int h = sample.image.height, w = sample.image.width;
  const int dh = scaled_extent(config.scale, h), dw = scaled_extent(config.scale, w);
  if (dh < 1 || dw < 1)
    throw AugmentationError("image smaller than 1/scale; cannot band-limit foreground");
  const Image foreground =
      upscale(downsample(smoothed, dh, dw, config.downsample_kernel), h, w, config.upscale_kernel);

  Image mask;
  if (overrides.mask) {
    mask = *overrides.mask;
  } else if (sample.annotations.empty()) {
    mask = Image(h, w, 1, 0.0);
  } else {
    mask = gaussian_smooth(mask_to_image(union_mask(sample.annotations, h, w)),
                           config.mask_smooth_sigma);
  }
  check_mask_shape(mask, sample.image);
  for (double& v : mask.data) v = std::clamp(v, 0.0, 1.0);

  SynthesizedSample out;
  out.image = gaussian_smooth(blend(foreground, background, mask), config.post_smooth_sigma);
  out.annotations = sample.annotations;
  out.union_mask = std::move(mask);
  out.source_id = sample.image_id;
  return out;
}

void check_sample(const ImageSample& sample, const BackEraseConfig& config) {
  config.validate();
  if (sample.annotations.empty() && config.empty_policy == EmptyPolicy::error)
    throw AugmentationError("image " + std::to_string(sample.image_id) +
                            " has no annotations; skip it or allow pure-background output");
}

}  // namespace

void BackEraseConfig::validate() const {
  if (!(scale > 0.0 && scale <= 1.0)) throw AugmentationError("scale must lie in (0, 1]");
  if (pre_smooth_sigma < 0.0 || mask_smooth_sigma < 0.0 || post_smooth_sigma < 0.0)
    throw AugmentationError("smoothing sigmas must be non-negative");
  if (external_patch_size <= 0) throw AugmentationError("external_patch_size must be positive");
  if (max_crop_retries < 0) throw AugmentationError("max_crop_retries must be non-negative");
}

std::vector<double> gaussian_taps(double sigma) {
  if (sigma < 0.0) throw AugmentationError("gaussian sigma must be non-negative");
  if (sigma == 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(radius + 1);
  double total = 0.0;
  for (int k = 0; k <= radius; ++k) {
    taps[k] = std::exp(-0.5 * k * k / (sigma * sigma));
    total += k == 0 ? taps[k] : 2.0 * taps[k];
  }
  for (double& t : taps) t /= total;
  return taps;
}

Image gaussian_smooth(const Image& image, double sigma) {
  if (sigma < 0.0) throw AugmentationError("gaussian sigma must be non-negative");
  if (sigma == 0.0) return image;
  const std::vector<double> taps = gaussian_taps(sigma);
  const int r = static_cast<int>(taps.size()) - 1;
  const int h = image.height, w = image.width, ch = image.channels;

  Image tmp(h, w, ch);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        double acc = taps[0] * image.at(y, x, c);
        for (int k = 1; k <= r; ++k)
          acc += taps[k] * (image.at(y, mirror_index(x - k, w), c) +
                            image.at(y, mirror_index(x + k, w), c));
        tmp.at(y, x, c) = acc;
      }

  Image out(h, w, ch);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        double acc = taps[0] * tmp.at(y, x, c);
        for (int k = 1; k <= r; ++k)
          acc += taps[k] * (tmp.at(mirror_index(y - k, h), x, c) +
                            tmp.at(mirror_index(y + k, h), x, c));
        out.at(y, x, c) = std::clamp(acc, 0.0, 1.0);
      }
  return out;
}

Image upscale(const Image& image, int height, int width, UpscaleKernel kernel) {
  if (image.empty() || height <= 0 || width <= 0)
    throw AugmentationError("upscale: empty input or output size");
  Image out(height, width, image.channels);
  if (kernel == UpscaleKernel::nearest) {
    for (int y = 0; y < height; ++y) {
      const int sy = nearest_source(y, image.height, height);
      for (int x = 0; x < width; ++x) {
        const int sx = nearest_source(x, image.width, width);
        for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(sy, sx, c);
      }
    }
    return out;
  }
  const double ry = static_cast<double>(image.height) / height;
  const double rx = static_cast<double>(image.width) / width;
  for (int y = 0; y < height; ++y) {
    const double sy = std::clamp((y + 0.5) * ry - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double fy = sy - y0;
    for (int x = 0; x < width; ++x) {
      const double sx = std::clamp((x + 0.5) * rx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double fx = sx - x0;
      for (int c = 0; c < image.channels; ++c) {
        const double top = (1.0 - fx) * image.at(y0, x0, c) + fx * image.at(y0, x1, c);
        const double bot = (1.0 - fx) * image.at(y1, x0, c) + fx * image.at(y1, x1, c);
        out.at(y, x, c) = (1.0 - fy) * top + fy * bot;
      }
    }
  }
  return out;
}

Image downsample(const Image& image, int height, int width, DownsampleKernel kernel) {
  if (image.empty() || height <= 0 || width <= 0)
    throw AugmentationError("downsample: empty input or output size");
  if (height > image.height || width > image.width)
    throw AugmentationError("downsample: output larger than input");
  Image out(height, width, image.channels);
  if (kernel == DownsampleKernel::nearest) {
    for (int y = 0; y < height; ++y) {
      const int sy = nearest_source(y, image.height, height);
      for (int x = 0; x < width; ++x) {
        const int sx = nearest_source(x, image.width, width);
        for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(sy, sx, c);
      }
    }
    return out;
  }
  const AxisWeights wy = area_weights(image.height, height);
  const AxisWeights wx = area_weights(image.width, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < image.channels; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < wy.weights[y].size(); ++i)
          for (std::size_t j = 0; j < wx.weights[x].size(); ++j)
            acc += wy.weights[y][i] * wx.weights[x][j] *
                   image.at(wy.first[y] + static_cast<int>(i), wx.first[x] + static_cast<int>(j), c);
        out.at(y, x, c) = acc;
      }
  return out;
}

Image crop(const Image& image, const PixelRect& rect) {
  if (rect.x < 0 || rect.y < 0 || rect.width <= 0 || rect.height <= 0 ||
      rect.x + rect.width > image.width || rect.y + rect.height > image.height)
    throw AugmentationError("crop rectangle outside image");
  Image out(rect.height, rect.width, image.channels);
  for (int y = 0; y < rect.height; ++y)
    for (int x = 0; x < rect.width; ++x)
      for (int c = 0; c < image.channels; ++c)
        out.at(y, x, c) = image.at(rect.y + y, rect.x + x, c);
  return out;
}

PixelRect sample_background_rect(const Mask& occupied, const BackEraseConfig& config, Rng& rng) {
  const int ph = scaled_extent(config.scale, occupied.height);
  const int pw = scaled_extent(config.scale, occupied.width);
  if (ph < 1 || pw < 1)
    throw AugmentationError("image smaller than 1/scale in at least one dimension");

  PixelRect best;
  long best_overlap = -1;
  for (int attempt = 0; attempt <= config.max_crop_retries; ++attempt) {
    PixelRect r{static_cast<int>(rng.uniform_int(0, occupied.width - pw)),
                static_cast<int>(rng.uniform_int(0, occupied.height - ph)), pw, ph};
    long overlap = 0;
    for (int y = r.y; y < r.y + ph; ++y)
      for (int x = r.x; x < r.x + pw; ++x) overlap += occupied.at(y, x);
    if (best_overlap < 0 || overlap < best_overlap) {
      best = r;
      best_overlap = overlap;
    }
    if (overlap <= config.overlap_budget) break;
  }
  return best;
}

BackgroundPatch sample_background_patch(const ImageSample& sample, const BackEraseConfig& config,
                                        Rng& rng) {
  config.validate();
  const Image smoothed = gaussian_smooth(sample.image, config.pre_smooth_sigma);
  const Mask occupied = union_mask(sample.annotations, sample.image.height, sample.image.width);
  const PixelRect rect = sample_background_rect(occupied, config, rng);
  return BackgroundPatch{crop(smoothed, rect), rect};
}

Image blend(const Image& foreground, const Image& background, const Image& mask) {
  if (!foreground.same_shape(background))
    throw AugmentationError("blend: foreground and background shapes differ");
  check_mask_shape(mask, foreground);
  Image out(foreground.height, foreground.width, foreground.channels);
  const int ch = foreground.channels;
  for (std::size_t p = 0; p < mask.data.size(); ++p) {
    const double m = mask.data[p];
    for (int c = 0; c < ch; ++c) {
      const std::size_t i = p * ch + c;
      out.data[i] = foreground.data[i] * m + background.data[i] * (1.0 - m);
    }
  }
  return out;
}

SynthesizedSample synthesize(const ImageSample& sample, const BackEraseConfig& config, Rng& rng,
                             const SynthesisOverrides& overrides) {
  check_sample(sample, config);
  const int h = sample.image.height, w = sample.image.width;
  const Image smoothed = gaussian_smooth(sample.image, config.pre_smooth_sigma);
  const Mask occupied = union_mask(sample.annotations, h, w);
  const PixelRect rect = sample_background_rect(occupied, config, rng);
  Image background = upscale(crop(smoothed, rect), h, w, config.upscale_kernel);

  SynthesizedSample out = compose(sample, smoothed, std::move(background), config, overrides);
  out.background_rect = rect;
  return out;
}

SynthesizedSample synthesize_external(const ImageSample& sample, std::span<const Image> corpus,
                                      const BackEraseConfig& config, Rng& rng,
                                      const SynthesisOverrides& overrides) {
  check_sample(sample, config);
  const int size = config.external_patch_size;
  std::vector<int> usable;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    if (corpus[i].height >= size && corpus[i].width >= size) usable.push_back(static_cast<int>(i));
  if (usable.empty())
    throw AugmentationError("no corpus image is at least " + std::to_string(size) + "x" +
                            std::to_string(size));

  const int index = usable[rng.uniform_int(0, static_cast<std::int64_t>(usable.size()) - 1)];
  const Image& source = corpus[index];
  const PixelRect rect{static_cast<int>(rng.uniform_int(0, source.width - size)),
                       static_cast<int>(rng.uniform_int(0, source.height - size)), size, size};
  Image patch = gaussian_smooth(crop(source, rect), config.pre_smooth_sigma);
  if (patch.channels != sample.image.channels)
    throw AugmentationError("corpus image channel count differs from the sample");
  Image background = resize_to(patch, sample.image.height, sample.image.width, config);

  const Image smoothed = gaussian_smooth(sample.image, config.pre_smooth_sigma);
  SynthesizedSample out = compose(sample, smoothed, std::move(background), config, overrides);
  out.background_rect = rect;
  out.corpus_index = index;
  return out;
}

}  // namespace ldet
