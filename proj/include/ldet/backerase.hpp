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

// Background-erasing augmentation.
//
// A synthesized image keeps the annotated objects of a real image and replaces
// everything else with a small patch of the same image stretched to full size.
// The pipeline for one sample is:
//
//   smoothed   = gaussian_smooth(image, pre_smooth_sigma)
//   background = upscale(crop(smoothed, rect), H, W)      rect ~ floor(scale * size)
//   foreground = upscale(downsample(smoothed, scale), H, W)
//   M          = clamp(gaussian_smooth(union of masks, mask_smooth_sigma))
//   out        = gaussian_smooth(foreground * M + background * (1 - M), post_smooth_sigma)
//
// Annotations pass through untouched.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "ldet/annotations.hpp"
#include "ldet/random.hpp"

namespace ldet {

class AugmentationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class BackgroundSource { self_patch, external_corpus };
enum class UpscaleKernel { bilinear, nearest };
enum class DownsampleKernel { area, nearest };
enum class EmptyPolicy { error, pure_background };

struct BackEraseConfig {
  double scale = 1.0 / 8.0;
  double pre_smooth_sigma = 1.0;
  double mask_smooth_sigma = 2.0;
  double post_smooth_sigma = 1.0;
  BackgroundSource background_source = BackgroundSource::self_patch;
  int external_patch_size = 256;
  int max_crop_retries = 20;
  /// Maximum number of ground-truth mask pixels a background crop may cover.
  long overlap_budget = 0;
  UpscaleKernel upscale_kernel = UpscaleKernel::bilinear;
  DownsampleKernel downsample_kernel = DownsampleKernel::area;
  EmptyPolicy empty_policy = EmptyPolicy::error;
  std::uint64_t seed = 0;

  /// Throws AugmentationError on out-of-range fields.
  void validate() const;
};

/// Integer pixel rectangle.
struct PixelRect {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
  bool operator==(const PixelRect&) const = default;
};

struct SynthesizedSample {
  Image image;
  std::vector<InstanceAnnotation> annotations;
  /// Soft blend weight per pixel, single channel, values in [0, 1].
  Image union_mask;
  PixelRect background_rect;
  std::int64_t source_id = 0;
  /// Index of the corpus image the background came from; -1 for self patches.
  int corpus_index = -1;
};

/// Separable Gaussian blur per channel with mirrored borders (d c b a | a b c d).
/// Kernel radius is ceil(3 * sigma). sigma == 0 returns the input unchanged.
/// The output is clamped to [0, 1].
Image gaussian_smooth(const Image& image, double sigma);

/// Normalized 1-D kernel taps for offsets 0..radius (symmetric).
std::vector<double> gaussian_taps(double sigma);

/// Bilinear resize with half-pixel centers (sample position clamped to the
/// source), or nearest neighbour.
Image upscale(const Image& image, int height, int width, UpscaleKernel kernel);

/// Area-average resize to a smaller size (exact fractional pixel coverage), or
/// nearest neighbour.
Image downsample(const Image& image, int height, int width, DownsampleKernel kernel);

Image crop(const Image& image, const PixelRect& rect);

/// Samples a crop of floor(scale * size) uniformly; resamples up to
/// max_crop_retries times while the crop covers more than overlap_budget
/// pixels of `occupied`, then falls back to the least-overlapping attempt.
PixelRect sample_background_rect(const Mask& occupied, const BackEraseConfig& config, Rng& rng);

struct BackgroundPatch {
  Image patch;
  PixelRect rect;
};

/// Crops a background patch from the pre-smoothed image of `sample`.
BackgroundPatch sample_background_patch(const ImageSample& sample, const BackEraseConfig& config,
                                        Rng& rng);

/// out = foreground * mask + background * (1 - mask), per pixel and channel.
Image blend(const Image& foreground, const Image& background, const Image& mask);

/// Optional overrides used by tests to pin the blend weights.
struct SynthesisOverrides {
  std::optional<Image> mask;
};

SynthesizedSample synthesize(const ImageSample& sample, const BackEraseConfig& config, Rng& rng,
                             const SynthesisOverrides& overrides = {});

/// Like synthesize, but the background is an external_patch_size square crop
/// of a random corpus image, resized to the sample. Corpus images smaller than
/// the patch are skipped; an empty usable corpus throws AugmentationError.
SynthesizedSample synthesize_external(const ImageSample& sample, std::span<const Image> corpus,
                                      const BackEraseConfig& config, Rng& rng,
                                      const SynthesisOverrides& overrides = {});

}  // namespace ldet
