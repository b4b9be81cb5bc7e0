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

#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ldet/backerase.hpp"
#include "ldet/mask_codec.hpp"
#include "ldet/random.hpp"
#include "oracles.hpp"

using namespace ldet;

namespace {

double max_diff(const Image& a, const Image& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

Image random_image(Rng& rng, int h, int w, int c = 3) {
  Image img(h, w, c);
  for (double& v : img.data) v = rng.uniform();
  return img;
}

InstanceAnnotation square(int x, int y, int s, int h, int w, std::int64_t id = 1) {
  InstanceAnnotation a;
  a.id = id;
  a.category_id = a.original_category_id = 1;
  a.box = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(s),
           static_cast<double>(s)};
  Polygon p{{double(x), double(y), double(x + s), double(y), double(x + s), double(y + s),
             double(x), double(y + s)}};
  a.segmentation = std::vector<Polygon>{p};
  a.mask = rasterize_polygons({p}, h, w);
  return a;
}

ImageSample random_sample(Rng& rng, int h, int w) {
  ImageSample s;
  s.image_id = 7;
  s.image = random_image(rng, h, w);
  const int n = static_cast<int>(rng.uniform_int(1, 3));
  for (int i = 0; i < n; ++i) {
    const int sz = static_cast<int>(rng.uniform_int(2, std::min(h, w) / 2));
    s.annotations.push_back(square(static_cast<int>(rng.uniform_int(0, w - sz)),
                                   static_cast<int>(rng.uniform_int(0, h - sz)), sz, h, w, i + 1));
  }
  return s;
}

}  // namespace

TEST_CASE("gaussian smoothing") {
  Rng rng(1);
  const Image img = random_image(rng, 9, 11);
  CHECK(gaussian_smooth(img, 0.0) == img);
  CHECK(max_diff(gaussian_smooth(Image(9, 9, 3, 0.37), 1.5), Image(9, 9, 3, 0.37)) < 1e-12);
  CHECK_THROWS_AS(gaussian_smooth(img, -1.0), AugmentationError);

  Image impulse(9, 9, 1);
  impulse.at(4, 4, 0) = 1.0;
  const Image out = gaussian_smooth(impulse, 1.0);
  double norm = 0.0;
  for (int dy = -3; dy <= 3; ++dy)
    for (int dx = -3; dx <= 3; ++dx) norm += std::exp(-(dx * dx + dy * dy) / 2.0);
  CHECK(out.at(4, 4, 0) == doctest::Approx(1.0 / norm).epsilon(1e-12));

  for (double sigma : {0.5, 1.0, 2.0})
    CHECK(max_diff(gaussian_smooth(img, sigma), oracle::gaussian(img, sigma)) < 1e-12);
}

TEST_CASE("resampling kernels match naive loops") {
  Rng rng(2);
  const Image img = random_image(rng, 13, 17);
  CHECK(max_diff(upscale(img, 40, 33, UpscaleKernel::bilinear), oracle::bilinear(img, 40, 33)) < 1e-12);
  CHECK(max_diff(upscale(img, 40, 33, UpscaleKernel::nearest), oracle::nearest(img, 40, 33)) < 1e-12);
  CHECK(max_diff(downsample(img, 5, 4, DownsampleKernel::area), oracle::area(img, 5, 4)) < 1e-12);
  CHECK(max_diff(downsample(img, 5, 4, DownsampleKernel::nearest), oracle::nearest(img, 5, 4)) < 1e-12);
  CHECK_THROWS_AS(downsample(img, 20, 4, DownsampleKernel::area), AugmentationError);
}

TEST_CASE("background rectangle bounds and fallback") {
  Mask free(64, 64);
  BackEraseConfig cfg;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const PixelRect r = sample_background_rect(free, cfg, rng);
    CHECK(r.width == 8);
    CHECK(r.height == 8);
    CHECK((r.x >= 0 && r.x <= 56 && r.y >= 0 && r.y <= 56));
  }
  Rng a(4), b(4);
  CHECK(sample_background_rect(free, cfg, a) == sample_background_rect(free, cfg, b));

  Mask full(64, 64);
  std::fill(full.data.begin(), full.data.end(), 1);
  Rng rng(9);
  CHECK_NOTHROW(sample_background_rect(full, cfg, rng));

  // One free 8x8 corner: with enough retries it is found.
  Mask busy = full;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) busy.at(y, x) = 0;
  cfg.max_crop_retries = 20000;
  Rng r2(1);
  CHECK(sample_background_rect(busy, cfg, r2) == PixelRect{0, 0, 8, 8});

  Mask tiny(4, 4);
  CHECK_THROWS_AS(sample_background_rect(tiny, BackEraseConfig{}, rng), AugmentationError);
}

TEST_CASE("synthesize matches the step-by-step oracle") {
  Rng data(21);
  struct Case {
    UpscaleKernel up;
    DownsampleKernel down;
    double scale, pre, msk;
  };
  const std::vector<Case> cases{{UpscaleKernel::nearest, DownsampleKernel::nearest, 0.5, 0, 0},
                                {UpscaleKernel::bilinear, DownsampleKernel::area, 0.125, 1.0, 2.0},
                                {UpscaleKernel::bilinear, DownsampleKernel::area, 0.25, 0.7, 0.0},
                                {UpscaleKernel::nearest, DownsampleKernel::area, 0.3, 1.2, 1.0}};
  for (const Case& c : cases) {
    BackEraseConfig cfg;
    cfg.scale = c.scale;
    cfg.pre_smooth_sigma = c.pre;
    cfg.mask_smooth_sigma = c.msk;
    cfg.post_smooth_sigma = 0.0;
    cfg.upscale_kernel = c.up;
    cfg.downsample_kernel = c.down;
    for (int t = 0; t < 5; ++t) {
      const ImageSample s = random_sample(data, 32, 32);
      Rng rng(100 + t);
      const SynthesizedSample out = synthesize(s, cfg, rng);
      CHECK(max_diff(out.image, oracle::backerase(s, cfg, out.background_rect)) <= 1e-6);
      CHECK(out.annotations == s.annotations);
    }
  }
  // With post smoothing on as well.
  BackEraseConfig cfg;
  cfg.scale = 0.25;
  const ImageSample s = random_sample(data, 32, 32);
  Rng rng(5);
  const SynthesizedSample out = synthesize(s, cfg, rng);
  CHECK(max_diff(out.image, oracle::backerase(s, cfg, out.background_rect)) <= 1e-6);
}

TEST_CASE("blend with saturated masks") {
  Rng data(8);
  ImageSample s;
  s.image_id = 1;
  s.image = random_image(data, 16, 16);
  s.annotations.push_back(square(0, 0, 16, 16, 16));
  BackEraseConfig cfg;
  cfg.scale = 0.25;
  cfg.post_smooth_sigma = 0.0;
  Rng rng(1);
  const SynthesizedSample full = synthesize(s, cfg, rng);
  const Image smoothed = gaussian_smooth(s.image, cfg.pre_smooth_sigma);
  const Image band = upscale(downsample(smoothed, 4, 4, DownsampleKernel::area), 16, 16,
                             UpscaleKernel::bilinear);
  CHECK(max_diff(full.image, band) == 0.0);

  SynthesisOverrides zero{Image(16, 16, 1, 0.0)};
  Rng rng2(1);
  const SynthesizedSample bg = synthesize(s, cfg, rng2, zero);
  const Image patch = upscale(crop(smoothed, bg.background_rect), 16, 16, UpscaleKernel::bilinear);
  CHECK(max_diff(bg.image, patch) == 0.0);
}

TEST_CASE("synthesize invariants") {
  Rng data(31);
  BackEraseConfig cfg;
  for (int t = 0; t < 10; ++t) {
    const ImageSample s = random_sample(data, 40, 48);
    Rng a(t), b(t);
    const SynthesizedSample x = synthesize(s, cfg, a);
    const SynthesizedSample y = synthesize(s, cfg, b);
    CHECK(x.image == y.image);
    CHECK(x.background_rect == y.background_rect);
    CHECK(x.image.same_shape(s.image));
    CHECK(x.annotations == s.annotations);
    CHECK(x.source_id == s.image_id);
    CHECK(x.background_rect.width == 6);
    CHECK(x.background_rect.height == 5);
    for (double v : x.image.data) CHECK((v >= 0.0 && v <= 1.0));
    for (double v : x.union_mask.data) CHECK((v >= 0.0 && v <= 1.0));
  }
}

TEST_CASE("constant image: foreground and background agree") {
  ImageSample s;
  s.image = Image(32, 32, 3, 0.42);
  s.annotations.push_back(square(4, 4, 10, 32, 32));
  Rng rng(3);
  const SynthesizedSample out = synthesize(s, BackEraseConfig{}, rng);
  CHECK(max_diff(out.image, s.image) < 1e-12);
}

TEST_CASE("empty annotations follow the policy") {
  ImageSample s;
  s.image_id = 5;
  s.image = Image(32, 32, 3, 0.5);
  BackEraseConfig cfg;
  Rng rng(1);
  CHECK_THROWS_AS(synthesize(s, cfg, rng), AugmentationError);
  cfg.empty_policy = EmptyPolicy::pure_background;
  CHECK_NOTHROW(synthesize(s, cfg, rng));
}

TEST_CASE("config validation") {
  BackEraseConfig cfg;
  cfg.scale = 0.0;
  CHECK_THROWS_AS(cfg.validate(), AugmentationError);
  cfg.scale = 1.5;
  CHECK_THROWS_AS(cfg.validate(), AugmentationError);
  cfg = {};
  cfg.mask_smooth_sigma = -1;
  CHECK_THROWS_AS(cfg.validate(), AugmentationError);
  cfg = {};
  cfg.external_patch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), AugmentationError);
}

TEST_CASE("external corpus backgrounds") {
  Rng data(12);
  const ImageSample s = random_sample(data, 32, 32);
  std::vector<Image> corpus{random_image(data, 100, 100), random_image(data, 512, 512)};
  BackEraseConfig cfg;
  cfg.background_source = BackgroundSource::external_corpus;
  cfg.post_smooth_sigma = 0.0;
  Rng a(3), b(3);
  const SynthesizedSample x = synthesize_external(s, corpus, cfg, a);
  const SynthesizedSample y = synthesize_external(s, corpus, cfg, b);
  CHECK(x.corpus_index == 1);
  CHECK(x.background_rect.width == 256);
  CHECK(x.background_rect.height == 256);
  CHECK(x.image == y.image);
  CHECK(x.background_rect == y.background_rect);
  CHECK(x.annotations == s.annotations);

  Rng c(3);
  const SynthesizedSample z = synthesize_external(s, corpus, cfg, c, {Image(32, 32, 1, 0.0)});
  const Image patch = gaussian_smooth(crop(corpus[1], z.background_rect), cfg.pre_smooth_sigma);
  CHECK(max_diff(z.image, downsample(patch, 32, 32, DownsampleKernel::area)) < 1e-12);

  std::vector<Image> small{random_image(data, 100, 100)};
  Rng d(1);
  CHECK_THROWS_AS(synthesize_external(s, small, cfg, d), AugmentationError);
}
