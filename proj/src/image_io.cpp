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

#include "ldet/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace ldet {

Image read_image(const std::filesystem::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw std::runtime_error("cannot read image " + path.string());

  double denom = 1.0;
  switch (raw.depth()) {
    case CV_8U: denom = 255.0; break;
    case CV_16U: denom = 65535.0; break;
    case CV_32F:
    case CV_64F: denom = 1.0; break;
    default: throw std::runtime_error("unsupported bit depth in " + path.string());
  }
  cv::Mat rgb;
  switch (raw.channels()) {
    case 1: cv::cvtColor(raw, rgb, cv::COLOR_GRAY2RGB); break;
    case 3: cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(raw, rgb, cv::COLOR_BGRA2RGB); break;
    default: throw std::runtime_error("unsupported channel count in " + path.string());
  }
  // Divide rather than multiply by the reciprocal so 8-bit values map to
  // exactly k / 255.
  cv::Mat f;
  rgb.convertTo(f, CV_64FC3);

  Image out(f.rows, f.cols, 3);
  for (int y = 0; y < f.rows; ++y) {
    const auto* row = f.ptr<cv::Vec3d>(y);
    for (int x = 0; x < f.cols; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = std::clamp(row[x][c] / denom, 0.0, 1.0);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3)
    throw std::invalid_argument("write_png: expected 1 or 3 channels");
  cv::Mat m(image.height, image.width, image.channels == 3 ? CV_8UC3 : CV_8UC1);
  for (int y = 0; y < image.height; ++y) {
    auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < image.channels; ++c) {
        // OpenCV stores BGR.
        const int dst = image.channels == 3 ? 2 - c : c;
        const double v = std::clamp(image.at(y, x, c), 0.0, 1.0);
        row[x * image.channels + dst] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  if (!cv::imwrite(path.string(), m)) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace ldet
