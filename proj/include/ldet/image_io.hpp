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

#include <filesystem>

#include "ldet/image.hpp"

namespace ldet {

/// Reads PNG/JPEG of any common bit depth as RGB in [0, 1]. Grayscale is
/// replicated to three channels and alpha is dropped.
Image read_image(const std::filesystem::path& path);

/// Writes an 8-bit PNG (values clamped to [0, 1] and rounded).
void write_png(const std::filesystem::path& path, const Image& image);

}  // namespace ldet
