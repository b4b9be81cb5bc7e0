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

// Checkpoint archive, version 1. All integers little-endian.
//
//   char[8]  magic "LDETCKPT"
//   u32      format version
//   u64      length of the config document, then that many bytes of JSON
//            (the DetectorConfig)
//   u32      number of arrays
//   per array:
//     u32 name length, name bytes
//     u32 rank, rank x i32 dimensions
//     f64 values, row-major

#pragma once

#include <filesystem>
#include <string>

#include "ldet/detector.hpp"

namespace ldet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Detector& detector);
Detector deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Detector& detector);
/// Throws std::runtime_error naming the path when it cannot be read.
Detector load_checkpoint(const std::filesystem::path& path);

}  // namespace ldet
