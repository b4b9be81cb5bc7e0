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

#include "ldet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ldet {

namespace {

constexpr char kMagic[8] = {'L', 'D', 'E', 'T', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, s_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > s_.size()) throw std::runtime_error("truncated checkpoint");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Detector& detector) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = to_json(detector.config()).dump();
  put<std::uint64_t>(out, cfg.size());
  out += cfg;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(detector.parameters().size()));
  for (const auto& p : detector.parameters()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.shape.size()));
    for (int d : p.value.shape) put<std::int32_t>(out, d);
    for (double v : p.value.data) put<double>(out, v);
  }
  return out;
}

Detector deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
    throw std::runtime_error("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto cfg_len = r.get<std::uint64_t>();
  Detector det(detector_config_from_json(nlohmann::json::parse(r.bytes(cfg_len))));

  const auto count = r.get<std::uint32_t>();
  if (count != det.parameters().size())
    throw std::runtime_error("checkpoint parameter count does not match its config");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    std::vector<int> shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.get<std::int32_t>());
    auto& p = det.parameters().at(det.parameter_index(name));
    if (p.value.shape != shape) throw std::runtime_error("shape mismatch for parameter " + name);
    for (double& v : p.value.data) v = r.get<double>();
  }
  if (!r.done()) throw std::runtime_error("trailing bytes in checkpoint");
  return det;
}

void save_checkpoint(const std::filesystem::path& path, const Detector& detector) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::string bytes = serialize_checkpoint(detector);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Detector load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace ldet
