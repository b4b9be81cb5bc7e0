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

// Minimal reverse-mode differentiation over dense double tensors, with just
// the operators a small two-stage detector needs. Values are computed eagerly
// when an op is recorded; Tape::backward replays the recorded closures in
// reverse order.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ldet/boxes.hpp"

namespace ldet::ag {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0);

  std::size_t numel() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  bool operator==(const Tensor&) const = default;
};

std::size_t shape_numel(const std::vector<int>& shape);

struct Parameter {
  std::string name;
  Tensor value;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Var constant(Tensor value);
  /// Leaf whose gradient is exported under `slot` by parameter_grads().
  Var parameter(const Parameter& p, int slot);
  /// Records an op output. The closure runs only if some input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  /// Gradient buffer of `v`, zero-initialized on first access.
  Tensor& grad(Var v) { return grad(v.id); }
  Tensor& grad(int id);
  bool has_grad(int id) const { return !nodes_[id].grad.data.empty(); }

  /// Seeds d(root)/d(root) = 1 and back-propagates. `root` must be a scalar.
  void backward(Var root);

  /// Adds each parameter leaf's gradient into grads[slot].
  void accumulate_parameter_grads(std::vector<Tensor>& grads) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    bool requires_grad = false;
    int slot = -1;
  };
  std::vector<Node> nodes_;
};

/// x [N, C, H, W], weight [O, C, k, k], bias [O] -> [N, O, Ho, Wo], zero padding.
Var conv2d(Tape& tape, Var x, Var weight, Var bias, int stride, int pad);
Var relu(Tape& tape, Var x);
/// x [N, D], weight [O, D], bias [O] -> [N, O].
Var linear(Tape& tape, Var x, Var weight, Var bias);
/// Collapses all but the leading dimension.
Var flatten(Tape& tape, Var x);

/// Bilinear region pooling with half-pixel alignment. features [1, C, H, W],
/// boxes in image coordinates -> [R, C, size, size]. Each bin averages a
/// sampling_ratio x sampling_ratio grid.
Var roi_align(Tape& tape, Var features, std::span<const Box> boxes, int size,
              double spatial_scale, int sampling_ratio);

/// Picks elements by flat index -> [n].
Var gather(Tape& tape, Var x, std::vector<std::int64_t> indices);

/// Sum over elements of binary cross-entropy with logits.
Var bce_with_logits_sum(Tape& tape, Var logits, std::vector<double> targets);
/// Sum of smooth-L1 (Huber with transition `beta`; beta == 0 is L1).
Var smooth_l1_sum(Tape& tape, Var x, std::vector<double> targets, double beta);
/// logits [N, C], targets in [0, C) -> summed negative log-likelihood.
Var softmax_cross_entropy_sum(Tape& tape, Var logits, std::vector<int> targets);

Var add(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var a, double factor);
Var sum_scalars(Tape& tape, std::span<const Var> scalars);

}  // namespace ldet::ag
