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

#include "ldet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Core>

namespace ldet::ag {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

// Left-to-right sum. Eigen's vectorized reductions split work by pointer
// alignment, which would make results depend on where buffers land.
template <typename V>
double ordered_sum(const V& v) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += v(i);
  return s;
}

void expect(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

void im2col(const double* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* col) {
  const int plane = ho * wo;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* dst = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * plane;
        const double* src = x + static_cast<std::size_t>(ci) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(dst + oy * wo, dst + (oy + 1) * wo, 0.0);
            continue;
          }
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[oy * wo + ox] = (ix >= 0 && ix < w) ? src[iy * w + ix] : 0.0;
          }
        }
      }
}

void col2im(const double* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* x) {
  const int plane = ho * wo;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* src = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * plane;
        double* dst = x + static_cast<std::size_t>(ci) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[iy * w + ix] += src[oy * wo + ox];
          }
        }
      }
}

struct Tap {
  int bin;
  int index;
  double weight;
};

// Bilinear taps for every bin of one region, weights already divided by the
// number of samples per bin.
void roi_taps(const Box& box, int size, double spatial_scale, int sampling_ratio, int h, int w,
              std::vector<Tap>& taps) {
  taps.clear();
  const double x0 = box.x * spatial_scale - 0.5;
  const double y0 = box.y * spatial_scale - 0.5;
  const double bin_w = box.w * spatial_scale / size;
  const double bin_h = box.h * spatial_scale / size;
  const double inv_count = 1.0 / (sampling_ratio * sampling_ratio);
  for (int py = 0; py < size; ++py)
    for (int px = 0; px < size; ++px) {
      const int bin = py * size + px;
      for (int iy = 0; iy < sampling_ratio; ++iy) {
        double y = y0 + py * bin_h + (iy + 0.5) * bin_h / sampling_ratio;
        for (int ix = 0; ix < sampling_ratio; ++ix) {
          double x = x0 + px * bin_w + (ix + 0.5) * bin_w / sampling_ratio;
          if (y < -1.0 || y > h || x < -1.0 || x > w) continue;
          double yy = std::max(y, 0.0), xx = std::max(x, 0.0);
          int y_lo = static_cast<int>(yy), x_lo = static_cast<int>(xx);
          int y_hi, x_hi;
          if (y_lo >= h - 1) {
            y_hi = y_lo = h - 1;
            yy = y_lo;
          } else {
            y_hi = y_lo + 1;
          }
          if (x_lo >= w - 1) {
            x_hi = x_lo = w - 1;
            xx = x_lo;
          } else {
            x_hi = x_lo + 1;
          }
          const double ly = yy - y_lo, lx = xx - x_lo, hy = 1.0 - ly, hx = 1.0 - lx;
          taps.push_back({bin, y_lo * w + x_lo, hy * hx * inv_count});
          taps.push_back({bin, y_lo * w + x_hi, hy * lx * inv_count});
          taps.push_back({bin, y_hi * w + x_lo, ly * hx * inv_count});
          taps.push_back({bin, y_hi * w + x_hi, ly * lx * inv_count});
        }
      }
    }
}

}  // namespace

Tensor::Tensor(std::vector<int> s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, -1});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(const Parameter& p, int slot) {
  nodes_.push_back(Node{p.value, {}, {}, true, slot});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
  bool needs = false;
  for (Var v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
  Node n{std::move(value), {}, {}, needs, -1};
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad(int id) {
  Node& n = nodes_.at(id);
  if (n.grad.data.empty()) n.grad = Tensor(n.value.shape, 0.0);
  return n.grad;
}

void Tape::backward(Var root) {
  expect(value(root).numel() == 1, "backward: root must be a scalar");
  if (!requires_grad(root)) return;
  grad(root).data[0] += 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.backward && has_grad(id)) n.backward(*this, id);
  }
}

void Tape::accumulate_parameter_grads(std::vector<Tensor>& grads) const {
  for (const Node& n : nodes_) {
    if (n.slot < 0 || n.grad.data.empty()) continue;
    Tensor& g = grads.at(n.slot);
    if (g.data.empty()) g = Tensor(n.value.shape, 0.0);
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
  }
}

Var conv2d(Tape& tape, Var x, Var weight, Var bias, int stride, int pad) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(weight);
  expect(xv.shape.size() == 4 && wv.shape.size() == 4, "conv2d: expected 4-d tensors");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int o = wv.dim(0), k = wv.dim(2);
  expect(wv.dim(1) == c && wv.dim(3) == k, "conv2d: weight shape mismatch");
  expect(tape.value(bias).numel() == static_cast<std::size_t>(o), "conv2d: bias shape mismatch");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  expect(ho > 0 && wo > 0, "conv2d: output would be empty");
  const int ckk = c * k * k, plane = ho * wo;

  std::vector<double> cols(static_cast<std::size_t>(n) * ckk * plane);
  Tensor out({n, o, ho, wo});
  CMapR wm(wv.data.data(), o, ckk);
  const auto& bv = tape.value(bias).data;
  for (int i = 0; i < n; ++i) {
    double* col = cols.data() + static_cast<std::size_t>(i) * ckk * plane;
    im2col(xv.data.data() + static_cast<std::size_t>(i) * c * h * w, c, h, w, k, stride, pad, ho,
           wo, col);
    MapR om(out.data.data() + static_cast<std::size_t>(i) * o * plane, o, plane);
    om.noalias() = wm * CMapR(col, ckk, plane);
    for (int oc = 0; oc < o; ++oc) om.row(oc).array() += bv[oc];
  }

  return tape.record(std::move(out), {x, weight, bias},
                     [=, cols = std::move(cols)](Tape& t, int self) {
                       const Tensor& g = t.grad(self);
                       const Tensor& wv2 = t.value(weight);
                       CMapR wm2(wv2.data.data(), o, ckk);
                       for (int i = 0; i < n; ++i) {
                         CMapR gm(g.data.data() + static_cast<std::size_t>(i) * o * plane, o, plane);
                         const double* col = cols.data() + static_cast<std::size_t>(i) * ckk * plane;
                         if (t.requires_grad(weight)) {
                           MapR dw(t.grad(weight).data.data(), o, ckk);
                           dw.noalias() += gm * CMapR(col, ckk, plane).transpose();
                         }
                         if (t.requires_grad(bias)) {
                           auto& db = t.grad(bias).data;
                           for (int oc = 0; oc < o; ++oc) db[oc] += ordered_sum(gm.row(oc));
                         }
                         if (t.requires_grad(x)) {
                           MatR dcol = wm2.transpose() * gm;
                           col2im(dcol.data(), c, h, w, k, stride, pad, ho, wo,
                                  t.grad(x).data.data() + static_cast<std::size_t>(i) * c * h * w);
                         }
                       }
                     });
}

Var relu(Tape& tape, Var x) {
  Tensor out = tape.value(x);
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return tape.record(std::move(out), {x}, [=](Tape& t, int self) {
    const auto& g = t.grad(self).data;
    const auto& xv = t.value(x).data;
    auto& dx = t.grad(x).data;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) dx[i] += g[i];
  });
}

Var linear(Tape& tape, Var x, Var weight, Var bias) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(weight);
  expect(xv.shape.size() == 2 && wv.shape.size() == 2 && xv.dim(1) == wv.dim(1),
         "linear: shape mismatch");
  const int n = xv.dim(0), d = xv.dim(1), o = wv.dim(0);
  Tensor out({n, o});
  MapR om(out.data.data(), n, o);
  om.noalias() = CMapR(xv.data.data(), n, d) * CMapR(wv.data.data(), o, d).transpose();
  const auto& bv = tape.value(bias).data;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < o; ++j) om(i, j) += bv[j];
  return tape.record(std::move(out), {x, weight, bias}, [=](Tape& t, int self) {
    CMapR gm(t.grad(self).data.data(), n, o);
    if (t.requires_grad(x)) {
      MapR dx(t.grad(x).data.data(), n, d);
      dx.noalias() += gm * CMapR(t.value(weight).data.data(), o, d);
    }
    if (t.requires_grad(weight)) {
      MapR dw(t.grad(weight).data.data(), o, d);
      dw.noalias() += gm.transpose() * CMapR(t.value(x).data.data(), n, d);
    }
    if (t.requires_grad(bias)) {
      auto& db = t.grad(bias).data;
      for (int j = 0; j < o; ++j) db[j] += ordered_sum(gm.col(j));
    }
  });
}

Var flatten(Tape& tape, Var x) {
  Tensor out = tape.value(x);
  const int lead = out.shape.empty() ? 1 : out.shape[0];
  const int rest = lead == 0 ? 0 : static_cast<int>(out.numel() / lead);
  out.shape = {lead, rest};
  return tape.record(std::move(out), {x}, [=](Tape& t, int self) {
    const auto& g = t.grad(self).data;
    auto& dx = t.grad(x).data;
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

Var roi_align(Tape& tape, Var features, std::span<const Box> boxes, int size,
              double spatial_scale, int sampling_ratio) {
  const Tensor& fv = tape.value(features);
  expect(fv.shape.size() == 4 && fv.dim(0) == 1, "roi_align: expected [1, C, H, W] features");
  const int c = fv.dim(1), h = fv.dim(2), w = fv.dim(3);
  const int r = static_cast<int>(boxes.size());
  const int bins = size * size;
  Tensor out({r, c, size, size});
  const bool keep = tape.requires_grad(features);
  std::vector<std::vector<Tap>> all_taps(keep ? r : 0);
  std::vector<Tap> taps;
  const std::size_t fplane = static_cast<std::size_t>(h) * w;

  // Channel-last copy so every tap touches a contiguous run of channels.
  std::vector<double> hwc(fplane * c);
  for (int ci = 0; ci < c; ++ci)
    for (std::size_t p = 0; p < fplane; ++p) hwc[p * c + ci] = fv.data[ci * fplane + p];
  std::vector<double> acc(static_cast<std::size_t>(bins) * c);
  for (int ri = 0; ri < r; ++ri) {
    roi_taps(boxes[ri], size, spatial_scale, sampling_ratio, h, w, taps);
    std::fill(acc.begin(), acc.end(), 0.0);
    for (const Tap& tp : taps) {
      const double* f = hwc.data() + static_cast<std::size_t>(tp.index) * c;
      double* a = acc.data() + static_cast<std::size_t>(tp.bin) * c;
      for (int ci = 0; ci < c; ++ci) a[ci] += tp.weight * f[ci];
    }
    double* o = out.data.data() + static_cast<std::size_t>(ri) * c * bins;
    for (int b = 0; b < bins; ++b)
      for (int ci = 0; ci < c; ++ci) o[static_cast<std::size_t>(ci) * bins + b] = acc[b * c + ci];
    if (keep) all_taps[ri] = taps;
  }
  return tape.record(std::move(out), {features},
                     [=, all_taps = std::move(all_taps)](Tape& t, int self) {
                       const auto& g = t.grad(self).data;
                       std::vector<double> dhwc(fplane * c, 0.0), gb(static_cast<std::size_t>(bins) * c);
                       for (int ri = 0; ri < r; ++ri) {
                         const double* go = g.data() + static_cast<std::size_t>(ri) * c * bins;
                         for (int ci = 0; ci < c; ++ci)
                           for (int b = 0; b < bins; ++b) gb[b * c + ci] = go[static_cast<std::size_t>(ci) * bins + b];
                         for (const Tap& tp : all_taps[ri]) {
                           double* d = dhwc.data() + static_cast<std::size_t>(tp.index) * c;
                           const double* gg = gb.data() + static_cast<std::size_t>(tp.bin) * c;
                           for (int ci = 0; ci < c; ++ci) d[ci] += tp.weight * gg[ci];
                         }
                       }
                       auto& df = t.grad(features).data;
                       for (int ci = 0; ci < c; ++ci)
                         for (std::size_t p = 0; p < fplane; ++p) df[ci * fplane + p] += dhwc[p * c + ci];
                     });
}

Var gather(Tape& tape, Var x, std::vector<std::int64_t> indices) {
  const auto& xv = tape.value(x).data;
  Tensor out({static_cast<int>(indices.size())});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    expect(indices[i] >= 0 && static_cast<std::size_t>(indices[i]) < xv.size(),
           "gather: index out of range");
    out.data[i] = xv[indices[i]];
  }
  return tape.record(std::move(out), {x}, [=, idx = std::move(indices)](Tape& t, int self) {
    const auto& g = t.grad(self).data;
    auto& dx = t.grad(x).data;
    for (std::size_t i = 0; i < idx.size(); ++i) dx[idx[i]] += g[i];
  });
}

Var bce_with_logits_sum(Tape& tape, Var logits, std::vector<double> targets) {
  const auto& xv = tape.value(logits).data;
  expect(xv.size() == targets.size(), "bce_with_logits_sum: size mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double x = xv[i];
    loss += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return tape.record(Tensor({1}, loss), {logits}, [=, tg = std::move(targets)](Tape& t, int self) {
    const double g = t.grad(self).data[0];
    const auto& xv2 = t.value(logits).data;
    auto& dx = t.grad(logits).data;
    for (std::size_t i = 0; i < xv2.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv2[i]));
      dx[i] += g * (s - tg[i]);
    }
  });
}

Var smooth_l1_sum(Tape& tape, Var x, std::vector<double> targets, double beta) {
  const auto& xv = tape.value(x).data;
  expect(xv.size() == targets.size(), "smooth_l1_sum: size mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double d = std::abs(xv[i] - targets[i]);
    loss += (beta > 0.0 && d < beta) ? 0.5 * d * d / beta : d - 0.5 * beta;
  }
  return tape.record(Tensor({1}, loss), {x}, [=, tg = std::move(targets)](Tape& t, int self) {
    const double g = t.grad(self).data[0];
    const auto& xv2 = t.value(x).data;
    auto& dx = t.grad(x).data;
    for (std::size_t i = 0; i < xv2.size(); ++i) {
      const double d = xv2[i] - tg[i];
      double dd;
      if (beta > 0.0 && std::abs(d) < beta)
        dd = d / beta;
      else
        dd = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      dx[i] += g * dd;
    }
  });
}

Var softmax_cross_entropy_sum(Tape& tape, Var logits, std::vector<int> targets) {
  const Tensor& lv = tape.value(logits);
  expect(lv.shape.size() == 2 && static_cast<std::size_t>(lv.dim(0)) == targets.size(),
         "softmax_cross_entropy_sum: shape mismatch");
  const int n = lv.dim(0), k = lv.dim(1);
  std::vector<double> probs(lv.numel());
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    expect(targets[i] >= 0 && targets[i] < k, "softmax_cross_entropy_sum: target out of range");
    const double* row = lv.data.data() + static_cast<std::size_t>(i) * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (int j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - mx) / z;
    loss += -(row[targets[i]] - mx - std::log(z));
  }
  return tape.record(Tensor({1}, loss), {logits},
                     [=, tg = std::move(targets), probs = std::move(probs)](Tape& t, int self) {
                       const double g = t.grad(self).data[0];
                       auto& dx = t.grad(logits).data;
                       for (int i = 0; i < n; ++i)
                         for (int j = 0; j < k; ++j)
                           dx[i * k + j] += g * (probs[i * k + j] - (j == tg[i] ? 1.0 : 0.0));
                     });
}

Var add(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  expect(av.numel() == bv.numel(), "add: size mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
  return tape.record(std::move(out), {a, b}, [=](Tape& t, int self) {
    const auto& g = t.grad(self).data;
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      auto& d = t.grad(v).data;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

Var scale(Tape& tape, Var a, double factor) {
  Tensor out = tape.value(a);
  for (double& v : out.data) v *= factor;
  return tape.record(std::move(out), {a}, [=](Tape& t, int self) {
    const auto& g = t.grad(self).data;
    auto& d = t.grad(a).data;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += factor * g[i];
  });
}

Var sum_scalars(Tape& tape, std::span<const Var> scalars) {
  double total = 0.0;
  for (Var v : scalars) {
    expect(tape.value(v).numel() == 1, "sum_scalars: expected scalars");
    total += tape.value(v).data[0];
  }
  std::vector<Var> inputs(scalars.begin(), scalars.end());
  bool needs = false;
  for (Var v : inputs) needs = needs || tape.requires_grad(v);
  // The closure is attached through any one differentiable input.
  if (!needs) return tape.constant(Tensor({1}, total));
  Var any = inputs.front();
  for (Var v : inputs)
    if (tape.requires_grad(v)) any = v;
  return tape.record(Tensor({1}, total), {any}, [inputs](Tape& t, int self) {
    const double g = t.grad(self).data[0];
    for (Var v : inputs)
      if (t.requires_grad(v)) t.grad(v).data[0] += g;
  });
}

}  // namespace ldet::ag
