/*
 * Copyright 2026 The gdistill Contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "gdistill/core/tensor.hpp"

namespace gdistill::ad {

/// Reverse-mode autodiff over a per-step tape. The graph is rebuilt every
/// training step; node handles are plain ints valid for the life of the tape.
/// Ops only reference earlier nodes, so creation order is already a
/// topological order and backward() is a single reverse sweep.
template <typename T>
class Tape {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::function<void(Tape&)> backward;  // empty for leaves / no-grad nodes
  };

  bool grad_enabled = true;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int input(Tensor<T> v, bool requires_grad) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad && grad_enabled;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Tensor<T>& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  Tensor<T>& grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty() && n.value.numel() > 0) n.grad = Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }

  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  size_t size() const { return nodes_.size(); }

  void backward(int root) {
    if (val(root).numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    grad(root).data[0] = T(1);
    for (int i = root; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.backward && !n.grad.data.empty()) n.backward(*this);
    }
  }

  // ---- elementwise ----------------------------------------------------

  int add(int a, int b) { return add_scaled(a, b, T(1)); }

  int add_scaled(int a, int b, T s) {
    check_same_shape(a, b, "add_scaled");
    Tensor<T> out = val(a);
    const Tensor<T>& vb = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += s * vb[i];
    return make(std::move(out), {a, b}, [a, b, s](Tape& t, int self) {
      const Tensor<T>& g = t.grad(self);
      if (t.requires_grad(a)) {
        Tensor<T>& ga = t.grad(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      }
      if (t.requires_grad(b)) {
        Tensor<T>& gb = t.grad(b);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] += s * g[i];
      }
    });
  }

  int scale(int a, T s) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v *= s;
    return make(std::move(out), {a}, [a, s](Tape& t, int self) {
      const Tensor<T>& g = t.grad(self);
      Tensor<T>& ga = t.grad(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += s * g[i];
    });
  }

  int mul(int a, int b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out = val(a);
    const Tensor<T>& vb = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, int self) {
      const Tensor<T>& g = t.grad(self);
      const Tensor<T>& va = t.val(a);
      const Tensor<T>& vb2 = t.val(b);
      if (t.requires_grad(a)) {
        Tensor<T>& ga = t.grad(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb2[i];
      }
      if (t.requires_grad(b)) {
        Tensor<T>& gb = t.grad(b);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va[i];
      }
    });
  }

  int relu(int a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return make(std::move(out), {a}, [a](Tape& t, int self) {
      const Tensor<T>& g = t.grad(self);
      const Tensor<T>& va = t.val(a);
      Tensor<T>& ga = t.grad(a);
      for (int64_t i = 0; i < g.numel(); ++i)
        if (va[i] > T(0)) ga[i] += g[i];
    });
  }

  /// Adds a constant tensor (no gradient) broadcast over the leading dims of
  /// `a`; the constant's numel must divide a's numel evenly.
  int add_const_broadcast(int a, const Tensor<T>& c) {
    Tensor<T> out = val(a);
    const int64_t cn = c.numel();
    if (cn == 0 || out.numel() % cn != 0)
      throw std::invalid_argument("add_const_broadcast: size mismatch");
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += c[i % cn];
    return make(std::move(out), {a}, [a](Tape& t, int self) {
      const Tensor<T>& g = t.grad(self);
      Tensor<T>& ga = t.grad(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
  }

  // ---- shape ----------------------------------------------------------

  int reshape(int a, std::vector<int> shape) {
    if (Tensor<T>::numel_of(shape) != val(a).numel())
      throw std::invalid_argument("reshape: numel mismatch");
    Tensor<T> out(shape, val(a).data);
    return make(std::move(out), {a}, [a](Tape& t, int self) {
      const Tensor<T>& g = t.grad(self);
      Tensor<T>& ga = t.grad(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
  }

  int permute(int a, std::vector<int> axes) {
    const Tensor<T>& va = val(a);
    const int nd = va.ndim();
    if (static_cast<int>(axes.size()) != nd) throw std::invalid_argument("permute: rank mismatch");
    std::vector<int> oshape(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) oshape[static_cast<size_t>(i)] = va.dim(axes[static_cast<size_t>(i)]);
    Tensor<T> out = Tensor<T>::zeros(oshape);
    permute_copy(va, out, axes, false);
    return make(std::move(out), {a}, [a, axes](Tape& t, int self) {
      // scatter grad through the inverse permutation
      permute_copy(t.grad(self), t.grad(a), axes, true);
    });
  }

  /// [K,d] -> [B,K,d]; used to hand the learned query embeddings to every
  /// image in the batch.
  int broadcast_batch(int a, int batch) {
    const Tensor<T>& va = val(a);
    std::vector<int> oshape;
    oshape.push_back(batch);
    for (int d : va.shape) oshape.push_back(d);
    Tensor<T> out = Tensor<T>::zeros(oshape);
    const int64_t n = va.numel();
    for (int b = 0; b < batch; ++b)
      std::copy(va.data.begin(), va.data.end(), out.data.begin() + b * n);
    return make(std::move(out), {a}, [a, batch, n](Tape& t, int self) {
      const Tensor<T>& g = t.grad(self);
      Tensor<T>& ga = t.grad(a);
      for (int b = 0; b < batch; ++b)
        for (int64_t i = 0; i < n; ++i) ga[i] += g[b * n + i];
    });
  }

  // ---- linear algebra --------------------------------------------------

  int matmul(int a, int b) {
    const Tensor<T>& va = val(a);
    const Tensor<T>& vb = val(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0))
      throw std::invalid_argument("matmul: bad shapes " + shape_str(va.shape) + " x " +
                                  shape_str(vb.shape));
    const int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
    Tensor<T> out = Tensor<T>::zeros({m, n});
    MapM(out.ptr(), m, n).noalias() = CMapM(va.ptr(), m, k) * CMapM(vb.ptr(), k, n);
    return make(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, int self) {
      CMapM g(t.grad(self).ptr(), m, n);
      if (t.requires_grad(a))
        MapM(t.grad(a).ptr(), m, k).noalias() += g * CMapM(t.val(b).ptr(), k, n).transpose();
      if (t.requires_grad(b))
        MapM(t.grad(b).ptr(), k, n).noalias() += CMapM(t.val(a).ptr(), m, k).transpose() * g;
    });
  }

  int bmm(int a, int b) {
    const Tensor<T>& va = val(a);
    const Tensor<T>& vb = val(b);
    if (va.ndim() != 3 || vb.ndim() != 3 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(1))
      throw std::invalid_argument("bmm: bad shapes " + shape_str(va.shape) + " x " +
                                  shape_str(vb.shape));
    const int bs = va.dim(0), m = va.dim(1), k = va.dim(2), n = vb.dim(2);
    Tensor<T> out = Tensor<T>::zeros({bs, m, n});
    for (int i = 0; i < bs; ++i)
      MapM(out.ptr() + static_cast<int64_t>(i) * m * n, m, n).noalias() =
          CMapM(va.ptr() + static_cast<int64_t>(i) * m * k, m, k) *
          CMapM(vb.ptr() + static_cast<int64_t>(i) * k * n, k, n);
    return make(std::move(out), {a, b}, [a, b, bs, m, k, n](Tape& t, int self) {
      for (int i = 0; i < bs; ++i) {
        CMapM g(t.grad(self).ptr() + static_cast<int64_t>(i) * m * n, m, n);
        if (t.requires_grad(a))
          MapM(t.grad(a).ptr() + static_cast<int64_t>(i) * m * k, m, k).noalias() +=
              g * CMapM(t.val(b).ptr() + static_cast<int64_t>(i) * k * n, k, n).transpose();
        if (t.requires_grad(b))
          MapM(t.grad(b).ptr() + static_cast<int64_t>(i) * k * n, k, n).noalias() +=
              CMapM(t.val(a).ptr() + static_cast<int64_t>(i) * m * k, m, k).transpose() * g;
      }
    });
  }

  /// x [..., k] @ w [k, n] + bias [n]; bias < 0 skips the bias term.
  int linear(int x, int w, int bias) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vw = val(w);
    const int k = vw.dim(0), n = vw.dim(1);
    if (vx.dim(vx.ndim() - 1) != k) throw std::invalid_argument("linear: inner dim mismatch");
    const int64_t rows = vx.numel() / k;
    std::vector<int> oshape = vx.shape;
    oshape.back() = n;
    Tensor<T> out = Tensor<T>::zeros(oshape);
    MapM(out.ptr(), rows, n).noalias() = CMapM(vx.ptr(), rows, k) * CMapM(vw.ptr(), k, n);
    if (bias >= 0) {
      const Tensor<T>& vb = val(bias);
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j) out[r * n + j] += vb[j];
    }
    return make(std::move(out), {x, w, bias}, [x, w, bias, rows, k, n](Tape& t, int self) {
      CMapM g(t.grad(self).ptr(), rows, n);
      if (t.requires_grad(x))
        MapM(t.grad(x).ptr(), rows, k).noalias() += g * CMapM(t.val(w).ptr(), k, n).transpose();
      if (t.requires_grad(w))
        MapM(t.grad(w).ptr(), k, n).noalias() += CMapM(t.val(x).ptr(), rows, k).transpose() * g;
      if (bias >= 0 && t.requires_grad(bias)) {
        Tensor<T>& gb = t.grad(bias);
        const Tensor<T>& gs = t.grad(self);
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < n; ++j) gb[j] += gs[r * n + j];
      }
    });
  }

  // ---- normalization / activation over the last dim --------------------

  int layer_norm(int x, int gamma, int beta, T eps) {
    const Tensor<T>& vx = val(x);
    const int d = vx.dim(vx.ndim() - 1);
    if (val(gamma).numel() != d || val(beta).numel() != d)
      throw std::invalid_argument("layer_norm: affine size mismatch");
    const int64_t rows = vx.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(vx.shape);
    auto stats = std::make_shared<std::vector<T>>(static_cast<size_t>(rows) * 2);  // mean, rstd
    const Tensor<T>& vg = val(gamma);
    const Tensor<T>& vbt = val(beta);
    for (int64_t r = 0; r < rows; ++r) {
      const T* px = vx.ptr() + r * d;
      T mean = 0;
      for (int i = 0; i < d; ++i) mean += px[i];
      mean /= d;
      T var = 0;
      for (int i = 0; i < d; ++i) var += (px[i] - mean) * (px[i] - mean);
      var /= d;
      T rstd = T(1) / std::sqrt(var + eps);
      (*stats)[static_cast<size_t>(r) * 2] = mean;
      (*stats)[static_cast<size_t>(r) * 2 + 1] = rstd;
      T* po = out.ptr() + r * d;
      for (int i = 0; i < d; ++i) po[i] = (px[i] - mean) * rstd * vg[i] + vbt[i];
    }
    return make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, rows, d, stats](Tape& t, int self) {
                  const Tensor<T>& g = t.grad(self);
                  const Tensor<T>& vx2 = t.val(x);
                  const Tensor<T>& vg2 = t.val(gamma);
                  const bool need_x = t.requires_grad(x);
                  const bool need_g = t.requires_grad(gamma);
                  const bool need_b = t.requires_grad(beta);
                  for (int64_t r = 0; r < rows; ++r) {
                    const T* px = vx2.ptr() + r * d;
                    const T* pg = g.ptr() + r * d;
                    const T mean = (*stats)[static_cast<size_t>(r) * 2];
                    const T rstd = (*stats)[static_cast<size_t>(r) * 2 + 1];
                    T sum_dyg = 0, sum_dyg_xhat = 0;
                    for (int i = 0; i < d; ++i) {
                      T xhat = (px[i] - mean) * rstd;
                      T dyg = pg[i] * vg2[i];
                      sum_dyg += dyg;
                      sum_dyg_xhat += dyg * xhat;
                      if (need_g) t.grad(gamma)[i] += pg[i] * xhat;
                      if (need_b) t.grad(beta)[i] += pg[i];
                    }
                    if (need_x) {
                      Tensor<T>& gx = t.grad(x);
                      for (int i = 0; i < d; ++i) {
                        T xhat = (px[i] - mean) * rstd;
                        T dyg = pg[i] * vg2[i];
                        gx[r * d + i] +=
                            rstd * (dyg - sum_dyg / d - xhat * sum_dyg_xhat / d);
                      }
                    }
                  }
                });
  }

  int softmax_lastdim(int x) {
    const Tensor<T>& vx = val(x);
    const int d = vx.dim(vx.ndim() - 1);
    const int64_t rows = vx.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(vx.shape);
    for (int64_t r = 0; r < rows; ++r) {
      const T* px = vx.ptr() + r * d;
      T* po = out.ptr() + r * d;
      T mx = px[0];
      for (int i = 1; i < d; ++i) mx = std::max(mx, px[i]);
      T sum = 0;
      for (int i = 0; i < d; ++i) {
        po[i] = std::exp(px[i] - mx);
        sum += po[i];
      }
      for (int i = 0; i < d; ++i) po[i] /= sum;
    }
    return make(std::move(out), {x}, [x, rows, d](Tape& t, int self) {
      const Tensor<T>& y = t.val(self);
      const Tensor<T>& g = t.grad(self);
      Tensor<T>& gx = t.grad(x);
      for (int64_t r = 0; r < rows; ++r) {
        const T* py = y.ptr() + r * d;
        const T* pg = g.ptr() + r * d;
        T dot = 0;
        for (int i = 0; i < d; ++i) dot += pg[i] * py[i];
        for (int i = 0; i < d; ++i) gx[r * d + i] += py[i] * (pg[i] - dot);
      }
    });
  }

  // ---- convolution / resampling ----------------------------------------

  /// NHWC convolution via im2col + GEMM. w has shape [kh, kw, cin, cout].
  int conv2d(int x, int w, int bias, int stride, int pad) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vw = val(w);
    if (vx.ndim() != 4 || vw.ndim() != 4) throw std::invalid_argument("conv2d: rank");
    const int B = vx.dim(0), H = vx.dim(1), W = vx.dim(2), Cin = vx.dim(3);
    const int kh = vw.dim(0), kw = vw.dim(1), cout = vw.dim(3);
    if (vw.dim(2) != Cin) throw std::invalid_argument("conv2d: channel mismatch");
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    if (OH <= 0 || OW <= 0) throw std::invalid_argument("conv2d: empty output");
    const int64_t rows = static_cast<int64_t>(B) * OH * OW;
    const int ccol = kh * kw * Cin;

    auto cols = std::make_shared<Tensor<T>>(Tensor<T>::zeros({static_cast<int>(rows), ccol}));
    im2col(vx, *cols, B, H, W, Cin, kh, kw, stride, pad, OH, OW);

    Tensor<T> out = Tensor<T>::zeros({B, OH, OW, cout});
    MapM(out.ptr(), rows, cout).noalias() =
        CMapM(cols->ptr(), rows, ccol) * CMapM(vw.ptr(), ccol, cout);
    if (bias >= 0) {
      const Tensor<T>& vb = val(bias);
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < cout; ++j) out[r * cout + j] += vb[j];
    }
    return make(std::move(out), {x, w, bias},
                [x, w, bias, cols, B, H, W, Cin, kh, kw, stride, pad, OH, OW, rows, ccol,
                 cout](Tape& t, int self) {
                  CMapM g(t.grad(self).ptr(), rows, cout);
                  if (t.requires_grad(w))
                    MapM(t.grad(w).ptr(), ccol, cout).noalias() +=
                        CMapM(cols->ptr(), rows, ccol).transpose() * g;
                  if (bias >= 0 && t.requires_grad(bias)) {
                    Tensor<T>& gb = t.grad(bias);
                    const Tensor<T>& gs = t.grad(self);
                    for (int64_t r = 0; r < rows; ++r)
                      for (int j = 0; j < cout; ++j) gb[j] += gs[r * cout + j];
                  }
                  if (t.requires_grad(x)) {
                    Tensor<T> dcols = Tensor<T>::zeros({static_cast<int>(rows), ccol});
                    MapM(dcols.ptr(), rows, ccol).noalias() =
                        g * CMapM(t.val(w).ptr(), ccol, cout).transpose();
                    col2im(dcols, t.grad(x), B, H, W, Cin, kh, kw, stride, pad, OH, OW);
                  }
                });
  }

  int upsample_nearest2x(int x) {
    const Tensor<T>& vx = val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("upsample_nearest2x: rank");
    const int B = vx.dim(0), H = vx.dim(1), W = vx.dim(2), C = vx.dim(3);
    Tensor<T> out = Tensor<T>::zeros({B, H * 2, W * 2, C});
    for (int b = 0; b < B; ++b)
      for (int y = 0; y < H * 2; ++y)
        for (int x2 = 0; x2 < W * 2; ++x2) {
          const T* src = vx.ptr() + (((static_cast<int64_t>(b) * H + y / 2) * W + x2 / 2) * C);
          T* dst = out.ptr() + (((static_cast<int64_t>(b) * H * 2 + y) * W * 2 + x2) * C);
          std::copy(src, src + C, dst);
        }
    return make(std::move(out), {x}, [x, B, H, W, C](Tape& t, int self) {
      const Tensor<T>& g = t.grad(self);
      Tensor<T>& gx = t.grad(x);
      for (int b = 0; b < B; ++b)
        for (int y = 0; y < H * 2; ++y)
          for (int x2 = 0; x2 < W * 2; ++x2) {
            const T* src = g.ptr() + (((static_cast<int64_t>(b) * H * 2 + y) * W * 2 + x2) * C);
            T* dst = gx.ptr() + (((static_cast<int64_t>(b) * H + y / 2) * W + x2 / 2) * C);
            for (int c = 0; c < C; ++c) dst[c] += src[c];
          }
    });
  }

  /// Half-pixel bilinear resize of a NHWC map; outputs stay inside the input
  /// range (interpolation weights are convex).
  int upsample_bilinear(int x, int oh, int ow) {
    const Tensor<T>& vx = val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("upsample_bilinear: rank");
    const int B = vx.dim(0), H = vx.dim(1), W = vx.dim(2), C = vx.dim(3);
    Tensor<T> out = Tensor<T>::zeros({B, oh, ow, C});
    bilinear_apply(vx.ptr(), out.ptr(), B, H, W, C, oh, ow, false);
    return make(std::move(out), {x}, [x, B, H, W, C, oh, ow](Tape& t, int self) {
      bilinear_apply(t.grad(x).ptr(), t.grad(self).ptr(), B, H, W, C, oh, ow, true);
    });
  }

  // ---- fused losses -----------------------------------------------------

  /// One matched (prediction, target) pair evaluated at sampled points of a
  /// [B, HW, K] mask-logit map. `weight` folds the per-image 1/n and the
  /// batch average into the pair.
  struct PointLossPair {
    int image = 0;
    int query = 0;
    std::vector<int> point_pixels;  // indices into the HW axis
    std::vector<T> point_targets;   // binary targets at those points
    T weight = T(1);
  };

  struct MaskLossBreakdown {
    double bce = 0;
    double dice = 0;
  };

  /// sum over pairs of weight * (mean-BCE-with-logits + lambda_dice * dice),
  /// with dice = 1 - 2*I/(P+Tt+eps) on sigmoid probabilities.
  int point_mask_loss(int mask_logits, const std::vector<PointLossPair>& pairs, T lambda_dice,
                      T dice_eps, MaskLossBreakdown* breakdown) {
    const Tensor<T>& vm = val(mask_logits);
    if (vm.ndim() != 3) throw std::invalid_argument("point_mask_loss: rank");
    const int HW = vm.dim(1), K = vm.dim(2);
    double total = 0, bce_total = 0, dice_total = 0;
    for (const auto& pr : pairs) {
      const int64_t base = static_cast<int64_t>(pr.image) * HW * K;
      const size_t P = pr.point_pixels.size();
      double bce = 0, sum_p = 0, sum_t = 0, inter = 0;
      for (size_t i = 0; i < P; ++i) {
        const T xv = vm[base + static_cast<int64_t>(pr.point_pixels[i]) * K + pr.query];
        const T tv = pr.point_targets[i];
        const double xd = static_cast<double>(xv);
        bce += std::max(xd, 0.0) - xd * tv + std::log1p(std::exp(-std::abs(xd)));
        const double p = 1.0 / (1.0 + std::exp(-xd));
        sum_p += p;
        sum_t += tv;
        inter += p * tv;
      }
      bce /= static_cast<double>(P);
      const double denom = sum_p + sum_t + static_cast<double>(dice_eps);
      const double dice = 1.0 - 2.0 * inter / denom;
      total += pr.weight * (bce + static_cast<double>(lambda_dice) * dice);
      bce_total += pr.weight * bce;
      dice_total += pr.weight * dice;
    }
    if (breakdown) {
      breakdown->bce = bce_total;
      breakdown->dice = dice_total;
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total));
    auto specs = std::make_shared<std::vector<PointLossPair>>(pairs);
    return make(std::move(out), {mask_logits},
                [mask_logits, specs, lambda_dice, dice_eps, HW, K](Tape& t, int self) {
                  const T gs = t.grad(self)[0];
                  const Tensor<T>& vm2 = t.val(mask_logits);
                  Tensor<T>& gm = t.grad(mask_logits);
                  for (const auto& pr : *specs) {
                    const int64_t base = static_cast<int64_t>(pr.image) * HW * K;
                    const size_t P = pr.point_pixels.size();
                    double sum_p = 0, sum_t = 0, inter = 0;
                    std::vector<double> probs(P);
                    for (size_t i = 0; i < P; ++i) {
                      const double xd = static_cast<double>(
                          vm2[base + static_cast<int64_t>(pr.point_pixels[i]) * K + pr.query]);
                      probs[i] = 1.0 / (1.0 + std::exp(-xd));
                      sum_p += probs[i];
                      sum_t += pr.point_targets[i];
                      inter += probs[i] * pr.point_targets[i];
                    }
                    const double denom = sum_p + sum_t + static_cast<double>(dice_eps);
                    for (size_t i = 0; i < P; ++i) {
                      const double p = probs[i];
                      const double tv = pr.point_targets[i];
                      const double dbce = (p - tv) / static_cast<double>(P);
                      // d(1 - 2I/D)/dp_i = -2*(t_i*D - I)/D^2, then chain p'(x)
                      const double ddice =
                          -2.0 * (tv * denom - inter) / (denom * denom) * p * (1.0 - p);
                      const double dx =
                          pr.weight * (dbce + static_cast<double>(lambda_dice) * ddice);
                      gm[base + static_cast<int64_t>(pr.point_pixels[i]) * K + pr.query] +=
                          gs * static_cast<T>(dx);
                    }
                  }
                });
  }

  /// sum over (image, query) of weight * softmax-cross-entropy against the
  /// integer target; weights of zero skip queries entirely.
  int weighted_ce_loss(int class_logits, const std::vector<std::vector<int>>& targets,
                       const std::vector<std::vector<T>>& weights) {
    const Tensor<T>& vc = val(class_logits);
    if (vc.ndim() != 3) throw std::invalid_argument("weighted_ce_loss: rank");
    const int B = vc.dim(0), K = vc.dim(1), nc = vc.dim(2);
    if (static_cast<int>(targets.size()) != B || static_cast<int>(weights.size()) != B)
      throw std::invalid_argument("weighted_ce_loss: batch mismatch");
    double total = 0;
    for (int b = 0; b < B; ++b) {
      for (int q = 0; q < K; ++q) {
        const T wq = weights[static_cast<size_t>(b)][static_cast<size_t>(q)];
        if (wq == T(0)) continue;
        const T* row = vc.ptr() + (static_cast<int64_t>(b) * K + q) * nc;
        total += static_cast<double>(wq) *
                 ce_row(row, nc, targets[static_cast<size_t>(b)][static_cast<size_t>(q)]);
      }
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total));
    auto tg = std::make_shared<std::vector<std::vector<int>>>(targets);
    auto wg = std::make_shared<std::vector<std::vector<T>>>(weights);
    return make(std::move(out), {class_logits}, [class_logits, tg, wg, B, K, nc](Tape& t,
                                                                                 int self) {
      const T gs = t.grad(self)[0];
      const Tensor<T>& vc2 = t.val(class_logits);
      Tensor<T>& gc = t.grad(class_logits);
      std::vector<double> sm(static_cast<size_t>(nc));
      for (int b = 0; b < B; ++b)
        for (int q = 0; q < K; ++q) {
          const T wq = (*wg)[static_cast<size_t>(b)][static_cast<size_t>(q)];
          if (wq == T(0)) continue;
          const int tq = (*tg)[static_cast<size_t>(b)][static_cast<size_t>(q)];
          const T* row = vc2.ptr() + (static_cast<int64_t>(b) * K + q) * nc;
          softmax_row(row, nc, sm.data());
          for (int c = 0; c < nc; ++c) {
            const double onehot = (c == tq) ? 1.0 : 0.0;
            gc[(static_cast<int64_t>(b) * K + q) * nc + c] +=
                gs * static_cast<T>(static_cast<double>(wq) * (sm[static_cast<size_t>(c)] - onehot));
          }
        }
    });
  }

  /// Weighted sum of scalar nodes.
  int add_many(const std::vector<std::pair<int, T>>& terms) {
    double total = 0;
    std::vector<int> parents;
    for (const auto& [id, coef] : terms) {
      if (val(id).numel() != 1) throw std::invalid_argument("add_many: non-scalar term");
      total += static_cast<double>(coef) * static_cast<double>(val(id)[0]);
      parents.push_back(id);
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total));
    auto tcopy = std::make_shared<std::vector<std::pair<int, T>>>(terms);
    return make(std::move(out), parents, [tcopy](Tape& t, int self) {
      const T gs = t.grad(self)[0];
      for (const auto& [id, coef] : *tcopy)
        if (t.requires_grad(id)) t.grad(id)[0] += gs * coef;
    });
  }

 private:
  std::vector<Node> nodes_;

  void check_same_shape(int a, int b, const char* op) const {
    if (!val(a).same_shape(val(b)))
      throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(val(a).shape) +
                                  " vs " + shape_str(val(b).shape));
  }

  template <typename F>
  int make(Tensor<T> out, std::vector<int> parents, F&& bwd) {
    Node n;
    n.value = std::move(out);
    bool rg = false;
    if (grad_enabled)
      for (int p : parents)
        if (p >= 0 && nodes_[static_cast<size_t>(p)].requires_grad) rg = true;
    n.requires_grad = rg;
    const int self = static_cast<int>(nodes_.size());
    if (rg)
      n.backward = [self, f = std::forward<F>(bwd)](Tape& t) { f(t, self); };
    nodes_.push_back(std::move(n));
    return self;
  }

  static double ce_row(const T* row, int nc, int target) {
    double mx = static_cast<double>(row[0]);
    for (int c = 1; c < nc; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double lse = 0;
    for (int c = 0; c < nc; ++c) lse += std::exp(static_cast<double>(row[c]) - mx);
    return std::log(lse) + mx - static_cast<double>(row[target]);
  }

  static void softmax_row(const T* row, int nc, double* out) {
    double mx = static_cast<double>(row[0]);
    for (int c = 1; c < nc; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double sum = 0;
    for (int c = 0; c < nc; ++c) {
      out[c] = std::exp(static_cast<double>(row[c]) - mx);
      sum += out[c];
    }
    for (int c = 0; c < nc; ++c) out[c] /= sum;
  }

  static void permute_copy(const Tensor<T>& src, Tensor<T>& dst, const std::vector<int>& axes,
                           bool accumulate_back) {
    const int nd = src.ndim();
    std::vector<int64_t> sstride(static_cast<size_t>(nd), 1);
    const std::vector<int>& sshape = accumulate_back ? dst.shape : src.shape;
    // strides of the ORIGINAL (pre-permute) layout
    std::vector<int64_t> ostride(static_cast<size_t>(nd), 1);
    for (int i = nd - 2; i >= 0; --i)
      ostride[static_cast<size_t>(i)] =
          ostride[static_cast<size_t>(i + 1)] * sshape[static_cast<size_t>(i + 1)];
    // iterate over permuted index space
    std::vector<int> pshape(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i)
      pshape[static_cast<size_t>(i)] = sshape[static_cast<size_t>(axes[static_cast<size_t>(i)])];
    std::vector<int> idx(static_cast<size_t>(nd), 0);
    const int64_t n = Tensor<T>::numel_of(pshape);
    for (int64_t lin = 0; lin < n; ++lin) {
      int64_t src_off = 0;
      for (int i = 0; i < nd; ++i)
        src_off += static_cast<int64_t>(idx[static_cast<size_t>(i)]) *
                   ostride[static_cast<size_t>(axes[static_cast<size_t>(i)])];
      if (accumulate_back)
        dst[src_off] += src[lin];
      else
        dst[lin] = src[src_off];
      for (int i = nd - 1; i >= 0; --i) {
        if (++idx[static_cast<size_t>(i)] < pshape[static_cast<size_t>(i)]) break;
        idx[static_cast<size_t>(i)] = 0;
      }
    }
  }

  static void im2col(const Tensor<T>& x, Tensor<T>& cols, int B, int H, int W, int Cin, int kh,
                     int kw, int stride, int pad, int OH, int OW) {
    const int ccol = kh * kw * Cin;
    for (int b = 0; b < B; ++b)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          T* row = cols.ptr() + ((static_cast<int64_t>(b) * OH + oy) * OW + ox) * ccol;
          for (int ky = 0; ky < kh; ++ky) {
            const int y = oy * stride - pad + ky;
            for (int kx = 0; kx < kw; ++kx) {
              const int xx = ox * stride - pad + kx;
              T* dst = row + (ky * kw + kx) * Cin;
              if (y >= 0 && y < H && xx >= 0 && xx < W) {
                const T* src = x.ptr() + ((static_cast<int64_t>(b) * H + y) * W + xx) * Cin;
                std::copy(src, src + Cin, dst);
              } else {
                std::fill(dst, dst + Cin, T(0));
              }
            }
          }
        }
  }

  static void col2im(const Tensor<T>& dcols, Tensor<T>& dx, int B, int H, int W, int Cin, int kh,
                     int kw, int stride, int pad, int OH, int OW) {
    const int ccol = kh * kw * Cin;
    for (int b = 0; b < B; ++b)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          const T* row = dcols.ptr() + ((static_cast<int64_t>(b) * OH + oy) * OW + ox) * ccol;
          for (int ky = 0; ky < kh; ++ky) {
            const int y = oy * stride - pad + ky;
            if (y < 0 || y >= H) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int xx = ox * stride - pad + kx;
              if (xx < 0 || xx >= W) continue;
              T* dst = dx.ptr() + ((static_cast<int64_t>(b) * H + y) * W + xx) * Cin;
              const T* src = row + (ky * kw + kx) * Cin;
              for (int c = 0; c < Cin; ++c) dst[c] += src[c];
            }
          }
        }
  }

  /// forward: dst[B,oh,ow,C] = resample(src[B,H,W,C]); backward flips the
  /// data flow and accumulates with the same tap weights.
  static void bilinear_apply(T* a, T* b, int B, int H, int W, int C, int oh, int ow,
                             bool backward) {
    const double sy = static_cast<double>(H) / oh;
    const double sx = static_cast<double>(W) / ow;
    for (int bi = 0; bi < B; ++bi)
      for (int y = 0; y < oh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int y1 = std::min(y0 + 1, H - 1);
        y0 = std::max(y0, 0);
        for (int x = 0; x < ow; ++x) {
          double fx = (x + 0.5) * sx - 0.5;
          int x0 = static_cast<int>(std::floor(fx));
          double wx = fx - x0;
          int x1 = std::min(x0 + 1, W - 1);
          x0 = std::max(x0, 0);
          const double w00 = (1 - wy) * (1 - wx), w01 = (1 - wy) * wx, w10 = wy * (1 - wx),
                       w11 = wy * wx;
          const int64_t o = ((static_cast<int64_t>(bi) * oh + y) * ow + x) * C;
          const int64_t i00 = ((static_cast<int64_t>(bi) * H + y0) * W + x0) * C;
          const int64_t i01 = ((static_cast<int64_t>(bi) * H + y0) * W + x1) * C;
          const int64_t i10 = ((static_cast<int64_t>(bi) * H + y1) * W + x0) * C;
          const int64_t i11 = ((static_cast<int64_t>(bi) * H + y1) * W + x1) * C;
          for (int c = 0; c < C; ++c) {
            if (!backward) {
              b[o + c] = static_cast<T>(w00 * a[i00 + c] + w01 * a[i01 + c] + w10 * a[i10 + c] +
                                        w11 * a[i11 + c]);
            } else {
              const T g = b[o + c];
              a[i00 + c] += static_cast<T>(w00 * g);
              a[i01 + c] += static_cast<T>(w01 * g);
              a[i10 + c] += static_cast<T>(w10 * g);
              a[i11 + c] += static_cast<T>(w11 * g);
            }
          }
        }
      }
  }
};

}  // namespace gdistill::ad
