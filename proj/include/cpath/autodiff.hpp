#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "cpath/errors.hpp"
#include "cpath/tensor.hpp"

namespace cpath {

// Reverse-mode tape over Tensor<T>. Ops append nodes; node ids are stable
// and already topologically ordered, so backward is a single reverse sweep.
// Tapes built with grad_enabled = false record values only (inference).
//
// All reductions run in a fixed order; parallel loops only ever write
// disjoint output slices, so results are bit-reproducible for a given build.

template <class T>
class Tape {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;

  explicit Tape(bool grad_enabled = true) : grad_(grad_enabled) {}

  bool grad_enabled() const { return grad_; }
  std::size_t size() const { return nodes_.size(); }

  int input(Tensor<T> v, bool requires_grad = false) {
    return push(std::move(v), requires_grad && grad_, nullptr);
  }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].val; }
  Tensor<T>& value(int id) { return nodes_[static_cast<std::size_t>(id)].val; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  // Gradient buffer, allocated on first touch.
  Tensor<T>& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor<T>(n.val.shape);
    return n.grad;
  }
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  /// Run the reverse sweep from `root`. A non-scalar root must have had its
  /// gradient seeded via grad(root) beforehand.
  void backward(int root) {
    if (!grad_) throw Error("backward on a no-grad tape");
    Node& r = nodes_[static_cast<std::size_t>(root)];
    if (r.grad.empty()) {
      if (r.val.numel() != 1) throw Error("non-scalar backward root needs a seeded gradient");
      r.grad = Tensor<T>(r.val.shape);
      r.grad.data[0] = T(1);
    }
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.back && !n.grad.empty()) n.back(*this, id);
    }
  }

  // ---- ops ----------------------------------------------------------------

  /// y = x W + b, applied to the last axis. x: (..., K), w: (K, N), b: (N).
  int linear(int x, int w, int b) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& wv = value(w);
    const int k = wv.dim(0), n = wv.dim(1);
    if (xv.dim(-1) != k) throw ShapeMismatchError("linear: inner dims " + xv.shape_str());
    const int rows = static_cast<int>(xv.numel()) / k;
    Tensor<T> out(replace_last(xv.shape, n));
    {
      CMapM X(xv.data.data(), rows, k);
      CMapM W(wv.data.data(), k, n);
      MapM Y(out.data.data(), rows, n);
      Y.noalias() = X * W;
      if (b >= 0) {
        const Tensor<T>& bv = value(b);
        if (static_cast<int>(bv.numel()) != n) throw ShapeMismatchError("linear: bias size");
        Y.rowwise() += Eigen::Map<const Eigen::RowVectorX<T>>(bv.data.data(), n);
      }
    }
    const bool rg = requires_grad(x) || requires_grad(w) || (b >= 0 && requires_grad(b));
    return push(std::move(out), rg, [x, w, b, rows, k, n](Tape& t, int self) {
      CMapM G(t.grad(self).data.data(), rows, n);
      if (t.requires_grad(x)) {
        MapM DX(t.grad(x).data.data(), rows, k);
        CMapM W(t.value(w).data.data(), k, n);
        DX.noalias() += G * W.transpose();
      }
      if (t.requires_grad(w)) {
        MapM DW(t.grad(w).data.data(), k, n);
        CMapM X(t.value(x).data.data(), rows, k);
        DW.noalias() += X.transpose() * G;
      }
      if (b >= 0 && t.requires_grad(b)) {
        Eigen::Map<Eigen::RowVectorX<T>> DB(t.grad(b).data.data(), n);
        DB += G.colwise().sum();
      }
    });
  }

  /// Batched matmul: a (G, M, K) x b (G, K, N) -> (G, M, N).
  /// With trans_b, b is (G, N, K) and used transposed.
  int bmm(int a, int b, bool trans_b = false) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0))
      throw ShapeMismatchError("bmm: want (G,M,K)x(G,K,N), got " + av.shape_str() + " " +
                               bv.shape_str());
    const int g = av.dim(0), m = av.dim(1), k = av.dim(2);
    const int n = trans_b ? bv.dim(1) : bv.dim(2);
    if ((trans_b ? bv.dim(2) : bv.dim(1)) != k) throw ShapeMismatchError("bmm: inner dim");
    Tensor<T> out({g, m, n});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < g; ++i) {
      CMapM A(av.data.data() + static_cast<std::size_t>(i) * m * k, m, k);
      MapM C(out.data.data() + static_cast<std::size_t>(i) * m * n, m, n);
      if (trans_b) {
        CMapM B(bv.data.data() + static_cast<std::size_t>(i) * n * k, n, k);
        C.noalias() = A * B.transpose();
      } else {
        CMapM B(bv.data.data() + static_cast<std::size_t>(i) * k * n, k, n);
        C.noalias() = A * B;
      }
    }
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b, trans_b, g, m, k, n](Tape& t, int self) {
      const Tensor<T>& gv = t.grad(self);
      const bool need_a = t.requires_grad(a), need_b = t.requires_grad(b);
      if (need_a) t.grad(a);
      if (need_b) t.grad(b);
#pragma omp parallel for schedule(static)
      for (int i = 0; i < g; ++i) {
        CMapM G(gv.data.data() + static_cast<std::size_t>(i) * m * n, m, n);
        if (need_a) {
          MapM DA(t.grad(a).data.data() + static_cast<std::size_t>(i) * m * k, m, k);
          if (trans_b) {
            CMapM B(t.value(b).data.data() + static_cast<std::size_t>(i) * n * k, n, k);
            DA.noalias() += G * B;
          } else {
            CMapM B(t.value(b).data.data() + static_cast<std::size_t>(i) * k * n, k, n);
            DA.noalias() += G * B.transpose();
          }
        }
        if (need_b) {
          CMapM A(t.value(a).data.data() + static_cast<std::size_t>(i) * m * k, m, k);
          if (trans_b) {
            MapM DB(t.grad(b).data.data() + static_cast<std::size_t>(i) * n * k, n, k);
            DB.noalias() += G.transpose() * A;
          } else {
            MapM DB(t.grad(b).data.data() + static_cast<std::size_t>(i) * k * n, k, n);
            DB.noalias() += A.transpose() * G;
          }
        }
      }
    });
  }

  int add(int a, int b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (!same_shape(av.shape, bv.shape)) throw ShapeMismatchError("add: shapes differ");
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b](Tape& t, int self) {
      const Tensor<T>& g = t.grad(self);
      if (t.requires_grad(a)) {
        Tensor<T>& da = t.grad(a);
        for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
      }
      if (t.requires_grad(b)) {
        Tensor<T>& db = t.grad(b);
        for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i];
      }
    });
  }

  int scale(int x, T c) {
    Tensor<T> out = value(x);
    for (T& v : out.data) v *= c;
    return push(std::move(out), requires_grad(x), [x, c](Tape& t, int self) {
      if (!t.requires_grad(x)) return;
      const Tensor<T>& g = t.grad(self);
      Tensor<T>& dx = t.grad(x);
      for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += c * g.data[i];
    });
  }

  int gelu(int x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out(xv.shape);
    constexpr double inv_sqrt2 = 0.7071067811865476;
    const long long n = static_cast<long long>(xv.data.size());
#pragma omp parallel for schedule(static) if (n > 4096)
    for (long long i = 0; i < n; ++i) {
      const double v = static_cast<double>(xv.data[static_cast<std::size_t>(i)]);
      out.data[static_cast<std::size_t>(i)] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    return push(std::move(out), requires_grad(x), [x, n](Tape& t, int self) {
      if (!t.requires_grad(x)) return;
      constexpr double inv_sqrt2 = 0.7071067811865476;
      constexpr double inv_sqrt2pi = 0.3989422804014327;
      const Tensor<T>& g = t.grad(self);
      const Tensor<T>& xv = t.value(x);
      Tensor<T>& dx = t.grad(x);
#pragma omp parallel for schedule(static) if (n > 4096)
      for (long long i = 0; i < n; ++i) {
        const double v = static_cast<double>(xv.data[static_cast<std::size_t>(i)]);
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        dx.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)] * static_cast<T>(cdf + v * pdf);
      }
    });
  }

  /// Softmax over the last axis.
  int softmax_last(int x) {
    const Tensor<T>& xv = value(x);
    const int d = xv.dim(-1);
    const int rows = static_cast<int>(xv.numel()) / d;
    Tensor<T> out(xv.shape);
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
      const T* in = xv.data.data() + static_cast<std::size_t>(r) * d;
      T* o = out.data.data() + static_cast<std::size_t>(r) * d;
      T mx = in[0];
      for (int j = 1; j < d; ++j) mx = std::max(mx, in[j]);
      T sum = T(0);
      for (int j = 0; j < d; ++j) {
        o[j] = std::exp(in[j] - mx);
        sum += o[j];
      }
      for (int j = 0; j < d; ++j) o[j] /= sum;
    }
    return push(std::move(out), requires_grad(x), [x, rows, d](Tape& t, int self) {
      if (!t.requires_grad(x)) return;
      const Tensor<T>& g = t.grad(self);
      const Tensor<T>& y = t.value(self);
      Tensor<T>& dx = t.grad(x);
#pragma omp parallel for schedule(static)
      for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * d;
        T dot = T(0);
        for (int j = 0; j < d; ++j) dot += g.data[off + j] * y.data[off + j];
        for (int j = 0; j < d; ++j)
          dx.data[off + j] += y.data[off + j] * (g.data[off + j] - dot);
      }
    });
  }

  /// Layer normalization over the last axis with affine parameters.
  int layernorm(int x, int gamma, int beta, T eps = T(1e-5)) {
    const Tensor<T>& xv = value(x);
    const int d = xv.dim(-1);
    const int rows = static_cast<int>(xv.numel()) / d;
    const Tensor<T>& gv = value(gamma);
    const Tensor<T>& bv = value(beta);
    if (static_cast<int>(gv.numel()) != d || static_cast<int>(bv.numel()) != d)
      throw ShapeMismatchError("layernorm: affine params");
    Tensor<T> out(xv.shape);
    Tensor<T> xhat(xv.shape);   // cached for backward
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * d;
      T mu = T(0);
      for (int j = 0; j < d; ++j) mu += xv.data[off + j];
      mu /= T(d);
      T var = T(0);
      for (int j = 0; j < d; ++j) {
        const T c = xv.data[off + j] - mu;
        var += c * c;
      }
      var /= T(d);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(r)] = is;
      for (int j = 0; j < d; ++j) {
        const T h = (xv.data[off + j] - mu) * is;
        xhat.data[off + j] = h;
        out.data[off + j] = h * gv.data[static_cast<std::size_t>(j)] + bv.data[static_cast<std::size_t>(j)];
      }
    }
    const int xh = grad_ ? push(std::move(xhat), false, nullptr) : -1;
    auto istd = std::make_shared<std::vector<T>>(std::move(inv_std));
    const bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    return push(std::move(out), rg, [x, gamma, beta, xh, istd, rows, d](Tape& t, int self) {
      const Tensor<T>& g = t.grad(self);
      const Tensor<T>& hv = t.value(xh);
      const Tensor<T>& gv = t.value(gamma);
      if (t.requires_grad(gamma)) {
        Tensor<T>& dg = t.grad(gamma);
        for (int r = 0; r < rows; ++r) {
          const std::size_t off = static_cast<std::size_t>(r) * d;
          for (int j = 0; j < d; ++j) dg.data[static_cast<std::size_t>(j)] += g.data[off + j] * hv.data[off + j];
        }
      }
      if (t.requires_grad(beta)) {
        Tensor<T>& db = t.grad(beta);
        for (int r = 0; r < rows; ++r) {
          const std::size_t off = static_cast<std::size_t>(r) * d;
          for (int j = 0; j < d; ++j) db.data[static_cast<std::size_t>(j)] += g.data[off + j];
        }
      }
      if (t.requires_grad(x)) {
        Tensor<T>& dx = t.grad(x);
#pragma omp parallel for schedule(static)
        for (int r = 0; r < rows; ++r) {
          const std::size_t off = static_cast<std::size_t>(r) * d;
          T sum_gy = T(0), sum_gyh = T(0);
          for (int j = 0; j < d; ++j) {
            const T gy = g.data[off + j] * gv.data[static_cast<std::size_t>(j)];
            sum_gy += gy;
            sum_gyh += gy * hv.data[off + j];
          }
          const T is = (*istd)[static_cast<std::size_t>(r)];
          for (int j = 0; j < d; ++j) {
            const T gy = g.data[off + j] * gv.data[static_cast<std::size_t>(j)];
            dx.data[off + j] +=
                is * (gy - sum_gy / T(d) - hv.data[off + j] * sum_gyh / T(d));
          }
        }
      }
    });
  }

  /// Copy with a new shape; element order preserved.
  int reshape(int x, std::vector<int> shape) {
    const Tensor<T>& xv = value(x);
    if (Tensor<T>::numel_of(shape) != xv.numel())
      throw ShapeMismatchError("reshape: element count");
    Tensor<T> out(std::move(shape), xv.data);
    return push(std::move(out), requires_grad(x), [x](Tape& t, int self) {
      if (!t.requires_grad(x)) return;
      const Tensor<T>& g = t.grad(self);
      Tensor<T>& dx = t.grad(x);
      for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i];
    });
  }

  /// Axis permutation. perm[i] names the source axis of output axis i.
  int permute(int x, std::vector<int> perm) {
    const Tensor<T>& xv = value(x);
    const int r = xv.rank();
    if (static_cast<int>(perm.size()) != r) throw ShapeMismatchError("permute: rank");
    std::vector<int> out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = xv.dim(perm[static_cast<std::size_t>(i)]);
    Tensor<T> out(out_shape);
    permute_copy(xv, out, perm);
    auto p = std::make_shared<std::vector<int>>(std::move(perm));
    return push(std::move(out), requires_grad(x), [x, p](Tape& t, int self) {
      if (!t.requires_grad(x)) return;
      // inverse permutation scatters the gradient back
      const std::vector<int>& perm = *p;
      std::vector<int> inv(perm.size());
      for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
      Tensor<T> tmp(t.value(x).shape);
      permute_copy(t.grad(self), tmp, inv);
      Tensor<T>& dx = t.grad(x);
      for (std::size_t i = 0; i < tmp.data.size(); ++i) dx.data[i] += tmp.data[i];
    });
  }

  /// Contiguous range along one axis.
  int slice(int x, int axis, int start, int len) {
    const Tensor<T>& xv = value(x);
    const int r = xv.rank();
    if (axis < 0) axis += r;
    if (start < 0 || start + len > xv.dim(axis)) throw ShapeMismatchError("slice: range");
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(xv.dim(i));
    for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(xv.dim(i));
    std::vector<int> out_shape = xv.shape;
    out_shape[static_cast<std::size_t>(axis)] = len;
    Tensor<T> out(out_shape);
    const std::size_t ax = static_cast<std::size_t>(xv.dim(axis));
    for (std::size_t o = 0; o < outer; ++o)
      for (int j = 0; j < len; ++j)
        std::copy_n(xv.data.data() + (o * ax + static_cast<std::size_t>(start + j)) * inner, inner,
                    out.data.data() + (o * static_cast<std::size_t>(len) + static_cast<std::size_t>(j)) * inner);
    return push(std::move(out), requires_grad(x),
                [x, axis, start, len, outer, inner, ax](Tape& t, int self) {
                  if (!t.requires_grad(x)) return;
                  const Tensor<T>& g = t.grad(self);
                  Tensor<T>& dx = t.grad(x);
                  for (std::size_t o = 0; o < outer; ++o)
                    for (int j = 0; j < len; ++j) {
                      const T* src = g.data.data() + (o * static_cast<std::size_t>(len) + static_cast<std::size_t>(j)) * inner;
                      T* dst = dx.data.data() + (o * ax + static_cast<std::size_t>(start + j)) * inner;
                      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                    }
                });
  }

  /// Concatenate two tensors along one axis (all other dims equal).
  int concat(int a, int b, int axis) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    const int r = av.rank();
    if (axis < 0) axis += r;
    if (bv.rank() != r) throw ShapeMismatchError("concat: rank");
    for (int i = 0; i < r; ++i)
      if (i != axis && av.dim(i) != bv.dim(i)) throw ShapeMismatchError("concat: dims");
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(av.dim(i));
    for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(av.dim(i));
    const std::size_t la = static_cast<std::size_t>(av.dim(axis)) * inner;
    const std::size_t lb = static_cast<std::size_t>(bv.dim(axis)) * inner;
    std::vector<int> out_shape = av.shape;
    out_shape[static_cast<std::size_t>(axis)] = av.dim(axis) + bv.dim(axis);
    Tensor<T> out(out_shape);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(av.data.data() + o * la, la, out.data.data() + o * (la + lb));
      std::copy_n(bv.data.data() + o * lb, lb, out.data.data() + o * (la + lb) + la);
    }
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b, outer, la, lb](Tape& t, int self) {
      const Tensor<T>& g = t.grad(self);
      for (std::size_t o = 0; o < outer; ++o) {
        if (t.requires_grad(a)) {
          Tensor<T>& da = t.grad(a);
          const T* src = g.data.data() + o * (la + lb);
          for (std::size_t i = 0; i < la; ++i) da.data[o * la + i] += src[i];
        }
        if (t.requires_grad(b)) {
          Tensor<T>& db = t.grad(b);
          const T* src = g.data.data() + o * (la + lb) + la;
          for (std::size_t i = 0; i < lb; ++i) db.data[o * lb + i] += src[i];
        }
      }
    });
  }

  /// Non-overlapping p x p patch extraction:
  /// (B, H, W, C) -> (B, H/p, W/p, p*p*C). Inner order: (di, dj, c).
  int patchify(int x, int p) {
    const Tensor<T>& xv = value(x);
    if (xv.rank() != 4) throw ShapeMismatchError("patchify: want (B,H,W,C)");
    const int bsz = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
    if (h % p || w % p) throw ShapeMismatchError("patchify: grid not divisible");
    const int oh = h / p, ow = w / p, oc = p * p * c;
    Tensor<T> out({bsz, oh, ow, oc});
    forall_patches(bsz, oh, ow, p, c, w, [&](std::size_t src, std::size_t dst, int run) {
      std::copy_n(xv.data.data() + src, run, out.data.data() + dst);
    });
    return push(std::move(out), requires_grad(x), [x, bsz, oh, ow, p, c, w](Tape& t, int self) {
      if (!t.requires_grad(x)) return;
      const Tensor<T>& g = t.grad(self);
      Tensor<T>& dx = t.grad(x);
      forall_patches(bsz, oh, ow, p, c, w, [&](std::size_t src, std::size_t dst, int run) {
        for (int i = 0; i < run; ++i) dx.data[src + static_cast<std::size_t>(i)] += g.data[dst + static_cast<std::size_t>(i)];
      });
    });
  }

  /// Adaptive average pooling on (B, H, W, C) -> (B, oh, ow, C); bin i spans
  /// [floor(i*H/oh), ceil((i+1)*H/oh)).
  int adaptive_avg_pool(int x, int oh, int ow) {
    const Tensor<T>& xv = value(x);
    if (xv.rank() != 4) throw ShapeMismatchError("adaptive_avg_pool: want (B,H,W,C)");
    const int bsz = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
    if (oh < 1 || ow < 1) throw ShapeMismatchError("adaptive_avg_pool: bad output grid");
    Tensor<T> out({bsz, oh, ow, c});
    forall_bins(bsz, h, w, c, oh, ow, [&](std::size_t src, std::size_t dst, T inv_n) {
      for (int ch = 0; ch < c; ++ch)
        out.data[dst + static_cast<std::size_t>(ch)] += xv.data[src + static_cast<std::size_t>(ch)] * inv_n;
    });
    return push(std::move(out), requires_grad(x), [x, bsz, h, w, c, oh, ow](Tape& t, int self) {
      if (!t.requires_grad(x)) return;
      const Tensor<T>& g = t.grad(self);
      Tensor<T>& dx = t.grad(x);
      forall_bins(bsz, h, w, c, oh, ow, [&](std::size_t src, std::size_t dst, T inv_n) {
        for (int ch = 0; ch < c; ++ch)
          dx.data[src + static_cast<std::size_t>(ch)] += g.data[dst + static_cast<std::size_t>(ch)] * inv_n;
      });
    });
  }

  /// L2-normalize each row of (N, D).
  int l2norm_rows(int x, T eps = T(1e-12)) {
    const Tensor<T>& xv = value(x);
    if (xv.rank() != 2) throw ShapeMismatchError("l2norm_rows: want (N,D)");
    const int n = xv.dim(0), d = xv.dim(1);
    Tensor<T> out(xv.shape);
    auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * d;
      T s = T(0);
      for (int j = 0; j < d; ++j) s += xv.data[off + j] * xv.data[off + j];
      const T nm = std::max(std::sqrt(s), eps);
      (*norms)[static_cast<std::size_t>(i)] = nm;
      for (int j = 0; j < d; ++j) out.data[off + j] = xv.data[off + j] / nm;
    }
    return push(std::move(out), requires_grad(x), [x, norms, n, d](Tape& t, int self) {
      if (!t.requires_grad(x)) return;
      const Tensor<T>& g = t.grad(self);
      const Tensor<T>& y = t.value(self);
      Tensor<T>& dx = t.grad(x);
      for (int i = 0; i < n; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * d;
        T dot = T(0);
        for (int j = 0; j < d; ++j) dot += g.data[off + j] * y.data[off + j];
        const T nm = (*norms)[static_cast<std::size_t>(i)];
        for (int j = 0; j < d; ++j)
          dx.data[off + j] += (g.data[off + j] - y.data[off + j] * dot) / nm;
      }
    });
  }

  /// Mean over all elements -> scalar.
  int mean_all(int x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out({1});
    T s = T(0);
    for (const T& v : xv.data) s += v;
    out.data[0] = s / static_cast<T>(xv.numel());
    const std::size_t n = xv.numel();
    return push(std::move(out), requires_grad(x), [x, n](Tape& t, int self) {
      if (!t.requires_grad(x)) return;
      const T g = t.grad(self).data[0] / static_cast<T>(n);
      Tensor<T>& dx = t.grad(x);
      for (std::size_t i = 0; i < n; ++i) dx.data[i] += g;
    });
  }

 private:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void(Tape&, int)> back;
  };

  static std::vector<int> replace_last(std::vector<int> shape, int n) {
    shape.back() = n;
    return shape;
  }

  static void permute_copy(const Tensor<T>& in, Tensor<T>& out, const std::vector<int>& perm) {
    const int r = in.rank();
    std::vector<std::size_t> in_strides(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
      in_strides[static_cast<std::size_t>(i)] =
          in_strides[static_cast<std::size_t>(i + 1)] * static_cast<std::size_t>(in.dim(i + 1));

    // axes fixed by the permutation at the tail stay contiguous: copy them
    // as runs instead of scalar gathers
    int split = r;
    while (split > 0 && perm[static_cast<std::size_t>(split - 1)] == split - 1) --split;
    std::size_t run = 1;
    for (int i = split; i < r; ++i) run *= static_cast<std::size_t>(out.dim(i));
    if (run == 0) return;

    std::vector<int> outer_dims;
    for (int i = 0; i < split; ++i) outer_dims.push_back(out.dim(i));
    const std::size_t outer_total = out.numel() / run;

    const long long n = static_cast<long long>(outer_total);
#pragma omp parallel for schedule(static) if (n > 1024)
    for (long long flat = 0; flat < n; ++flat) {
      std::size_t rem = static_cast<std::size_t>(flat);
      std::size_t src = 0;
      for (int i = split - 1; i >= 0; --i) {
        const std::size_t d = static_cast<std::size_t>(outer_dims[static_cast<std::size_t>(i)]);
        const std::size_t coord = rem % d;
        rem /= d;
        src += coord * in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
      }
      std::copy_n(in.data.data() + src, run, out.data.data() + static_cast<std::size_t>(flat) * run);
    }
  }

  template <class F>
  static void forall_patches(int bsz, int oh, int ow, int p, int c, int w, F&& f) {
    // contiguous run: one patch row of p*c values
    for (int b = 0; b < bsz; ++b)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j)
          for (int di = 0; di < p; ++di) {
            const std::size_t src =
                ((static_cast<std::size_t>(b) * oh * p + static_cast<std::size_t>(i * p + di)) * w +
                 static_cast<std::size_t>(j) * p) * c;
            const std::size_t dst =
                ((static_cast<std::size_t>(b) * oh + static_cast<std::size_t>(i)) * ow + static_cast<std::size_t>(j)) *
                    static_cast<std::size_t>(p * p * c) +
                static_cast<std::size_t>(di) * p * c;
            f(src, dst, p * c);
          }
  }

  template <class F>
  static void forall_bins(int bsz, int h, int w, int c, int oh, int ow, F&& f) {
    for (int b = 0; b < bsz; ++b)
      for (int i = 0; i < oh; ++i) {
        const int r0 = (i * h) / oh, r1 = ((i + 1) * h + oh - 1) / oh;
        for (int j = 0; j < ow; ++j) {
          const int c0 = (j * w) / ow, c1 = ((j + 1) * w + ow - 1) / ow;
          const T inv_n = T(1) / static_cast<T>((r1 - r0) * (c1 - c0));
          const std::size_t dst = ((static_cast<std::size_t>(b) * oh + static_cast<std::size_t>(i)) * ow +
                                   static_cast<std::size_t>(j)) * c;
          for (int r = r0; r < r1; ++r)
            for (int cc = c0; cc < c1; ++cc) {
              const std::size_t src = ((static_cast<std::size_t>(b) * h + static_cast<std::size_t>(r)) * w +
                                       static_cast<std::size_t>(cc)) * c;
              f(src, dst, inv_n);
            }
        }
      }
  }

  int push(Tensor<T> v, bool rg, std::function<void(Tape&, int)> back) {
    Node n;
    n.val = std::move(v);
    n.requires_grad = rg && grad_;
    if (n.requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  bool grad_;
  std::vector<Node> nodes_;
};

}  // namespace cpath
