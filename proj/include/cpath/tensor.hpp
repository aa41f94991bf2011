#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <numeric>
#include <string>
#include <vector>

#include "cpath/errors.hpp"

namespace cpath {

// Every tensor buffer gets the same 64-byte alignment. The SIMD kernels
// underneath pick alignment-dependent code paths; uniform alignment keeps
// results bit-identical across allocations and runs.
template <class T>
struct TensorAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  TensorAllocator() = default;
  template <class U>
  TensorAllocator(const TensorAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(alignment)));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(alignment));
  }
  template <class U>
  bool operator==(const TensorAllocator<U>&) const {
    return true;
  }
};

// Dense row-major tensor. Scalar type is a template parameter: training runs
// in float, gradient-check instantiations in double.
template <class T>
struct Tensor {
  using Storage = std::vector<T, TensorAllocator<T>>;

  std::vector<int> shape;
  Storage data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), T(0)) {}
  Tensor(std::vector<int> s, Storage d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size()) throw ShapeMismatchError("tensor data/shape disagree");
  }
  Tensor(std::vector<int> s, std::initializer_list<T> d)
      : shape(std::move(s)), data(d.begin(), d.end()) {
    if (numel_of(shape) != data.size()) throw ShapeMismatchError("tensor data/shape disagree");
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw ShapeMismatchError("negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i < 0 ? rank() + i : i)]; }
  bool empty() const { return data.empty(); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i)
      s += (i ? "," : "") + std::to_string(shape[i]);
    return s + ")";
  }
};

inline bool same_shape(const std::vector<int>& a, const std::vector<int>& b) { return a == b; }

}  // namespace cpath
