#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bdlab/errors.hpp"

namespace bdlab {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major tensor with an explicit shape.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0))
      : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), fill) {}

  std::int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  std::size_t size() const { return data.size(); }

  T& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * shape[1] + c)]; }
  const T& at(std::int64_t r, std::int64_t c) const {
    return data[static_cast<std::size_t>(r * shape[1] + c)];
  }

  std::span<T> span() { return data; }
  std::span<const T> span() const { return data; }

  bool operator==(const Tensor&) const = default;
};

// Parameter path -> tensor. std::map keeps keys in lexicographic order,
// which is also the canonical serialization order.
template <typename T>
using TensorMap = std::map<std::string, Tensor<T>>;

// Throws StructuralError naming the first key or shape that differs.
template <typename T, typename U>
void require_parity(const TensorMap<T>& a, const TensorMap<U>& b) {
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end() && ib != b.end(); ++ia, ++ib) {
    if (ia->first != ib->first) {
      throw StructuralError("key mismatch at '" + std::min(ia->first, ib->first) + "'");
    }
    if (ia->second.shape != ib->second.shape) {
      throw StructuralError("shape mismatch at '" + ia->first + "': " +
                            shape_str(ia->second.shape) + " vs " +
                            shape_str(ib->second.shape));
    }
  }
  if (ia != a.end()) throw StructuralError("key mismatch at '" + ia->first + "'");
  if (ib != b.end()) throw StructuralError("key mismatch at '" + ib->first + "'");
}

template <typename To, typename From>
TensorMap<To> cast_map(const TensorMap<From>& in) {
  TensorMap<To> out;
  for (const auto& [name, t] : in) {
    Tensor<To> c;
    c.shape = t.shape;
    c.data.assign(t.data.begin(), t.data.end());
    out.emplace(name, std::move(c));
  }
  return out;
}

}  // namespace bdlab
