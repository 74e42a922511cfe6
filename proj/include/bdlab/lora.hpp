#pragma once

#include <map>
#include <set>
#include <string>

#include <Eigen/Dense>

#include "bdlab/errors.hpp"
#include "bdlab/tensor.hpp"

namespace bdlab {

template <typename T>
struct LoraPair {
  Tensor<T> A;  // [out, r]
  Tensor<T> B;  // [in, r]
  bool operator==(const LoraPair&) const = default;
};

// Low-rank adapter; the effective update of target W is (alpha / rank) * A * B^T.
template <typename T>
struct LoraAdapter {
  int rank = 8;
  double alpha = 16.0;
  std::map<std::string, LoraPair<T>> targets;

  T scale() const { return static_cast<T>(alpha / rank); }
  bool operator==(const LoraAdapter&) const = default;
};

template <typename To, typename From>
LoraPair<To> cast_pair(const LoraPair<From>& p) {
  LoraPair<To> out;
  out.A.shape = p.A.shape;
  out.A.data.assign(p.A.data.begin(), p.A.data.end());
  out.B.shape = p.B.shape;
  out.B.data.assign(p.B.data.begin(), p.B.data.end());
  return out;
}

// (alpha / rank) * A * B^T for one target, as a dense [out, in] tensor.
template <typename T>
Tensor<T> effective_update(const LoraPair<T>& pair, T scale) {
  const auto out = pair.A.shape[0];
  const auto in = pair.B.shape[0];
  const auto r = pair.A.shape[1];
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Tensor<T> w(Shape{out, in});
  Eigen::Map<const Mat> a(pair.A.data.data(), out, r);
  Eigen::Map<const Mat> b(pair.B.data.data(), in, r);
  Eigen::Map<Mat> dst(w.data.data(), out, in);
  dst.noalias() = scale * (a * b.transpose());
  return w;
}

// Same rank, alpha and target set (with equal factor shapes).
template <typename T>
void require_compatible(const LoraAdapter<T>& a, const LoraAdapter<T>& b) {
  if (a.rank != b.rank || a.alpha != b.alpha) {
    throw AdapterError("adapters differ in rank or alpha");
  }
  if (a.targets.size() != b.targets.size()) throw AdapterError("adapters differ in target set");
  for (auto ia = a.targets.begin(), ib = b.targets.begin(); ia != a.targets.end(); ++ia, ++ib) {
    if (ia->first != ib->first) throw AdapterError("target mismatch at '" + ia->first + "'");
    if (ia->second.A.shape != ib->second.A.shape || ia->second.B.shape != ib->second.B.shape) {
      throw AdapterError("factor shape mismatch at '" + ia->first + "'");
    }
  }
}

}  // namespace bdlab
