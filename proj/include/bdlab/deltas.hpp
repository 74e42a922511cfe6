#pragma once

// Weight-delta arithmetic and the selectors used by the ablation suite.
// Deltas are held in double so that base + (a - base) reconstructs a float
// store exactly.

#include <algorithm>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "bdlab/errors.hpp"
#include "bdlab/lora.hpp"
#include "bdlab/tensor.hpp"
#include "bdlab/tinylm.hpp"

namespace bdlab {

struct DeltaMap {
  TensorMap<double> tensors;
  bool operator==(const DeltaMap&) const = default;
};

// a - b, entrywise.
template <typename T>
DeltaMap diff(const ParamStore<T>& a, const ParamStore<T>& b) {
  require_parity(a.tensors, b.tensors);
  DeltaMap d;
  for (const auto& [name, ta] : a.tensors) {
    const auto& tb = b.tensors.at(name);
    Tensor<double> t(ta.shape);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      t.data[i] = static_cast<double>(ta.data[i]) - static_cast<double>(tb.data[i]);
    }
    d.tensors.emplace(name, std::move(t));
  }
  return d;
}

// Predicate over parameter paths. Kind-based constructors only ever pick
// attention or MLP projections; norms and embeddings need explicit paths.
struct ComponentSelector {
  std::string label;
  std::function<bool(const std::string&)> pred;

  bool operator()(const std::string& path) const { return pred(path); }

  static ComponentSelector nothing() {
    return {"none", [](const std::string&) { return false; }};
  }
  static ComponentSelector everything() {
    return {"all", [](const std::string&) { return true; }};
  }
  static ComponentSelector all_attn() {
    return {"attn", [](const std::string& p) { return names::parse(p).is_attn(); }};
  }
  static ComponentSelector all_mlp() {
    return {"mlp", [](const std::string& p) { return names::parse(p).is_mlp(); }};
  }
  // Blocks [start, start + k) restricted to the given kinds ("attn", "mlp").
  static ComponentSelector block_span(int start, int k, std::set<std::string> kinds) {
    std::string label = "blocks[" + std::to_string(start) + "," + std::to_string(start + k) + ")";
    for (const auto& kind : kinds) label += "." + kind;
    return {label, [=](const std::string& p) {
              const auto info = names::parse(p);
              if (info.block < start || info.block >= start + k) return false;
              return (kinds.count("attn") && info.is_attn()) || (kinds.count("mlp") && info.is_mlp());
            }};
  }
  static ComponentSelector paths(std::set<std::string> list) {
    return {"paths", [list = std::move(list)](const std::string& p) { return list.count(p) > 0; }};
  }
  static ComponentSelector any_of(ComponentSelector a, ComponentSelector b) {
    return {a.label + "+" + b.label, [a, b](const std::string& p) { return a(p) || b(p); }};
  }
};

// base + delta on every path not selected by `ablate`.
template <typename T>
ParamStore<T> apply_masked_delta(const ParamStore<T>& base, const DeltaMap& delta,
                                 const ComponentSelector& ablate) {
  ParamStore<T> out = base;
  for (const auto& [name, d] : delta.tensors) {
    auto it = out.tensors.find(name);
    if (it == out.tensors.end()) throw StructuralError("delta path '" + name + "' not in base");
    if (it->second.shape != d.shape) throw StructuralError("shape mismatch at '" + name + "'");
    if (ablate(name)) continue;
    auto& w = it->second.data;
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] = static_cast<T>(static_cast<double>(w[i]) + d.data[i]);
    }
  }
  return out;
}

// MLP delta of output block i = MLP delta of input block perm[i].
inline DeltaMap shuffle_mlp_deltas(const DeltaMap& delta, const std::vector<int>& perm) {
  std::vector<int> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != static_cast<int>(i)) throw InputError("invalid block permutation");
  }
  DeltaMap out = delta;
  for (const auto& [name, t] : delta.tensors) {
    const auto info = names::parse(name);
    if (!info.is_mlp()) continue;
    if (info.block >= static_cast<int>(perm.size())) {
      throw InputError("permutation does not cover block " + std::to_string(info.block));
    }
    const auto src = names::proj(perm[info.block], info.kind);
    auto it = delta.tensors.find(src);
    if (it == delta.tensors.end()) throw StructuralError("missing '" + src + "'");
    if (it->second.shape != t.shape) throw StructuralError("MLP shapes differ across blocks");
    out.tensors.at(name) = it->second;
  }
  return out;
}

// Dense effective update of an adapter on every target, in double.
template <typename T>
DeltaMap adapter_effective_delta(const LoraAdapter<T>& a) {
  DeltaMap d;
  for (const auto& [name, pair] : a.targets) {
    const auto upd = effective_update(cast_pair<double>(pair), static_cast<double>(a.alpha) / a.rank);
    d.tensors.emplace(name, upd);
  }
  return d;
}

}  // namespace bdlab
