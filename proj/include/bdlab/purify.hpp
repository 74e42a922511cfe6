#pragma once

// Signature-guided suppression (reinit for full models, factor zeroing for
// adapters), repair finetuning, and the pruning baselines.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "bdlab/datagen.hpp"
#include "bdlab/errors.hpp"
#include "bdlab/rng.hpp"
#include "bdlab/signature.hpp"
#include "bdlab/tinylm.hpp"
#include "bdlab/trainer.hpp"

namespace bdlab {

struct UnitAction {
  SuppressionUnit unit;
  std::string action;  // "reinit", "zero-weights", "zero-adapter"
  std::vector<WeightSlice> slices;
};

struct ActionLog {
  std::vector<UnitAction> entries;
};

inline std::vector<SuppressionUnit> signature_units(const Signature& sig) {
  std::vector<SuppressionUnit> u;
  for (const auto& s : sig.units) u.push_back(s.unit);
  return u;
}

// Redraws every slice owned by the units from Xavier-uniform with the bound
// of its full parent matrix. Everything else is copied bitwise.
template <typename T>
ParamStore<T> reinit_units(const ParamStore<T>& params, const std::vector<SuppressionUnit>& units,
                           std::uint64_t seed, ActionLog* log = nullptr) {
  ParamStore<T> out = params;
  Rng rng = make_rng(seed, 0x4e1);
  for (const auto& u : units) {
    const auto slices = unit_slices(out.config, u);
    for (const auto& s : slices) {
      auto& w = out.at(s.path);
      const double b = std::sqrt(6.0 / static_cast<double>(w.shape[0] + w.shape[1]));
      for_each_in_slice(s, w.shape[0], w.shape[1], [&](std::int64_t i) {
        w.data[static_cast<std::size_t>(i)] = static_cast<T>(uniform(rng, -b, b));
      });
    }
    if (log) log->entries.push_back({u, "reinit", slices});
  }
  return out;
}

template <typename T>
ParamStore<T> reinit_units(const ParamStore<T>& params, const Signature& sig, std::uint64_t seed,
                           ActionLog* log = nullptr) {
  return reinit_units(params, signature_units(sig), seed, log);
}

// Zeroes every slice owned by the units (used by magnitude pruning).
template <typename T>
ParamStore<T> zero_units(const ParamStore<T>& params, const std::vector<SuppressionUnit>& units,
                         ActionLog* log = nullptr) {
  ParamStore<T> out = params;
  for (const auto& u : units) {
    const auto slices = unit_slices(out.config, u);
    for (const auto& s : slices) {
      auto& w = out.at(s.path);
      for_each_in_slice(s, w.shape[0], w.shape[1],
                        [&](std::int64_t i) { w.data[static_cast<std::size_t>(i)] = T(0); });
    }
    if (log) log->entries.push_back({u, "zero-weights", slices});
  }
  return out;
}

// Output-row slices zero the matching rows of A; input-column slices zero
// the matching rows of B (B is indexed by input channel). The effective
// update (alpha/r) A B^T then has exact zeros on every owned row/column.
template <typename T>
LoraAdapter<T> zero_adapter_units(const LoraAdapter<T>& adapter, const TinyLMConfig& config,
                                  const std::vector<SuppressionUnit>& units,
                                  ActionLog* log = nullptr) {
  LoraAdapter<T> out = adapter;
  for (const auto& u : units) {
    const auto slices = unit_slices(config, u);
    for (const auto& s : slices) {
      auto it = out.targets.find(s.path);
      if (it == out.targets.end()) {
        throw ConfigError("unit " + unit_str(u) + " targets '" + s.path + "' which has no adapter");
      }
      auto& factor = s.axis == SliceAxis::kRows ? it->second.A : it->second.B;
      const auto r = factor.shape[1];
      for (auto row = s.begin; row < s.end; ++row) {
        std::fill_n(factor.data.begin() + row * r, r, T(0));
      }
    }
    if (log) log->entries.push_back({u, "zero-adapter", slices});
  }
  return out;
}

template <typename T>
LoraAdapter<T> zero_adapter_units(const LoraAdapter<T>& adapter, const TinyLMConfig& config,
                                  const Signature& sig, ActionLog* log = nullptr) {
  return zero_adapter_units(adapter, config, signature_units(sig), log);
}

// Lightweight clean finetuning after suppression.
template <typename T>
std::pair<ParamStore<T>, LossCurve> repair_finetune(const ParamStore<T>& model,
                                                    const Dataset& clean, TrainConfig cfg) {
  cfg.mode = TrainMode::kFull;
  return train_full(model, clean, cfg);
}

template <typename T>
std::pair<LoraAdapter<T>, LossCurve> repair_finetune(const ParamStore<T>& base,
                                                     const LoraAdapter<T>& adapter,
                                                     const Dataset& clean, TrainConfig cfg) {
  cfg.mode = TrainMode::kAdapter;
  return train_lora(base, adapter, clean, cfg);
}

// ---------------------------------------------------------------------------
// Baselines

// Lowest-first ranking of the units by a per-unit value, ties by unit order.
inline std::vector<SuppressionUnit> lowest_units(const std::vector<SuppressionUnit>& units,
                                                 const std::vector<double>& value, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("pruning ratio must lie in (0, 1]");
  std::vector<std::size_t> idx(units.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (value[a] != value[b]) return value[a] < value[b];
    return units[a] < units[b];
  });
  const auto k = ratio_count(ratio, units.size());
  std::vector<SuppressionUnit> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(units[idx[i]]);
  return out;
}

// L2 norm of each unit's own weight slices.
template <typename T>
std::vector<double> unit_weight_norms(const TensorMap<T>& weights, const TinyLMConfig& c,
                                      const std::vector<SuppressionUnit>& units) {
  std::vector<double> out;
  for (const auto& u : units) out.push_back(norm2(unit_vector(weights, c, u)));
  return out;
}

// Magnitude pruning: zero the lowest-norm fraction of units.
template <typename T>
ParamStore<T> baseline_magnitude_prune(const ParamStore<T>& model, double ratio,
                                       std::vector<UnitKind> kinds = {UnitKind::kMlpChannel},
                                       ActionLog* log = nullptr) {
  const auto units = all_units(model.config, kinds);
  const auto pick = lowest_units(units, unit_weight_norms(model.tensors, model.config, units), ratio);
  return zero_units(model, pick, log);
}

// Adapter variant: units ranked by the norm of their slice of the effective
// adapter update; the chosen units' factors are zeroed.
template <typename T>
LoraAdapter<T> baseline_magnitude_prune(const LoraAdapter<T>& adapter, const TinyLMConfig& config,
                                        double ratio,
                                        std::vector<UnitKind> kinds = {UnitKind::kMlpChannel},
                                        ActionLog* log = nullptr) {
  const auto units = all_units(config, kinds);
  const auto eff = adapter_effective_delta(adapter);
  const auto pick = lowest_units(units, unit_weight_norms(eff.tensors, config, units), ratio);
  return zero_adapter_units(adapter, config, pick, log);
}

// Mean |silu(gate) * up| per MLP channel over every token position of the
// probe prompts (teacher-forced full sequences). Indexed [block][channel].
template <typename T>
std::vector<std::vector<double>> channel_activity(const ParamStore<T>& params,
                                                  const LoraAdapter<T>* adapter,
                                                  const Dataset& probe) {
  if (probe.empty()) throw InputError("probe set is empty");
  Transformer<T> net(params, adapter);
  std::vector<std::vector<double>> acc(params.config.n_blocks,
                                       std::vector<double>(params.config.d_ff, 0.0));
  std::size_t rows = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t b = 0; b < probe.size(); b += kChunk) {
    std::vector<TokenSeq> inputs;
    for (std::size_t i = b; i < std::min(probe.size(), b + kChunk); ++i) {
      inputs.push_back(to_example(probe[i]).input);
      rows += inputs.back().size();
    }
    net.run(inputs);
    const auto sums = net.channel_activation_sums();
    for (std::size_t k = 0; k < acc.size(); ++k) {
      for (std::size_t j = 0; j < acc[k].size(); ++j) acc[k][j] += sums[k][j];
    }
  }
  for (auto& blk : acc) {
    for (auto& x : blk) x /= static_cast<double>(rows);
  }
  return acc;
}

// Most dormant MLP channels on clean inputs.
inline std::vector<SuppressionUnit> dormant_channels(
    const std::vector<std::vector<double>>& activity, double ratio) {
  std::vector<SuppressionUnit> units;
  std::vector<double> value;
  for (std::size_t b = 0; b < activity.size(); ++b) {
    for (std::size_t j = 0; j < activity[b].size(); ++j) {
      units.push_back({UnitKind::kMlpChannel, static_cast<int>(b), static_cast<int>(j)});
      value.push_back(activity[b][j]);
    }
  }
  return lowest_units(units, value, ratio);
}

// Fine-pruning: zero the most dormant channels, then repair.
template <typename T>
std::pair<ParamStore<T>, LossCurve> baseline_fine_prune(const ParamStore<T>& model,
                                                        const Dataset& probe, double ratio,
                                                        const Dataset& repair,
                                                        const TrainConfig& cfg,
                                                        ActionLog* log = nullptr) {
  const auto pick = dormant_channels(channel_activity<T>(model, nullptr, probe), ratio);
  return repair_finetune(zero_units(model, pick, log), repair, cfg);
}

template <typename T>
std::pair<LoraAdapter<T>, LossCurve> baseline_fine_prune(const ParamStore<T>& base,
                                                         const LoraAdapter<T>& adapter,
                                                         const Dataset& probe, double ratio,
                                                         const Dataset& repair,
                                                         const TrainConfig& cfg,
                                                         ActionLog* log = nullptr) {
  const auto pick = dormant_channels(channel_activity<T>(base, &adapter, probe), ratio);
  return repair_finetune(base, zero_adapter_units(adapter, base.config, pick, log), repair, cfg);
}

}  // namespace bdlab
