#pragma once

// Backdoor signature extraction: per-unit slices of the differential deltas,
// the magnitude-and-consistency score, and ratio-based selection.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "bdlab/deltas.hpp"
#include "bdlab/errors.hpp"
#include "bdlab/lora.hpp"
#include "bdlab/tinylm.hpp"

namespace bdlab {

enum class UnitKind { kMlpChannel, kAttnHead };

inline const char* unit_kind_name(UnitKind k) {
  return k == UnitKind::kMlpChannel ? "mlp-channel" : "attn-head";
}

inline UnitKind parse_unit_kind(const std::string& s) {
  if (s == "mlp-channel") return UnitKind::kMlpChannel;
  if (s == "attn-head") return UnitKind::kAttnHead;
  throw ConfigError("unknown unit kind '" + s + "'");
}

struct SuppressionUnit {
  UnitKind kind = UnitKind::kMlpChannel;
  int block = 0;
  int index = 0;  // channel within d_ff, or head within n_heads

  auto tie() const { return std::tuple(block, index, static_cast<int>(kind)); }
  bool operator==(const SuppressionUnit&) const = default;
  bool operator<(const SuppressionUnit& o) const { return tie() < o.tie(); }
};

inline std::string unit_str(const SuppressionUnit& u) {
  return std::string(unit_kind_name(u.kind)) + "@" + std::to_string(u.block) + ":" +
         std::to_string(u.index);
}

enum class SliceAxis { kRows, kCols };

// Rows [begin, end) or columns [begin, end) of one weight matrix.
struct WeightSlice {
  std::string path;
  SliceAxis axis = SliceAxis::kRows;
  std::int64_t begin = 0;
  std::int64_t end = 0;
  bool operator==(const WeightSlice&) const = default;
};

inline void check_unit(const TinyLMConfig& c, const SuppressionUnit& u) {
  const int limit = u.kind == UnitKind::kMlpChannel ? c.d_ff : c.n_heads;
  if (u.block < 0 || u.block >= c.n_blocks || u.index < 0 || u.index >= limit) {
    throw InputError("unit " + unit_str(u) + " out of bounds");
  }
}

// Slices owned by a unit, in canonical order: gate row, up row, down column;
// or q, k, v row blocks then the o column block.
inline std::vector<WeightSlice> unit_slices(const TinyLMConfig& c, const SuppressionUnit& u) {
  check_unit(c, u);
  const int b = u.block;
  if (u.kind == UnitKind::kMlpChannel) {
    const std::int64_t j = u.index;
    return {{names::proj(b, "mlp.gate_proj"), SliceAxis::kRows, j, j + 1},
            {names::proj(b, "mlp.up_proj"), SliceAxis::kRows, j, j + 1},
            {names::proj(b, "mlp.down_proj"), SliceAxis::kCols, j, j + 1}};
  }
  const std::int64_t lo = static_cast<std::int64_t>(u.index) * c.d_head;
  const std::int64_t hi = lo + c.d_head;
  return {{names::proj(b, "attn.q_proj"), SliceAxis::kRows, lo, hi},
          {names::proj(b, "attn.k_proj"), SliceAxis::kRows, lo, hi},
          {names::proj(b, "attn.v_proj"), SliceAxis::kRows, lo, hi},
          {names::proj(b, "attn.o_proj"), SliceAxis::kCols, lo, hi}};
}

// Calls fn(flat_index) for every entry of a [rows, cols] matrix inside the slice.
template <typename Fn>
void for_each_in_slice(const WeightSlice& s, std::int64_t rows, std::int64_t cols, Fn&& fn) {
  if (s.axis == SliceAxis::kRows) {
    for (auto r = s.begin; r < s.end; ++r) {
      for (std::int64_t c = 0; c < cols; ++c) fn(r * cols + c);
    }
  } else {
    for (std::int64_t r = 0; r < rows; ++r) {
      for (auto c = s.begin; c < s.end; ++c) fn(r * cols + c);
    }
  }
}

inline std::vector<SuppressionUnit> all_units(const TinyLMConfig& c, std::vector<UnitKind> kinds) {
  std::vector<SuppressionUnit> out;
  for (auto kind : kinds) {
    const int n = kind == UnitKind::kMlpChannel ? c.d_ff : c.n_heads;
    for (int b = 0; b < c.n_blocks; ++b) {
      for (int j = 0; j < n; ++j) out.push_back({kind, b, j});
    }
  }
  return out;
}

// Flat slice vector of one unit taken from a tensor map (delta or weights).
template <typename T>
std::vector<double> unit_vector(const TensorMap<T>& m, const TinyLMConfig& c,
                                const SuppressionUnit& u) {
  std::vector<double> v;
  for (const auto& s : unit_slices(c, u)) {
    auto it = m.find(s.path);
    if (it == m.end()) throw StructuralError("missing '" + s.path + "'");
    const auto& t = it->second;
    for_each_in_slice(s, t.shape[0], t.shape[1],
                      [&](std::int64_t i) { v.push_back(static_cast<double>(t.data[i])); });
  }
  return v;
}

inline std::vector<double> unit_delta(const DeltaMap& delta, const TinyLMConfig& c,
                                      const SuppressionUnit& u) {
  return unit_vector(delta.tensors, c, u);
}

// Differential delta in effective-weight space:
// (alpha/r) * (A_bd B_bd^T - A_clean B_clean^T) per target.
template <typename T>
DeltaMap effective_adapter_delta(const LoraAdapter<T>& bd, const LoraAdapter<T>& clean) {
  require_compatible(bd, clean);
  auto d = adapter_effective_delta(bd);
  const auto c = adapter_effective_delta(clean);
  for (auto& [name, t] : d.tensors) {
    const auto& ct = c.tensors.at(name);
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] -= ct.data[i];
  }
  return d;
}

// ---------------------------------------------------------------------------
// Scoring

enum class ScoreMode { kCombined, kNormOnly, kAlignmentOnly, kNormalized };

inline const char* score_mode_name(ScoreMode m) {
  switch (m) {
    case ScoreMode::kCombined: return "combined";
    case ScoreMode::kNormOnly: return "norm-only";
    case ScoreMode::kAlignmentOnly: return "alignment-only";
    case ScoreMode::kNormalized: return "normalized";
  }
  return "?";
}

inline ScoreMode parse_score_mode(const std::string& s) {
  for (auto m : {ScoreMode::kCombined, ScoreMode::kNormOnly, ScoreMode::kAlignmentOnly,
                 ScoreMode::kNormalized}) {
    if (s == score_mode_name(m)) return m;
  }
  throw ConfigError("unknown score mode '" + s + "'");
}

struct ScoringConfig {
  double lambda = 0.01;
  std::vector<UnitKind> kinds{UnitKind::kMlpChannel};
  ScoreMode mode = ScoreMode::kCombined;

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (kinds.empty()) throw ConfigError("no unit kinds in scope");
  }
};

struct UnitScore {
  SuppressionUnit unit;
  double strength = 0;   // m_j
  double alignment = 0;  // a_j
  double combined = 0;   // s_j = m_j + lambda * a_j
  double rank_key = 0;   // what selection sorts by (mode dependent)
};

struct ScoreTable {
  std::vector<UnitScore> rows;
  int n = 0;
  double lambda = 0.01;
  ScoreMode mode = ScoreMode::kCombined;
  std::vector<int> variant_ids;
};

// Sum in ascending order, so the result does not depend on input order.
inline double ordered_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0;
  for (double x : v) s += x;
  return s;
}

inline double norm2(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Cosine similarity; 0 when either vector is zero.
inline double cosine(std::span<const double> a, std::span<const double> b, double na, double nb) {
  if (na == 0.0 || nb == 0.0) return 0.0;
  double dot = 0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

// m_j = mean_i ||D_ij||, a_j = mean over pairs i<l of max(0, cos(D_ij, D_lj))
// (0 when N = 1), s_j = m_j + lambda * a_j.
inline ScoreTable score_units(std::span<const DeltaMap> deltas, const TinyLMConfig& config,
                              const std::vector<SuppressionUnit>& units, const ScoringConfig& cfg,
                              std::vector<int> variant_ids = {}) {
  cfg.validate();
  if (deltas.empty()) throw InputError("no deltas to score");
  for (std::size_t i = 1; i < deltas.size(); ++i) require_parity(deltas[0].tensors, deltas[i].tensors);
  const auto n = deltas.size();
  ScoreTable table;
  table.n = static_cast<int>(n);
  table.lambda = cfg.lambda;
  table.mode = cfg.mode;
  table.variant_ids = std::move(variant_ids);
  if (table.variant_ids.empty()) {
    table.variant_ids.resize(n);
    std::iota(table.variant_ids.begin(), table.variant_ids.end(), 0);
  }
  table.rows.reserve(units.size());
  for (const auto& u : units) {
    std::vector<std::vector<double>> vecs;
    std::vector<double> norms;
    for (const auto& d : deltas) {
      vecs.push_back(unit_delta(d, config, u));
      norms.push_back(norm2(vecs.back()));
    }
    UnitScore row;
    row.unit = u;
    row.strength = ordered_sum(norms) / static_cast<double>(n);
    if (n >= 2) {
      std::vector<double> pos;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t l = i + 1; l < n; ++l) {
          pos.push_back(std::max(0.0, cosine(vecs[i], vecs[l], norms[i], norms[l])));
        }
      }
      row.alignment = 2.0 * ordered_sum(pos) / (static_cast<double>(n) * static_cast<double>(n - 1));
    }
    row.combined = row.strength + cfg.lambda * row.alignment;
    table.rows.push_back(row);
  }

  // z-scores of one field, computed within each unit kind.
  auto zscores = [&](auto get) {
    std::vector<double> z(table.rows.size(), 0.0);
    for (auto kind : {UnitKind::kMlpChannel, UnitKind::kAttnHead}) {
      std::vector<std::size_t> idx;
      std::vector<double> v;
      for (std::size_t i = 0; i < table.rows.size(); ++i) {
        if (table.rows[i].unit.kind != kind) continue;
        idx.push_back(i);
        v.push_back(get(table.rows[i]));
      }
      if (v.empty()) continue;
      const double mean = ordered_sum(v) / static_cast<double>(v.size());
      std::vector<double> sq;
      for (double x : v) sq.push_back((x - mean) * (x - mean));
      const double sd = std::sqrt(ordered_sum(sq) / static_cast<double>(v.size()));
      for (std::size_t k = 0; k < idx.size(); ++k) z[idx[k]] = sd > 0 ? (v[k] - mean) / sd : 0.0;
    }
    return z;
  };
  switch (cfg.mode) {
    case ScoreMode::kCombined:
      for (auto& r : table.rows) r.rank_key = r.combined;
      break;
    case ScoreMode::kNormOnly:
      for (auto& r : table.rows) r.rank_key = r.strength;
      break;
    case ScoreMode::kAlignmentOnly:
      for (auto& r : table.rows) r.rank_key = r.alignment;
      break;
    case ScoreMode::kNormalized: {
      const auto zm = zscores([](const UnitScore& r) { return r.strength; });
      const auto za = zscores([](const UnitScore& r) { return r.alignment; });
      for (std::size_t i = 0; i < table.rows.size(); ++i) {
        table.rows[i].rank_key = zm[i] + cfg.lambda * za[i];
      }
      break;
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Selection

struct SignatureUnit {
  SuppressionUnit unit;
  double score = 0;
  bool operator==(const SignatureUnit&) const = default;
};

struct Signature {
  std::vector<SignatureUnit> units;  // descending score, ties by (block, index)
  double ratio = 0;
  int head_count = 0;
  double tau = 0;  // smallest selected score
  double lambda = 0.01;
  int n = 0;
  std::vector<int> variant_ids;
  std::string attack_family;
  std::string mode = "combined";
  bool operator==(const Signature&) const = default;
};

// ceil(ratio * n) with a tolerance, so 0.03 * 100 selects 3 and not 4.
inline std::size_t ratio_count(double ratio, std::size_t n) {
  const double x = ratio * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(x - 1e-9));
  return std::clamp<std::size_t>(k, n ? 1 : 0, n);
}

namespace detail {
inline bool score_order(const UnitScore& a, const UnitScore& b) {
  if (a.rank_key != b.rank_key) return a.rank_key > b.rank_key;
  return a.unit < b.unit;
}
}  // namespace detail

// Top ceil(ratio * |units|) MLP channels by score; attention heads, when the
// table has any, take the top `head_count` (or ratio-based when head_count < 0).
inline Signature select_signature(const ScoreTable& table, double ratio, int head_count = -1) {
  if (table.rows.empty()) throw InputError("score table is empty");
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("selection ratio must lie in (0, 1]");
  Signature sig;
  sig.ratio = ratio;
  sig.head_count = head_count;
  sig.lambda = table.lambda;
  sig.n = table.n;
  sig.variant_ids = table.variant_ids;
  sig.mode = score_mode_name(table.mode);

  std::vector<UnitScore> chosen;
  for (auto kind : {UnitKind::kMlpChannel, UnitKind::kAttnHead}) {
    std::vector<UnitScore> rows;
    for (const auto& r : table.rows) {
      if (r.unit.kind == kind) rows.push_back(r);
    }
    if (rows.empty()) continue;
    std::sort(rows.begin(), rows.end(), detail::score_order);
    std::size_t k = ratio_count(ratio, rows.size());
    if (kind == UnitKind::kAttnHead && head_count >= 0) {
      k = std::min<std::size_t>(static_cast<std::size_t>(head_count), rows.size());
    }
    chosen.insert(chosen.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(k));
  }
  std::stable_sort(chosen.begin(), chosen.end(), detail::score_order);
  for (const auto& r : chosen) sig.units.push_back({r.unit, r.rank_key});
  sig.tau = sig.units.empty() ? 0.0 : sig.units.back().score;
  return sig;
}

// Named intervention ratios. The 7b/13b presets record the ratios used on
// models of that size; the toy preset is tuned for the desk-scale model.
struct InterventionPreset {
  std::string name;
  double full_ratio;
  double adapter_ratio;
  int full_heads = 0;
  int adapter_heads = 0;
};

inline const std::vector<InterventionPreset>& intervention_presets() {
  static const std::vector<InterventionPreset> v{
      {"paper-7b", 0.03, 0.35, 0, 0},
      {"paper-13b", 0.08, 0.40, 0, 0},
      {"paper-mistral-7b", 0.08, 0.40, 2, 8},
      {"toy-default", 0.10, 0.35, 2, 0},
  };
  return v;
}

inline const InterventionPreset& intervention_preset(const std::string& name) {
  for (const auto& p : intervention_presets()) {
    if (p.name == name) return p;
  }
  throw ConfigError("unknown intervention preset '" + name + "'");
}

}  // namespace bdlab
