#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "bdlab/lora.hpp"
#include "bdlab/signature.hpp"
#include "oracles.hpp"

namespace bdlab {
namespace {

const std::vector<UnitKind> kBoth{UnitKind::kMlpChannel, UnitKind::kAttnHead};

std::vector<DeltaMap> random_deltas(const TinyLMConfig& c, Rng& rng, int n) {
  std::vector<DeltaMap> out;
  for (int i = 0; i < n; ++i) out.push_back(oracle::random_delta(c, rng));
  return out;
}

TEST(Signature, UnitSlicesMatchIndependentGather) {
  Rng rng = make_rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = oracle::random_small_config(rng);
    const auto d = oracle::random_delta(c, rng);
    for (const auto& u : all_units(c, kBoth)) {
      EXPECT_EQ(unit_delta(d, c, u), oracle::unit_entries(d.tensors, c, u.kind, u.block, u.index))
          << unit_str(u);
    }
  }
}

TEST(Signature, UnitSlicesPartitionProjections) {
  Rng rng = make_rng(3);
  const auto c = oracle::random_small_config(rng);
  const auto d = oracle::random_delta(c, rng);
  std::size_t total = 0;
  for (const auto& u : all_units(c, {UnitKind::kMlpChannel})) total += unit_delta(d, c, u).size();
  EXPECT_EQ(total, static_cast<std::size_t>(3 * c.n_blocks * c.d_ff * c.d_model));
  total = 0;
  for (const auto& u : all_units(c, {UnitKind::kAttnHead})) total += unit_delta(d, c, u).size();
  EXPECT_EQ(total, static_cast<std::size_t>(4 * c.n_blocks * c.d_model * c.d_model));
}

TEST(Signature, ScoresMatchBruteForceOracle) {
  Rng rng = make_rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = oracle::random_small_config(rng);
    const int n = 1 + static_cast<int>(uniform_index(rng, 5));
    const double lambda = uniform(rng, 0.0, 2.0);
    const auto deltas = random_deltas(c, rng, n);
    const auto units = all_units(c, kBoth);
    ASSERT_LE(units.size(), 100u);
    ScoringConfig sc;
    sc.lambda = lambda;
    sc.kinds = kBoth;
    const auto table = score_units(deltas, c, units, sc);
    ASSERT_EQ(table.rows.size(), units.size());
    for (std::size_t k = 0; k < units.size(); ++k) {
      std::vector<std::vector<double>> vecs;
      for (const auto& d : deltas) {
        vecs.push_back(oracle::unit_entries(d.tensors, c, units[k].kind, units[k].block, units[k].index));
      }
      const auto ref = oracle::brute_score(vecs, lambda);
      const auto& row = table.rows[k];
      EXPECT_EQ(row.unit, units[k]);
      EXPECT_NEAR(row.strength, ref.m, 1e-12);
      EXPECT_NEAR(row.alignment, ref.a, 1e-12);
      EXPECT_NEAR(row.combined, ref.s, 1e-12);
      EXPECT_EQ(row.rank_key, row.combined);
    }
  }
}

TEST(Signature, StrengthScalesAndAlignmentIsScaleInvariant) {
  Rng rng = make_rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto c = oracle::random_small_config(rng);
    auto deltas = random_deltas(c, rng, 3);
    ScoringConfig sc;
    sc.kinds = kBoth;
    const auto units = all_units(c, kBoth);
    const auto base = score_units(deltas, c, units, sc);
    for (double f : {2.0, 0.5, 8.0}) {
      auto scaled = deltas;
      for (auto& d : scaled) {
        for (auto& [name, t] : d.tensors) {
          for (auto& x : t.data) x *= f;
        }
      }
      const auto got = score_units(scaled, c, units, sc);
      for (std::size_t k = 0; k < units.size(); ++k) {
        EXPECT_EQ(got.rows[k].strength, f * base.rows[k].strength);
        EXPECT_EQ(got.rows[k].alignment, base.rows[k].alignment);
      }
    }
  }
}

TEST(Signature, ScoresInvariantToVariantOrder) {
  Rng rng = make_rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const auto c = oracle::random_small_config(rng);
    auto deltas = random_deltas(c, rng, 5);
    ScoringConfig sc;
    sc.kinds = kBoth;
    const auto units = all_units(c, kBoth);
    const auto a = score_units(deltas, c, units, sc);
    std::vector<std::size_t> perm(deltas.size());
    std::iota(perm.begin(), perm.end(), 0);
    shuffle(perm, rng);
    std::vector<DeltaMap> permuted;
    for (auto i : perm) permuted.push_back(deltas[i]);
    const auto b = score_units(permuted, c, units, sc);
    for (std::size_t k = 0; k < units.size(); ++k) {
      EXPECT_EQ(a.rows[k].strength, b.rows[k].strength);
      EXPECT_EQ(a.rows[k].alignment, b.rows[k].alignment);
      EXPECT_EQ(a.rows[k].combined, b.rows[k].combined);
    }
  }
}

TEST(Signature, EdgeCasesOfAlignment) {
  Rng rng = make_rng(10);
  const auto c = oracle::random_small_config(rng);
  const auto units = all_units(c, kBoth);
  ScoringConfig sc;
  sc.kinds = kBoth;
  const auto d = oracle::random_delta(c, rng);

  const auto single = score_units(std::vector<DeltaMap>{d}, c, units, sc);
  for (const auto& r : single.rows) {
    EXPECT_EQ(r.alignment, 0.0);
    EXPECT_EQ(r.combined, r.strength);
  }

  const auto same = score_units(std::vector<DeltaMap>{d, d, d}, c, units, sc);
  for (const auto& r : same.rows) EXPECT_NEAR(r.alignment, 1.0, 1e-12);

  auto neg = d;
  for (auto& [name, t] : neg.tensors) {
    for (auto& x : t.data) x = -x;
  }
  const auto opposed = score_units(std::vector<DeltaMap>{d, neg}, c, units, sc);
  for (const auto& r : opposed.rows) EXPECT_EQ(r.alignment, 0.0);

  auto zero = d;
  for (auto& [name, t] : zero.tensors) std::fill(t.data.begin(), t.data.end(), 0.0);
  const auto z = score_units(std::vector<DeltaMap>{zero, d}, c, units, sc);
  for (const auto& r : z.rows) EXPECT_EQ(r.alignment, 0.0);
  const auto zz = score_units(std::vector<DeltaMap>{zero, zero}, c, units, sc);
  for (const auto& r : zz.rows) {
    EXPECT_EQ(r.strength, 0.0);
    EXPECT_EQ(r.combined, 0.0);
  }
}

TEST(Signature, ScoringRejectsBadInput) {
  Rng rng = make_rng(11);
  const auto c = oracle::random_small_config(rng);
  const auto units = all_units(c, kBoth);
  ScoringConfig sc;
  EXPECT_THROW(score_units(std::vector<DeltaMap>{}, c, units, sc), InputError);
  auto a = oracle::random_delta(c, rng);
  auto b = a;
  b.tensors.erase(b.tensors.begin());
  EXPECT_THROW(score_units(std::vector<DeltaMap>{a, b}, c, units, sc), StructuralError);
  sc.lambda = -1;
  EXPECT_THROW(score_units(std::vector<DeltaMap>{a}, c, units, sc), ConfigError);
  sc = {};
  sc.kinds.clear();
  EXPECT_THROW(score_units(std::vector<DeltaMap>{a}, c, units, sc), ConfigError);
}

TEST(Signature, ModesPickTheirRankKey) {
  Rng rng = make_rng(12);
  const auto c = oracle::random_small_config(rng);
  const auto deltas = random_deltas(c, rng, 3);
  const auto units = all_units(c, kBoth);
  ScoringConfig sc;
  sc.kinds = kBoth;
  sc.mode = ScoreMode::kNormOnly;
  for (const auto& r : score_units(deltas, c, units, sc).rows) EXPECT_EQ(r.rank_key, r.strength);
  sc.mode = ScoreMode::kAlignmentOnly;
  for (const auto& r : score_units(deltas, c, units, sc).rows) EXPECT_EQ(r.rank_key, r.alignment);
  sc.mode = ScoreMode::kCombined;
  sc.lambda = 0;
  for (const auto& r : score_units(deltas, c, units, sc).rows) EXPECT_EQ(r.rank_key, r.strength);
  for (const char* name : {"combined", "norm-only", "alignment-only", "normalized"}) {
    EXPECT_STREQ(score_mode_name(parse_score_mode(name)), name);
  }
  EXPECT_THROW(parse_score_mode("bogus"), ConfigError);
}

TEST(Signature, RatioCountRoundsUpWithTolerance) {
  EXPECT_EQ(ratio_count(0.03, 100), 3u);
  EXPECT_EQ(ratio_count(0.1, 10), 1u);
  EXPECT_EQ(ratio_count(0.35, 256), 90u);
  EXPECT_EQ(ratio_count(0.001, 10), 1u);
  EXPECT_EQ(ratio_count(1.0, 7), 7u);
  EXPECT_EQ(ratio_count(0.5, 0), 0u);
}

// Brute-force selection: per kind, sort by (key desc, block, index) and take
// the prefix; then merge and order by the same key.
std::vector<SuppressionUnit> brute_select(const ScoreTable& t, double ratio, int heads) {
  std::vector<UnitScore> chosen;
  for (auto kind : {UnitKind::kMlpChannel, UnitKind::kAttnHead}) {
    std::vector<UnitScore> rows;
    for (const auto& r : t.rows) {
      if (r.unit.kind == kind) rows.push_back(r);
    }
    if (rows.empty()) continue;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = i + 1; j < rows.size(); ++j) {
        const bool swap = rows[j].rank_key > rows[i].rank_key ||
                          (rows[j].rank_key == rows[i].rank_key &&
                           std::pair(rows[j].unit.block, rows[j].unit.index) <
                               std::pair(rows[i].unit.block, rows[i].unit.index));
        if (swap) std::swap(rows[i], rows[j]);
      }
    }
    std::size_t k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(rows.size()) - 1e-9));
    k = std::max<std::size_t>(k, 1);
    if (kind == UnitKind::kAttnHead && heads >= 0) k = std::min<std::size_t>(heads, rows.size());
    chosen.insert(chosen.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(k));
  }
  std::vector<SuppressionUnit> out;
  for (const auto& r : chosen) out.push_back(r.unit);
  return out;
}

TEST(Signature, SelectionMatchesBruteForce) {
  Rng rng = make_rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = oracle::random_small_config(rng);
    const auto deltas = random_deltas(c, rng, 1 + static_cast<int>(uniform_index(rng, 4)));
    ScoringConfig sc;
    sc.kinds = kBoth;
    const auto table = score_units(deltas, c, all_units(c, kBoth), sc);
    const double ratio = uniform(rng, 0.01, 1.0);
    const int heads = static_cast<int>(uniform_index(rng, 4)) - 1;
    const auto sig = select_signature(table, ratio, heads);
    const auto ref = brute_select(table, ratio, heads);
    std::set<SuppressionUnit> got_set, ref_set(ref.begin(), ref.end());
    for (const auto& u : sig.units) got_set.insert(u.unit);
    EXPECT_EQ(got_set, ref_set);
    EXPECT_EQ(sig.units.size(), ref.size());
    for (std::size_t i = 1; i < sig.units.size(); ++i) {
      EXPECT_GE(sig.units[i - 1].score, sig.units[i].score);
    }
    if (!sig.units.empty()) {
      EXPECT_EQ(sig.tau, sig.units.back().score);
    }
    double mlp_tau = std::numeric_limits<double>::infinity();
    for (const auto& u : sig.units) {
      if (u.unit.kind == UnitKind::kMlpChannel) mlp_tau = std::min(mlp_tau, u.score);
    }
    for (const auto& r : table.rows) {
      if (r.unit.kind == UnitKind::kMlpChannel && !got_set.count(r.unit)) {
        EXPECT_LE(r.rank_key, mlp_tau);
      }
    }
  }
}

TEST(Signature, SelectionTiesBreakByBlockThenIndex) {
  ScoreTable t;
  t.n = 2;
  for (int b = 0; b < 2; ++b) {
    for (int i = 0; i < 3; ++i) {
      UnitScore s;
      s.unit = {UnitKind::kMlpChannel, 1 - b, 2 - i};
      s.rank_key = 1.0;
      t.rows.push_back(s);
    }
  }
  const auto sig = select_signature(t, 0.5);
  ASSERT_EQ(sig.units.size(), 3u);
  EXPECT_EQ(sig.units[0].unit, (SuppressionUnit{UnitKind::kMlpChannel, 0, 0}));
  EXPECT_EQ(sig.units[1].unit, (SuppressionUnit{UnitKind::kMlpChannel, 0, 1}));
  EXPECT_EQ(sig.units[2].unit, (SuppressionUnit{UnitKind::kMlpChannel, 0, 2}));
  EXPECT_THROW(select_signature(t, 0.0), ConfigError);
  EXPECT_THROW(select_signature(t, 1.5), ConfigError);
  EXPECT_THROW(select_signature(ScoreTable{}, 0.5), InputError);
}

TEST(Signature, PlantedAlignedUnitsRankFirst) {
  TinyLMConfig c;
  c.n_blocks = 2;
  c.n_heads = 2;
  c.d_head = 4;
  c.d_model = 8;
  c.d_ff = 20;
  c.max_seq = 8;
  Rng rng = make_rng(14);
  const std::set<std::pair<int, int>> planted{{0, 3}, {1, 7}};
  std::vector<DeltaMap> deltas;
  auto shared = oracle::random_delta(c, rng);
  for (int i = 0; i < 4; ++i) {
    auto d = oracle::random_delta(c, rng, 0.1);
    for (auto [b, j] : planted) {
      auto& up = d.tensors.at(names::proj(b, "mlp.up_proj")).data;
      const auto& src = shared.tensors.at(names::proj(b, "mlp.up_proj")).data;
      for (int k = 0; k < c.d_model; ++k) up[j * c.d_model + k] = 3.0 * src[j * c.d_model + k];
    }
    deltas.push_back(d);
  }
  ScoringConfig sc;
  const auto sig = select_signature(score_units(deltas, c, all_units(c, sc.kinds), sc), 0.05);
  ASSERT_EQ(sig.units.size(), 2u);
  for (const auto& u : sig.units) EXPECT_TRUE(planted.count({u.unit.block, u.unit.index})) << unit_str(u.unit);
}

TEST(Signature, AdapterDeltaMatchesDenseOracle) {
  TinyLMConfig c;
  c.n_blocks = 2;
  c.n_heads = 2;
  c.d_head = 3;
  c.d_model = 6;
  c.d_ff = 10;
  c.max_seq = 8;
  const auto base = init_params<double>(c, 1);
  auto bd = init_adapter(base, projection_paths(c), 3, 5.0, 2);
  auto clean = init_adapter(base, projection_paths(c), 3, 5.0, 3);
  Rng rng = make_rng(4);
  for (auto* a : {&bd, &clean}) {
    for (auto& [name, p] : a->targets) {
      for (auto& x : p.A.data) x = uniform(rng, -1, 1);
      for (auto& x : p.B.data) x = uniform(rng, -1, 1);
    }
  }
  const auto d = effective_adapter_delta(bd, clean);
  ASSERT_EQ(d.tensors.size(), bd.targets.size());
  for (const auto& [name, t] : d.tensors) {
    const auto wb = oracle::dense_update(bd.targets.at(name), 5.0 / 3.0);
    const auto wc = oracle::dense_update(clean.targets.at(name), 5.0 / 3.0);
    ASSERT_EQ(t.data.size(), wb.size());
    for (std::size_t i = 0; i < wb.size(); ++i) EXPECT_NEAR(t.data[i], wb[i] - wc[i], 1e-12) << name;
  }
  auto other = clean;
  other.rank = 2;
  EXPECT_THROW(effective_adapter_delta(bd, other), AdapterError);
}

TEST(Signature, InterventionPresetsResolve) {
  const auto& p = intervention_preset("paper-7b");
  EXPECT_DOUBLE_EQ(p.full_ratio, 0.03);
  EXPECT_DOUBLE_EQ(p.adapter_ratio, 0.35);
  EXPECT_DOUBLE_EQ(intervention_preset("paper-13b").full_ratio, 0.08);
  EXPECT_DOUBLE_EQ(intervention_preset("paper-13b").adapter_ratio, 0.40);
  EXPECT_THROW(intervention_preset("nope"), ConfigError);
}

}  // namespace
}  // namespace bdlab
