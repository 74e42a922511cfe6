#pragma once

// Run configuration: one JSON document per run, layered over named presets.
// Unknown keys anywhere in the tree are rejected.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "bdlab/datagen.hpp"
#include "bdlab/errors.hpp"
#include "bdlab/signature.hpp"
#include "bdlab/store.hpp"
#include "bdlab/tinylm.hpp"
#include "bdlab/trainer.hpp"

namespace bdlab {

using nlohmann::json;

struct DataSizes {
  std::size_t victim_train = 2000;
  std::size_t poison_train = 2000;
  std::size_t eval = 200;
  std::size_t repair = 200;
};

struct SweepConfig {
  bool enabled = true;
  std::vector<int> n_values{1, 2, 3, 4, 5, 6};
  std::vector<std::string> modes{"norm-only", "alignment-only", "combined"};
  std::vector<double> ratios{0.05, 0.10, 0.20, 0.35};
  std::string cross_attack = "ctba";
};

// Optional hard limits checked by `eval`; a violated limit makes the command fail.
struct Thresholds {
  std::optional<double> max_purified_asr;
  std::optional<double> max_em_drop;
  std::optional<double> min_backdoored_asr;
};

struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  std::string setting = "full";  // "full" or "adapter"
  std::string preset = "toy-default";
  TinyLMConfig model;
  TaskSpec task;
  std::string attack = "badnets";
  double poison_ratio = 0.3;
  std::string behavior = "targeted-refusal";
  DataSizes data;
  TrainConfig victim, poison, variant, repair;
  int variants = 6;
  std::size_t variant_clean_count = 500;
  bool variant_projection_only = true;
  double lambda = 0.01;
  std::string score_mode = "combined";
  double ratio = 0.10;
  int heads = 0;
  std::optional<double> baseline_ratio;
  SweepConfig sweeps;
  int shuffles = 10;
  Thresholds thresholds;

  bool adapter() const { return setting == "adapter"; }
  TrainMode mode() const { return adapter() ? TrainMode::kAdapter : TrainMode::kFull; }
  double effective_baseline_ratio() const { return baseline_ratio.value_or(ratio); }

  ScoringConfig scoring(ScoreMode m) const {
    ScoringConfig s;
    s.lambda = lambda;
    s.mode = m;
    s.kinds = {UnitKind::kMlpChannel};
    if (heads != 0) s.kinds.push_back(UnitKind::kAttnHead);
    return s;
  }
  ScoringConfig scoring() const { return scoring(parse_score_mode(score_mode)); }

  PoisonSpec attack_spec(const std::string& name, std::uint64_t spec_seed) const {
    return attack_preset(name, poison_ratio, parse_behavior(behavior), spec_seed);
  }

  void validate() const {
    model.validate();
    task.validate();
    if (task.vocab_size != model.vocab_size) throw ConfigError("task.vocab_size must equal model.vocab_size");
    if (setting != "full" && setting != "adapter") throw ConfigError("setting must be 'full' or 'adapter'");
    attack_spec(attack, 0).validate();
    if (!(poison_ratio > 0.0 && poison_ratio <= 1.0)) throw ConfigError("attack.ratio must lie in (0, 1]");
    for (auto n : {data.victim_train, data.poison_train, data.eval, data.repair}) {
      if (n == 0) throw ConfigError("data sizes must be positive");
    }
    for (const auto* t : {&victim, &poison, &variant, &repair}) t->validate();
    if (variants < 1) throw ConfigError("variants.n must be >= 1");
    if (variant_clean_count == 0) throw ConfigError("variants.clean_count must be positive");
    scoring().validate();
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("scoring.ratio must lie in (0, 1]");
    if (baseline_ratio && !(*baseline_ratio > 0.0 && *baseline_ratio <= 1.0)) {
      throw ConfigError("baselines.ratio must lie in (0, 1]");
    }
    if (sweeps.enabled) {
      for (int n : sweeps.n_values) {
        if (n < 1 || n > variants) throw ConfigError("sweeps.n_values entries must lie in [1, variants.n]");
      }
      for (const auto& m : sweeps.modes) parse_score_mode(m);
      for (double r : sweeps.ratios) {
        if (!(r > 0.0 && r <= 1.0)) throw ConfigError("sweeps.ratios entries must lie in (0, 1]");
      }
      if (!sweeps.cross_attack.empty()) attack_spec(sweeps.cross_attack, 0).validate();
    }
    if (shuffles < 0) throw ConfigError("sanity.shuffles must be >= 0");
    const int longest = 2 + 2 * task.max_len + 8;
    if (longest > model.max_seq) {
      throw ConfigError("model.max_seq " + std::to_string(model.max_seq) + " is too short for the task (" +
                        std::to_string(longest) + " needed)");
    }
  }
};

// ---------------------------------------------------------------------------
// Presets

struct RunPreset {
  std::string name;
  std::string setting;  // empty: either
  double full_lr, adapter_lr;
  std::string intervention;
};

inline const std::vector<RunPreset>& run_presets() {
  static const std::vector<RunPreset> v{
      {"toy-default", "", 1e-3, 5e-3, "toy-default"},
      {"paper-7b-full", "full", 1e-5, 2e-4, "paper-7b"},
      {"paper-7b-adapter", "adapter", 1e-5, 2e-4, "paper-7b"},
      {"paper-13b-full", "full", 1e-5, 2e-4, "paper-13b"},
      {"paper-13b-adapter", "adapter", 1e-5, 2e-4, "paper-13b"},
  };
  return v;
}

inline const RunPreset& run_preset(const std::string& name) {
  for (const auto& p : run_presets()) {
    if (p.name == name) return p;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

// Defaults for a (preset, setting) pair before the config file is applied.
inline RunConfig preset_defaults(const std::string& preset_name, const std::string& setting) {
  const auto& p = run_preset(preset_name);
  if (!p.setting.empty() && p.setting != setting) {
    throw ConfigError("preset '" + p.name + "' is for the " + p.setting + " setting");
  }
  RunConfig c;
  c.preset = p.name;
  c.setting = setting;
  const bool ad = setting == "adapter";
  c.victim = toy_full_config();
  c.victim.epochs = 3;
  const TrainConfig stage = ad ? toy_adapter_config() : toy_full_config();
  c.poison = stage;
  c.variant = stage;
  c.variant.separate_poison_batches = true;
  c.repair = stage;
  c.repair.epochs = 5;
  for (auto* t : {&c.poison, &c.variant, &c.repair}) t->lr = ad ? p.adapter_lr : p.full_lr;
  const auto& iv = intervention_preset(p.intervention);
  c.ratio = ad ? iv.adapter_ratio : iv.full_ratio;
  c.heads = ad ? iv.adapter_heads : iv.full_heads;
  return c;
}

// ---------------------------------------------------------------------------
// JSON reading with unknown-key rejection

namespace detail {

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("'" + where() + "' must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, int> ||
                    std::is_same_v<T, std::uint64_t>) {
        if (!it->is_number_integer()) throw ConfigError("'" + name(key) + "' must be an integer");
        if constexpr (!std::is_same_v<T, int>) {
          if (it->is_number_integer() && !it->is_number_unsigned() && it->template get<std::int64_t>() < 0) {
            throw ConfigError("'" + name(key) + "' must be non-negative");
          }
        }
      } else if constexpr (std::is_same_v<T, double>) {
        if (!it->is_number()) throw ConfigError("'" + name(key) + "' must be a number");
      }
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("'" + name(key) + "' has the wrong type: " + e.what());
    }
  }

  template <typename T>
  void get(const std::string& key, std::optional<T>& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (it->is_null()) {
      seen_.insert(key);
      out.reset();
      return;
    }
    T v{};
    get(key, v);
    out = v;
  }

  const json* child(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key '" + name(k) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_trainer(const json& j, const std::string& path, TrainConfig& t) {
  ObjectReader r(j, path);
  r.get("lr", t.lr);
  r.get("epochs", t.epochs);
  r.get("batch_size", t.batch_size);
  r.get("weight_decay", t.adamw.weight_decay);
  r.get("beta1", t.adamw.beta1);
  r.get("beta2", t.adamw.beta2);
  r.get("eps", t.adamw.eps);
  r.get("rank", t.rank);
  r.get("alpha", t.alpha);
  r.get("separate_poison_batches", t.separate_poison_batches);
  r.get("frozen", t.frozen);
  r.finish();
}

inline json trainer_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"weight_decay", t.adamw.weight_decay},
          {"beta1", t.adamw.beta1},
          {"beta2", t.adamw.beta2},
          {"eps", t.adamw.eps},
          {"rank", t.rank},
          {"alpha", t.alpha},
          {"separate_poison_batches", t.separate_poison_batches},
          {"frozen", t.frozen}};
}

inline const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kSort: return "sort";
    case TaskKind::kEchoMarker: return "echo-marker";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  for (auto k : {TaskKind::kReverse, TaskKind::kSort, TaskKind::kEchoMarker}) {
    if (s == task_kind_name(k)) return k;
  }
  throw ConfigError("unknown task kind '" + s + "'");
}

template <typename T>
json opt_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace detail

// Applies a config document on top of `c`.
inline void apply_config_json(RunConfig& c, const json& j) {
  detail::ObjectReader r(j, "");
  std::string ignored;
  r.get("name", c.name);
  r.get("seed", c.seed);
  r.get("setting", ignored);
  r.get("preset", ignored);
  if (const auto* m = r.child("model")) c.model = model_config_from_json(*m);
  if (const auto* t = r.child("task")) {
    detail::ObjectReader tr(*t, "task");
    std::string kind = detail::task_kind_name(c.task.kind);
    tr.get("kind", kind);
    c.task.kind = detail::parse_task_kind(kind);
    tr.get("min_len", c.task.min_len);
    tr.get("max_len", c.task.max_len);
    tr.get("vocab_size", c.task.vocab_size);
    tr.finish();
  }
  if (const auto* a = r.child("attack")) {
    detail::ObjectReader ar(*a, "attack");
    ar.get("preset", c.attack);
    ar.get("ratio", c.poison_ratio);
    ar.get("behavior", c.behavior);
    ar.finish();
  }
  if (const auto* d = r.child("data")) {
    detail::ObjectReader dr(*d, "data");
    dr.get("victim_train", c.data.victim_train);
    dr.get("poison_train", c.data.poison_train);
    dr.get("eval", c.data.eval);
    dr.get("repair", c.data.repair);
    dr.finish();
  }
  if (const auto* t = r.child("training")) {
    detail::ObjectReader tr(*t, "training");
    if (const auto* x = tr.child("victim")) detail::read_trainer(*x, "training.victim", c.victim);
    if (const auto* x = tr.child("poison")) detail::read_trainer(*x, "training.poison", c.poison);
    if (const auto* x = tr.child("variant")) detail::read_trainer(*x, "training.variant", c.variant);
    if (const auto* x = tr.child("repair")) detail::read_trainer(*x, "training.repair", c.repair);
    tr.finish();
  }
  if (const auto* v = r.child("variants")) {
    detail::ObjectReader vr(*v, "variants");
    vr.get("n", c.variants);
    vr.get("clean_count", c.variant_clean_count);
    vr.get("projection_only", c.variant_projection_only);
    vr.finish();
  }
  if (const auto* s = r.child("scoring")) {
    detail::ObjectReader sr(*s, "scoring");
    sr.get("lambda", c.lambda);
    sr.get("mode", c.score_mode);
    sr.get("ratio", c.ratio);
    sr.get("heads", c.heads);
    sr.finish();
  }
  if (const auto* b = r.child("baselines")) {
    detail::ObjectReader br(*b, "baselines");
    br.get("ratio", c.baseline_ratio);
    br.finish();
  }
  if (const auto* s = r.child("sweeps")) {
    detail::ObjectReader sr(*s, "sweeps");
    sr.get("enabled", c.sweeps.enabled);
    sr.get("n_values", c.sweeps.n_values);
    sr.get("modes", c.sweeps.modes);
    sr.get("ratios", c.sweeps.ratios);
    sr.get("cross_attack", c.sweeps.cross_attack);
    sr.finish();
  }
  if (const auto* s = r.child("sanity")) {
    detail::ObjectReader sr(*s, "sanity");
    sr.get("shuffles", c.shuffles);
    sr.finish();
  }
  if (const auto* t = r.child("thresholds")) {
    detail::ObjectReader tr(*t, "thresholds");
    tr.get("max_purified_asr", c.thresholds.max_purified_asr);
    tr.get("max_em_drop", c.thresholds.max_em_drop);
    tr.get("min_backdoored_asr", c.thresholds.min_backdoored_asr);
    tr.finish();
  }
  r.finish();
}

struct ConfigOverrides {
  std::optional<std::string> preset;
  std::optional<std::string> setting;
  std::optional<std::uint64_t> seed;
};

// preset defaults -> config document -> command-line overrides.
inline RunConfig resolve_config(const json& doc, const ConfigOverrides& ov = {}) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  auto str = [&](const char* key) -> std::optional<std::string> {
    auto it = doc.find(key);
    if (it == doc.end()) return std::nullopt;
    if (!it->is_string()) throw ConfigError(std::string("'") + key + "' must be a string");
    return it->get<std::string>();
  };
  const std::string preset = ov.preset.value_or(str("preset").value_or("toy-default"));
  const auto& p = run_preset(preset);
  std::string setting = ov.setting.value_or(str("setting").value_or(p.setting.empty() ? "full" : p.setting));
  if (ov.preset && !ov.setting && !p.setting.empty()) setting = p.setting;
  RunConfig c = preset_defaults(preset, setting);
  apply_config_json(c, doc);
  if (ov.seed) c.seed = *ov.seed;
  c.validate();
  return c;
}

inline json to_json(const RunConfig& c) {
  return {
      {"name", c.name},
      {"seed", c.seed},
      {"setting", c.setting},
      {"preset", c.preset},
      {"model", to_json(c.model)},
      {"task",
       {{"kind", detail::task_kind_name(c.task.kind)},
        {"min_len", c.task.min_len},
        {"max_len", c.task.max_len},
        {"vocab_size", c.task.vocab_size}}},
      {"attack", {{"preset", c.attack}, {"ratio", c.poison_ratio}, {"behavior", c.behavior}}},
      {"data",
       {{"victim_train", c.data.victim_train},
        {"poison_train", c.data.poison_train},
        {"eval", c.data.eval},
        {"repair", c.data.repair}}},
      {"training",
       {{"victim", detail::trainer_json(c.victim)},
        {"poison", detail::trainer_json(c.poison)},
        {"variant", detail::trainer_json(c.variant)},
        {"repair", detail::trainer_json(c.repair)}}},
      {"variants",
       {{"n", c.variants},
        {"clean_count", c.variant_clean_count},
        {"projection_only", c.variant_projection_only}}},
      {"scoring", {{"lambda", c.lambda}, {"mode", c.score_mode}, {"ratio", c.ratio}, {"heads", c.heads}}},
      {"baselines", {{"ratio", detail::opt_json(c.baseline_ratio)}}},
      {"sweeps",
       {{"enabled", c.sweeps.enabled},
        {"n_values", c.sweeps.n_values},
        {"modes", c.sweeps.modes},
        {"ratios", c.sweeps.ratios},
        {"cross_attack", c.sweeps.cross_attack}}},
      {"sanity", {{"shuffles", c.shuffles}}},
      {"thresholds",
       {{"max_purified_asr", detail::opt_json(c.thresholds.max_purified_asr)},
        {"max_em_drop", detail::opt_json(c.thresholds.max_em_drop)},
        {"min_backdoored_asr", detail::opt_json(c.thresholds.min_backdoored_asr)}}},
  };
}

inline std::string config_digest(const RunConfig& c) { return sha256_hex(to_json(c).dump()); }

}  // namespace bdlab
