#pragma once

// Stage orchestration over a run directory. Every stage reads its inputs from
// disk, writes its outputs plus a manifest, and is skipped when its manifest
// shows unchanged config, inputs and outputs.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "bdlab/config.hpp"
#include "bdlab/datagen.hpp"
#include "bdlab/deltas.hpp"
#include "bdlab/errors.hpp"
#include "bdlab/eval.hpp"
#include "bdlab/purify.hpp"
#include "bdlab/rng.hpp"
#include "bdlab/sanity.hpp"
#include "bdlab/signature.hpp"
#include "bdlab/store.hpp"
#include "bdlab/tinylm.hpp"
#include "bdlab/trainer.hpp"

namespace bdlab {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Seeds

// Named streams derived from the root seed.
inline const std::vector<std::pair<std::string, std::uint64_t>>& seed_streams() {
  static const std::vector<std::pair<std::string, std::uint64_t>> v{
      {"init", 1},          {"victim_data", 2},   {"victim_train", 3}, {"eval_data", 4},
      {"trigger", 5},       {"repair_data", 6},   {"poison_data", 7},  {"poison_spec", 8},
      {"poison_train", 9},  {"variant_plan", 10}, {"variant_train", 11}, {"reinit", 12},
      {"repair_train", 13}, {"sanity", 14},       {"cross_spec", 15},  {"cross_train", 16},
      {"cross_trigger", 17},
  };
  return v;
}

inline std::uint64_t stream_seed(std::uint64_t root, const std::string& name) {
  for (const auto& [n, id] : seed_streams()) {
    if (n == name) return derive_seed(root, id);
  }
  throw ConfigError("unknown seed stream '" + name + "'");
}

inline std::map<std::string, std::uint64_t> seed_map(std::uint64_t root) {
  std::map<std::string, std::uint64_t> m{{"root", root}};
  for (const auto& [n, id] : seed_streams()) m[n] = derive_seed(root, id);
  return m;
}

// ---------------------------------------------------------------------------
// Models under test

// Full setting: `params` is the whole model. Adapter setting: `params` is the
// frozen backbone and `adapter` is the artifact under test.
template <typename T>
struct Suspect {
  ParamStore<T> params;
  std::optional<LoraAdapter<T>> adapter;
  ModelRef<T> ref() const { return model_ref(params, adapter ? &*adapter : nullptr); }
};

struct EvalRow {
  std::string attack;
  std::string defense;
  std::string setting;
  std::string label;  // sweep parameter, if any
  Rate asr;
  Utility utility;
  Rate false_fire;
  std::uint64_t seed = 0;
  std::string config_digest;
};

inline nlohmann::json to_json(const EvalRow& r) {
  return {{"attack", r.attack},
          {"defense", r.defense},
          {"setting", r.setting},
          {"label", r.label},
          {"asr", r.asr.value()},
          {"asr_hits", r.asr.hits},
          {"asr_total", r.asr.total},
          {"exact_match", r.utility.exact_match},
          {"exact_hits", r.utility.exact.hits},
          {"exact_total", r.utility.exact.total},
          {"token_accuracy", r.utility.token_accuracy},
          {"perplexity", r.utility.perplexity},
          {"false_fire", r.false_fire.value()},
          {"false_fire_hits", r.false_fire.hits},
          {"seed", r.seed},
          {"config_digest", r.config_digest}};
}

inline const char* kUtilityNote =
    "Utility columns are synthetic-task metrics on the held-out clean set (greedy exact match, "
    "teacher-forced token accuracy, response perplexity); they stand in for natural-language "
    "benchmarks, which are not run.";

inline std::string rate_str(const Rate& r) {
  return fmt_fixed(r.value()) + " (" + std::to_string(r.hits) + "/" + std::to_string(r.total) + ")";
}

inline std::string rows_markdown(const std::vector<EvalRow>& rows, const std::string& label_header = "") {
  std::string md = "| Attack | Defense | Setting |";
  if (!label_header.empty()) md += " " + label_header + " |";
  md += " ASR | Clean EM | Token acc | Perplexity | False-fire |\n|---|---|---|";
  if (!label_header.empty()) md += "---|";
  md += "---|---|---|---|---|\n";
  for (const auto& r : rows) {
    md += "| " + r.attack + " | " + r.defense + " | " + r.setting + " |";
    if (!label_header.empty()) md += " " + r.label + " |";
    md += " " + rate_str(r.asr) + " | " + fmt_fixed(r.utility.exact_match) + " | " +
          fmt_fixed(r.utility.token_accuracy) + " | " + fmt_fixed(r.utility.perplexity, 4) + " | " +
          rate_str(r.false_fire) + " |\n";
  }
  return md;
}

// ---------------------------------------------------------------------------
// Run context

struct RunContext {
  RunConfig cfg;
  fs::path root;
  int threads = 1;
  std::ostream* log = nullptr;

  fs::path path(const std::string& rel) const { return root / rel; }
  void note(const std::string& msg) const {
    if (log) *log << "[" << cfg.name << "] " << msg << "\n" << std::flush;
  }
  std::string digest() const { return config_digest(cfg); }
};

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Collects the artifacts a stage reads and writes, then persists the manifest.
class StageRecorder {
 public:
  StageRecorder(const RunContext& ctx, std::string stage, std::string command)
      : ctx_(ctx), stage_(std::move(stage)) {
    m_.command = std::move(command);
    m_.config = to_json(ctx.cfg);
    m_.seeds = seed_map(ctx.cfg.seed);
    m_.started = utc_now();
  }

  fs::path input(const std::string& rel, const std::string& producer) {
    const auto p = ctx_.path(rel);
    if (!fs::exists(p)) {
      throw OrchestrationError("missing artifact '" + rel + "' (produced by '" + producer + "')");
    }
    m_.inputs[rel] = file_sha256(p);
    return p;
  }

  void output(const std::string& rel, const std::string& sha) { m_.outputs[rel] = sha; }

  std::string finish() {
    m_.finished = utc_now();
    return save_manifest(m_, manifest_path(ctx_, stage_));
  }

  static fs::path manifest_path(const RunContext& ctx, const std::string& stage) {
    return ctx.path("manifests/" + stage + ".json");
  }

 private:
  const RunContext& ctx_;
  std::string stage_;
  RunManifest m_;
};

// True when the stage's manifest matches the current config and command and
// every recorded input and output is still present with the recorded digest.
inline bool stage_up_to_date(const RunContext& ctx, const std::string& stage, const std::string& command) {
  const auto mp = StageRecorder::manifest_path(ctx, stage);
  if (!fs::exists(mp)) return false;
  RunManifest m;
  try {
    m = load_manifest(mp);
  } catch (const std::exception&) {
    return false;
  }
  if (m.command != command || m.config != to_json(ctx.cfg)) return false;
  for (const auto* group : {&m.inputs, &m.outputs}) {
    for (const auto& [rel, sha] : *group) {
      const auto p = ctx.path(rel);
      if (!fs::exists(p) || file_sha256(p) != sha) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Artifact paths

namespace artifact {
inline const std::string kBase = "checkpoints/base.bdt";
inline const std::string kBackdoored = "checkpoints/backdoored.bdt";
inline const std::string kSuspicious = "adapters/suspicious.bdt";
inline const std::string kVictimTrain = "datasets/victim_train.jsonl";
inline const std::string kPoisonTrain = "datasets/poison_train.jsonl";
inline const std::string kEvalClean = "datasets/eval_clean.jsonl";
inline const std::string kEvalTriggered = "datasets/eval_triggered.jsonl";
inline const std::string kRepair = "datasets/repair.jsonl";
inline const std::string kVariantPlan = "datasets/variant_plan.json";
inline const std::string kEvalReport = "reports/eval.json";
inline const std::string kReport = "reports/report.json";

inline std::string suspect(bool adapter) { return adapter ? kSuspicious : kBackdoored; }
inline std::string model_dir(bool adapter) { return adapter ? "adapters/" : "checkpoints/"; }
inline std::string delta(bool adapter, int id) {
  return model_dir(adapter) + "variants/delta_" + std::to_string(id) + ".bdt";
}
inline std::string purified(bool adapter) { return model_dir(adapter) + "purified.bdt"; }
inline std::string baseline(bool adapter, const std::string& name) {
  return model_dir(adapter) + "baseline_" + name + ".bdt";
}
inline std::string signature(int n) { return "signatures/signature_n" + std::to_string(n) + ".json"; }
inline std::string scores(int n) { return "reports/scores_n" + std::to_string(n) + ".json"; }
}  // namespace artifact

inline const std::vector<std::string>& baseline_names() {
  static const std::vector<std::string> v{"ft-only", "magnitude-prune", "fine-prune"};
  return v;
}

// ---------------------------------------------------------------------------
// Data

// Held-out clean evaluation prompts; every training and repair set excludes them.
inline Dataset heldout_eval(const RunConfig& c) {
  return make_clean_dataset(c.task, c.data.eval, stream_seed(c.seed, "eval_data"));
}

inline TrainConfig with_seed(TrainConfig t, TrainMode mode, std::uint64_t seed) {
  t.mode = mode;
  t.seed = seed;
  return t;
}

// Poisoned finetune of `base` for one attack preset.
template <typename T>
Suspect<T> train_attack(const RunConfig& c, const ParamStore<T>& base, const Dataset& poisoned,
                        std::uint64_t train_seed) {
  const auto tc = with_seed(c.poison, c.mode(), train_seed);
  Suspect<T> s;
  if (c.adapter()) {
    s.params = base;
    s.adapter = train_lora(base, poisoned, tc).first;
  } else {
    s.params = train_full(base, poisoned, tc).first;
  }
  return s;
}

template <typename T>
std::string save_suspect(const Suspect<T>& s, const fs::path& p) {
  return s.adapter ? save_adapter(*s.adapter, p) : save_params(s.params, p);
}

template <typename T>
Suspect<T> load_suspect(const RunConfig& c, const ParamStore<T>& base, const fs::path& p) {
  Suspect<T> s;
  if (c.adapter()) {
    s.params = base;
    s.adapter = load_adapter<T>(p);
    validate_adapter(base, *s.adapter);
  } else {
    s.params = load_params<T>(p);
    if (s.params.config != base.config) throw StructuralError("'" + p.string() + "' has a different model config");
  }
  return s;
}

// The poisoned update relative to the clean base.
template <typename T>
DeltaMap suspect_delta(const ParamStore<T>& base, const Suspect<T>& s) {
  return s.adapter ? adapter_effective_delta(*s.adapter) : diff(s.params, base);
}

// Model the variants are finetuned from.
template <typename T>
ParamStore<T> variant_origin(const Suspect<T>& s) {
  return s.adapter ? merge_adapter(s.params, *s.adapter) : s.params;
}

template <typename T>
EvalRow evaluate_row(const RunContext& ctx, ModelRef<T> model, const Dataset& triggered,
                     const Dataset& clean, std::string attack, std::string defense,
                     std::string label = "") {
  const auto& c = ctx.cfg;
  const auto behavior = c.attack_spec(c.attack, 0).behavior;
  const int max_new = max_new_tokens(c.task);
  EvalRow r;
  r.attack = std::move(attack);
  r.defense = std::move(defense);
  r.setting = c.setting;
  r.label = std::move(label);
  r.asr = asr(model, triggered, behavior, max_new);
  r.utility = clean_utility(model, clean, max_new);
  r.false_fire = asr(model, clean, behavior, max_new);
  r.seed = c.seed;
  r.config_digest = ctx.digest();
  return r;
}

// ---------------------------------------------------------------------------
// Purification primitives shared by the stages and sweeps

template <typename T>
Suspect<T> suppress(const RunConfig& c, const Suspect<T>& s, const Signature& sig, ActionLog* log = nullptr) {
  Suspect<T> out = s;
  if (s.adapter) {
    out.adapter = zero_adapter_units(*s.adapter, s.params.config, sig, log);
  } else {
    out.params = reinit_units(s.params, sig, stream_seed(c.seed, "reinit"), log);
  }
  return out;
}

template <typename T>
std::pair<Suspect<T>, LossCurve> repair_with(const RunConfig& c, const Suspect<T>& s, const Dataset& data) {
  const auto tc = with_seed(c.repair, c.mode(), stream_seed(c.seed, "repair_train"));
  Suspect<T> out = s;
  LossCurve curve;
  if (s.adapter) {
    std::tie(*out.adapter, curve) = repair_finetune(s.params, *s.adapter, data, tc);
  } else {
    std::tie(out.params, curve) = repair_finetune(s.params, data, tc);
  }
  return {std::move(out), std::move(curve)};
}

template <typename T>
Suspect<T> purify_suspect(const RunConfig& c, const Suspect<T>& s, const Signature& sig,
                          const Dataset& repair_set, ActionLog* log = nullptr,
                          LossCurve* curve = nullptr) {
  auto [out, lc] = repair_with(c, suppress(c, s, sig, log), repair_set);
  if (curve) *curve = std::move(lc);
  return out;
}

template <typename T>
Suspect<T> run_baseline(const RunConfig& c, const Suspect<T>& s, const std::string& name,
                        const Dataset& repair_set, ActionLog* log = nullptr) {
  const double ratio = c.effective_baseline_ratio();
  if (name == "ft-only") return repair_with(c, s, repair_set).first;
  if (name == "magnitude-prune") {
    Suspect<T> pruned = s;
    if (s.adapter) {
      pruned.adapter = baseline_magnitude_prune(*s.adapter, s.params.config, ratio, {UnitKind::kMlpChannel}, log);
    } else {
      pruned.params = baseline_magnitude_prune(s.params, ratio, {UnitKind::kMlpChannel}, log);
    }
    return repair_with(c, pruned, repair_set).first;
  }
  if (name == "fine-prune") {
    const auto tc = with_seed(c.repair, c.mode(), stream_seed(c.seed, "repair_train"));
    Suspect<T> out = s;
    if (s.adapter) {
      out.adapter = baseline_fine_prune(s.params, *s.adapter, repair_set, ratio, repair_set, tc, log).first;
    } else {
      out.params = baseline_fine_prune(s.params, repair_set, ratio, repair_set, tc, log).first;
    }
    return out;
  }
  throw ConfigError("unknown baseline '" + name + "'");
}

inline nlohmann::json to_json(const ActionLog& log) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : log.entries) {
    nlohmann::json slices = nlohmann::json::array();
    for (const auto& s : e.slices) {
      slices.push_back({{"path", s.path},
                        {"axis", s.axis == SliceAxis::kRows ? "rows" : "cols"},
                        {"begin", s.begin},
                        {"end", s.end}});
    }
    auto j = to_json(e.unit);
    j["action"] = e.action;
    j["slices"] = slices;
    out.push_back(std::move(j));
  }
  return out;
}

inline nlohmann::json to_json(const LossCurve& c) { return c.step_loss; }

// Fraction of shared units, |a ∩ b| / |a ∪ b|.
inline nlohmann::json signature_overlap(const Signature& a, const Signature& b) {
  std::set<SuppressionUnit> sa, sb, inter;
  for (const auto& u : a.units) sa.insert(u.unit);
  for (const auto& u : b.units) sb.insert(u.unit);
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(inter, inter.begin()));
  const auto uni = sa.size() + sb.size() - inter.size();
  return {{"a_units", sa.size()},
          {"b_units", sb.size()},
          {"shared", inter.size()},
          {"jaccard", uni ? static_cast<double>(inter.size()) / static_cast<double>(uni) : 1.0}};
}

// ---------------------------------------------------------------------------
// Stages

template <typename T>
class Pipeline {
 public:
  explicit Pipeline(RunContext ctx) : ctx_(std::move(ctx)) {}

  const RunContext& context() const { return ctx_; }
  const RunConfig& cfg() const { return ctx_.cfg; }

  // train-victim: clean pretraining of the base model.
  void train_victim() {
    const std::string stage = "train-victim";
    if (skip(stage, stage)) return;
    StageRecorder rec(ctx_, stage, stage);
    const auto& c = cfg();
    const auto eval = heldout_eval(c);
    const auto exclude = prompt_set(eval);
    const auto data = make_clean_dataset(c.task, c.data.victim_train, stream_seed(c.seed, "victim_data"), &exclude);
    const auto init = init_params<T>(c.model, stream_seed(c.seed, "init"));
    ctx_.note("training victim base on " + std::to_string(data.size()) + " clean samples");
    const auto [base, curve] =
        train_full(init, data, with_seed(c.victim, TrainMode::kFull, stream_seed(c.seed, "victim_train")));
    rec.output(artifact::kVictimTrain, save_dataset(data, ctx_.path(artifact::kVictimTrain)));
    rec.output(artifact::kBase, save_params(base, ctx_.path(artifact::kBase)));
    rec.output("reports/victim_loss.json",
               write_file(ctx_.path("reports/victim_loss.json"), dump_json(to_json(curve))));
    rec.finish();
  }

  // poison: evaluation/repair sets and the poisoned finetune (full model or adapter).
  void poison() {
    const std::string stage = "poison";
    if (skip(stage, stage)) return;
    StageRecorder rec(ctx_, stage, stage);
    const auto& c = cfg();
    const auto base = load_params<T>(rec.input(artifact::kBase, "train-victim"));
    const auto eval = heldout_eval(c);
    const auto exclude = prompt_set(eval);
    const auto triggered = make_triggered_set(eval, c.attack_spec(c.attack, stream_seed(c.seed, "trigger")));
    const auto repair_set = make_clean_dataset(c.task, c.data.repair, stream_seed(c.seed, "repair_data"), &exclude);
    const auto clean = make_clean_dataset(c.task, c.data.poison_train, stream_seed(c.seed, "poison_data"), &exclude);
    const auto poisoned = poison_dataset(clean, c.attack_spec(c.attack, stream_seed(c.seed, "poison_spec")));
    ctx_.note("poisoning (" + c.attack + ", ratio " + fmt_fixed(c.poison_ratio, 2) + ", " + c.setting + ")");
    const auto sus = train_attack(c, base, poisoned, stream_seed(c.seed, "poison_train"));
    rec.output(artifact::kEvalClean, save_dataset(eval, ctx_.path(artifact::kEvalClean)));
    rec.output(artifact::kEvalTriggered, save_dataset(triggered, ctx_.path(artifact::kEvalTriggered)));
    rec.output(artifact::kRepair, save_dataset(repair_set, ctx_.path(artifact::kRepair)));
    rec.output(artifact::kPoisonTrain, save_dataset(poisoned, ctx_.path(artifact::kPoisonTrain)));
    const auto sp = artifact::suspect(c.adapter());
    rec.output(sp, save_suspect(sus, ctx_.path(sp)));
    rec.finish();
  }

  // ablate: weight-space sanity suite on the poisoned update.
  SanitySuiteReport ablate() {
    const std::string stage = "ablate";
    if (skip(stage, stage)) {
      return {};
    }
    StageRecorder rec(ctx_, stage, stage);
    const auto& c = cfg();
    const auto base = load_params<T>(rec.input(artifact::kBase, "train-victim"));
    const auto sus = load_suspect<T>(c, base, rec.input(artifact::suspect(c.adapter()), "poison"));
    const auto triggered = load_dataset(rec.input(artifact::kEvalTriggered, "poison"));
    const auto clean = load_dataset(rec.input(artifact::kEvalClean, "poison"));
    SanityOptions opt;
    opt.shuffles = c.shuffles;
    opt.seed = stream_seed(c.seed, "sanity");
    opt.threads = ctx_.threads;
    opt.max_new = max_new_tokens(c.task);
    ctx_.note("running the ablation suite");
    const auto rep = run_sanity_suite(base, suspect_delta(base, sus), triggered,
                                      c.attack_spec(c.attack, 0).behavior, clean, opt);
    rec.output("reports/sanity.json", write_file(ctx_.path("reports/sanity.json"), dump_json(to_json(rep))));
    rec.output("reports/sanity.md", write_file(ctx_.path("reports/sanity.md"),
                                               std::string("# Weight-space ablations\n\n") + kUtilityNote +
                                                   "\n\n" + sanity_markdown(rep)));
    rec.finish();
    return rep;
  }

  // variants: paired finetunes from the suspect; persists the differential deltas.
  void variants() {
    const std::string stage = "variants";
    if (skip(stage, stage)) return;
    StageRecorder rec(ctx_, stage, stage);
    const auto& c = cfg();
    const auto base = load_params<T>(rec.input(artifact::kBase, "train-victim"));
    const auto sus = load_suspect<T>(c, base, rec.input(artifact::suspect(c.adapter()), "poison"));
    const auto eval = load_dataset(rec.input(artifact::kEvalClean, "poison"));
    const auto exclude = prompt_set(eval);
    const auto plan = make_variant_plan(c.variants, stream_seed(c.seed, "variant_plan"), c.variant_clean_count);
    const auto origin = variant_origin(sus);
    ctx_.note("training " + std::to_string(plan.size()) + " variant pairs");
    auto tc = with_seed(c.variant, c.mode(), stream_seed(c.seed, "variant_train"));
    const auto projections = projection_paths(c.model);
    if (!c.adapter() && c.variant_projection_only) {
      const std::set<std::string> proj(projections.begin(), projections.end());
      for (const auto& [name, shape] : canonical_shapes(c.model)) {
        if (!proj.count(name)) tc.frozen.insert(name);
      }
    }
    const auto pairs = make_variant_pairs(origin, plan, c.task, tc, ctx_.threads, &exclude);
    rec.output(artifact::kVariantPlan,
               write_file(ctx_.path(artifact::kVariantPlan), dump_json(plan_json(plan))));
    for (const auto& pair : pairs.pairs) {
      DeltaMap d;
      if (c.adapter()) {
        d = effective_adapter_delta(pair.bd_adapter, pair.clean_adapter);
      } else {
        const auto full = diff(pair.bd, pair.clean);
        for (const auto& name : projections) d.tensors.emplace(name, full.tensors.at(name));
      }
      const auto rel = artifact::delta(c.adapter(), pair.id);
      rec.output(rel, save_delta(d, ctx_.path(rel)));
    }
    rec.finish();
  }

  // extract: signature from the first n variant deltas.
  Signature extract(int n, std::optional<ScoreMode> mode = std::nullopt, std::optional<double> ratio = std::nullopt,
                    bool persist = true) {
    const auto& c = cfg();
    if (n < 1 || n > c.variants) {
      throw ConfigError("--n must lie in [1, " + std::to_string(c.variants) + "]");
    }
    const auto m = mode.value_or(parse_score_mode(c.score_mode));
    const double r = ratio.value_or(c.ratio);
    std::vector<DeltaMap> deltas;
    std::vector<int> ids;
    std::optional<StageRecorder> rec;
    const std::string stage = "extract_n" + std::to_string(n);
    const std::string command = "extract --n " + std::to_string(n);
    if (persist) {
      if (skip(stage, command)) return load_signature(ctx_.path(artifact::signature(n)));
      rec.emplace(ctx_, stage, command);
    }
    for (int i = 0; i < n; ++i) {
      const auto rel = artifact::delta(c.adapter(), i);
      const auto p = rec ? rec->input(rel, "variants") : require(rel, "variants");
      deltas.push_back(load_delta(p));
      ids.push_back(i);
    }
    const auto table = score_units(deltas, c.model, all_units(c.model, c.scoring(m).kinds), c.scoring(m), ids);
    auto sig = select_signature(table, r, c.heads);
    sig.attack_family = c.attack;
    if (rec) {
      rec->output(artifact::signature(n), save_signature(sig, ctx_.path(artifact::signature(n))));
      rec->output(artifact::scores(n),
                  write_file(ctx_.path(artifact::scores(n)), dump_json(to_json(table))));
      nlohmann::json overlap = nlohmann::json::object();
      for (int k = 1; k <= c.variants; ++k) {
        if (k == n) continue;
        const auto other = ctx_.path(artifact::signature(k));
        if (fs::exists(other)) overlap["n" + std::to_string(k)] = signature_overlap(sig, load_signature(other));
      }
      const auto orel = "reports/signature_overlap_n" + std::to_string(n) + ".json";
      rec->output(orel, write_file(ctx_.path(orel), dump_json(overlap)));
      rec->finish();
      ctx_.note("signature n=" + std::to_string(n) + ": " + std::to_string(sig.units.size()) + " units");
    }
    return sig;
  }

  // purify: suppression of the signature units plus repair finetuning.
  void purify() {
    const std::string stage = "purify";
    if (skip(stage, stage)) return;
    StageRecorder rec(ctx_, stage, stage);
    const auto& c = cfg();
    const auto base = load_params<T>(rec.input(artifact::kBase, "train-victim"));
    const auto sus = load_suspect<T>(c, base, rec.input(artifact::suspect(c.adapter()), "poison"));
    const auto sig = load_signature(rec.input(artifact::signature(c.variants), "extract"));
    const auto repair_set = load_dataset(rec.input(artifact::kRepair, "poison"));
    ActionLog log;
    LossCurve curve;
    ctx_.note("purifying with " + std::to_string(sig.units.size()) + " signature units");
    const auto out = purify_suspect(c, sus, sig, repair_set, &log, &curve);
    const auto rel = artifact::purified(c.adapter());
    rec.output(rel, save_suspect(out, ctx_.path(rel)));
    rec.output("reports/purify_actions.json",
               write_file(ctx_.path("reports/purify_actions.json"), dump_json(to_json(log))));
    rec.output("reports/repair_loss.json",
               write_file(ctx_.path("reports/repair_loss.json"), dump_json(to_json(curve))));
    rec.finish();
  }

  // baseline: FT-only, magnitude pruning and fine-pruning at the same budget.
  void baseline() {
    const std::string stage = "baseline";
    if (skip(stage, stage)) return;
    StageRecorder rec(ctx_, stage, stage);
    const auto& c = cfg();
    const auto base = load_params<T>(rec.input(artifact::kBase, "train-victim"));
    const auto sus = load_suspect<T>(c, base, rec.input(artifact::suspect(c.adapter()), "poison"));
    const auto repair_set = load_dataset(rec.input(artifact::kRepair, "poison"));
    const auto& names = baseline_names();
    std::vector<Suspect<T>> outs(names.size());
    ctx_.note("running baselines");
    parallel_for(names.size(), ctx_.threads,
                 [&](std::size_t i) { outs[i] = run_baseline(c, sus, names[i], repair_set); });
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto rel = artifact::baseline(c.adapter(), names[i]);
      rec.output(rel, save_suspect(outs[i], ctx_.path(rel)));
    }
    rec.finish();
  }

  // eval: one row per defense. Returns the violated thresholds (empty when all hold).
  std::vector<std::string> eval() {
    const std::string stage = "eval";
    const auto& c = cfg();
    if (skip(stage, stage)) {
      return check_thresholds(eval_rows_from_json(
          nlohmann::json::parse(read_file(ctx_.path(artifact::kEvalReport))).at("rows")));
    }
    StageRecorder rec(ctx_, stage, stage);
    const auto base = load_params<T>(rec.input(artifact::kBase, "train-victim"));
    const auto triggered = load_dataset(rec.input(artifact::kEvalTriggered, "poison"));
    const auto clean = load_dataset(rec.input(artifact::kEvalClean, "poison"));
    struct Job {
      std::string defense;
      std::string rel;
      std::string producer;
    };
    std::vector<Job> jobs{{"clean-victim", artifact::kBase, "train-victim"},
                          {"none", artifact::suspect(c.adapter()), "poison"},
                          {"signature", artifact::purified(c.adapter()), "purify"}};
    for (const auto& b : baseline_names()) jobs.push_back({b, artifact::baseline(c.adapter(), b), "baseline"});
    std::vector<Suspect<T>> models(jobs.size());
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      const auto p = rec.input(jobs[i].rel, jobs[i].producer);
      if (i == 0) {
        models[i].params = base;
      } else {
        models[i] = load_suspect<T>(c, base, p);
      }
    }
    std::vector<EvalRow> rows(jobs.size());
    ctx_.note("evaluating " + std::to_string(jobs.size()) + " models");
    parallel_for(jobs.size(), ctx_.threads, [&](std::size_t i) {
      rows[i] = evaluate_row(ctx_, models[i].ref(), triggered, clean, i == 0 ? "none" : c.attack, jobs[i].defense);
    });
    nlohmann::json rj = nlohmann::json::array();
    for (const auto& r : rows) rj.push_back(to_json(r));
    const nlohmann::json doc = {{"note", kUtilityNote}, {"rows", rj}, {"config_digest", ctx_.digest()}};
    rec.output(artifact::kEvalReport, write_file(ctx_.path(artifact::kEvalReport), dump_json(doc)));
    const std::string md = "# Purification results\n\n" + std::string(kUtilityNote) + "\n\n" + rows_markdown(rows);
    rec.output("reports/eval.md", write_file(ctx_.path("reports/eval.md"), md));
    rec.finish();
    return check_thresholds(rows);
  }

  // report: sweeps over N, scoring composition, ratio, and cross-attack transfer,
  // merged with the eval and ablation tables.
  void report() {
    const std::string stage = "report";
    if (skip(stage, stage)) return;
    StageRecorder rec(ctx_, stage, stage);
    const auto& c = cfg();
    const auto base = load_params<T>(rec.input(artifact::kBase, "train-victim"));
    const auto sus = load_suspect<T>(c, base, rec.input(artifact::suspect(c.adapter()), "poison"));
    const auto triggered = load_dataset(rec.input(artifact::kEvalTriggered, "poison"));
    const auto clean = load_dataset(rec.input(artifact::kEvalClean, "poison"));
    const auto repair_set = load_dataset(rec.input(artifact::kRepair, "poison"));
    const auto eval_doc = nlohmann::json::parse(read_file(rec.input(artifact::kEvalReport, "eval")));
    const auto sanity_doc = nlohmann::json::parse(read_file(rec.input("reports/sanity.json", "ablate")));
    for (int i = 0; i < c.variants; ++i) rec.input(artifact::delta(c.adapter(), i), "variants");

    struct Job {
      std::string sweep, label;
      Signature sig;
      bool cross = false;
      EvalRow row;
    };
    std::vector<Job> jobs;
    if (c.sweeps.enabled) {
      for (int n : c.sweeps.n_values) {
        jobs.push_back({"n", std::to_string(n), extract(n, std::nullopt, std::nullopt, false), false, {}});
      }
      for (const auto& m : c.sweeps.modes) {
        jobs.push_back({"scoring", m, extract(c.variants, parse_score_mode(m), std::nullopt, false), false, {}});
      }
      for (double r : c.sweeps.ratios) {
        jobs.push_back({"ratio", fmt_fixed(r, 2), extract(c.variants, std::nullopt, r, false), false, {}});
      }
    }
    std::optional<Suspect<T>> cross;
    Dataset cross_triggered;
    if (c.sweeps.enabled && !c.sweeps.cross_attack.empty()) {
      const auto spec = c.attack_spec(c.sweeps.cross_attack, stream_seed(c.seed, "cross_spec"));
      const auto exclude = prompt_set(clean);
      const auto data = make_clean_dataset(c.task, c.data.poison_train, stream_seed(c.seed, "poison_data"), &exclude);
      ctx_.note("training the cross-attack victim (" + c.sweeps.cross_attack + ")");
      cross = train_attack(c, base, poison_dataset(data, spec), stream_seed(c.seed, "cross_train"));
      cross_triggered = make_triggered_set(clean, c.attack_spec(c.sweeps.cross_attack,
                                                                stream_seed(c.seed, "cross_trigger")));
      const auto main_sig = extract(c.variants, std::nullopt, std::nullopt, false);
      jobs.push_back({"cross", "backdoored", main_sig, true, {}});
      jobs.push_back({"cross", "signature", main_sig, true, {}});
    }
    ctx_.note("running " + std::to_string(jobs.size()) + " sweep conditions");
    parallel_for(jobs.size(), ctx_.threads, [&](std::size_t i) {
      auto& j = jobs[i];
      if (j.cross) {
        const auto model = j.label == "backdoored" ? *cross : purify_suspect(c, *cross, j.sig, repair_set);
        j.row = evaluate_row(ctx_, model.ref(), cross_triggered, clean, c.sweeps.cross_attack,
                             j.label == "backdoored" ? "none" : "signature(" + c.attack + ")", j.label);
      } else {
        const auto model = purify_suspect(c, sus, j.sig, repair_set);
        j.row = evaluate_row(ctx_, model.ref(), triggered, clean, c.attack, "signature", j.label);
      }
    });

    std::map<std::string, std::vector<EvalRow>> sweeps;
    for (const auto& j : jobs) sweeps[j.sweep].push_back(j.row);
    nlohmann::json sj = nlohmann::json::object();
    for (const auto& [k, rows] : sweeps) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& r : rows) arr.push_back(to_json(r));
      sj[k] = arr;
    }
    const nlohmann::json doc = {{"note", kUtilityNote},
                                {"config", to_json(c)},
                                {"config_digest", ctx_.digest()},
                                {"eval", eval_doc.at("rows")},
                                {"sanity", sanity_doc},
                                {"sweeps", sj}};
    rec.output(artifact::kReport, write_file(ctx_.path(artifact::kReport), dump_json(doc)));

    std::string md = "# Backdoor purification report: " + c.name + "\n\n" + kUtilityNote + "\n\n";
    md += "Setting: " + c.setting + ". Attack: " + c.attack + " (poison ratio " + fmt_fixed(c.poison_ratio, 2) +
          "). Variants: " + std::to_string(c.variants) + ". Intervention ratio: " + fmt_fixed(c.ratio, 2) +
          ", heads: " + std::to_string(c.heads) + ". Seed: " + std::to_string(c.seed) + ". Config digest: " +
          ctx_.digest() + ".\n\n";
    md += "## Defenses\n\n" + rows_markdown(eval_rows_from_json(eval_doc.at("rows"))) + "\n";
    md += "## Weight-space ablations\n\n" + sanity_markdown_from_json(sanity_doc) + "\n";
    auto section = [&](const std::string& key, const std::string& title, const std::string& header) {
      if (!sweeps.count(key)) return;
      md += "## " + title + "\n\n" + rows_markdown(sweeps[key], header) + "\n";
    };
    section("n", "Number of variants", "N");
    if (sweeps.count("n")) {
      md += "ASR(N) sequence:";
      for (const auto& r : sweeps["n"]) md += " " + fmt_fixed(r.asr.value());
      md += "\n\n";
    }
    section("scoring", "Scoring composition", "Score");
    section("ratio", "Intervention ratio", "Ratio");
    section("cross", "Cross-attack transfer", "Model");
    rec.output("reports/report.md", write_file(ctx_.path("reports/report.md"), md));
    rec.finish();
  }

  // Full chain; returns the violated thresholds.
  std::vector<std::string> run_all() {
    train_victim();
    poison();
    ablate();
    variants();
    extract(cfg().variants);
    purify();
    baseline();
    auto failures = eval();
    report();
    return failures;
  }

  static std::vector<EvalRow> eval_rows_from_json(const nlohmann::json& rows) {
    std::vector<EvalRow> out;
    for (const auto& j : rows) {
      EvalRow r;
      r.attack = j.at("attack");
      r.defense = j.at("defense");
      r.setting = j.at("setting");
      r.label = j.at("label");
      r.asr = {j.at("asr_hits"), j.at("asr_total")};
      r.utility.exact = {j.at("exact_hits"), j.at("exact_total")};
      r.utility.exact_match = j.at("exact_match");
      r.utility.token_accuracy = j.at("token_accuracy");
      r.utility.perplexity = j.at("perplexity");
      r.false_fire = {j.at("false_fire_hits"), j.at("exact_total")};
      r.seed = j.at("seed");
      r.config_digest = j.at("config_digest");
      out.push_back(std::move(r));
    }
    return out;
  }

 private:
  bool skip(const std::string& stage, const std::string& command) {
    if (!stage_up_to_date(ctx_, stage, command)) return false;
    ctx_.note(command + ": up to date");
    return true;
  }

  fs::path require(const std::string& rel, const std::string& producer) const {
    const auto p = ctx_.path(rel);
    if (!fs::exists(p)) throw OrchestrationError("missing artifact '" + rel + "' (produced by '" + producer + "')");
    return p;
  }

  static nlohmann::json plan_json(const VariantPlan& plan) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : plan.entries) {
      const char* placement = e.key.placement == Placement::kUniform  ? "uniform"
                              : e.key.placement == Placement::kPrefix ? "prefix"
                                                                      : "fixed";
      arr.push_back({{"id", e.id},
                     {"key", e.key.tokens},
                     {"placement", placement},
                     {"fixed_index", e.key.fixed_index},
                     {"behavior", behavior_name(e.behavior.kind)},
                     {"clean_count", e.clean_count},
                     {"clean_seed", e.clean_seed},
                     {"poison_seed", e.poison_seed},
                     {"poison_fraction", e.poison_fraction}});
    }
    return arr;
  }

  static std::string sanity_markdown_from_json(const nlohmann::json& doc) {
    SanitySuiteReport rep;
    for (const auto& j : doc.at("rows")) {
      SanityRow r;
      r.experiment = j.at("experiment");
      r.ablation = j.at("ablation");
      r.asr = {j.at("asr_hits"), j.at("asr_total")};
      r.utility.exact_match = j.at("exact_match");
      r.observation = j.at("observation");
      rep.rows.push_back(std::move(r));
    }
    rep.shuffled_median_asr = doc.at("shuffled_median_asr");
    return sanity_markdown(rep);
  }

  std::vector<std::string> check_thresholds(const std::vector<EvalRow>& rows) const {
    const auto& t = cfg().thresholds;
    std::vector<std::string> fails;
    const EvalRow* bd = nullptr;
    const EvalRow* ours = nullptr;
    for (const auto& r : rows) {
      if (r.defense == "none") bd = &r;
      if (r.defense == "signature") ours = &r;
    }
    if (!bd || !ours) return {"eval report lacks the backdoored or signature row"};
    if (t.min_backdoored_asr && bd->asr.value() < *t.min_backdoored_asr) {
      fails.push_back("backdoored ASR " + fmt_fixed(bd->asr.value()) + " < " + fmt_fixed(*t.min_backdoored_asr));
    }
    if (t.max_purified_asr && ours->asr.value() > *t.max_purified_asr) {
      fails.push_back("purified ASR " + fmt_fixed(ours->asr.value()) + " > " + fmt_fixed(*t.max_purified_asr));
    }
    const double drop = bd->utility.exact_match - ours->utility.exact_match;
    if (t.max_em_drop && drop > *t.max_em_drop) {
      fails.push_back("clean exact-match drop " + fmt_fixed(drop) + " > " + fmt_fixed(*t.max_em_drop));
    }
    return fails;
  }

  RunContext ctx_;
};

}  // namespace bdlab
