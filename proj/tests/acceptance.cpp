// bdlab_acceptance: evaluates the ten acceptance criteria and prints one
// PASS/FAIL line per criterion.
//
//   bdlab_acceptance --work build/acceptance_runs
//   bdlab_acceptance --reuse --strict
//
// Exit codes: 0 when every criterion was evaluated (with --strict, only when
// every criterion passed), 1 otherwise, 2 on usage errors.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bdlab/config.hpp"
#include "bdlab/pipeline.hpp"
#include "bdlab/purify.hpp"
#include "bdlab/signature.hpp"
#include "bdlab/store.hpp"
#include "bdlab/tinylm.hpp"
#include "oracles.hpp"

namespace {

namespace fs = std::filesystem;
using namespace bdlab;
using nlohmann::json;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i]);
  return s + "]";
}

// ---------------------------------------------------------------------------
// Criterion 1: finite-difference gradient check

std::vector<LmExample> random_batch(const TinyLMConfig& c, std::uint64_t seed, int n) {
  Rng rng = make_rng(seed);
  std::vector<LmExample> batch;
  for (int i = 0; i < n; ++i) {
    const int len = 4 + static_cast<int>(uniform_index(rng, c.max_seq - 4));
    LmExample ex;
    for (int t = 0; t < len; ++t) {
      ex.input.push_back(static_cast<Token>(uniform_index(rng, c.vocab_size)));
      ex.target.push_back(static_cast<Token>(uniform_index(rng, c.vocab_size)));
      ex.mask.push_back(t >= len / 2 ? 1 : 0);
    }
    batch.push_back(std::move(ex));
  }
  return batch;
}

Outcome gradient_exactness() {
  TinyLMConfig c;
  c.n_blocks = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_head = 8;
  c.d_ff = 32;
  c.vocab_size = 32;
  c.max_seq = 12;
  c.precision = Precision::kDouble;
  auto p = init_params<double>(c, 11);
  Rng rng = make_rng(11, 99);
  for (auto& [name, t] : p.tensors) {
    if (t.shape.size() == 1) {
      for (auto& x : t.data) x = uniform(rng, 0.5, 1.5);
    } else {
      for (auto& x : t.data) x *= 2.0;
    }
  }
  const auto batch = random_batch(c, 12, 3);
  const auto [loss, grads] = loss_and_grad(p, batch);
  auto loss_at = [&](const ParamStore<double>& q) {
    Transformer<double> m(q);
    return m.loss_and_backward(batch, nullptr, nullptr);
  };
  const double h = 1e-5;
  double worst = 0;
  std::string worst_at = "-";
  std::size_t entries = 0;
  for (auto& [name, t] : p.tensors) {
    const auto& g = grads.tensors.at(name);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const double orig = t.data[i];
      t.data[i] = orig + h;
      const double up = loss_at(p);
      t.data[i] = orig - h;
      const double down = loss_at(p);
      t.data[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double err =
          std::abs(g.data[i] - numeric) / std::max({std::abs(g.data[i]), std::abs(numeric), 1e-4});
      ++entries;
      if (err > worst) {
        worst = err;
        worst_at = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return {worst <= 1e-5, "worst relative error " + sci(worst) + " at " + worst_at + " over " +
                             std::to_string(entries) + " entries"};
}

// ---------------------------------------------------------------------------
// Criterion 2: scoring against the brute-force oracle

Outcome scoring_oracle() {
  const std::vector<UnitKind> kinds{UnitKind::kMlpChannel, UnitKind::kAttnHead};
  Rng rng = make_rng(2);
  double worst = 0;
  int broken = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = oracle::random_small_config(rng);
    const int n = 1 + static_cast<int>(uniform_index(rng, 5));
    const double lambda = uniform(rng, 0.0, 2.0);
    std::vector<DeltaMap> deltas;
    for (int i = 0; i < n; ++i) deltas.push_back(oracle::random_delta(c, rng));
    const auto units = all_units(c, kinds);
    ScoringConfig sc;
    sc.lambda = lambda;
    sc.kinds = kinds;
    const auto table = score_units(deltas, c, units, sc);
    for (std::size_t k = 0; k < units.size(); ++k) {
      std::vector<std::vector<double>> vecs;
      for (const auto& d : deltas) {
        vecs.push_back(oracle::unit_entries(d.tensors, c, units[k].kind, units[k].block, units[k].index));
      }
      const auto ref = oracle::brute_score(vecs, lambda);
      const auto& row = table.rows[k];
      worst = std::max({worst, std::abs(row.strength - ref.m), std::abs(row.alignment - ref.a),
                        std::abs(row.combined - ref.s)});
    }

    for (double f : {2.0, 0.5, 8.0}) {
      auto scaled = deltas;
      for (auto& d : scaled) {
        for (auto& [name, t] : d.tensors) {
          for (auto& x : t.data) x *= f;
        }
      }
      const auto got = score_units(scaled, c, units, sc);
      for (std::size_t k = 0; k < units.size(); ++k) {
        broken += got.rows[k].strength != f * table.rows[k].strength;
        broken += got.rows[k].alignment != table.rows[k].alignment;
      }
    }

    std::vector<std::size_t> perm(deltas.size());
    std::iota(perm.begin(), perm.end(), 0);
    shuffle(perm, rng);
    std::vector<DeltaMap> permuted;
    for (auto i : perm) permuted.push_back(deltas[i]);
    const auto again = score_units(permuted, c, units, sc);
    for (std::size_t k = 0; k < units.size(); ++k) {
      broken += again.rows[k].strength != table.rows[k].strength;
      broken += again.rows[k].alignment != table.rows[k].alignment;
      broken += again.rows[k].combined != table.rows[k].combined;
    }
  }
  return {worst <= 1e-12 && broken == 0,
          "50 cases, worst deviation " + sci(worst) + ", " + std::to_string(broken) + " property violations"};
}

// ---------------------------------------------------------------------------
// Pipeline runs for criteria 3 to 10

struct Run {
  std::string setting, attack;
  std::uint64_t seed = 0;
  bool sweeps = false;
  fs::path dir;
  std::string error;
  json report;
  double seconds = 0;

  bool ok() const { return error.empty() && !report.is_null(); }

  const json& eval_row(const std::string& defense) const {
    for (const auto& r : report.at("eval")) {
      if (r.at("defense") == defense) return r;
    }
    throw std::runtime_error("no eval row '" + defense + "' in " + dir.string());
  }
  double asr(const std::string& defense) const { return eval_row(defense).at("asr").get<double>(); }
  double em(const std::string& defense) const { return eval_row(defense).at("exact_match").get<double>(); }

  double sanity_asr(const std::string& experiment) const {
    for (const auto& r : report.at("sanity").at("rows")) {
      if (r.at("experiment") == experiment) {
        return r.at("asr_hits").get<double>() / r.at("asr_total").get<double>();
      }
    }
    throw std::runtime_error("no sanity row '" + experiment + "'");
  }

  double sweep_asr(const std::string& sweep, const std::string& label) const {
    for (const auto& r : report.at("sweeps").at(sweep)) {
      if (r.at("label") == label) return r.at("asr").get<double>();
    }
    throw std::runtime_error("no '" + sweep + "' sweep row '" + label + "'");
  }
};

RunConfig run_config(const json& reference, const Run& r) {
  json doc = reference;
  doc["name"] = r.setting + "-" + r.attack + "-s" + std::to_string(r.seed);
  doc["seed"] = r.seed;
  doc["setting"] = r.setting;
  doc["attack"]["preset"] = r.attack;
  if (!r.sweeps) doc["sweeps"] = {{"enabled", false}};
  return resolve_config(doc);
}

void execute(const json& reference, Run& r, bool reuse, int threads) {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (!reuse) fs::remove_all(r.dir);
    RunContext ctx;
    ctx.cfg = run_config(reference, r);
    ctx.root = r.dir;
    ctx.threads = threads;
    Pipeline<float> p(std::move(ctx));
    p.run_all();
    r.report = json::parse(read_file(r.dir / "reports/report.json"));
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cerr << "  run " << r.dir.filename().string() << ": " << (r.ok() ? "done" : "error: " + r.error) << " ("
            << fmt(r.seconds, 1) << " s)\n";
}

std::vector<const Run*> select(const std::vector<Run>& runs, const std::string& setting, const std::string& attack) {
  std::vector<const Run*> out;
  for (const auto& r : runs) {
    if (r.setting == setting && r.attack == attack) out.push_back(&r);
  }
  return out;
}

std::string first_error(const std::vector<const Run*>& runs) {
  for (const auto* r : runs) {
    if (!r->ok()) return r->dir.filename().string() + ": " + r->error;
  }
  return "";
}

template <typename Fn>
std::vector<double> collect(const std::vector<const Run*>& runs, Fn&& fn) {
  std::vector<double> out;
  for (const auto* r : runs) out.push_back(fn(*r));
  return out;
}

Outcome injection(const std::vector<const Run*>& runs) {
  if (auto e = first_error(runs); !e.empty()) return {false, e};
  const auto a = collect(runs, [](const Run& r) { return r.asr("none"); });
  const auto m = collect(runs, [](const Run& r) { return r.em("none"); });
  return {median(a) >= 0.90 && median(m) >= 0.90,
          "triggered ASR " + list(a) + " median " + fmt(median(a)) + " (>= 0.90), clean EM " + list(m) +
              " median " + fmt(median(m)) + " (>= 0.90)"};
}

Outcome weight_ablation(const std::vector<const Run*>& runs) {
  if (auto e = first_error(runs); !e.empty()) return {false, e};
  const auto mlp = median(collect(runs, [](const Run& r) { return r.sanity_asr("mlp-ablation"); }));
  const auto attn = median(collect(runs, [](const Run& r) { return r.sanity_asr("attn-ablation"); }));
  const auto shuf = median(collect(runs, [](const Run& r) {
    return r.report.at("sanity").at("shuffled_median_asr").get<double>() / std::max(r.sanity_asr("baseline"), 1e-12);
  }));
  return {mlp <= 0.10 && attn >= mlp + 0.30 && shuf >= 0.50,
          "median MLP-ablation ASR " + fmt(mlp) + " (<= 0.10), attention-ablation ASR " + fmt(attn) +
              " (>= MLP + 0.30), shuffled/unablated " + fmt(shuf) + " (>= 0.50)"};
}

Outcome purification(const std::vector<Run>& runs) {
  bool pass = true;
  std::string detail;
  for (const auto& setting : {"full", "adapter"}) {
    for (const auto& attack : {"badnets", "ctba"}) {
      const auto sel = select(runs, setting, attack);
      std::string part = std::string(setting) + "/" + attack + ": ";
      if (auto e = first_error(sel); !e.empty()) {
        pass = false;
        detail += (detail.empty() ? "" : "; ") + part + e;
        continue;
      }
      const auto bd = median(collect(sel, [](const Run& r) { return r.asr("none"); }));
      const auto pur = median(collect(sel, [](const Run& r) { return r.asr("signature"); }));
      const auto drop = median(collect(sel, [](const Run& r) { return r.em("none") - r.em("signature"); }));
      const bool ok = bd >= 0.90 && pur <= 0.15 && drop <= 0.05;
      pass = pass && ok;
      part += "ASR " + fmt(bd) + " -> " + fmt(pur) + ", EM drop " + fmt(drop) + (ok ? "" : " (miss)");
      detail += (detail.empty() ? "" : "; ") + part;
    }
  }
  return {pass, detail + " [needs ASR >= 0.90 -> <= 0.15, EM drop <= 0.05]"};
}

Outcome n_sweep(const std::vector<const Run*>& runs) {
  if (auto e = first_error(runs); !e.empty()) return {false, e};
  std::vector<double> seq;
  bool emitted = true;
  for (int n = 1; n <= 6; ++n) {
    std::vector<double> v;
    for (const auto* r : runs) {
      try {
        v.push_back(r->sweep_asr("n", std::to_string(n)));
      } catch (const std::exception&) {
        emitted = false;
      }
    }
    seq.push_back(median(v));
  }
  if (!emitted) return {false, "report lacks part of the ASR(N) sequence"};
  return {seq[5] <= seq[0], "median ASR(N), N = 1..6: " + list(seq) + " (ASR(6) <= ASR(1))"};
}

Outcome scoring_composition(const std::vector<const Run*>& runs) {
  if (auto e = first_error(runs); !e.empty()) return {false, e};
  std::vector<double> norm, align, comb;
  for (const auto* r : runs) {
    for (const auto& row : r->report.at("sweeps").at("scoring")) {
      for (const char* k : {"exact_match", "token_accuracy", "perplexity"}) {
        if (!row.contains(k)) return {false, "scoring row lacks utility column " + std::string(k)};
      }
    }
    norm.push_back(r->sweep_asr("scoring", "norm-only"));
    align.push_back(r->sweep_asr("scoring", "alignment-only"));
    comb.push_back(r->sweep_asr("scoring", "combined"));
  }
  return {median(comb) <= median(align),
          "median ASR norm-only " + fmt(median(norm)) + ", alignment-only " + fmt(median(align)) + ", combined " +
              fmt(median(comb)) + " (combined <= alignment-only)"};
}

Outcome baseline_ordering(const std::vector<const Run*>& runs, const std::vector<const Run*>& adapter_runs) {
  if (auto e = first_error(runs); !e.empty()) return {false, e};
  const auto ours = median(collect(runs, [](const Run& r) { return r.asr("signature"); }));
  bool pass = true;
  std::string detail = "full: signature " + fmt(ours);
  for (const auto& b : baseline_names()) {
    const auto v = median(collect(runs, [&](const Run& r) { return r.asr(b); }));
    pass = pass && ours <= v;
    detail += ", " + b + " " + fmt(v);
  }
  if (first_error(adapter_runs).empty() && !adapter_runs.empty()) {
    detail += "; adapter: signature " + fmt(median(collect(adapter_runs, [](const Run& r) { return r.asr("signature"); })));
    for (const auto& b : baseline_names()) {
      detail += ", " + b + " " + fmt(median(collect(adapter_runs, [&](const Run& r) { return r.asr(b); })));
    }
  }
  return {pass, "median ASR " + detail};
}

// ---------------------------------------------------------------------------
// Criterion 9: surgical exactness on the pipeline artifacts

std::size_t bitwise_roundtrips(const fs::path& root, std::vector<std::string>& bad) {
  std::size_t checked = 0;
  for (const auto& sub : {"checkpoints", "adapters"}) {
    if (!fs::exists(root / sub)) continue;
    for (const auto& e : fs::recursive_directory_iterator(root / sub)) {
      if (!e.is_regular_file() || e.path().extension() != ".bdt") continue;
      const auto bytes = read_file(e.path());
      const auto archive = parse_archive(bytes);
      std::string again;
      const auto format = archive.metadata.at("format");
      if (format == "bdlab.params") {
        again = serialize_archive(params_archive(params_from_archive<float>(archive)));
      } else if (format == "bdlab.adapter") {
        again = serialize_archive(adapter_archive(adapter_from_archive<float>(archive)));
      } else {
        again = serialize_archive(archive);
      }
      ++checked;
      if (again != bytes) bad.push_back(fs::relative(e.path(), root).string());
    }
  }
  return checked;
}

Outcome surgical(const json& reference, const Run* full, const Run* adapter) {
  if (!full || !full->ok()) return {false, "full-setting run unavailable"};
  if (!adapter || !adapter->ok()) return {false, "adapter-setting run unavailable"};
  try {
    const auto fc = run_config(reference, *full);
    const auto base = load_params<float>(full->dir / artifact::kBase);
    Suspect<float> sus = load_suspect<float>(fc, base, full->dir / artifact::kBackdoored);
    const auto sig = load_signature(full->dir / artifact::signature(fc.variants));
    const auto out = suppress(fc, sus, sig);
    const auto mask = oracle::owned_mask(fc.model, signature_units(sig));
    std::size_t outside = 0, inside_changed = 0, owned = 0;
    for (const auto& [name, t] : sus.params.tensors) {
      const auto& after = out.params.at(name).data;
      const auto& m = mask.at(name);
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        const bool same = std::memcmp(&after[i], &t.data[i], sizeof(float)) == 0;
        if (m[i]) {
          ++owned;
          inside_changed += !same;
        } else {
          outside += !same;
        }
      }
    }

    const auto ac = run_config(reference, *adapter);
    const auto abase = load_params<float>(adapter->dir / artifact::kBase);
    const auto asus = load_suspect<float>(ac, abase, adapter->dir / artifact::kSuspicious);
    const auto asig = load_signature(adapter->dir / artifact::signature(ac.variants));
    const auto zeroed = zero_adapter_units(*asus.adapter, ac.model, asig);
    const auto amask = oracle::owned_mask(ac.model, signature_units(asig));
    double worst = 0;
    for (const auto& [name, pair] : zeroed.targets) {
      const auto w = oracle::dense_update(pair, zeroed.alpha / zeroed.rank);
      const auto& m = amask.at(name);
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (m[i]) worst = std::max(worst, std::abs(w[i]));
      }
    }

    std::vector<std::string> bad;
    const auto checked = bitwise_roundtrips(full->dir, bad) + bitwise_roundtrips(adapter->dir, bad);
    const bool pass = outside == 0 && inside_changed > 0 && worst <= 1e-12 && bad.empty() && checked > 0;
    return {pass, std::to_string(outside) + " entries changed outside " + std::to_string(sig.units.size()) +
                      " signature units (" + std::to_string(inside_changed) + "/" + std::to_string(owned) +
                      " owned entries reinitialized); adapter owned-slice max |update| " + sci(worst) + "; " +
                      std::to_string(checked - bad.size()) + "/" + std::to_string(checked) +
                      " archives round-trip bitwise" + (bad.empty() ? "" : " (first mismatch " + bad.front() + ")")};
  } catch (const std::exception& e) {
    return {false, e.what()};
  }
}

// ---------------------------------------------------------------------------
// Criterion 10: determinism

std::map<std::string, std::string> artifact_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& sub : {"checkpoints", "adapters", "signatures", "reports"}) {
    if (!fs::exists(root / sub)) continue;
    for (const auto& e : fs::recursive_directory_iterator(root / sub)) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), root).string();
      if (rel.ends_with(".bdt") || rel.starts_with("signatures/") || rel == "reports/report.json") {
        out[rel] = read_file(e.path());
      }
    }
  }
  return out;
}

Outcome determinism(const Run* first, const Run& second) {
  if (!first || !first->ok()) return {false, "first run unavailable"};
  if (!second.ok()) return {false, second.error};
  const auto a = artifact_bytes(first->dir);
  const auto b = artifact_bytes(second.dir);
  std::size_t same = 0;
  std::string differs;
  for (const auto& [rel, bytes] : a) {
    const auto it = b.find(rel);
    if (it != b.end() && it->second == bytes) {
      ++same;
    } else if (differs.empty()) {
      differs = rel;
    }
  }
  const bool pass = same == a.size() && a.size() == b.size() && a.count("reports/report.json");
  return {pass, std::to_string(same) + "/" + std::to_string(a.size()) + " artifacts byte-identical across two runs" +
                    (differs.empty() ? "" : " (first difference " + differs + ")")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bdlab_acceptance: evaluates the acceptance criteria"};
  std::string work = "acceptance_runs";
  std::string config = std::string(BDLAB_SOURCE_DIR) + "/configs/reference.json";
  std::vector<std::uint64_t> seeds{0, 1, 2};
  bool reuse = false;
  bool strict = false;
  int threads = 1;
  app.add_option("--work", work, "Directory for the pipeline runs");
  app.add_option("--config", config, "Reference run config");
  app.add_option("--seeds", seeds, "Seeds for the median-over-seeds criteria")->delimiter(',');
  app.add_option("--threads", threads, "Worker cap for the pipeline runs")->check(CLI::PositiveNumber);
  app.add_flag("--reuse", reuse, "Keep existing run directories and resume them");
  app.add_flag("--strict", strict, "Exit 1 unless every criterion passes");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  std::vector<std::pair<std::string, Outcome>> results;
  auto timed = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.detail += " (" + fmt(s, 1) + " s)";
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << name << ": " << o.detail << "\n" << std::flush;
    results.emplace_back(name, o);
  };

  timed(1, "gradient exactness", gradient_exactness);
  timed(2, "scoring oracle equivalence", scoring_oracle);

  json reference;
  try {
    reference = json::parse(read_file(config));
    resolve_config(reference);
  } catch (const std::exception& e) {
    std::cerr << "cannot load reference config '" << config << "': " << e.what() << "\n";
    return 1;
  }

  std::vector<Run> runs;
  for (const auto& setting : {"full", "adapter"}) {
    for (const auto& attack : {"badnets", "ctba"}) {
      for (auto seed : seeds) {
        Run r;
        r.setting = setting;
        r.attack = attack;
        r.seed = seed;
        r.sweeps = std::string(setting) == "full" && std::string(attack) == "badnets";
        r.dir = fs::path(work) / (r.setting + "-" + r.attack + "-s" + std::to_string(seed));
        runs.push_back(std::move(r));
      }
    }
  }
  std::cerr << "running " << runs.size() + 1 << " reference pipelines under " << work << "\n";
  for (auto& r : runs) execute(reference, r, reuse, threads);

  const auto full_bn = select(runs, "full", "badnets");
  const auto adapter_bn = select(runs, "adapter", "badnets");
  timed(3, "backdoor injection", [&] { return injection(full_bn); });
  timed(4, "weight-space ablation", [&] { return weight_ablation(full_bn); });
  timed(5, "end-to-end purification", [&] { return purification(runs); });
  timed(6, "variant-count direction", [&] { return n_sweep(full_bn); });
  timed(7, "scoring-composition direction", [&] { return scoring_composition(full_bn); });
  timed(8, "baseline ordering", [&] { return baseline_ordering(full_bn, adapter_bn); });
  timed(9, "surgical exactness", [&] {
    return surgical(reference, full_bn.empty() ? nullptr : full_bn.front(),
                    adapter_bn.empty() ? nullptr : adapter_bn.front());
  });

  Run rerun;
  if (!full_bn.empty()) {
    rerun = *full_bn.front();
    rerun.report = json();
    rerun.error.clear();
    rerun.dir = fs::path(work) / (full_bn.front()->dir.filename().string() + "-rerun");
    execute(reference, rerun, false, std::max(2, threads));
  }
  timed(10, "determinism", [&] { return determinism(full_bn.empty() ? nullptr : full_bn.front(), rerun); });

  const auto passed = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.second.pass; });
  std::cout << "acceptance: " << passed << "/" << results.size() << " criteria passed\n";
  return strict && passed != static_cast<long>(results.size()) ? 1 : 0;
}
