// bdlab: command-line driver for the backdoor lab pipeline.
//
//   bdlab pipeline --config configs/reference.json --out runs/ref
//   bdlab extract --config configs/reference.json --out runs/ref --n 1
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid config or usage,
// 3 missing artifact, 4 evaluation threshold violated.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bdlab/config.hpp"
#include "bdlab/errors.hpp"
#include "bdlab/pipeline.hpp"
#include "bdlab/store.hpp"

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> setting;
  std::optional<std::string> preset;
  std::optional<int> n;
  bool quiet = false;
};

int env_threads() {
  if (const char* v = std::getenv("BDLAB_THREADS")) {
    try {
      const int n = std::stoi(v);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
    throw bdlab::ConfigError("BDLAB_THREADS must be a positive integer");
  }
  return 1;
}

std::filesystem::path output_dir(const Options& o, const bdlab::RunConfig& cfg) {
  if (!o.out.empty()) return o.out;
  const char* root = std::getenv("BDLAB_OUT_ROOT");
  return std::filesystem::path(root ? root : "runs") / cfg.name;
}

bdlab::RunContext make_context(const Options& o) {
  nlohmann::json doc = nlohmann::json::object();
  if (!o.config.empty()) {
    try {
      doc = nlohmann::json::parse(bdlab::read_file(o.config));
    } catch (const nlohmann::json::parse_error& e) {
      throw bdlab::ConfigError("config '" + o.config + "' is not valid JSON: " + e.what());
    }
  }
  bdlab::ConfigOverrides ov;
  ov.preset = o.preset;
  ov.setting = o.setting;
  ov.seed = o.seed;
  bdlab::RunContext ctx;
  ctx.cfg = bdlab::resolve_config(doc, ov);
  ctx.root = output_dir(o, ctx.cfg);
  ctx.threads = o.threads.value_or(env_threads());
  if (ctx.threads < 1) throw bdlab::ConfigError("--threads must be >= 1");
  ctx.log = o.quiet ? nullptr : &std::cerr;
  return ctx;
}

template <typename T>
int dispatch(const std::string& command, const Options& o, bdlab::RunContext ctx) {
  bdlab::Pipeline<T> p(std::move(ctx));
  std::vector<std::string> failures;
  if (command == "train-victim") {
    p.train_victim();
  } else if (command == "poison") {
    p.poison();
  } else if (command == "ablate") {
    p.ablate();
  } else if (command == "variants") {
    p.variants();
  } else if (command == "extract") {
    p.extract(o.n.value_or(p.cfg().variants));
  } else if (command == "purify") {
    p.purify();
  } else if (command == "baseline") {
    p.baseline();
  } else if (command == "eval") {
    failures = p.eval();
  } else if (command == "report") {
    p.report();
  } else if (command == "pipeline") {
    failures = p.run_all();
  }
  for (const auto& f : failures) std::cerr << "threshold failed: " << f << "\n";
  if (!failures.empty()) return 4;
  std::cout << "ok: " << command << " -> " << p.context().root.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bdlab: desk-scale backdoor signature extraction and purification"};
  app.require_subcommand(1, 1);
  Options o;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"train-victim", "Train the clean base model"},
      {"poison", "Build evaluation sets and the poisoned finetune"},
      {"ablate", "Run the weight-space ablation suite"},
      {"variants", "Train the paired variant finetunes"},
      {"extract", "Score units and write a backdoor signature"},
      {"purify", "Suppress signature units and repair"},
      {"baseline", "Run the FT-only, magnitude and fine-pruning baselines"},
      {"eval", "Evaluate every defense"},
      {"report", "Run the sweeps and write the final report"},
      {"pipeline", "Run every stage in order"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "Run config (JSON)");
    sub->add_option("--out", o.out, "Run directory (default $BDLAB_OUT_ROOT/<name> or runs/<name>)");
    sub->add_option("--seed", o.seed, "Root seed override");
    sub->add_option("--threads", o.threads, "Worker cap (default $BDLAB_THREADS or 1)");
    sub->add_option("--setting", o.setting, "Threat setting")->check(CLI::IsMember({"full", "adapter"}));
    sub->add_option("--preset", o.preset, "Named preset");
    sub->add_flag("--quiet", o.quiet, "Suppress progress messages");
    if (name == "extract") sub->add_option("--n", o.n, "Number of variants to use");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    auto ctx = make_context(o);
    if (ctx.cfg.model.precision == bdlab::Precision::kDouble) return dispatch<double>(command, o, std::move(ctx));
    return dispatch<float>(command, o, std::move(ctx));
  } catch (const bdlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const bdlab::OrchestrationError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
