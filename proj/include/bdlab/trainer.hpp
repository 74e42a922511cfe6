#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "bdlab/datagen.hpp"
#include "bdlab/errors.hpp"
#include "bdlab/rng.hpp"
#include "bdlab/tinylm.hpp"

namespace bdlab {

enum class TrainMode { kFull, kAdapter };

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct TrainConfig {
  TrainMode mode = TrainMode::kFull;
  double lr = 1e-3;
  int epochs = 3;
  int batch_size = 16;
  AdamWConfig adamw;
  std::uint64_t seed = 0;
  int rank = 8;        // adapter mode
  double alpha = 16.0;  // adapter mode
  std::set<std::string> frozen;  // full mode: parameter paths kept fixed
  // Poisoned samples form their own mini-batches, so a poisoned run sees the
  // clean run's batches unchanged with extra batches interleaved.
  bool separate_poison_batches = false;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (rank < 1) throw ConfigError("adapter rank must be >= 1");
  }
};

// Learning-rate defaults for the desk-scale model.
inline TrainConfig toy_full_config() {
  TrainConfig c;
  c.mode = TrainMode::kFull;
  c.lr = 1e-3;
  return c;
}
inline TrainConfig toy_adapter_config() {
  TrainConfig c;
  c.mode = TrainMode::kAdapter;
  c.lr = 5e-3;
  return c;
}

struct LossCurve {
  std::vector<double> step_loss;
};

// Decoupled-weight-decay Adam over a fixed list of flat parameter buffers.
// Weight decay applies to 2-D tensors only.
template <typename T>
class AdamW {
 public:
  explicit AdamW(const AdamWConfig& cfg) : cfg_(cfg) {}

  void step(std::vector<std::span<T>> params, std::vector<std::span<const T>> grads,
            std::vector<bool> decay, double lr) {
    if (m_.empty()) {
      for (auto p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto p = params[k];
      auto g = grads[k];
      auto& m = m_[k];
      auto& v = v_[k];
      const double wd = decay[k] ? cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        double x = static_cast<double>(p[i]);
        x -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + wd * x);
        p[i] = static_cast<T>(x);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Per-epoch sample order. Non-poisoned samples are shuffled by one seeded
// stream and keep that order regardless of how many poisoned samples exist;
// poisoned samples are shuffled and interleaved by a separate stream.
inline std::vector<std::size_t> epoch_order(const Dataset& data, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> clean, pois;
  for (std::size_t i = 0; i < data.size(); ++i) (data[i].poisoned ? pois : clean).push_back(i);
  Rng rc = make_rng(seed, 0xe000 + 2 * static_cast<std::uint64_t>(epoch));
  Rng rp = make_rng(seed, 0xe001 + 2 * static_cast<std::uint64_t>(epoch));
  shuffle(clean, rc);
  if (pois.empty()) return clean;
  shuffle(pois, rp);
  const std::size_t total = clean.size() + pois.size();
  std::vector<bool> is_pois(total, false);
  for (auto slot : sample_without_replacement(total, pois.size(), rp)) is_pois[slot] = true;
  std::vector<std::size_t> out;
  out.reserve(total);
  std::size_t ic = 0, ip = 0;
  for (std::size_t s = 0; s < total; ++s) out.push_back(is_pois[s] ? pois[ip++] : clean[ic++]);
  return out;
}

// Mini-batches of one epoch as index lists into `data`.
inline std::vector<std::vector<std::size_t>> epoch_batches(const Dataset& data, std::uint64_t seed,
                                                           int epoch, std::size_t batch_size,
                                                           bool separate_poison) {
  std::vector<std::vector<std::size_t>> out;
  auto chunk = [&](const std::vector<std::size_t>& order) {
    std::vector<std::vector<std::size_t>> bs;
    for (std::size_t b = 0; b < order.size(); b += batch_size) {
      bs.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                      order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + batch_size)));
    }
    return bs;
  };
  if (!separate_poison) return chunk(epoch_order(data, seed, epoch));
  std::vector<std::size_t> clean, pois;
  for (std::size_t i = 0; i < data.size(); ++i) (data[i].poisoned ? pois : clean).push_back(i);
  Rng rc = make_rng(seed, 0xe000 + 2 * static_cast<std::uint64_t>(epoch));
  Rng rp = make_rng(seed, 0xe001 + 2 * static_cast<std::uint64_t>(epoch));
  shuffle(clean, rc);
  const auto cb = chunk(clean);
  if (pois.empty()) return cb;
  shuffle(pois, rp);
  const auto pb = chunk(pois);
  const std::size_t total = cb.size() + pb.size();
  std::vector<bool> is_pois(total, false);
  for (auto slot : sample_without_replacement(total, pb.size(), rp)) is_pois[slot] = true;
  std::size_t ic = 0, ip = 0;
  for (std::size_t s = 0; s < total; ++s) out.push_back(is_pois[s] ? pb[ip++] : cb[ic++]);
  return out;
}

namespace detail {

template <typename StepFn>
LossCurve run_epochs(const Dataset& data, const TrainConfig& cfg, StepFn&& step) {
  cfg.validate();
  if (data.empty()) throw InputError("training set is empty");
  std::vector<LmExample> examples;
  examples.reserve(data.size());
  for (const auto& s : data) examples.push_back(to_example(s));
  LossCurve curve;
  std::int64_t step_index = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    for (const auto& idx : epoch_batches(data, cfg.seed, e, static_cast<std::size_t>(cfg.batch_size),
                                         cfg.separate_poison_batches)) {
      std::vector<LmExample> batch;
      for (auto i : idx) batch.push_back(examples[i]);
      const double loss = step(std::span<const LmExample>(batch));
      if (!std::isfinite(loss)) throw TrainingError("non-finite loss", step_index);
      curve.step_loss.push_back(loss);
      ++step_index;
    }
  }
  return curve;
}

}  // namespace detail

// Full-parameter AdamW finetuning; `init` is left untouched.
template <typename T>
std::pair<ParamStore<T>, LossCurve> train_full(const ParamStore<T>& init, const Dataset& data,
                                               const TrainConfig& cfg) {
  if (cfg.mode != TrainMode::kFull) throw ConfigError("train_full requires mode = full");
  ParamStore<T> p = init;
  AdamW<T> opt(cfg.adamw);
  auto curve = detail::run_epochs(data, cfg, [&](std::span<const LmExample> batch) {
    Transformer<T> model(p);
    auto grads = zero_grads(p);
    const T loss = model.loss_and_backward(batch, &grads, nullptr);
    if (!std::isfinite(static_cast<double>(loss))) return static_cast<double>(loss);
    std::vector<std::span<T>> ps;
    std::vector<std::span<const T>> gs;
    std::vector<bool> decay;
    for (auto& [name, t] : p.tensors) {
      if (cfg.frozen.count(name)) continue;
      ps.push_back(t.span());
      gs.push_back(grads.tensors.at(name).span());
      decay.push_back(t.shape.size() == 2);
    }
    opt.step(ps, gs, decay, cfg.lr);
    return static_cast<double>(loss);
  });
  return {std::move(p), std::move(curve)};
}

// Continues training `adapter` over the frozen `base`.
template <typename T>
std::pair<LoraAdapter<T>, LossCurve> train_lora(const ParamStore<T>& base, LoraAdapter<T> adapter,
                                                const Dataset& data, const TrainConfig& cfg) {
  if (cfg.mode != TrainMode::kAdapter) throw ConfigError("train_lora requires mode = adapter");
  validate_adapter(base, adapter);
  AdamW<T> opt(cfg.adamw);
  auto curve = detail::run_epochs(data, cfg, [&](std::span<const LmExample> batch) {
    Transformer<T> model(base, &adapter);
    auto grads = zero_adapter_grads(adapter);
    const T loss = model.loss_and_backward(batch, nullptr, &grads);
    if (!std::isfinite(static_cast<double>(loss))) return static_cast<double>(loss);
    std::vector<std::span<T>> ps;
    std::vector<std::span<const T>> gs;
    for (auto& [name, pair] : adapter.targets) {
      auto& g = grads.targets.at(name);
      ps.push_back(pair.A.span());
      gs.push_back(g.A.span());
      ps.push_back(pair.B.span());
      gs.push_back(g.B.span());
    }
    opt.step(ps, gs, std::vector<bool>(ps.size(), true), cfg.lr);
    return static_cast<double>(loss);
  });
  return {std::move(adapter), std::move(curve)};
}

// Fresh adapter (Xavier A, zero B) on every attention and MLP projection.
template <typename T>
std::pair<LoraAdapter<T>, LossCurve> train_lora(const ParamStore<T>& base, const Dataset& data,
                                                const TrainConfig& cfg) {
  auto adapter = init_adapter(base, projection_paths(base.config), cfg.rank, cfg.alpha,
                              derive_seed(cfg.seed, 0xada));
  return train_lora(base, std::move(adapter), data, cfg);
}

// ---------------------------------------------------------------------------
// Paired variant finetuning

template <typename T>
struct VariantPair {
  int id = 0;
  // Full mode fills the stores; adapter mode fills the adapters.
  ParamStore<T> bd, clean;
  LoraAdapter<T> bd_adapter, clean_adapter;
  LossCurve bd_curve, clean_curve;
};

template <typename T>
struct VariantPairSet {
  TrainMode mode = TrainMode::kFull;
  std::vector<VariantPair<T>> pairs;  // ordered by variant id
};

// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
// (lowest index) is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// For each variant: the poisoned member trains on D_clean ∪ D_pois and the
// clean member on D_clean, both from theta_sus with identical config and seed.
// In adapter mode theta_sus is the frozen backbone and both members start
// from the same fresh adapter.
template <typename T>
VariantPairSet<T> make_variant_pairs(const ParamStore<T>& sus, const VariantPlan& plan,
                                     const TaskSpec& task, const TrainConfig& cfg,
                                     int threads = 1,
                                     const std::set<TokenSeq>* exclude = nullptr) {
  VariantPairSet<T> out;
  out.mode = cfg.mode;
  out.pairs.resize(plan.size());
  parallel_for(plan.size(), threads, [&](std::size_t i) {
    const auto& e = plan.entries[i];
    try {
      auto [clean, pois] = variant_datasets(e, task, exclude);
      Dataset mixed = clean;
      mixed.insert(mixed.end(), pois.begin(), pois.end());
      auto& pair = out.pairs[i];
      pair.id = e.id;
      if (cfg.mode == TrainMode::kFull) {
        std::tie(pair.bd, pair.bd_curve) = train_full(sus, mixed, cfg);
        std::tie(pair.clean, pair.clean_curve) = train_full(sus, clean, cfg);
      } else {
        std::tie(pair.bd_adapter, pair.bd_curve) = train_lora(sus, mixed, cfg);
        std::tie(pair.clean_adapter, pair.clean_curve) = train_lora(sus, clean, cfg);
      }
    } catch (const TrainingError& err) {
      throw TrainingError("variant " + std::to_string(e.id) + ": " + err.reason, err.step);
    }
  });
  return out;
}

}  // namespace bdlab
