#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bdlab/datagen.hpp"
#include "bdlab/errors.hpp"
#include "bdlab/tinylm.hpp"

namespace bdlab {

// A model under evaluation: a store plus an optional on-the-fly adapter.
template <typename T>
struct ModelRef {
  const ParamStore<T>* params = nullptr;
  const LoraAdapter<T>* adapter = nullptr;
};

template <typename T>
ModelRef<T> model_ref(const ParamStore<T>& p, const LoraAdapter<T>* a = nullptr) {
  return ModelRef<T>{&p, a};
}

// Decoding budget: long enough for any template response, capped by max_seq.
inline int max_new_tokens(const TaskSpec& task) { return task.max_len + 4; }

template <typename T>
std::vector<TokenSeq> greedy_outputs(ModelRef<T> model, const Dataset& data, int max_new,
                                     std::size_t chunk = 64) {
  std::vector<TokenSeq> out;
  out.reserve(data.size());
  for (std::size_t b = 0; b < data.size(); b += chunk) {
    std::vector<TokenSeq> prompts;
    for (std::size_t i = b; i < std::min(data.size(), b + chunk); ++i) {
      prompts.push_back(encode_prompt(data[i].prompt));
    }
    auto gen = generate_batch(*model.params, std::span<const TokenSeq>(prompts), max_new,
                              model.adapter);
    for (auto& g : gen) out.push_back(std::move(g));
  }
  return out;
}

struct Rate {
  std::size_t hits = 0;
  std::size_t total = 0;
  double value() const { return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0; }
};

// Fraction of triggered prompts whose greedy output fires the detector.
template <typename T>
Rate asr(ModelRef<T> model, const Dataset& triggered, const BehaviorSpec& det, int max_new) {
  if (triggered.empty()) throw InputError("ASR evaluation set is empty");
  const auto outs = greedy_outputs(model, triggered, max_new);
  Rate r;
  r.total = triggered.size();
  for (std::size_t i = 0; i < outs.size(); ++i) {
    if (det.detect(outs[i], triggered[i].prompt)) ++r.hits;
  }
  return r;
}

struct Utility {
  Rate exact;
  double exact_match = 0;
  double token_accuracy = 0;
  double perplexity = 1;
};

// exact_match: greedy output equals the reference response (EOS included).
// token_accuracy: teacher-forced argmax accuracy on response positions.
// perplexity: exp(mean response-token cross-entropy).
template <typename T>
Utility clean_utility(ModelRef<T> model, const Dataset& clean, int max_new,
                      std::size_t chunk = 64) {
  if (clean.empty()) throw InputError("utility evaluation set is empty");
  Utility u;
  const auto outs = greedy_outputs(model, clean, max_new, chunk);
  u.exact.total = clean.size();
  for (std::size_t i = 0; i < outs.size(); ++i) {
    if (outs[i] == clean[i].response) ++u.exact.hits;
  }
  u.exact_match = u.exact.value();

  Transformer<T> net(*model.params, model.adapter);
  double nll = 0;
  std::size_t correct = 0, count = 0;
  for (std::size_t b = 0; b < clean.size(); b += chunk) {
    std::vector<LmExample> exs;
    std::vector<TokenSeq> inputs;
    for (std::size_t i = b; i < std::min(clean.size(), b + chunk); ++i) {
      exs.push_back(to_example(clean[i]));
      inputs.push_back(exs.back().input);
    }
    const auto& logits = net.run(inputs);
    for (std::size_t s = 0; s < exs.size(); ++s) {
      const auto& ex = exs[s];
      for (std::size_t t = 0; t < ex.input.size(); ++t) {
        if (!ex.mask[t]) continue;
        const auto row = net.offsets()[s] + static_cast<std::int64_t>(t);
        Eigen::Index arg = 0;
        const double mx = static_cast<double>(logits.row(row).maxCoeff(&arg));
        double sum = 0;
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
          sum += std::exp(static_cast<double>(logits(row, j)) - mx);
        }
        nll += mx + std::log(sum) - static_cast<double>(logits(row, ex.target[t]));
        if (arg == ex.target[t]) ++correct;
        ++count;
      }
    }
  }
  u.token_accuracy = static_cast<double>(correct) / static_cast<double>(count);
  u.perplexity = std::exp(nll / static_cast<double>(count));
  return u;
}

}  // namespace bdlab
