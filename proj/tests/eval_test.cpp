#include <cmath>

#include <gtest/gtest.h>

#include "bdlab/datagen.hpp"
#include "bdlab/eval.hpp"
#include "bdlab/lora.hpp"
#include "bdlab/trainer.hpp"

namespace bdlab {
namespace {

TinyLMConfig tiny() {
  TinyLMConfig c;
  c.n_blocks = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_head = 8;
  c.d_ff = 32;
  c.vocab_size = 32;
  c.max_seq = 20;
  c.precision = Precision::kDouble;
  return c;
}

TaskSpec short_task() {
  TaskSpec t;
  t.min_len = 2;
  t.max_len = 4;
  return t;
}

// A model trained to answer every prompt with REFUSE EOS.
const ParamStore<double>& refusing_model() {
  static const ParamStore<double> model = [] {
    Dataset d = make_clean_dataset(short_task(), 64, 1);
    for (auto& s : d) s.response = {tok::REFUSE, tok::EOS};
    TrainConfig cfg;
    cfg.lr = 1e-2;
    cfg.epochs = 4;
    cfg.batch_size = 8;
    return train_full(init_params<double>(tiny(), 1), d, cfg).first;
  }();
  return model;
}

TEST(Eval, UniformLogitsGiveVocabPerplexity) {
  auto p = init_params<double>(tiny(), 2);
  auto& g = p.at(names::kFinalNorm).data;
  std::fill(g.begin(), g.end(), 0.0);
  const auto clean = make_clean_dataset(short_task(), 10, 3);
  const auto u = clean_utility(model_ref(p), clean, 6);
  EXPECT_NEAR(u.perplexity, 32.0, 1e-9);
  EXPECT_EQ(u.token_accuracy, 0.0);
  EXPECT_EQ(u.exact_match, 0.0);
  EXPECT_EQ(u.exact.total, 10u);
  const auto outs = greedy_outputs(model_ref(p), clean, 6);
  for (const auto& o : outs) EXPECT_EQ(o, TokenSeq(6, tok::PAD));
}

TEST(Eval, RefusingModelHasFullAsrAndNoCleanMatch) {
  const auto& m = refusing_model();
  const auto clean = make_clean_dataset(short_task(), 20, 5);
  BehaviorSpec refusal;
  const auto r = asr(model_ref(m), clean, refusal, max_new_tokens(short_task()));
  EXPECT_EQ(r.hits, 20u);
  EXPECT_EQ(r.value(), 1.0);
  EXPECT_EQ(clean_utility(model_ref(m), clean, 8).exact_match, 0.0);

  Dataset target = clean;
  for (auto& s : target) s.response = {tok::REFUSE, tok::EOS};
  const auto u = clean_utility(model_ref(m), target, 8);
  EXPECT_EQ(u.exact_match, 1.0);
  EXPECT_EQ(u.token_accuracy, 1.0);
  EXPECT_LT(u.perplexity, 1.5);

  BehaviorSpec payload{BehaviorKind::kPayloadInjection};
  EXPECT_EQ(asr(model_ref(m), clean, payload, 8).hits, 0u);
}

TEST(Eval, AsrCountsDetectorHitsOnGreedyOutputs) {
  const auto p = init_params<double>(tiny(), 3);
  const auto data = make_clean_dataset(short_task(), 30, 4);
  for (auto kind : {BehaviorKind::kSentimentSteer, BehaviorKind::kTargetedRefusal,
                    BehaviorKind::kPayloadInjection}) {
    BehaviorSpec b{kind};
    const auto outs = greedy_outputs(model_ref(p), data, 8);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < outs.size(); ++i) hits += b.detect(outs[i], data[i].prompt);
    EXPECT_EQ(asr(model_ref(p), data, b, 8).hits, hits);
  }
}

TEST(Eval, ChunkingDoesNotChangeResults) {
  const auto& m = refusing_model();
  const auto data = make_clean_dataset(short_task(), 13, 6);
  EXPECT_EQ(greedy_outputs(model_ref(m), data, 8, 1), greedy_outputs(model_ref(m), data, 8, 64));
  const auto a = clean_utility(model_ref(m), data, 8, 1);
  const auto b = clean_utility(model_ref(m), data, 8, 64);
  EXPECT_EQ(a.exact.hits, b.exact.hits);
  EXPECT_EQ(a.token_accuracy, b.token_accuracy);
  EXPECT_NEAR(a.perplexity, b.perplexity, 1e-9);
}

TEST(Eval, FreshAdapterMatchesBase) {
  const auto p = init_params<double>(tiny(), 3);
  const auto ad = init_adapter(p, projection_paths(p.config), 2, 4.0, 1);
  const auto data = make_clean_dataset(short_task(), 10, 4);
  EXPECT_EQ(greedy_outputs(model_ref(p, &ad), data, 8), greedy_outputs(model_ref(p), data, 8));
}

TEST(Eval, EmptySetsAndRates) {
  const auto p = init_params<double>(tiny(), 3);
  EXPECT_THROW(asr(model_ref(p), Dataset{}, BehaviorSpec{}, 4), InputError);
  EXPECT_THROW(clean_utility(model_ref(p), Dataset{}, 4), InputError);
  EXPECT_EQ(Rate{}.value(), 0.0);
  EXPECT_EQ((Rate{3, 4}).value(), 0.75);
  EXPECT_EQ(max_new_tokens(short_task()), 8);
}

TEST(Eval, DecodingStopsAtMaxSeq) {
  const auto p = init_params<double>(tiny(), 3);
  const TokenSeq prompt(18, static_cast<Token>(tok::kFirstSymbol));
  EXPECT_LE(generate(p, prompt, 50).size(), 2u);
}

}  // namespace
}  // namespace bdlab
