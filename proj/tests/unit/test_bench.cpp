#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "spexit/bench.hpp"
#include "spexit/synthetic.hpp"

namespace spexit {
namespace {

NanoModel tiny_model(std::uint64_t seed) {
  NanoConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 3;
  c.d_ff = 32;
  c.max_seq_len = 64;
  c.exit_after = 1;
  Rng rng(seed);
  return NanoModel(c, init_weights(c, rng));
}

std::vector<TokenSequence> prompts(std::size_t vocab, std::size_t n) {
  Rng rng(5);
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    TokenSequence p(vocab);
    for (std::size_t j = 0; j < 1 + i; ++j) {
      p.push_back(TokenId(static_cast<std::int32_t>(rng.uniform_index(vocab))));
    }
    out.push_back(p);
  }
  return out;
}

BenchConfig small_bench() {
  BenchConfig cfg;
  cfg.engine.max_len = 40;
  cfg.k_grid = {1, 3};
  cfg.seeds = 2;
  return cfg;
}

TEST(Bench, ArmsFollowAvailableInputs) {
  const BenchConfig cfg = small_bench();
  auto names = [](const std::vector<BenchArm>& arms) {
    std::vector<std::string> n;
    for (const BenchArm& a : arms) n.push_back(a.name);
    return n;
  };
  EXPECT_EQ(names(bench_arms(cfg, nullptr, false)),
            (std::vector<std::string>{"fixed", "fixed", "beta-ts"}));
  auto pred = std::make_shared<const PredictorWeights>(PredictorWeights::identity(16));
  EXPECT_EQ(names(bench_arms(cfg, pred, true)),
            (std::vector<std::string>{"fixed", "fixed", "beta-ts", "cali-ts", "cali-ts/model-only",
                                      "beta-ts/untrained-exit"}));
  BenchConfig off = cfg;
  off.ablations = false;
  EXPECT_EQ(bench_arms(off, pred, true).size(), 4u);
}

TEST(Bench, RowsAreLosslessAndBreakdownSumsToMeasuredTime) {
  const NanoModel trained = tiny_model(1);
  const NanoModel untrained = tiny_model(2);
  auto pred = std::make_shared<const PredictorWeights>(PredictorWeights::identity(16));
  const auto ps = prompts(32, 3);
  const BenchConfig cfg = small_bench();
  const BenchResult r = run_bench(trained, &untrained, pred, ps, cfg);
  EXPECT_EQ(r.lossless_failures, 0u);
  ASSERT_EQ(r.rows.size(), 6 * ps.size() * cfg.seeds);
  for (const MetricsReport& m : r.rows) {
    const PhaseTimes& b = m.breakdown;
    EXPECT_NEAR(b.drafting + b.verification + b.sampling + b.other, m.measured_time, 1e-9);
    EXPECT_GE(b.other, 0.0);
  }
  EXPECT_EQ(r.rows.front().run_id, "p0/s1");
  EXPECT_EQ(r.rows.front().k, std::optional<std::size_t>(1));
  EXPECT_EQ(r.rows.back().controller, "beta-ts/untrained-exit");

  std::ostringstream table;
  write_breakdown(table, r.rows);
  EXPECT_NE(table.str().find("fixed k=3"), std::string::npos);
  EXPECT_NE(table.str().find("cali-ts/model-only"), std::string::npos);
}

TEST(Bench, ProbeReturnsReferenceAndPositiveCosts) {
  const NanoModel model = tiny_model(3);
  const TokenSequence p = prompts(32, 1).front();
  EngineConfig engine;
  engine.max_len = 30;
  const CostProbe probe = probe_costs(model, p, engine);
  EXPECT_EQ(probe.reference, autoregressive_reference(model.target(), p, 30));
  EXPECT_GT(probe.target_cost, 0.0);
  EXPECT_GT(probe.draft_cost, 0.0);
  Rng rng(1);
  const PromptRun run = run_prompt(model, p, engine, probe, rng);
  EXPECT_TRUE(run.lossless);
  EXPECT_EQ(run.report.controller, "beta-ts");
  EXPECT_FALSE(run.report.k.has_value());
}

TEST(Bench, SyntheticPairIdentityDraftIsFullyAccepted) {
  const SyntheticPair pair(ThetaSchedule::constant(1.0), 16, 4);
  EngineConfig engine;
  engine.max_len = 50;
  engine.controller.kind = ControllerKind::FixedK;
  engine.controller.k = 4;
  TokenSequence p(16);
  p.push_back(TokenId(3));
  const CostProbe probe = probe_costs(pair, p, engine);
  Rng rng(2);
  const PromptRun run = run_prompt(pair, p, engine, probe, rng);
  EXPECT_TRUE(run.lossless);
  EXPECT_EQ(run.report.v_d, 1.0);
  EXPECT_EQ(run.report.k, std::optional<std::size_t>(4));
}

}  // namespace
}  // namespace spexit
