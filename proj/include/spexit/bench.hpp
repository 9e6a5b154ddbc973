#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "spexit/engine.hpp"
#include "spexit/metrics.hpp"

namespace spexit {

/// Wall-clock per-token costs of plain decoding with each side of a bundle,
/// plus the target's greedy output (the losslessness reference).
struct CostProbe {
  double draft_cost = 0.0;
  double target_cost = 0.0;
  /// Plain target decoding time for the whole continuation.
  double baseline_time = 0.0;
  TokenSequence reference;

  CostProbe() : reference(1) {}
};

CostProbe probe_costs(const ModelBundle& models, const TokenSequence& prompt,
                      const EngineConfig& engine);

struct PromptRun {
  DecodeTrace trace;
  MetricsReport report;
  bool lossless = false;
};

/// One speculative decode, reported against `probe`.
PromptRun run_prompt(const ModelBundle& models, const TokenSequence& prompt,
                     const EngineConfig& engine, const CostProbe& probe, Rng& rng);

/// Columns of MetricsReport that vary between identical runs.
const std::vector<std::string>& volatile_report_columns();

struct BenchConfig {
  EngineConfig engine;
  std::vector<std::size_t> k_grid{1, 2, 4, 6, 8, 10, 12, 16};
  std::size_t seeds = 3;
  std::uint64_t base_seed = 1;
  /// Adds "cali-ts/model-only" and "beta-ts/untrained-exit" arms.
  bool ablations = true;
};

struct BenchArm {
  /// Row label: fixed, beta-ts, cali-ts, or an ablation name.
  std::string name;
  ControllerSpec spec;
  bool untrained_exit = false;
};

/// The arms run_bench evaluates, in row order. Cali-TS arms need `predictor`.
std::vector<BenchArm> bench_arms(const BenchConfig& cfg,
                                 std::shared_ptr<const PredictorWeights> predictor,
                                 bool have_untrained);

struct BenchResult {
  /// Order: arm, then prompt, then seed.
  std::vector<MetricsReport> rows;
  std::size_t lossless_failures = 0;
};

/// Decodes every prompt with every arm and seed. `untrained` is the same
/// target with its exit block still copied from the target tail.
BenchResult run_bench(const ModelBundle& trained, const ModelBundle* untrained,
                      std::shared_ptr<const PredictorWeights> predictor,
                      const std::vector<TokenSequence>& prompts, const BenchConfig& cfg);

/// Per-arm means of the report columns, one line per arm.
void write_breakdown(std::ostream& out, const std::vector<MetricsReport>& rows);

}  // namespace spexit
