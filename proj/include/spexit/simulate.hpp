#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "spexit/controllers.hpp"
#include "spexit/synthetic.hpp"
#include "spexit/training.hpp"

namespace spexit {

/// Controller sweep over synthetic draft/target pairs, timed with the
/// simulated clock |drafted| * T_d + T_t + overhead per round.
struct SimulateConfig {
  std::string schedule = "constant:0.8";
  std::size_t vocab_size = 64;
  std::size_t prompt_len = 8;
  std::size_t max_len = 512;
  double draft_cost = 0.1;
  double target_cost = 1.0;
  double overhead = 0.0;
  std::vector<std::size_t> k_grid{1, 2, 4, 6, 8, 10, 12, 16};
  /// Any of "fixed", "beta-ts", "cali-ts".
  std::vector<std::string> controllers{"fixed", "beta-ts", "cali-ts"};
  std::size_t seeds = 20;
  std::size_t repetitions = 1;
  std::uint64_t base_seed = 1;
  std::size_t draft_cap = 64;
  /// Settings for the TS controllers (kind and predictor are filled in).
  ControllerSpec ts;
  /// Predictor training for cali-ts: labels come from pairs seeded apart
  /// from the evaluation pairs.
  std::size_t predictor_pairs = 4;
  LabelConfig labels;
  PredictorTrainConfig predictor;
  /// Worker threads over (controller, seed) cells; 0 picks the hardware
  /// count. Rows come out in the same order for any value.
  std::size_t threads = 1;

  void validate() const;
};

struct SimulateRow {
  std::string controller;
  std::optional<std::size_t> k;
  std::uint64_t seed = 0;
  std::size_t repetition = 0;
  std::size_t rounds = 0;
  std::size_t drafted = 0;
  std::size_t accepted = 0;
  std::size_t new_tokens = 0;
  double v_d = 0.0;
  double r_d = 0.0;
  double hm = 0.0;
  double sim_time = 0.0;
  /// Split of sim_time by whether the round started before the schedule's
  /// change point (everything counts as "before" without one).
  double sim_time_before = 0.0;
  double sim_time_after = 0.0;
};

/// Trains the cali-ts predictor on labels from the configured schedule.
PredictorWeights train_synthetic_predictor(const SimulateConfig& cfg);

/// One row per (controller, k, seed, repetition), in that nesting order.
std::vector<SimulateRow> run_simulation(const SimulateConfig& cfg);

inline constexpr std::string_view kSimulateCsvHeader =
    "schedule,controller,k,seed,repetition,rounds,drafted,accepted,new_tokens,v_d,r_d,hm,"
    "sim_time,sim_time_before,sim_time_after";

void write_simulate_csv(std::ostream& out, const std::string& schedule,
                        const std::vector<SimulateRow>& rows);

}  // namespace spexit
