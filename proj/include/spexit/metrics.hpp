#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "spexit/core.hpp"

namespace spexit {

struct AcceptanceStats {
  /// Accepted drafts over drafted tokens.
  double v_d = 0.0;
  /// Accepted drafts over new output tokens (bonus tokens included).
  double r_d = 0.0;
};

/// Throws PreconditionError when the trace has no drafted tokens.
AcceptanceStats acceptance_stats(const DecodeTrace& trace);

/// 200 * v * r / (v + r), or 0 when both are 0.
double harmonic_mean(double v_d, double r_d);

/// Predicted generation time for L tokens: (r*L/v)*T_d + (1-r)*L*T_t.
double model_time(double v_d, double r_d, double length, double draft_cost, double target_cost);

/// v / ((alpha - v)*r + v), alpha = T_d / T_t. Equals L*T_t / model_time.
double model_speedup(double v_d, double r_d, double alpha);

/// Sum over rounds of |drafted|*T_d + T_t + overhead.
double simulate_clock(const DecodeTrace& trace, double draft_cost, double target_cost,
                      double verify_overhead);

struct MetricsReport {
  std::string run_id;
  std::string controller;
  /// Draft length for fixed-K runs.
  std::optional<std::size_t> k;
  std::uint64_t seed = 0;
  double v_d = 0.0;
  double r_d = 0.0;
  double hm = 0.0;
  double alpha = 0.0;
  double measured_time = 0.0;
  /// NaN when v_d = 0 (the time model is undefined there).
  double model_time = 0.0;
  double speedup_measured = 0.0;
  double speedup_model = 0.0;
  PhaseTimes breakdown;
};

/// Per-token costs used to derive alpha, the time model and speedups.
struct CostBasis {
  double draft_cost = 0.0;
  double target_cost = 0.0;
  /// Time plain target decoding takes for the same output.
  double baseline_time = 0.0;
};

/// Fills every derived field from the trace; measured_time and breakdown
/// come from `measured`.
MetricsReport make_report(const DecodeTrace& trace, const CostBasis& costs,
                          const PhaseTimes& measured);

inline constexpr std::string_view kCsvHeader =
    "run_id,controller,k,seed,v_d,r_d,hm,alpha,measured_s,model_s,speedup_measured,"
    "speedup_model,draft_s,verify_s,sample_s,other_s";

/// Shortest decimal that round-trips to `value` ("nan", "inf" for non-finite).
std::string format_double(double value);

/// Comment line naming run-to-run varying columns, then the header line.
void write_csv_header(std::ostream& out, const std::vector<std::string>& volatile_columns);
void write_csv_row(std::ostream& out, const MetricsReport& report);

nlohmann::json report_to_json(const MetricsReport& report);
nlohmann::json trace_to_json(const DecodeTrace& trace);
DecodeTrace trace_from_json(const nlohmann::json& json);

}  // namespace spexit
