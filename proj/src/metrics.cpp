#include "spexit/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

namespace spexit {

AcceptanceStats acceptance_stats(const DecodeTrace& trace) {
  std::size_t accepted = 0;
  std::size_t drafted = 0;
  for (const DraftRound& r : trace.rounds) {
    accepted += r.accepted_drafts;
    drafted += r.drafted.size();
  }
  if (drafted == 0) throw PreconditionError("acceptance rate undefined: no drafted tokens");
  const std::size_t produced = trace.new_tokens();
  return {static_cast<double>(accepted) / static_cast<double>(drafted),
          produced == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(produced)};
}

double harmonic_mean(double v_d, double r_d) {
  if (v_d + r_d == 0.0) return 0.0;
  return 200.0 * (v_d * r_d) / (v_d + r_d);
}

double model_time(double v_d, double r_d, double length, double draft_cost, double target_cost) {
  if (!(v_d > 0.0)) throw PreconditionError("time model undefined for v_d = 0");
  return r_d * length / v_d * draft_cost + (1.0 - r_d) * length * target_cost;
}

double model_speedup(double v_d, double r_d, double alpha) {
  const double denom = (alpha - v_d) * r_d + v_d;
  if (!(denom > 0.0)) throw PreconditionError("speedup model invalid: non-positive denominator");
  return v_d / denom;
}

double simulate_clock(const DecodeTrace& trace, double draft_cost, double target_cost,
                      double verify_overhead) {
  if (draft_cost < 0.0 || target_cost < 0.0 || verify_overhead < 0.0) {
    throw PreconditionError("simulated costs must be non-negative");
  }
  double total = 0.0;
  for (const DraftRound& r : trace.rounds) {
    total += static_cast<double>(r.drafted.size()) * draft_cost + target_cost + verify_overhead;
  }
  return total;
}

MetricsReport make_report(const DecodeTrace& trace, const CostBasis& costs,
                          const PhaseTimes& measured) {
  MetricsReport m;
  const AcceptanceStats s = acceptance_stats(trace);
  m.v_d = s.v_d;
  m.r_d = s.r_d;
  m.hm = harmonic_mean(s.v_d, s.r_d);
  m.alpha = costs.target_cost > 0.0 ? costs.draft_cost / costs.target_cost : 0.0;
  m.measured_time = measured.total();
  m.breakdown = measured;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const double length = static_cast<double>(trace.new_tokens());
  m.model_time =
      s.v_d > 0.0 ? model_time(s.v_d, s.r_d, length, costs.draft_cost, costs.target_cost) : nan;
  const double denom = (m.alpha - s.v_d) * s.r_d + s.v_d;
  m.speedup_model = denom > 0.0 ? s.v_d / denom : nan;
  m.speedup_measured = m.measured_time > 0.0 ? costs.baseline_time / m.measured_time : nan;
  return m;
}

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

void write_csv_header(std::ostream& out, const std::vector<std::string>& volatile_columns) {
  out << "# volatile:";
  for (std::size_t i = 0; i < volatile_columns.size(); ++i) {
    out << (i ? "," : " ") << volatile_columns[i];
  }
  if (volatile_columns.empty()) out << " none";
  out << '\n' << kCsvHeader << '\n';
}

void write_csv_row(std::ostream& out, const MetricsReport& m) {
  out << m.run_id << ',' << m.controller << ',' << (m.k ? std::to_string(*m.k) : "") << ','
      << m.seed;
  for (double v : {m.v_d, m.r_d, m.hm, m.alpha, m.measured_time, m.model_time,
                   m.speedup_measured, m.speedup_model, m.breakdown.drafting,
                   m.breakdown.verification, m.breakdown.sampling, m.breakdown.other}) {
    out << ',' << format_double(v);
  }
  out << '\n';
}

namespace {

nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

std::vector<std::int32_t> token_values(std::span<const TokenId> tokens) {
  std::vector<std::int32_t> out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) out.push_back(t.value);
  return out;
}

TokenSequence tokens_from(const nlohmann::json& j, std::size_t vocab) {
  TokenSequence seq(vocab);
  for (const auto& v : j) seq.push_back(TokenId::checked(v.get<std::int64_t>(), vocab));
  return seq;
}

StopReason parse_stop_reason(const std::string& s) {
  for (StopReason r : {StopReason::ControllerStop, StopReason::LengthCap, StopReason::Rejection}) {
    if (to_string(r) == s) return r;
  }
  throw PreconditionError("unknown stop reason '" + s + "'");
}

}  // namespace

nlohmann::json report_to_json(const MetricsReport& m) {
  return {{"run_id", m.run_id},
          {"controller", m.controller},
          {"k", m.k ? nlohmann::json(*m.k) : nlohmann::json(nullptr)},
          {"seed", m.seed},
          {"v_d", number_or_null(m.v_d)},
          {"r_d", number_or_null(m.r_d)},
          {"hm", number_or_null(m.hm)},
          {"alpha", number_or_null(m.alpha)},
          {"measured_s", number_or_null(m.measured_time)},
          {"model_s", number_or_null(m.model_time)},
          {"speedup_measured", number_or_null(m.speedup_measured)},
          {"speedup_model", number_or_null(m.speedup_model)},
          {"draft_s", number_or_null(m.breakdown.drafting)},
          {"verify_s", number_or_null(m.breakdown.verification)},
          {"sample_s", number_or_null(m.breakdown.sampling)},
          {"other_s", number_or_null(m.breakdown.other)}};
}

nlohmann::json trace_to_json(const DecodeTrace& trace) {
  nlohmann::json rounds = nlohmann::json::array();
  for (const DraftRound& r : trace.rounds) {
    rounds.push_back({{"drafted", token_values(r.drafted.view())},
                      {"accepted_drafts", r.accepted_drafts},
                      {"bonus", r.bonus.value},
                      {"stop_reason", to_string(r.stop_reason)},
                      {"draft_s", r.draft_time},
                      {"verify_s", r.verify_time},
                      {"sample_s", r.sample_time}});
  }
  nlohmann::json j = {
      {"vocab_size", trace.output.vocab_size()},
      {"prompt_len", trace.prompt_len},
      {"max_len", trace.max_len == kNoLengthCap ? nlohmann::json(nullptr)
                                                : nlohmann::json(trace.max_len)},
      {"stop_tokens", token_values(trace.stop_tokens)},
      {"output", token_values(trace.output.view())},
      {"rounds", rounds},
      {"wall_times",
       {{"drafting", trace.wall_times.drafting},
        {"verification", trace.wall_times.verification},
        {"sampling", trace.wall_times.sampling},
        {"other", trace.wall_times.other}}}};
  return j;
}

DecodeTrace trace_from_json(const nlohmann::json& j) {
  try {
    const std::size_t vocab = j.at("vocab_size").get<std::size_t>();
    TokenSequence output = tokens_from(j.at("output"), vocab);
    const std::size_t prompt_len = j.at("prompt_len").get<std::size_t>();
    if (prompt_len == 0 || prompt_len > output.size()) {
      throw PreconditionError("trace prompt_len is inconsistent with its output");
    }
    DecodeTrace trace(vocab);
    trace.prompt_len = prompt_len;
    trace.max_len = j.at("max_len").is_null() ? kNoLengthCap : j.at("max_len").get<std::size_t>();
    const TokenSequence stops = tokens_from(j.at("stop_tokens"), vocab);
    trace.stop_tokens.assign(stops.begin(), stops.end());
    trace.output = std::move(output);
    for (const auto& r : j.at("rounds")) {
      DraftRound round(vocab);
      round.drafted = tokens_from(r.at("drafted"), vocab);
      round.accepted_drafts = r.at("accepted_drafts").get<std::size_t>();
      round.bonus = TokenId::checked(r.at("bonus").get<std::int64_t>(), vocab);
      round.stop_reason = parse_stop_reason(r.at("stop_reason").get<std::string>());
      round.draft_time = r.at("draft_s").get<double>();
      round.verify_time = r.at("verify_s").get<double>();
      round.sample_time = r.at("sample_s").get<double>();
      round.validate();
      trace.rounds.push_back(std::move(round));
    }
    const auto& w = j.at("wall_times");
    trace.wall_times = {w.at("drafting").get<double>(), w.at("verification").get<double>(),
                        w.at("sampling").get<double>(), w.at("other").get<double>()};
    trace.stopped = !trace.stop_tokens.empty() && trace.output.size() > prompt_len &&
                    std::find(trace.stop_tokens.begin(), trace.stop_tokens.end(),
                              trace.output.back()) != trace.stop_tokens.end();
    return trace;
  } catch (const nlohmann::json::exception& e) {
    throw PreconditionError(std::string("malformed trace JSON: ") + e.what());
  }
}

}  // namespace spexit
