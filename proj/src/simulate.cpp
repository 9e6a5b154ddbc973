#include "spexit/simulate.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

#include "spexit/engine.hpp"
#include "spexit/metrics.hpp"

namespace spexit {
namespace {

constexpr std::uint64_t kPredictorSeedOffset = 100000;
constexpr std::uint64_t kPromptStream = 7;
constexpr std::uint64_t kControllerStream = 1000;

TokenSequence synthetic_prompt(std::size_t vocab, std::size_t len, std::uint64_t seed) {
  Rng rng = Rng(seed).split(kPromptStream);
  TokenSequence p(vocab);
  for (std::size_t i = 0; i < len; ++i) {
    p.push_back(TokenId(static_cast<std::int32_t>(rng.uniform_index(vocab))));
  }
  return p;
}

struct Arm {
  std::string name;
  ControllerSpec spec;
  std::optional<std::size_t> k;
};

}  // namespace

void SimulateConfig::validate() const {
  ThetaSchedule::parse(schedule);
  if (vocab_size < 2) throw ConfigError("simulate.vocab_size must be >= 2");
  if (prompt_len == 0 || prompt_len >= max_len) {
    throw ConfigError("simulate.prompt_len must be positive and below simulate.max_len");
  }
  if (!(draft_cost >= 0.0) || !(target_cost > 0.0) || !(overhead >= 0.0)) {
    throw ConfigError("simulate costs must be non-negative (target cost positive)");
  }
  if (seeds == 0 || repetitions == 0) throw ConfigError("simulate needs seeds and repetitions");
  for (const std::string& c : controllers) {
    if (c != "fixed" && c != "beta-ts" && c != "cali-ts") {
      throw ConfigError("unknown simulate controller '" + c + "' (fixed, beta-ts, cali-ts)");
    }
  }
  if (std::find(controllers.begin(), controllers.end(), "fixed") != controllers.end()) {
    if (k_grid.empty()) throw ConfigError("simulate.k_grid is empty");
    for (std::size_t k : k_grid) {
      if (k == 0) throw ConfigError("simulate.k_grid entries must be >= 1");
    }
  }
}

PredictorWeights train_synthetic_predictor(const SimulateConfig& cfg) {
  const ThetaSchedule schedule = ThetaSchedule::parse(cfg.schedule);
  LabelConfig lc = cfg.labels;
  lc.max_len = cfg.max_len;
  PredictorLabels labels;
  for (std::size_t j = 0; j < std::max<std::size_t>(cfg.predictor_pairs, 1); ++j) {
    const std::uint64_t seed = cfg.base_seed + kPredictorSeedOffset + j;
    const SyntheticPair pair(schedule, cfg.vocab_size, seed);
    labels.append(make_predictor_labels(
        pair, {synthetic_prompt(cfg.vocab_size, cfg.prompt_len, seed)}, lc));
  }
  const double rate = labels.positive_rate();
  // A schedule with theta in {0, 1} everywhere yields one class; the untrained
  // predictor (constant 0.5) is the only consistent choice there.
  if (labels.size() == 0 || rate == 0.0 || rate == 1.0) {
    return PredictorWeights::identity(kSyntheticHiddenSize);
  }
  return train_predictor(labels, cfg.predictor);
}

std::vector<SimulateRow> run_simulation(const SimulateConfig& cfg) {
  cfg.validate();
  const ThetaSchedule schedule = ThetaSchedule::parse(cfg.schedule);
  const std::size_t boundary = schedule.boundary().value_or(cfg.max_len);

  std::vector<Arm> arms;
  for (const std::string& name : cfg.controllers) {
    if (name == "fixed") {
      for (std::size_t k : cfg.k_grid) {
        ControllerSpec s = cfg.ts;
        s.kind = ControllerKind::FixedK;
        s.k = k;
        arms.push_back({name, s, k});
      }
    } else if (name == "beta-ts") {
      ControllerSpec s = cfg.ts;
      s.kind = ControllerKind::BetaTS;
      arms.push_back({name, s, std::nullopt});
    } else {
      ControllerSpec s = cfg.ts;
      s.kind = ControllerKind::CaliTS;
      s.predictor = std::make_shared<const PredictorWeights>(train_synthetic_predictor(cfg));
      arms.push_back({name, s, std::nullopt});
    }
  }

  struct Cell {
    const Arm* arm;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (const Arm& arm : arms) {
    for (std::size_t si = 0; si < cfg.seeds; ++si) cells.push_back({&arm, cfg.base_seed + si});
  }

  auto run_cell = [&](const Cell& cell) {
    std::vector<SimulateRow> out;
    const SyntheticPair pair(schedule, cfg.vocab_size, cell.seed);
    const TokenSequence prompt = synthetic_prompt(cfg.vocab_size, cfg.prompt_len, cell.seed);
    for (std::size_t rep = 0; rep < cfg.repetitions; ++rep) {
      EngineConfig ec;
      ec.max_len = cfg.max_len;
      ec.draft_cap = cfg.draft_cap;
      ec.controller = cell.arm->spec;
      Rng rng = Rng(cell.seed).split(kControllerStream + rep);
      const DecodeTrace trace = decode(pair, prompt, ec, rng);

      SimulateRow row;
      row.controller = cell.arm->name;
      row.k = cell.arm->k;
      row.seed = cell.seed;
      row.repetition = rep;
      row.rounds = trace.rounds.size();
      row.new_tokens = trace.new_tokens();
      std::size_t committed = trace.prompt_len;
      for (const DraftRound& r : trace.rounds) {
        row.drafted += r.drafted.size();
        row.accepted += r.accepted_drafts;
        const double cost = static_cast<double>(r.drafted.size()) * cfg.draft_cost +
                            cfg.target_cost + cfg.overhead;
        (committed < boundary ? row.sim_time_before : row.sim_time_after) += cost;
        committed += r.accepted_drafts + 1;
      }
      const AcceptanceStats stats = acceptance_stats(trace);
      row.v_d = stats.v_d;
      row.r_d = stats.r_d;
      row.hm = harmonic_mean(stats.v_d, stats.r_d);
      row.sim_time = simulate_clock(trace, cfg.draft_cost, cfg.target_cost, cfg.overhead);
      out.push_back(std::move(row));
    }
    return out;
  };

  std::vector<std::vector<SimulateRow>> results(cells.size());
  std::size_t workers = cfg.threads == 0 ? std::thread::hardware_concurrency() : cfg.threads;
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(cells.size(), 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) results[i] = run_cell(cells[i]);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = next++; i < cells.size(); i = next++) results[i] = run_cell(cells[i]);
        } catch (...) {
          errors[w] = std::current_exception();
          next = cells.size();
        }
      });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  std::vector<SimulateRow> rows;
  for (auto& cell_rows : results) {
    for (SimulateRow& r : cell_rows) rows.push_back(std::move(r));
  }
  return rows;
}

void write_simulate_csv(std::ostream& out, const std::string& schedule,
                        const std::vector<SimulateRow>& rows) {
  // Schedule specs may contain commas.
  const std::string field =
      schedule.find(',') == std::string::npos ? schedule : "\"" + schedule + "\"";
  out << "# volatile: none\n" << kSimulateCsvHeader << '\n';
  for (const SimulateRow& r : rows) {
    out << field << ',' << r.controller << ',' << (r.k ? std::to_string(*r.k) : "") << ','
        << r.seed << ',' << r.repetition << ',' << r.rounds << ',' << r.drafted << ','
        << r.accepted << ',' << r.new_tokens << ',' << format_double(r.v_d) << ','
        << format_double(r.r_d) << ',' << format_double(r.hm) << ',' << format_double(r.sim_time)
        << ',' << format_double(r.sim_time_before) << ',' << format_double(r.sim_time_after)
        << '\n';
  }
}

}  // namespace spexit
