#include "spexit/bench.hpp"

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <map>

namespace spexit {
namespace {

using Clock = std::chrono::steady_clock;

double per_token(double seconds, std::size_t tokens) {
  return tokens == 0 ? 0.0 : seconds / static_cast<double>(tokens);
}

std::string arm_label(const MetricsReport& r) {
  return r.k ? r.controller + " k=" + std::to_string(*r.k) : r.controller;
}

}  // namespace

CostProbe probe_costs(const ModelBundle& models, const TokenSequence& prompt,
                      const EngineConfig& engine) {
  CostProbe p;
  auto start = Clock::now();
  p.reference =
      autoregressive_reference(models.target(), prompt, engine.max_len, engine.stop_tokens);
  p.baseline_time = std::chrono::duration<double>(Clock::now() - start).count();
  p.target_cost = per_token(p.baseline_time, p.reference.size() - prompt.size());

  start = Clock::now();
  const TokenSequence drafted =
      autoregressive_reference(models.draft(), prompt, engine.max_len, engine.stop_tokens);
  p.draft_cost = per_token(std::chrono::duration<double>(Clock::now() - start).count(),
                           drafted.size() - prompt.size());
  return p;
}

PromptRun run_prompt(const ModelBundle& models, const TokenSequence& prompt,
                     const EngineConfig& engine, const CostProbe& probe, Rng& rng) {
  PromptRun run{decode(models, prompt, engine, rng), {}, false};
  run.report = make_report(run.trace, {probe.draft_cost, probe.target_cost, probe.baseline_time},
                           run.trace.wall_times);
  run.report.controller = std::string(to_string(engine.controller.kind));
  if (engine.controller.kind == ControllerKind::FixedK) run.report.k = engine.controller.k;
  run.lossless = run.trace.output == probe.reference;
  return run;
}

const std::vector<std::string>& volatile_report_columns() {
  static const std::vector<std::string> cols{"alpha",        "measured_s", "model_s",
                                             "speedup_measured", "speedup_model", "draft_s",
                                             "verify_s",     "sample_s",   "other_s"};
  return cols;
}

std::vector<BenchArm> bench_arms(const BenchConfig& cfg,
                                 std::shared_ptr<const PredictorWeights> predictor,
                                 bool have_untrained) {
  std::vector<BenchArm> arms;
  const ControllerSpec base = cfg.engine.controller;
  for (std::size_t k : cfg.k_grid) {
    ControllerSpec s = base;
    s.kind = ControllerKind::FixedK;
    s.k = k;
    arms.push_back({"fixed", s, false});
  }
  ControllerSpec beta = base;
  beta.kind = ControllerKind::BetaTS;
  beta.predictor = nullptr;
  arms.push_back({"beta-ts", beta, false});
  if (predictor) {
    ControllerSpec cali = base;
    cali.kind = ControllerKind::CaliTS;
    cali.predictor = predictor;
    cali.cali_variant = CaliVariant::Full;
    arms.push_back({"cali-ts", cali, false});
    if (cfg.ablations) {
      cali.cali_variant = CaliVariant::ModelOnly;
      arms.push_back({"cali-ts/model-only", cali, false});
    }
  }
  if (cfg.ablations && have_untrained) arms.push_back({"beta-ts/untrained-exit", beta, true});
  return arms;
}

BenchResult run_bench(const ModelBundle& trained, const ModelBundle* untrained,
                      std::shared_ptr<const PredictorWeights> predictor,
                      const std::vector<TokenSequence>& prompts, const BenchConfig& cfg) {
  cfg.engine.validate();
  const std::vector<BenchArm> arms = bench_arms(cfg, predictor, untrained != nullptr);
  const bool need_untrained =
      std::any_of(arms.begin(), arms.end(), [](const BenchArm& a) { return a.untrained_exit; });

  std::vector<CostProbe> probes;
  std::vector<CostProbe> untrained_probes;
  for (const TokenSequence& p : prompts) {
    probes.push_back(probe_costs(trained, p, cfg.engine));
    if (need_untrained) untrained_probes.push_back(probe_costs(*untrained, p, cfg.engine));
  }

  BenchResult result;
  for (const BenchArm& arm : arms) {
    const ModelBundle& models = arm.untrained_exit ? *untrained : trained;
    EngineConfig engine = cfg.engine;
    engine.controller = arm.spec;
    for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
      const CostProbe& probe = arm.untrained_exit ? untrained_probes[pi] : probes[pi];
      for (std::size_t s = 0; s < cfg.seeds; ++s) {
        const std::uint64_t seed = cfg.base_seed + s;
        Rng rng = Rng(seed).split(pi);
        PromptRun run = run_prompt(models, prompts[pi], engine, probe, rng);
        run.report.controller = arm.name;
        run.report.seed = seed;
        run.report.run_id = "p" + std::to_string(pi) + "/s" + std::to_string(seed);
        if (!run.lossless) ++result.lossless_failures;
        result.rows.push_back(std::move(run.report));
      }
    }
  }
  return result;
}

void write_breakdown(std::ostream& out, const std::vector<MetricsReport>& rows) {
  struct Sum {
    std::size_t n = 0;
    double v_d = 0, r_d = 0, hm = 0, measured = 0, speedup = 0;
    PhaseTimes phases;
  };
  std::vector<std::string> order;
  std::map<std::string, Sum> sums;
  for (const MetricsReport& r : rows) {
    const std::string label = arm_label(r);
    if (!sums.count(label)) order.push_back(label);
    Sum& s = sums[label];
    ++s.n;
    s.v_d += r.v_d;
    s.r_d += r.r_d;
    s.hm += r.hm;
    s.measured += r.measured_time;
    s.speedup += r.speedup_measured;
    s.phases.drafting += r.breakdown.drafting;
    s.phases.verification += r.breakdown.verification;
    s.phases.sampling += r.breakdown.sampling;
    s.phases.other += r.breakdown.other;
  }
  const auto flags = out.flags();
  out << std::left << std::setw(26) << "arm" << std::right << std::setw(5) << "runs"
      << std::setw(8) << "v_d" << std::setw(8) << "r_d" << std::setw(8) << "hm" << std::setw(10)
      << "speedup" << std::setw(11) << "total_ms" << std::setw(11) << "draft_ms" << std::setw(11)
      << "verify_ms" << std::setw(11) << "sample_ms" << std::setw(11) << "other_ms" << '\n';
  out << std::fixed;
  for (const std::string& label : order) {
    const Sum& s = sums[label];
    const double n = static_cast<double>(s.n);
    out << std::left << std::setw(26) << label << std::right << std::setw(5) << s.n
        << std::setprecision(3) << std::setw(8) << s.v_d / n << std::setw(8) << s.r_d / n
        << std::setprecision(2) << std::setw(8) << s.hm / n << std::setprecision(3)
        << std::setw(10) << s.speedup / n << std::setw(11) << 1e3 * s.measured / n
        << std::setw(11) << 1e3 * s.phases.drafting / n << std::setw(11)
        << 1e3 * s.phases.verification / n << std::setw(11) << 1e3 * s.phases.sampling / n
        << std::setw(11) << 1e3 * s.phases.other / n << '\n';
  }
  out.flags(flags);
}

}  // namespace spexit
