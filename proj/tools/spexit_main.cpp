#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "spexit/bench.hpp"
#include "spexit/run_config.hpp"
#include "spexit/simulate.hpp"
#include "spexit/training.hpp"

namespace fs = std::filesystem;
using namespace spexit;

namespace {

constexpr const char* kConfigEnv = "SPEXIT_CONFIG";

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

void prepare_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

Corpus corpus_from(const RunConfig& rc) {
  return load_corpus(rc.text("data.corpus"), rc.real("data.held_out_fraction"),
                     rc.u64("data.split_seed"));
}

std::vector<std::vector<TokenId>> eval_windows(const RunConfig& rc, const Corpus& corpus) {
  auto w = make_windows(corpus.held_out, rc.size("train.seq_len"));
  const std::size_t cap = rc.size("train.eval_windows");
  if (cap != 0 && w.size() > cap) w.resize(cap);
  return w;
}

LoadedCheckpoint load_required(const RunConfig& rc, const std::string& key) {
  const fs::path path = rc.text(key);
  if (!fs::exists(path)) {
    throw ConfigError("checkpoint " + path.string() + " (" + key + ") does not exist");
  }
  return load_checkpoint(path);
}

TrainLog progress(const char* what) {
  return [what](std::size_t epoch, std::size_t step, double loss) {
    if (step % 50 == 0) {
      std::cerr << what << " epoch " << epoch << " step " << step << " loss " << loss << '\n';
    }
  };
}

int cmd_train_target(const RunConfig& rc) {
  const NanoConfig nc = rc.nano_config();
  const TrainConfig tc = rc.train_config();
  const Corpus corpus = corpus_from(rc);
  const NanoWeights w = train_target(nc, corpus, tc, progress("target"));
  const fs::path out = rc.text("paths.target");
  prepare_output(out);
  save_checkpoint(w, nc, out);
  const auto windows = eval_windows(rc, corpus);
  std::cout << "held_out_target_loss " << format_double(target_loss(nc, w, windows)) << '\n'
            << "held_out_exit_loss " << format_double(exit_loss(nc, w, windows)) << '\n'
            << "wrote " << out.string() << '\n';
  return 0;
}

int cmd_distill(const RunConfig& rc) {
  const LoadedCheckpoint target = load_required(rc, "paths.target");
  const Corpus corpus = corpus_from(rc);
  const TrainConfig tc = rc.exit_train_config();
  std::vector<std::string> generated;
  if (tc.distill_mix > 0.0) {
    generated = self_distill_generate(target.config, target.weights, corpus.train,
                                      rc.distill_config());
  }
  ExitTrainReport report;
  const NanoWeights w = train_exit(target.config, target.weights, corpus, generated, tc, &report,
                                   progress("exit"));
  const fs::path out = rc.text("paths.bundle");
  prepare_output(out);
  save_checkpoint(w, target.config, out);

  std::ofstream csv = open_output(rc.text("distill.out"));
  const std::string header =
      "exit_loss_before,exit_loss_after,mix,generated_docs,generated_windows,corpus_windows";
  std::ostringstream row;
  row << format_double(report.loss_before) << ',' << format_double(report.loss_after) << ','
      << format_double(tc.distill_mix) << ',' << generated.size() << ','
      << report.generated_windows_used << ',' << report.corpus_windows_used;
  csv << "# volatile: none\n" << header << '\n' << row.str() << '\n';
  std::cout << "exit_loss_before " << format_double(report.loss_before) << '\n'
            << "exit_loss_after " << format_double(report.loss_after) << '\n'
            << header << '\n'
            << row.str() << '\n'
            << "wrote " << out.string() << '\n';
  return 0;
}

int cmd_train_predictor(const RunConfig& rc) {
  const LoadedCheckpoint bundle = load_required(rc, "paths.bundle");
  const NanoModel model(bundle.config, bundle.weights);
  const Corpus corpus = corpus_from(rc);
  std::vector<TokenSequence> prompts;
  for (const std::string& p :
       sample_prompts(corpus.train, rc.size("predictor.prompts"), rc.size("predictor.prompt_len"),
                      rc.u64("predictor.prompt_seed"))) {
    prompts.push_back(TokenSequence::from_bytes(p));
  }
  const PredictorEvaluation e = evaluate_predictor(
      model, prompts, rc.label_config(), rc.real("predictor.held_out_fraction"),
      rc.u64("predictor.split_seed"), rc.predictor_train_config());

  const fs::path labels_out = rc.text("paths.labels");
  const fs::path pred_out = rc.text("paths.predictor");
  prepare_output(labels_out);
  prepare_output(pred_out);
  save_labels(e.labels, labels_out);
  save_predictor(e.predictor, pred_out);
  std::cout << "labels " << e.labels.size() << " (train " << e.train_size << ", held out "
            << e.held_out_size << ")\n"
            << "positive_rate " << format_double(e.labels.positive_rate()) << '\n'
            << "held_out_auc " << format_double(e.held_out_auc) << '\n'
            << "shuffled_control_auc " << format_double(e.shuffled_control_auc) << '\n'
            << "wrote " << pred_out.string() << '\n';
  return 0;
}

std::vector<TokenSequence> read_prompts(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read prompt file " + path.string());
  std::vector<TokenSequence> prompts;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      std::cerr << "warning: " << path.string() << ":" << number << ": empty prompt skipped\n";
      continue;
    }
    prompts.push_back(TokenSequence::from_bytes(line));
  }
  return prompts;
}

std::shared_ptr<const PredictorWeights> predictor_for(const RunConfig& rc, bool required) {
  const fs::path path = rc.text("paths.predictor");
  if (!fs::exists(path)) {
    if (required) throw ConfigError("predictor " + path.string() + " does not exist");
    return nullptr;
  }
  return std::make_shared<const PredictorWeights>(load_predictor(path));
}

int cmd_decode(const RunConfig& rc) {
  const std::string prompt_file = rc.text("decode.prompts");
  if (prompt_file.empty()) throw ConfigError("decode needs a prompt file (--prompts)");
  const std::vector<TokenSequence> prompts = read_prompts(prompt_file);
  const LoadedCheckpoint bundle = load_required(rc, "paths.bundle");
  const NanoModel model(bundle.config, bundle.weights);
  EngineConfig engine = rc.engine_config();
  if (engine.controller.kind == ControllerKind::CaliTS) {
    engine.controller.predictor = predictor_for(rc, true);
  }
  engine.validate();
  const bool check = rc.flag("decode.check_lossless");
  const std::uint64_t seed = rc.u64("decode.seed");

  std::ofstream traces = open_output(rc.text("decode.trace_out"));
  std::ofstream csv = open_output(rc.text("decode.csv_out"));
  write_csv_header(csv, volatile_report_columns());
  std::size_t mismatches = 0;
  double v_d = 0.0, r_d = 0.0, speedup = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const CostProbe probe = probe_costs(model, prompts[i], engine);
    Rng rng = Rng(seed).split(i);
    PromptRun run = run_prompt(model, prompts[i], engine, probe, rng);
    run.report.run_id = "p" + std::to_string(i);
    run.report.seed = seed;
    write_csv_row(csv, run.report);
    traces << trace_to_json(run.trace).dump() << '\n';
    v_d += run.report.v_d;
    r_d += run.report.r_d;
    speedup += run.report.speedup_measured;
    if (check && !run.lossless) {
      ++mismatches;
      std::cerr << "mismatch: prompt " << i << " differs from the autoregressive reference\n";
    }
  }
  const double n = std::max<double>(1.0, static_cast<double>(prompts.size()));
  std::cout << "prompts " << prompts.size() << " controller " << to_string(engine.controller.kind)
            << '\n'
            << "mean_v_d " << format_double(v_d / n) << '\n'
            << "mean_r_d " << format_double(r_d / n) << '\n'
            << "mean_speedup_measured " << format_double(speedup / n) << '\n';
  if (check) {
    std::cout << "lossless " << prompts.size() - mismatches << "/" << prompts.size() << '\n';
  }
  return mismatches == 0 ? 0 : 1;
}

int cmd_simulate(const RunConfig& rc) {
  const SimulateConfig sc = rc.simulate_config();
  const std::vector<SimulateRow> rows = run_simulation(sc);
  std::ofstream out = open_output(rc.text("simulate.out"));
  write_simulate_csv(out, sc.schedule, rows);

  struct Mean {
    double time = 0, v_d = 0;
    std::size_t n = 0;
  };
  std::vector<std::string> order;
  std::map<std::string, Mean> means;
  for (const SimulateRow& r : rows) {
    const std::string label = r.k ? "fixed k=" + std::to_string(*r.k) : r.controller;
    if (!means.count(label)) order.push_back(label);
    Mean& m = means[label];
    m.time += r.sim_time;
    m.v_d += r.v_d;
    ++m.n;
  }
  std::cout << "schedule " << sc.schedule << '\n'
            << std::left << std::setw(14) << "arm" << std::right << std::setw(12) << "sim_time"
            << std::setw(8) << "v_d" << '\n';
  for (const std::string& label : order) {
    const Mean& m = means[label];
    const double n = static_cast<double>(m.n);
    std::cout << std::left << std::setw(14) << label << std::right << std::setw(12)
              << std::fixed << std::setprecision(2) << m.time / n << std::setw(8)
              << std::setprecision(3) << m.v_d / n << '\n';
  }
  std::cout << std::defaultfloat << "wrote " << rc.text("simulate.out") << '\n';
  return 0;
}

int cmd_bench(const RunConfig& rc) {
  const LoadedCheckpoint bundle = load_required(rc, "paths.bundle");
  const NanoModel trained(bundle.config, bundle.weights);
  BenchConfig bc;
  bc.engine = rc.engine_config();
  bc.k_grid = rc.size_list("bench.k_grid");
  bc.seeds = rc.size("bench.seeds");
  bc.base_seed = rc.u64("decode.seed");
  bc.ablations = rc.flag("bench.ablations");

  std::unique_ptr<NanoModel> untrained;
  if (bc.ablations) {
    if (fs::exists(rc.text("paths.target"))) {
      LoadedCheckpoint t = load_checkpoint(rc.text("paths.target"));
      untrained = std::make_unique<NanoModel>(t.config, std::move(t.weights));
    } else {
      std::cerr << "warning: " << rc.text("paths.target")
                << " missing, untrained-exit ablation skipped\n";
    }
  }
  auto predictor = predictor_for(rc, false);
  if (!predictor) {
    std::cerr << "warning: " << rc.text("paths.predictor") << " missing, cali-ts arms skipped\n";
  }

  const Corpus corpus = corpus_from(rc);
  std::vector<TokenSequence> prompts;
  for (const std::string& p : sample_prompts(corpus.held_out, rc.size("bench.prompts"),
                                             rc.size("bench.prompt_len"),
                                             rc.u64("bench.prompt_seed"))) {
    prompts.push_back(TokenSequence::from_bytes(p));
  }
  const BenchResult result = run_bench(trained, untrained.get(), predictor, prompts, bc);

  std::ofstream csv = open_output(rc.text("bench.out"));
  write_csv_header(csv, volatile_report_columns());
  for (const MetricsReport& r : result.rows) write_csv_row(csv, r);
  write_breakdown(std::cout, result.rows);
  std::cout << "lossless_failures " << result.lossless_failures << '\n'
            << "wrote " << rc.text("bench.out") << '\n';
  return result.lossless_failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speculative decoding with an early-exit draft model and adaptive draft length."};
  app.require_subcommand(0, 1);
  // Global options are accepted after the subcommand name too.
  app.fallthrough();
  std::string config_path;
  std::vector<std::string> overrides;
  bool dump = false;
  app.add_option("--config", config_path,
                 std::string("key = value config file (default: $") + kConfigEnv + ")");
  app.add_option("--set", overrides, "override one key, key=value (repeatable)")
      ->allow_extra_args(false);
  app.add_flag("--dump-config", dump, "print the resolved configuration and exit");

  std::map<std::string, std::string> flag_values;
  auto bind = [&](CLI::App* cmd, const std::string& flag, const std::string& key,
                  const std::string& help) {
    cmd->add_option_function<std::string>(
        flag, [&flag_values, key](const std::string& v) { flag_values[key] = v; }, help);
  };

  CLI::App* train = app.add_subcommand("train-target", "train the target model on the corpus");
  bind(train, "--corpus", "data.corpus", "corpus text file");
  bind(train, "--out", "paths.target", "checkpoint to write");

  CLI::App* distill =
      app.add_subcommand("distill", "self-distill the early-exit block of a trained target");
  bind(distill, "--mix", "distill.mix", "share of generated windows per batch");
  bind(distill, "--out", "paths.bundle", "bundle checkpoint to write");

  CLI::App* predictor =
      app.add_subcommand("train-predictor", "label bundle decodes and fit the acceptance predictor");

  CLI::App* dec = app.add_subcommand("decode", "speculative decoding over a prompt file");
  bind(dec, "--prompts", "decode.prompts", "prompt file, one byte string per line");
  bind(dec, "--controller", "controller.kind", "fixed | beta-ts | cali-ts");
  bind(dec, "--k", "controller.k", "draft length for fixed");
  bind(dec, "--seed", "decode.seed", "controller seed");
  dec->add_flag_callback(
      "--check-lossless", [&flag_values] { flag_values["decode.check_lossless"] = "true"; },
      "compare every output with plain target decoding; exit 1 on any mismatch");

  CLI::App* sim = app.add_subcommand("simulate", "controller sweep on synthetic model pairs");
  bind(sim, "--schedule", "simulate.schedule", "acceptance schedule");
  bind(sim, "--out", "simulate.out", "CSV to write");

  CLI::App* bench = app.add_subcommand("bench", "controller matrix on the trained bundle");
  bind(bench, "--out", "bench.out", "CSV to write");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    RunConfig rc;
    if (config_path.empty()) {
      if (const char* env = std::getenv(kConfigEnv); env && *env) config_path = env;
    }
    if (!config_path.empty()) rc.load_file(config_path);
    for (const std::string& o : overrides) rc.apply_assignment(o);
    for (const auto& [key, value] : flag_values) rc.set(key, value);

    if (dump) {
      std::cout << rc.dump();
      return 0;
    }
    if (*train) return cmd_train_target(rc);
    if (*distill) return cmd_distill(rc);
    if (*predictor) return cmd_train_predictor(rc);
    if (*dec) return cmd_decode(rc);
    if (*sim) return cmd_simulate(rc);
    if (*bench) return cmd_bench(rc);
    std::cerr << app.help();
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
