#include "spexit/run_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace spexit {
namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string section_of(const std::string& key) { return key.substr(0, key.find('.')); }

}  // namespace

RunConfig::RunConfig() {
  add("model.vocab_size", "256", "byte vocabulary");
  add("model.d_model", "64", "");
  add("model.n_heads", "4", "");
  add("model.n_layers", "4", "target depth");
  add("model.d_ff", "256", "");
  add("model.max_seq_len", "128", "");
  add("model.exit_after", "1", "shared layers N feeding the exit block");
  add("model.exit_depth", "1", "transformer layers in the exit block");
  add("model.norm_eps", "1e-05", "");
  add("model.rope_base", "10000", "");

  add("data.corpus", "data/corpus.txt", "plain text, paragraphs separated by blank lines");
  add("data.held_out_fraction", "0.1", "");
  add("data.split_seed", "1", "");

  add("train.optimizer", "adam", "sgd | momentum | adam");
  add("train.learning_rate", "0.003", "");
  add("train.momentum", "0.9", "");
  add("train.batch_size", "16", "");
  add("train.epochs", "1", "");
  add("train.steps_per_epoch", "300", "0 = one pass over the windows");
  add("train.seq_len", "128", "");
  add("train.grad_clip", "1", "global norm, 0 disables");
  add("train.eval_windows", "256", "held-out windows for loss reports, 0 = all");
  add("train.seed", "1", "");

  add("distill.prompts", "64", "generated continuations");
  add("distill.prompt_len", "16", "");
  add("distill.continuation_len", "112", "");
  add("distill.greedy_fraction", "0.5", "greedy share of each continuation, rest sampled");
  add("distill.mix", "0.5", "share of generated windows per exit-training batch");
  add("distill.learning_rate", "0.003", "");
  add("distill.epochs", "1", "");
  add("distill.steps_per_epoch", "150", "");
  add("distill.out", "runs/distill.csv", "before/after exit loss");
  add("distill.seed", "7", "");

  add("predictor.prompts", "200", "training-split prompts decoded for labels");
  add("predictor.prompt_seed", "11", "");
  add("predictor.prompt_len", "12", "bytes per label prompt");
  add("predictor.rollout", "10", "draft tokens per labelling round");
  add("predictor.max_len", "128", "");
  add("predictor.held_out_fraction", "0.3", "");
  add("predictor.split_seed", "5", "");
  add("predictor.learning_rate", "0.01", "");
  add("predictor.batch_size", "64", "");
  add("predictor.epochs", "20", "");
  add("predictor.seed", "3", "");

  add("paths.target", "runs/target.nlm", "trained target (exit block copied from its tail)");
  add("paths.bundle", "runs/bundle.nlm", "target plus distilled exit block");
  add("paths.labels", "runs/labels.nlm", "");
  add("paths.predictor", "runs/predictor.nlm", "");

  add("engine.max_len", "128", "output cap, prompt included");
  add("engine.draft_cap", "64", "");
  add("engine.stop_tokens", "", "comma-separated token ids");

  add("controller.kind", "beta-ts", "fixed | beta-ts | cali-ts");
  add("controller.k", "10", "draft length for fixed");
  add("controller.alpha", "1", "Beta prior");
  add("controller.beta", "1", "Beta prior");
  add("controller.update_mode", "literal", "literal | exact-count");
  add("controller.theta_hat", "0.5", "initial running estimate");
  add("controller.sigma_model", "0.2", "");
  add("controller.sigma_sample", "0.5", "");
  add("controller.variant", "full", "full | model-only");
  add("controller.estimate", "literal", "literal | rate");

  add("decode.prompts", "", "prompt file, one prompt per line");
  add("decode.seed", "1", "");
  add("decode.check_lossless", "false", "");
  add("decode.trace_out", "runs/decode_traces.jsonl", "");
  add("decode.csv_out", "runs/decode.csv", "");

  add("simulate.schedule", "constant:0.8", "constant:T | piecewise:A@P,B | sine:M,A,PERIOD");
  add("simulate.vocab_size", "64", "");
  add("simulate.prompt_len", "8", "");
  add("simulate.max_len", "512", "");
  add("simulate.draft_cost", "0.1", "T_d");
  add("simulate.target_cost", "1", "T_t");
  add("simulate.overhead", "0", "per verification");
  add("simulate.k_grid", "1,2,4,6,8,10,12,16", "");
  add("simulate.controllers", "fixed,beta-ts,cali-ts", "");
  add("simulate.seeds", "20", "");
  add("simulate.repetitions", "1", "");
  add("simulate.seed", "1", "base seed");
  add("simulate.threads", "0", "worker threads, 0 = one per core");
  add("simulate.out", "runs/simulate.csv", "");

  add("bench.prompts", "20", "held-out prompts");
  add("bench.prompt_len", "12", "");
  add("bench.prompt_seed", "13", "");
  add("bench.seeds", "3", "");
  add("bench.k_grid", "1,2,4,6,8,10,12,16", "");
  add("bench.ablations", "true", "");
  add("bench.out", "runs/bench.csv", "");
}

void RunConfig::add(const std::string& key, const std::string& value, const std::string& help) {
  order_.push_back({key, help});
  values_[key] = value;
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      apply_assignment(line);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

void RunConfig::apply_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("expected key = value, got '" + assignment + "'");
  }
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) != 0; }

const std::string& RunConfig::text(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::uint64_t RunConfig::u64(const std::string& key) const {
  const std::string& s = text(key);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError(key + " must be a non-negative integer, got '" + s + "'");
  }
  return v;
}

std::size_t RunConfig::size(const std::string& key) const {
  return static_cast<std::size_t>(u64(key));
}

double RunConfig::real(const std::string& key) const {
  const std::string& s = text(key);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + " must be a number, got '" + s + "'");
  }
}

bool RunConfig::flag(const std::string& key) const {
  const std::string& s = text(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(key + " must be true or false, got '" + s + "'");
}

std::vector<std::size_t> RunConfig::size_list(const std::string& key) const {
  std::vector<std::size_t> out;
  for (const std::string& item : split_commas(text(key))) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size()) {
      throw ConfigError(key + " must be a comma-separated list of integers, got '" + text(key) +
                        "'");
    }
    out.push_back(v);
  }
  return out;
}

std::vector<std::string> RunConfig::string_list(const std::string& key) const {
  return split_commas(text(key));
}

std::string RunConfig::dump() const {
  std::ostringstream out;
  std::string section;
  for (const Entry& e : order_) {
    if (section_of(e.key) != section) {
      if (!section.empty()) out << '\n';
      section = section_of(e.key);
      out << "# " << section << '\n';
    }
    out << e.key << " = " << values_.at(e.key);
    if (!e.help.empty()) out << "  # " << e.help;
    out << '\n';
  }
  return out.str();
}

NanoConfig RunConfig::nano_config() const {
  NanoConfig c;
  c.vocab_size = size("model.vocab_size");
  c.d_model = size("model.d_model");
  c.n_heads = size("model.n_heads");
  c.n_layers = size("model.n_layers");
  c.d_ff = size("model.d_ff");
  c.max_seq_len = size("model.max_seq_len");
  c.exit_after = size("model.exit_after");
  c.exit_depth = size("model.exit_depth");
  c.norm_eps = static_cast<float>(real("model.norm_eps"));
  c.rope_base = static_cast<float>(real("model.rope_base"));
  c.validate();
  return c;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.optimizer = parse_optimizer(text("train.optimizer"));
  t.learning_rate = real("train.learning_rate");
  t.momentum = real("train.momentum");
  t.batch_size = size("train.batch_size");
  t.epochs = size("train.epochs");
  t.steps_per_epoch = size("train.steps_per_epoch");
  t.seq_len = size("train.seq_len");
  t.grad_clip = real("train.grad_clip");
  t.eval_windows = size("train.eval_windows");
  t.seed = u64("train.seed");
  t.distill_mix = real("distill.mix");
  t.validate();
  return t;
}

TrainConfig RunConfig::exit_train_config() const {
  TrainConfig t = train_config();
  t.learning_rate = real("distill.learning_rate");
  t.epochs = size("distill.epochs");
  t.steps_per_epoch = size("distill.steps_per_epoch");
  t.seed = u64("distill.seed");
  t.validate();
  return t;
}

DistillConfig RunConfig::distill_config() const {
  DistillConfig d;
  d.prompts = size("distill.prompts");
  d.prompt_len = size("distill.prompt_len");
  d.continuation_len = size("distill.continuation_len");
  d.greedy_fraction = real("distill.greedy_fraction");
  d.seed = u64("distill.seed");
  return d;
}

LabelConfig RunConfig::label_config() const {
  LabelConfig l;
  l.rollout = size("predictor.rollout");
  l.max_len = size("predictor.max_len");
  return l;
}

PredictorTrainConfig RunConfig::predictor_train_config() const {
  PredictorTrainConfig p;
  p.learning_rate = real("predictor.learning_rate");
  p.batch_size = size("predictor.batch_size");
  p.epochs = size("predictor.epochs");
  p.seed = u64("predictor.seed");
  return p;
}

ControllerSpec RunConfig::controller_spec() const {
  ControllerSpec s;
  s.kind = parse_controller_kind(text("controller.kind"));
  s.k = size("controller.k");
  s.prior.alpha = real("controller.alpha");
  s.prior.beta = real("controller.beta");
  s.update_mode = parse_update_mode(text("controller.update_mode"));
  s.cali.theta_hat = real("controller.theta_hat");
  s.cali.sigma_model = real("controller.sigma_model");
  s.cali.sigma_sample = real("controller.sigma_sample");
  s.cali_variant = parse_cali_variant(text("controller.variant"));
  s.cali_estimate = parse_cali_estimate(text("controller.estimate"));
  return s;
}

EngineConfig RunConfig::engine_config() const {
  EngineConfig e;
  e.max_len = size("engine.max_len");
  e.draft_cap = size("engine.draft_cap");
  for (std::size_t id : size_list("engine.stop_tokens")) {
    e.stop_tokens.push_back(TokenId::checked(static_cast<std::int64_t>(id),
                                             size("model.vocab_size")));
  }
  e.controller = controller_spec();
  return e;
}

SimulateConfig RunConfig::simulate_config() const {
  SimulateConfig s;
  s.schedule = text("simulate.schedule");
  s.vocab_size = size("simulate.vocab_size");
  s.prompt_len = size("simulate.prompt_len");
  s.max_len = size("simulate.max_len");
  s.draft_cost = real("simulate.draft_cost");
  s.target_cost = real("simulate.target_cost");
  s.overhead = real("simulate.overhead");
  s.k_grid = size_list("simulate.k_grid");
  s.controllers = string_list("simulate.controllers");
  s.seeds = size("simulate.seeds");
  s.repetitions = size("simulate.repetitions");
  s.base_seed = u64("simulate.seed");
  s.draft_cap = size("engine.draft_cap");
  s.ts = controller_spec();
  s.labels = label_config();
  s.predictor = predictor_train_config();
  s.threads = size("simulate.threads");
  s.validate();
  return s;
}

}  // namespace spexit
