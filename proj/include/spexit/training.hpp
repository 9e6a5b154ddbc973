#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "spexit/controllers.hpp"
#include "spexit/nano_lm.hpp"
#include "spexit/rng.hpp"

namespace spexit {

/// Byte documents with a seeded train/held-out partition.
struct Corpus {
  std::vector<std::string> train;
  std::vector<std::string> held_out;
  /// Parallel to `train`: true for documents produced by the target model.
  std::vector<bool> generated;
};

/// Splits text into paragraphs (blank-line separated, whitespace trimmed).
std::vector<std::string> split_documents(const std::string& text);

/// Seeded partition: round(held_out_fraction * n) documents, at least one,
/// go to the held-out side. Throws when fewer than two documents exist.
Corpus make_corpus(std::vector<std::string> documents, double held_out_fraction,
                   std::uint64_t seed);

/// Reads and splits a text file. Throws ConfigError naming a missing path.
Corpus load_corpus(const std::filesystem::path& path, double held_out_fraction,
                   std::uint64_t seed);

enum class Optimizer { Sgd, Momentum, Adam };

std::string_view to_string(Optimizer optimizer);
Optimizer parse_optimizer(std::string_view text);

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 4;
  /// Cap on optimizer steps per epoch (0 = one pass over the training windows).
  std::size_t steps_per_epoch = 0;
  std::size_t seq_len = 64;
  Optimizer optimizer = Optimizer::Adam;
  double momentum = 0.9;
  /// Global gradient-norm clip (0 disables).
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  /// Fraction of self-generated windows in each exit-training batch.
  double distill_mix = 0.5;
  /// Held-out windows used for loss evaluation (0 = all).
  std::size_t eval_windows = 256;

  void validate() const;
};

/// Progress callback: (epoch, step, training loss of the step).
using TrainLog = std::function<void(std::size_t, std::size_t, double)>;

/// (seq_len + 1)-byte windows of the concatenated documents (each followed
/// by a newline), taken at stride seq_len so every byte after the first is a
/// prediction target exactly once. A trailing partial window is dropped.
std::vector<std::vector<TokenId>> make_windows(const std::vector<std::string>& documents,
                                               std::size_t seq_len);

/// Mean next-token cross-entropy of the full target over the windows.
double target_loss(const NanoConfig& config, const NanoWeights& weights,
                   const std::vector<std::vector<TokenId>>& windows);
/// Mean next-token cross-entropy of the early-exit path over the windows.
double exit_loss(const NanoConfig& config, const NanoWeights& weights,
                 const std::vector<std::vector<TokenId>>& windows);

/// Teacher-forced logits for every position of one sequence (training path).
std::vector<std::vector<float>> sequence_logits(const NanoConfig& config,
                                                const NanoWeights& weights,
                                                const std::vector<TokenId>& tokens, bool exit_path);

/// Gradients of the mean cross-entropy over `windows` with respect to every
/// tensor (exit path: only exit tensors are non-zero).
NanoWeights loss_gradients(const NanoConfig& config, const NanoWeights& weights,
                           const std::vector<std::vector<TokenId>>& windows, bool exit_path,
                           double* loss = nullptr);

/// Trains the target from random initialization; the exit block is then
/// initialized from the trained tail. Throws Error on a non-finite loss.
NanoWeights train_target(const NanoConfig& config, const Corpus& corpus, const TrainConfig& cfg,
                         const TrainLog& log = {});

/// `count` byte strings of length `len` cut at seeded offsets from documents
/// at least that long. Throws PreconditionError when no document qualifies.
std::vector<std::string> sample_prompts(const std::vector<std::string>& documents,
                                        std::size_t count, std::size_t len, std::uint64_t seed);

struct DistillConfig {
  std::size_t prompts = 64;
  std::size_t prompt_len = 16;
  std::size_t continuation_len = 96;
  /// Share of each continuation decoded greedily; the rest is sampled at T=1.
  double greedy_fraction = 0.5;
  std::uint64_t seed = 7;
};

/// Continuations of corpus-prefix prompts, generated by the target. Each
/// returned document is prompt + continuation.
std::vector<std::string> self_distill_generate(const NanoConfig& config,
                                               const NanoWeights& weights,
                                               const std::vector<std::string>& prompt_source,
                                               const DistillConfig& cfg);

struct ExitTrainReport {
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::size_t generated_windows_used = 0;
  std::size_t corpus_windows_used = 0;
};

/// Trains only the exit block, exit norm and exit head on a mix of corpus
/// and generated windows. Every other tensor is returned bit-identical.
NanoWeights train_exit(const NanoConfig& config, const NanoWeights& weights,
                       const Corpus& corpus, const std::vector<std::string>& generated,
                       const TrainConfig& cfg, ExitTrainReport* report = nullptr,
                       const TrainLog& log = {});

/// Labelled predictor inputs, one row per judged draft token.
struct PredictorLabels {
  std::size_t d_model = 0;
  std::vector<float> target_hidden;
  std::vector<float> draft_hidden;
  std::vector<std::uint32_t> step;
  std::vector<std::uint8_t> label;

  [[nodiscard]] std::size_t size() const { return label.size(); }
  [[nodiscard]] double positive_rate() const;
  void append(const PredictorLabels& other);
};

struct LabelConfig {
  /// Drafting steps per rollout round.
  std::size_t rollout = 10;
  /// Output length cap per prompt, prompt included.
  std::size_t max_len = 128;
};

/// Drafting rollouts from each prompt: the draft proposes `rollout` tokens
/// greedily; tokens up to and including the first disagreement with the
/// target's greedy continuation are labelled (1 = agree). The output then
/// advances by the agreed tokens plus the target's next token.
PredictorLabels make_predictor_labels(const ModelBundle& models,
                                      const std::vector<TokenSequence>& prompts,
                                      const LabelConfig& cfg);

void save_labels(const PredictorLabels& labels, const std::filesystem::path& path);
PredictorLabels load_labels(const std::filesystem::path& path);

/// Seeded row split into (train, held-out).
std::pair<PredictorLabels, PredictorLabels> split_labels(const PredictorLabels& labels,
                                                         double held_out_fraction,
                                                         std::uint64_t seed);

/// Returns a copy with labels permuted by a seeded shuffle.
PredictorLabels shuffle_labels(const PredictorLabels& labels, std::uint64_t seed);

struct PredictorTrainConfig {
  double learning_rate = 1e-2;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  std::uint64_t seed = 3;
};

/// Cross-entropy training starting from identity position maps and a zero
/// mix map. Throws PreconditionError when only one class is present.
PredictorWeights train_predictor(const PredictorLabels& labels, const PredictorTrainConfig& cfg);

/// Area under the ROC curve (Mann-Whitney, ties count one half).
double roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);

/// Predictor AUC on a label set.
double predictor_auc(const PredictorWeights& predictor, const PredictorLabels& labels);

struct PredictorEvaluation {
  PredictorLabels labels;
  std::size_t train_size = 0;
  std::size_t held_out_size = 0;
  PredictorWeights predictor;
  double held_out_auc = 0.0;
  /// Same recipe trained on permuted training labels, scored on the true
  /// held-out labels.
  double shuffled_control_auc = 0.0;
};

/// Labels decodes of `prompts`, splits, trains the predictor and the
/// shuffled-label control, and scores both on the held-out split.
PredictorEvaluation evaluate_predictor(const ModelBundle& models,
                                       const std::vector<TokenSequence>& prompts,
                                       const LabelConfig& labels, double held_out_fraction,
                                       std::uint64_t split_seed, const PredictorTrainConfig& cfg);

}  // namespace spexit
