#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spexit/nano_lm.hpp"
#include "spexit/rng.hpp"

namespace spexit {

/// Whether to draft another token, plus the theta drawn for the choice.
struct ControllerDecision {
  bool continue_drafting = false;
  std::optional<double> theta_sampled;
};

/// Continue iff drafted_so_far < k. Throws ConfigError when k < 1.
ControllerDecision fixed_k_decide(std::size_t k, std::size_t drafted_so_far);

struct BetaState {
  double alpha = 1.0;
  double beta = 1.0;

  void validate() const;
  [[nodiscard]] double mean() const { return alpha / (alpha + beta); }
  [[nodiscard]] double variance() const;
};

/// How a verification round is turned into (successes, trials).
///
/// Literal: r = max(q - 1, 0), n = min(q + 1, drafted), where q is the
/// number of accepted drafts. ExactCount: r = q, n = q + 1 when a draft was
/// rejected, else q; every judged draft token counts once.
enum class UpdateMode { Literal, ExactCount };

std::string_view to_string(UpdateMode mode);
UpdateMode parse_update_mode(std::string_view text);

struct TrialCounts {
  std::size_t successes = 0;
  std::size_t trials = 0;
};
TrialCounts trial_counts(std::size_t accepted_drafts, std::size_t drafted, UpdateMode mode);

ControllerDecision beta_sample(const BetaState& state, Rng& rng);
BetaState beta_update(const BetaState& state, std::size_t accepted_drafts, std::size_t drafted,
                      UpdateMode mode);

/// Calibrated-Gaussian belief over the acceptance probability.
struct CaliState {
  double theta_hat = 0.5;
  std::size_t n = 0;
  double sigma_model = 0.2;
  double sigma_sample = 0.5;
  std::size_t t = 0;

  void validate() const;
};

struct GaussianMoments {
  double mean = 0.0;
  double variance = 0.0;
};

/// Blend of the model prediction and the running estimate, weighted by n.
GaussianMoments cali_moments(const CaliState& state, double theta_model);
/// theta ~ N(mean, variance) clipped to [0, 1], then chi ~ Bernoulli(theta).
ControllerDecision cali_sample(const CaliState& state, double theta_model, Rng& rng);
/// theta_hat' = (theta_hat * (t' - q + 1) + q) / (t' + 1) with t' = t + q,
/// n' = n + 1. Requires q >= 1.
CaliState cali_update(const CaliState& state, std::size_t accepted_total);

inline constexpr std::size_t kPredictorPositions = 10;

/// Single-layer acceptance predictor: the target hidden state is mapped by a
/// per-position matrix (row-vector convention, h * W_i), concatenated with
/// the draft hidden state, and scored by a two-logit map.
struct PredictorWeights {
  std::size_t d_model = 0;
  /// 2 x 2*d_model; score = logit_1 - logit_0.
  Tensor mix;
  std::array<Tensor, kPredictorPositions> position;

  static PredictorWeights zeros(std::size_t d_model);
  /// Identity position matrices and a zero mix map.
  static PredictorWeights identity(std::size_t d_model);

  friend bool operator==(const PredictorWeights&, const PredictorWeights&) = default;
};

/// Index into `position` for draft step i >= 1 (clamped to 10).
std::size_t predictor_slot(std::size_t i);

/// Pre-sigmoid score logit_1 - logit_0.
float predictor_score(const PredictorWeights& pred, std::span<const float> target_hidden,
                      std::span<const float> draft_hidden, std::size_t i);
/// sigmoid(predictor_score(...)) in (0, 1).
double cali_predict(const PredictorWeights& pred, std::span<const float> target_hidden,
                    std::span<const float> draft_hidden, std::size_t i);

void save_predictor(const PredictorWeights& pred, const std::filesystem::path& path);
PredictorWeights load_predictor(const std::filesystem::path& path);

/// Inputs available to a controller after a draft token is produced.
struct DraftContext {
  /// Tokens drafted this round, including the one just produced.
  std::size_t drafted_so_far = 0;
  /// Target final hidden state at the last verified position.
  std::span<const float> target_hidden;
  /// Draft final hidden state that produced the newest token.
  std::span<const float> draft_hidden;
};

/// Per-session drafting-length policy.
class Controller {
 public:
  virtual ~Controller() = default;

  virtual ControllerDecision decide(const DraftContext& context, Rng& rng) = 0;
  /// Called once per round with the verification outcome.
  virtual void observe(std::size_t accepted_drafts, std::size_t drafted) = 0;
  [[nodiscard]] virtual std::string name() const = 0;
};

enum class ControllerKind { FixedK, BetaTS, CaliTS };

std::string_view to_string(ControllerKind kind);
ControllerKind parse_controller_kind(std::string_view text);

/// Which terms of the calibrated estimate are active.
///
/// Full blends model and sampling prediction. ModelOnly keeps n at 0 so the
/// draw is always centred on the model prediction.
enum class CaliVariant { Full, ModelOnly };

std::string_view to_string(CaliVariant variant);
CaliVariant parse_cali_variant(std::string_view text);

/// How the running estimate theta_hat is advanced after each round.
///
/// Literal applies cali_update with the round's accepted-plus-bonus count.
/// Rate keeps theta_hat at (theta_hat_0 + accepted) / (1 + judged) summed over
/// rounds, judged counted as in UpdateMode::ExactCount.
enum class CaliEstimate { Literal, Rate };

std::string_view to_string(CaliEstimate estimate);
CaliEstimate parse_cali_estimate(std::string_view text);

struct ControllerSpec {
  ControllerKind kind = ControllerKind::BetaTS;
  std::size_t k = 10;
  BetaState prior;
  UpdateMode update_mode = UpdateMode::Literal;
  CaliState cali;
  CaliVariant cali_variant = CaliVariant::Full;
  CaliEstimate cali_estimate = CaliEstimate::Literal;
  /// Required for CaliTS.
  std::shared_ptr<const PredictorWeights> predictor;

  void validate() const;
};

std::unique_ptr<Controller> make_controller(const ControllerSpec& spec);

class FixedKController : public Controller {
 public:
  explicit FixedKController(std::size_t k);
  ControllerDecision decide(const DraftContext& context, Rng& rng) override;
  void observe(std::size_t, std::size_t) override {}
  [[nodiscard]] std::string name() const override;

 private:
  std::size_t k_;
};

class BetaController : public Controller {
 public:
  BetaController(BetaState prior, UpdateMode mode);
  ControllerDecision decide(const DraftContext& context, Rng& rng) override;
  void observe(std::size_t accepted_drafts, std::size_t drafted) override;
  [[nodiscard]] std::string name() const override { return "beta-ts"; }
  [[nodiscard]] const BetaState& state() const { return state_; }

 private:
  BetaState state_;
  UpdateMode mode_;
};

class CaliController : public Controller {
 public:
  CaliController(CaliState initial, std::shared_ptr<const PredictorWeights> predictor,
                 CaliVariant variant, CaliEstimate estimate);
  ControllerDecision decide(const DraftContext& context, Rng& rng) override;
  void observe(std::size_t accepted_drafts, std::size_t drafted) override;
  [[nodiscard]] std::string name() const override { return "cali-ts"; }
  [[nodiscard]] const CaliState& state() const { return state_; }

 private:
  CaliState state_;
  std::shared_ptr<const PredictorWeights> predictor_;
  CaliVariant variant_;
  CaliEstimate estimate_;
  double prior_theta_hat_;
  std::size_t accepted_sum_ = 0;
  std::size_t judged_sum_ = 0;
};

}  // namespace spexit
