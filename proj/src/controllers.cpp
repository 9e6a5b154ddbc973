#include "spexit/controllers.hpp"

#include <algorithm>
#include <cmath>

#include "spexit/container.hpp"
#include "spexit/kernels.hpp"

namespace spexit {

ControllerDecision fixed_k_decide(std::size_t k, std::size_t drafted_so_far) {
  if (k < 1) throw ConfigError("fixed-K controller needs k >= 1");
  return {drafted_so_far < k, std::nullopt};
}

void BetaState::validate() const {
  if (!(alpha > 0.0) || !(beta > 0.0) || !std::isfinite(alpha) || !std::isfinite(beta)) {
    throw PreconditionError("beta parameters must be positive and finite");
  }
}

double BetaState::variance() const {
  const double s = alpha + beta;
  return alpha * beta / (s * s * (s + 1.0));
}

std::string_view to_string(UpdateMode mode) {
  return mode == UpdateMode::Literal ? "literal" : "exact-count";
}

UpdateMode parse_update_mode(std::string_view text) {
  if (text == "literal") return UpdateMode::Literal;
  if (text == "exact-count") return UpdateMode::ExactCount;
  throw ConfigError("unknown update mode '" + std::string(text) +
                    "' (expected literal or exact-count)");
}

TrialCounts trial_counts(std::size_t accepted_drafts, std::size_t drafted, UpdateMode mode) {
  if (drafted < 1 || accepted_drafts > drafted) {
    throw PreconditionError("update needs 0 <= accepted <= drafted and drafted >= 1");
  }
  const std::size_t q = accepted_drafts;
  if (mode == UpdateMode::Literal) {
    return {q == 0 ? 0 : q - 1, std::min(q + 1, drafted)};
  }
  return {q, q + (q < drafted ? 1 : 0)};
}

ControllerDecision beta_sample(const BetaState& state, Rng& rng) {
  state.validate();
  const double theta = std::clamp(rng.beta(state.alpha, state.beta), 0.0, 1.0);
  return {rng.bernoulli(theta), theta};
}

BetaState beta_update(const BetaState& state, std::size_t accepted_drafts, std::size_t drafted,
                      UpdateMode mode) {
  state.validate();
  const TrialCounts c = trial_counts(accepted_drafts, drafted, mode);
  return {state.alpha + static_cast<double>(c.successes),
          state.beta + static_cast<double>(c.trials - c.successes)};
}

void CaliState::validate() const {
  if (!(theta_hat >= 0.0 && theta_hat <= 1.0)) {
    throw PreconditionError("theta_hat must lie in [0, 1]");
  }
  if (!(sigma_model > 0.0) || !(sigma_sample > 0.0)) {
    throw PreconditionError("sigma_model and sigma_sample must be positive");
  }
}

GaussianMoments cali_moments(const CaliState& state, double theta_model) {
  state.validate();
  const double m2 = state.sigma_model * state.sigma_model;
  const double s2 = state.sigma_sample * state.sigma_sample;
  const double nm2 = static_cast<double>(state.n) * m2;
  const double denom = nm2 + s2;
  return {s2 / denom * theta_model + nm2 / denom * state.theta_hat, m2 * s2 / (s2 + nm2)};
}

ControllerDecision cali_sample(const CaliState& state, double theta_model, Rng& rng) {
  if (!(theta_model >= 0.0 && theta_model <= 1.0)) {
    throw PreconditionError("model prediction must lie in [0, 1]");
  }
  const GaussianMoments g = cali_moments(state, theta_model);
  const double theta = std::clamp(rng.normal(g.mean, std::sqrt(g.variance)), 0.0, 1.0);
  return {rng.bernoulli(theta), theta};
}

CaliState cali_update(const CaliState& state, std::size_t accepted_total) {
  state.validate();
  if (accepted_total < 1) throw PreconditionError("cali_update needs at least one verified token");
  CaliState next = state;
  const double q = static_cast<double>(accepted_total);
  next.t = state.t + accepted_total;
  const double t = static_cast<double>(next.t);
  next.theta_hat = (state.theta_hat * (t - q + 1.0) + q) / (t + 1.0);
  next.n = state.n + 1;
  return next;
}

PredictorWeights PredictorWeights::zeros(std::size_t d_model) {
  if (d_model == 0) throw PreconditionError("predictor needs a positive hidden size");
  PredictorWeights p;
  p.d_model = d_model;
  p.mix = Tensor::zeros({2, 2 * d_model});
  for (Tensor& w : p.position) w = Tensor::zeros({d_model, d_model});
  return p;
}

PredictorWeights PredictorWeights::identity(std::size_t d_model) {
  PredictorWeights p = zeros(d_model);
  for (Tensor& w : p.position) {
    for (std::size_t i = 0; i < d_model; ++i) w.values[i * d_model + i] = 1.0f;
  }
  return p;
}

std::size_t predictor_slot(std::size_t i) {
  if (i < 1) throw PreconditionError("draft step index starts at 1");
  return std::min(i, kPredictorPositions) - 1;
}

float predictor_score(const PredictorWeights& pred, std::span<const float> target_hidden,
                      std::span<const float> draft_hidden, std::size_t i) {
  const std::size_t d = pred.d_model;
  if (target_hidden.size() != d || draft_hidden.size() != d) {
    throw PreconditionError("predictor hidden size " + std::to_string(d) +
                            " does not match inputs (" + std::to_string(target_hidden.size()) +
                            ", " + std::to_string(draft_hidden.size()) + ")");
  }
  std::vector<float> z(2 * d);
  kernels::vec_mat(target_hidden.data(), pred.position[predictor_slot(i)].data(), d, d, z.data());
  std::copy(draft_hidden.begin(), draft_hidden.end(), z.begin() + static_cast<std::ptrdiff_t>(d));
  const float logit0 = kernels::dot(pred.mix.data(), z.data(), 2 * d);
  const float logit1 = kernels::dot(pred.mix.data() + 2 * d, z.data(), 2 * d);
  return logit1 - logit0;
}

double cali_predict(const PredictorWeights& pred, std::span<const float> target_hidden,
                    std::span<const float> draft_hidden, std::size_t i) {
  const double s = predictor_score(pred, target_hidden, draft_hidden, i);
  return 1.0 / (1.0 + std::exp(-s));
}

void save_predictor(const PredictorWeights& pred, const std::filesystem::path& path) {
  Container c;
  c.meta = {{"kind", "predictor"}, {"d_model", pred.d_model}};
  c.tensors.push_back({"Wp", pred.mix});
  for (std::size_t i = 0; i < kPredictorPositions; ++i) {
    c.tensors.push_back({"Wi." + std::to_string(i + 1), pred.position[i]});
  }
  write_container(path, c);
}

PredictorWeights load_predictor(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.meta.value("kind", "") != "predictor") {
    throw CheckpointError(path.string() + " does not hold a predictor");
  }
  PredictorWeights p = PredictorWeights::zeros(c.meta.at("d_model").get<std::size_t>());
  auto take = [&](const std::string& name, Tensor& into) {
    const Tensor& t = c.at(name);
    if (t.shape != into.shape) throw CheckpointError("predictor tensor '" + name + "' has wrong shape");
    into = t;
  };
  take("Wp", p.mix);
  for (std::size_t i = 0; i < kPredictorPositions; ++i) {
    take("Wi." + std::to_string(i + 1), p.position[i]);
  }
  return p;
}

std::string_view to_string(ControllerKind kind) {
  switch (kind) {
    case ControllerKind::FixedK: return "fixed";
    case ControllerKind::BetaTS: return "beta-ts";
    case ControllerKind::CaliTS: return "cali-ts";
  }
  return "?";
}

ControllerKind parse_controller_kind(std::string_view text) {
  if (text == "fixed") return ControllerKind::FixedK;
  if (text == "beta-ts" || text == "beta") return ControllerKind::BetaTS;
  if (text == "cali-ts" || text == "cali") return ControllerKind::CaliTS;
  throw ConfigError("unknown controller '" + std::string(text) +
                    "' (expected fixed, beta-ts or cali-ts)");
}

std::string_view to_string(CaliVariant variant) {
  return variant == CaliVariant::Full ? "full" : "model-only";
}

CaliVariant parse_cali_variant(std::string_view text) {
  if (text == "full") return CaliVariant::Full;
  if (text == "model-only") return CaliVariant::ModelOnly;
  throw ConfigError("unknown cali variant '" + std::string(text) +
                    "' (expected full or model-only)");
}

std::string_view to_string(CaliEstimate estimate) {
  return estimate == CaliEstimate::Literal ? "literal" : "rate";
}

CaliEstimate parse_cali_estimate(std::string_view text) {
  if (text == "literal") return CaliEstimate::Literal;
  if (text == "rate") return CaliEstimate::Rate;
  throw ConfigError("unknown cali estimate '" + std::string(text) +
                    "' (expected literal or rate)");
}

void ControllerSpec::validate() const {
  switch (kind) {
    case ControllerKind::FixedK:
      if (k < 1) throw ConfigError("controller.k must be >= 1");
      break;
    case ControllerKind::BetaTS:
      if (!(prior.alpha > 0.0) || !(prior.beta > 0.0)) {
        throw ConfigError("controller.alpha0 and controller.beta0 must be positive");
      }
      break;
    case ControllerKind::CaliTS:
      if (!(cali.sigma_model > 0.0) || !(cali.sigma_sample > 0.0)) {
        throw ConfigError("controller.sigma_model and controller.sigma_sample must be positive");
      }
      if (!(cali.theta_hat >= 0.0 && cali.theta_hat <= 1.0)) {
        throw ConfigError("controller.theta_hat0 must lie in [0, 1]");
      }
      if (!predictor) throw ConfigError("cali-ts needs a predictor");
      break;
  }
}

std::unique_ptr<Controller> make_controller(const ControllerSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case ControllerKind::FixedK: return std::make_unique<FixedKController>(spec.k);
    case ControllerKind::BetaTS:
      return std::make_unique<BetaController>(spec.prior, spec.update_mode);
    case ControllerKind::CaliTS:
      return std::make_unique<CaliController>(spec.cali, spec.predictor, spec.cali_variant,
                                              spec.cali_estimate);
  }
  throw ConfigError("unknown controller kind");
}

FixedKController::FixedKController(std::size_t k) : k_(k) { fixed_k_decide(k, 0); }

ControllerDecision FixedKController::decide(const DraftContext& context, Rng&) {
  return fixed_k_decide(k_, context.drafted_so_far);
}

std::string FixedKController::name() const { return "fixed"; }

BetaController::BetaController(BetaState prior, UpdateMode mode) : state_(prior), mode_(mode) {
  state_.validate();
}

ControllerDecision BetaController::decide(const DraftContext&, Rng& rng) {
  return beta_sample(state_, rng);
}

void BetaController::observe(std::size_t accepted_drafts, std::size_t drafted) {
  state_ = beta_update(state_, accepted_drafts, drafted, mode_);
}

CaliController::CaliController(CaliState initial,
                               std::shared_ptr<const PredictorWeights> predictor,
                               CaliVariant variant, CaliEstimate estimate)
    : state_(initial),
      predictor_(std::move(predictor)),
      variant_(variant),
      estimate_(estimate),
      prior_theta_hat_(initial.theta_hat) {
  state_.validate();
  if (!predictor_) throw ConfigError("cali-ts needs a predictor");
}

ControllerDecision CaliController::decide(const DraftContext& context, Rng& rng) {
  const double theta_model = cali_predict(*predictor_, context.target_hidden,
                                          context.draft_hidden, context.drafted_so_far);
  return cali_sample(state_, theta_model, rng);
}

void CaliController::observe(std::size_t accepted_drafts, std::size_t drafted) {
  const TrialCounts judged = trial_counts(accepted_drafts, drafted, UpdateMode::ExactCount);
  if (estimate_ == CaliEstimate::Literal) {
    state_ = cali_update(state_, accepted_drafts + 1);
  } else {
    accepted_sum_ += judged.successes;
    judged_sum_ += judged.trials;
    state_.theta_hat = (prior_theta_hat_ + static_cast<double>(accepted_sum_)) /
                       (1.0 + static_cast<double>(judged_sum_));
    state_.t += accepted_drafts + 1;
    state_.n += 1;
  }
  if (variant_ == CaliVariant::ModelOnly) state_.n = 0;
}

}  // namespace spexit
