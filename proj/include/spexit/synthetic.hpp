#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "spexit/model.hpp"

namespace spexit {

/// Per-position probability that the synthetic draft agrees with the target.
class ThetaSchedule {
 public:
  static ThetaSchedule constant(double theta);
  /// theta_before for positions < boundary, theta_after from there on.
  static ThetaSchedule piecewise(double theta_before, std::size_t boundary, double theta_after);
  /// mean + amplitude * sin(2*pi*position/period), clamped to [0, 1].
  static ThetaSchedule sinusoidal(double mean, double amplitude, double period);
  /// Parses "constant:0.8", "piecewise:0.9@256,0.3" or "sine:0.6,0.3,128".
  static ThetaSchedule parse(std::string_view spec);

  [[nodiscard]] double operator()(std::size_t position) const { return fn_(position); }
  [[nodiscard]] const std::string& describe() const { return description_; }
  /// Change point of a piecewise schedule.
  [[nodiscard]] std::optional<std::size_t> boundary() const { return boundary_; }

 private:
  ThetaSchedule(std::function<double(std::size_t)> fn, std::string description,
                std::optional<std::size_t> boundary = std::nullopt)
      : fn_(std::move(fn)), description_(std::move(description)), boundary_(boundary) {}

  std::function<double(std::size_t)> fn_;
  std::string description_;
  std::optional<std::size_t> boundary_;
};

inline constexpr std::size_t kSyntheticHiddenSize = 8;

/// Draft/target pair realizing an independent Bernoulli agreement process.
///
/// The target emits a scripted token for every sequence position regardless
/// of content. The draft emits the same token with probability theta(p),
/// otherwise a token drawn uniformly from the rest of the vocabulary. Hidden
/// states are pseudo-random vectors whose first coordinate is 2*theta(p)-1,
/// so a learned predictor can recover the agreement probability.
class SyntheticPair : public ModelBundle {
 public:
  SyntheticPair(ThetaSchedule schedule, std::size_t vocab_size, std::uint64_t seed);
  SyntheticPair(const SyntheticPair&) = delete;
  SyntheticPair& operator=(const SyntheticPair&) = delete;
  ~SyntheticPair() override;

  [[nodiscard]] const LanguageModel& draft() const override;
  [[nodiscard]] const LanguageModel& target() const override;

  /// Token the target predicts for sequence position `position`.
  [[nodiscard]] TokenId target_token(std::size_t position) const;
  /// Token the draft predicts for sequence position `position`.
  [[nodiscard]] TokenId draft_token(std::size_t position) const;
  [[nodiscard]] const ThetaSchedule& schedule() const { return schedule_; }
  [[nodiscard]] std::size_t vocab_size() const { return vocab_size_; }

 private:
  class Side;

  ThetaSchedule schedule_;
  std::size_t vocab_size_;
  std::uint64_t seed_;
  std::unique_ptr<Side> draft_;
  std::unique_ptr<Side> target_;
};

/// Convenience constructor; throws PreconditionError when vocab_size < 2.
std::unique_ptr<SyntheticPair> synthetic_pair(ThetaSchedule schedule, std::size_t vocab_size,
                                              std::uint64_t seed);

}  // namespace spexit
