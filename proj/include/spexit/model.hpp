#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "spexit/core.hpp"

namespace spexit {

/// Next-token scores plus the final-layer hidden state at the emitted position.
struct StepOutput {
  std::vector<float> logits;
  std::vector<float> hidden;
};

/// Greedy choice over logits; ties go to the lowest token index.
TokenId argmax(std::span<const float> logits);

/// Per-session decode state of one model. Owned by exactly one session.
class SessionCache {
 public:
  virtual ~SessionCache() = default;

  /// Number of tokens consumed so far.
  [[nodiscard]] std::size_t position() const { return history_.size(); }
  [[nodiscard]] std::span<const TokenId> history() const { return history_; }
  [[nodiscard]] const void* owner() const { return owner_; }

 protected:
  explicit SessionCache(const void* owner) : owner_(owner) {}

  std::vector<TokenId> history_;

 private:
  const void* owner_;
};

/// Auto-regressive step contract shared by the neural and synthetic models.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  [[nodiscard]] virtual std::size_t vocab_size() const = 0;
  [[nodiscard]] virtual std::size_t hidden_size() const = 0;
  /// Largest number of positions a cache may hold; 0 means unbounded.
  [[nodiscard]] virtual std::size_t max_positions() const { return 0; }

  [[nodiscard]] virtual std::unique_ptr<SessionCache> new_cache() const = 0;

  /// Consumes `token` and returns the distribution over the next token.
  virtual StepOutput step(SessionCache& cache, TokenId token) const = 0;

  /// outputs[i] is the distribution after consuming tokens[0..=i]; values are
  /// bitwise identical to the equivalent sequence of `step` calls.
  virtual std::vector<StepOutput> step_batch(SessionCache& cache,
                                             std::span<const TokenId> tokens) const;

  /// Restores the cache to the state after its first `position` tokens.
  virtual void rollback(SessionCache& cache, std::size_t position) const = 0;

 protected:
  /// Throws PreconditionError unless `cache` was created by this model.
  void check_owner(const SessionCache& cache) const;
  void check_token(TokenId token) const;
};

/// Linked caches for one speculative-decoding session.
struct BundleSession {
  std::unique_ptr<SessionCache> draft;
  std::unique_ptr<SessionCache> target;
};

/// A target model plus the draft model that proposes tokens for it.
class ModelBundle {
 public:
  virtual ~ModelBundle() = default;

  [[nodiscard]] virtual const LanguageModel& draft() const = 0;
  [[nodiscard]] virtual const LanguageModel& target() const = 0;
  /// Caches that may share state between the draft and target sides.
  [[nodiscard]] virtual BundleSession open_session() const;
};

}  // namespace spexit
