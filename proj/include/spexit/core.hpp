#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spexit {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user-supplied configuration or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A violated operation precondition (programming or data error).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Unreadable, truncated or inconsistent checkpoint file.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Index into a vocabulary. Bounds are checked by `TokenId::checked` and by
/// every TokenSequence that stores one.
struct TokenId {
  std::int32_t value = 0;

  constexpr TokenId() = default;
  constexpr explicit TokenId(std::int32_t v) : value(v) {}

  static TokenId checked(std::int64_t v, std::size_t vocab_size);

  friend constexpr auto operator<=>(TokenId, TokenId) = default;
};

/// Ordered vocabulary-index sequence; append-only during decoding.
class TokenSequence {
 public:
  explicit TokenSequence(std::size_t vocab_size);
  TokenSequence(std::size_t vocab_size, std::span<const TokenId> tokens);

  static TokenSequence from_bytes(std::string_view bytes);

  void push_back(TokenId token);
  void append(std::span<const TokenId> tokens);
  /// Drops everything after the first `length` tokens.
  void truncate(std::size_t length);

  [[nodiscard]] std::size_t vocab_size() const { return vocab_size_; }
  [[nodiscard]] std::size_t size() const { return tokens_.size(); }
  [[nodiscard]] bool empty() const { return tokens_.empty(); }
  [[nodiscard]] TokenId operator[](std::size_t i) const { return tokens_[i]; }
  [[nodiscard]] TokenId back() const { return tokens_.back(); }
  [[nodiscard]] std::span<const TokenId> view() const { return tokens_; }
  [[nodiscard]] auto begin() const { return tokens_.begin(); }
  [[nodiscard]] auto end() const { return tokens_.end(); }

  /// Byte string for vocabularies of size <= 256.
  [[nodiscard]] std::string to_bytes() const;

  friend bool operator==(const TokenSequence& a, const TokenSequence& b) {
    return a.vocab_size_ == b.vocab_size_ && a.tokens_ == b.tokens_;
  }

 private:
  std::size_t vocab_size_;
  std::vector<TokenId> tokens_;
};

enum class StopReason { ControllerStop, LengthCap, Rejection };

std::string_view to_string(StopReason reason);

/// One drafting/verification cycle.
struct DraftRound {
  TokenSequence drafted;
  std::size_t accepted_drafts = 0;
  TokenId bonus;
  StopReason stop_reason = StopReason::ControllerStop;
  double draft_time = 0.0;
  double verify_time = 0.0;
  double sample_time = 0.0;

  explicit DraftRound(std::size_t vocab_size) : drafted(vocab_size) {}

  /// Throws PreconditionError when the round violates its invariants.
  void validate() const;
};

struct PhaseTimes {
  double drafting = 0.0;
  double verification = 0.0;
  double sampling = 0.0;
  double other = 0.0;

  [[nodiscard]] double total() const { return drafting + verification + sampling + other; }
};

inline constexpr std::size_t kNoLengthCap = std::numeric_limits<std::size_t>::max();

/// Full per-round log of a decode session.
struct DecodeTrace {
  std::size_t prompt_len = 0;
  /// Hard bound on |output| (prompt included).
  std::size_t max_len = kNoLengthCap;
  /// Generation ends right after any of these tokens is emitted.
  std::vector<TokenId> stop_tokens;
  std::vector<DraftRound> rounds;
  TokenSequence output;
  PhaseTimes wall_times;
  bool stopped = false;

  explicit DecodeTrace(std::size_t vocab_size) : output(vocab_size) {}

  [[nodiscard]] std::size_t new_tokens() const { return output.size() - prompt_len; }
  /// True once the length cap is reached or a stop token was emitted.
  [[nodiscard]] bool finished() const { return stopped || output.size() >= max_len; }
};

/// Starts a trace whose output is the prompt. Throws on an empty prompt.
DecodeTrace new_trace(const TokenSequence& prompt, std::size_t max_len = kNoLengthCap);

/// Appends the round's accepted prefix and bonus token, cuts the output after
/// the first stop token among the appended ones, then applies the length cap.
/// Phase totals accumulate the round's timings. Throws on a finished trace.
void push_round(DecodeTrace& trace, DraftRound round);

}  // namespace spexit
