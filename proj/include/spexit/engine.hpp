#pragma once

#include <cstddef>
#include <vector>

#include "spexit/controllers.hpp"
#include "spexit/core.hpp"
#include "spexit/model.hpp"
#include "spexit/rng.hpp"

namespace spexit {

struct EngineConfig {
  /// Cap on the output length, prompt included.
  std::size_t max_len = 512;
  ControllerSpec controller;
  /// Upper bound on tokens drafted in one round.
  std::size_t draft_cap = 64;
  /// Optional tokens that end generation once emitted.
  std::vector<TokenId> stop_tokens;

  void validate() const;
};

struct VerifyResult {
  std::size_t accepted_drafts = 0;
  TokenId bonus;
  /// Target final hidden state at the position that produced `bonus`.
  std::vector<float> bonus_hidden;
};

/// Greedy verification of `drafted` in one batched target pass.
///
/// The target cache must hold the committed output except its last token,
/// `pending`, so cache.position() == prefix_pos. The pass consumes
/// [pending, drafted...]; the accepted prefix is the longest run where each
/// draft equals the target's argmax before it, and the bonus is the target's
/// argmax at the first mismatch (or after the last draft). On return the
/// cache is rolled back to prefix_pos + accepted_drafts + 1.
VerifyResult verify(const LanguageModel& target, SessionCache& cache, std::size_t prefix_pos,
                    TokenId pending, const TokenSequence& drafted);

/// Speculative decoding with greedy verification. The output equals
/// autoregressive_reference for every controller and seed.
DecodeTrace decode(const ModelBundle& models, const TokenSequence& prompt,
                   const EngineConfig& config, Rng& rng);

/// Plain greedy decoding with the target model up to max_len tokens
/// (prompt included) or the first stop token.
TokenSequence autoregressive_reference(const LanguageModel& target, const TokenSequence& prompt,
                                       std::size_t max_len,
                                       const std::vector<TokenId>& stop_tokens = {});

}  // namespace spexit
