#include "spexit/core.hpp"

#include <algorithm>
#include <string>

namespace spexit {

TokenId TokenId::checked(std::int64_t v, std::size_t vocab_size) {
  if (v < 0 || static_cast<std::uint64_t>(v) >= vocab_size) {
    throw PreconditionError("token " + std::to_string(v) + " outside vocabulary of size " +
                            std::to_string(vocab_size));
  }
  return TokenId(static_cast<std::int32_t>(v));
}

TokenSequence::TokenSequence(std::size_t vocab_size) : vocab_size_(vocab_size) {
  if (vocab_size == 0) throw PreconditionError("vocabulary size must be positive");
}

TokenSequence::TokenSequence(std::size_t vocab_size, std::span<const TokenId> tokens)
    : TokenSequence(vocab_size) {
  append(tokens);
}

TokenSequence TokenSequence::from_bytes(std::string_view bytes) {
  TokenSequence seq(256);
  seq.tokens_.reserve(bytes.size());
  for (unsigned char c : bytes) seq.tokens_.emplace_back(static_cast<std::int32_t>(c));
  return seq;
}

void TokenSequence::push_back(TokenId token) {
  tokens_.push_back(TokenId::checked(token.value, vocab_size_));
}

void TokenSequence::append(std::span<const TokenId> tokens) {
  for (TokenId t : tokens) push_back(t);
}

void TokenSequence::truncate(std::size_t length) {
  if (length < tokens_.size()) tokens_.resize(length);
}

std::string TokenSequence::to_bytes() const {
  if (vocab_size_ > 256) throw PreconditionError("to_bytes needs a byte-level vocabulary");
  std::string out;
  out.reserve(tokens_.size());
  for (TokenId t : tokens_) out.push_back(static_cast<char>(static_cast<unsigned char>(t.value)));
  return out;
}

std::string_view to_string(StopReason reason) {
  switch (reason) {
    case StopReason::ControllerStop: return "controller_stop";
    case StopReason::LengthCap: return "length_cap";
    case StopReason::Rejection: return "rejection";
  }
  return "unknown";
}

void DraftRound::validate() const {
  if (drafted.empty()) throw PreconditionError("draft round has no drafted tokens");
  if (accepted_drafts > drafted.size()) {
    throw PreconditionError("accepted_drafts exceeds drafted length");
  }
  const bool rejected = accepted_drafts < drafted.size();
  if (rejected != (stop_reason == StopReason::Rejection)) {
    throw PreconditionError("stop_reason must be Rejection exactly when a draft was rejected");
  }
  TokenId::checked(bonus.value, drafted.vocab_size());
  if (!(draft_time >= 0.0) || !(verify_time >= 0.0) || !(sample_time >= 0.0)) {
    throw PreconditionError("round timings must be non-negative");
  }
}

DecodeTrace new_trace(const TokenSequence& prompt, std::size_t max_len) {
  if (prompt.empty()) throw PreconditionError("empty prompt");
  if (max_len < prompt.size()) throw PreconditionError("length cap is shorter than the prompt");
  DecodeTrace trace(prompt.vocab_size());
  trace.prompt_len = prompt.size();
  trace.max_len = max_len;
  trace.output = prompt;
  return trace;
}

void push_round(DecodeTrace& trace, DraftRound round) {
  round.validate();
  if (round.drafted.vocab_size() != trace.output.vocab_size()) {
    throw PreconditionError("round vocabulary differs from trace vocabulary");
  }
  if (trace.finished()) throw PreconditionError("push_round on a finished trace");
  const std::size_t start = trace.output.size();
  trace.output.append(round.drafted.view().first(round.accepted_drafts));
  trace.output.push_back(round.bonus);
  for (std::size_t i = start; i < trace.output.size(); ++i) {
    if (std::find(trace.stop_tokens.begin(), trace.stop_tokens.end(), trace.output[i]) !=
        trace.stop_tokens.end()) {
      trace.output.truncate(i + 1);
      trace.stopped = true;
      break;
    }
  }
  trace.output.truncate(trace.max_len);
  trace.wall_times.drafting += round.draft_time;
  trace.wall_times.verification += round.verify_time;
  trace.wall_times.sampling += round.sample_time;
  trace.rounds.push_back(std::move(round));
}

}  // namespace spexit
