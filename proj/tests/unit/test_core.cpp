#include <gtest/gtest.h>

#include "spexit/core.hpp"

namespace spexit {
namespace {

TokenSequence seq(std::initializer_list<int> values, std::size_t vocab = 16) {
  TokenSequence s(vocab);
  for (int v : values) s.push_back(TokenId::checked(v, vocab));
  return s;
}

DraftRound round_of(std::initializer_list<int> drafted, std::size_t accepted, int bonus) {
  DraftRound r(16);
  r.drafted = seq(drafted);
  r.accepted_drafts = accepted;
  r.bonus = TokenId(bonus);
  r.stop_reason = accepted < r.drafted.size() ? StopReason::Rejection : StopReason::ControllerStop;
  return r;
}

TEST(TokenId, BoundsChecked) {
  EXPECT_EQ(TokenId::checked(3, 4).value, 3);
  EXPECT_THROW(TokenId::checked(4, 4), PreconditionError);
  EXPECT_THROW(TokenId::checked(-1, 4), PreconditionError);
}

TEST(TokenSequence, RejectsOutOfVocabulary) {
  TokenSequence s(4);
  EXPECT_THROW(s.push_back(TokenId(9)), PreconditionError);
  EXPECT_TRUE(s.empty());
}

TEST(TokenSequence, BytesRoundTrip) {
  const TokenSequence s = TokenSequence::from_bytes("hi\xff");
  EXPECT_EQ(s.vocab_size(), 256u);
  EXPECT_EQ(s[2].value, 255);
  EXPECT_EQ(s.to_bytes(), "hi\xff");
}

TEST(NewTrace, StartsFromPrompt) {
  const DecodeTrace t = new_trace(seq({5, 9}));
  EXPECT_EQ(t.prompt_len, 2u);
  EXPECT_TRUE(t.rounds.empty());
  EXPECT_EQ(t.output, seq({5, 9}));
}

TEST(NewTrace, RejectsEmptyPrompt) {
  try {
    (void)new_trace(TokenSequence(16));
    FAIL();
  } catch (const PreconditionError& e) {
    EXPECT_STREQ(e.what(), "empty prompt");
  }
}

TEST(NewTrace, LongPrompt) {
  TokenSequence p(16);
  for (int i = 0; i < 512; ++i) p.push_back(TokenId(i % 16));
  EXPECT_EQ(new_trace(p).prompt_len, 512u);
}

TEST(PushRound, AppendsAcceptedPrefixThenBonus) {
  DecodeTrace t = new_trace(seq({1}));
  push_round(t, round_of({2, 3}, 2, 4));
  EXPECT_EQ(t.output, seq({1, 2, 3, 4}));
}

TEST(PushRound, FullRejectionKeepsOnlyBonus) {
  DecodeTrace t = new_trace(seq({1}));
  push_round(t, round_of({7}, 0, 5));
  EXPECT_EQ(t.output, seq({1, 5}));
}

TEST(PushRound, LengthCapTruncates) {
  DecodeTrace t = new_trace(seq({1, 2}), 3);
  push_round(t, round_of({3, 4}, 2, 5));
  EXPECT_EQ(t.output, seq({1, 2, 3}));
  EXPECT_TRUE(t.finished());
  EXPECT_THROW(push_round(t, round_of({1}, 0, 1)), PreconditionError);
}

TEST(PushRound, StopTokenEndsOutput) {
  DecodeTrace t = new_trace(seq({1}));
  t.stop_tokens = {TokenId(3)};
  push_round(t, round_of({2, 3, 4}, 3, 5));
  EXPECT_EQ(t.output, seq({1, 2, 3}));
  EXPECT_TRUE(t.stopped);
}

TEST(PushRound, RejectsInconsistentRounds) {
  DecodeTrace t = new_trace(seq({1}));
  DraftRound bad = round_of({2, 3}, 1, 4);
  bad.stop_reason = StopReason::ControllerStop;
  EXPECT_THROW(push_round(t, bad), PreconditionError);
  DraftRound too_many = round_of({2}, 1, 4);
  too_many.accepted_drafts = 2;
  EXPECT_THROW(push_round(t, too_many), PreconditionError);
  DraftRound negative_time = round_of({2}, 1, 4);
  negative_time.verify_time = -1.0;
  EXPECT_THROW(push_round(t, negative_time), PreconditionError);
}

TEST(PushRound, PhaseTotalsAccumulate) {
  DecodeTrace t = new_trace(seq({1}));
  DraftRound a = round_of({2}, 1, 3);
  a.draft_time = 0.25;
  a.verify_time = 0.5;
  DraftRound b = round_of({4}, 0, 5);
  b.draft_time = 0.125;
  b.sample_time = 1.0;
  push_round(t, a);
  push_round(t, b);
  EXPECT_EQ(t.wall_times.drafting, 0.375);
  EXPECT_EQ(t.wall_times.verification, 0.5);
  EXPECT_EQ(t.wall_times.sampling, 1.0);
}

// Property: without truncation |output| = prompt_len + sum(accepted + 1), and
// replaying the rounds into a fresh trace reproduces the output.
TEST(PushRound, LengthIdentityAndReplay) {
  std::uint64_t state = 12345;
  auto next = [&](std::uint64_t n) {
    state = state * 6364136223846793005ULL + 1442695040888963407ULL;
    return (state >> 33) % n;
  };
  for (int trial = 0; trial < 200; ++trial) {
    const TokenSequence prompt = seq({static_cast<int>(next(16))});
    DecodeTrace t = new_trace(prompt);
    std::size_t expected = prompt.size();
    const std::size_t rounds = 1 + next(10);
    for (std::size_t r = 0; r < rounds; ++r) {
      DraftRound round(16);
      const std::size_t k = 1 + next(6);
      for (std::size_t i = 0; i < k; ++i) round.drafted.push_back(TokenId(static_cast<int>(next(16))));
      round.accepted_drafts = next(k + 1);
      round.bonus = TokenId(static_cast<int>(next(16)));
      round.stop_reason =
          round.accepted_drafts < k ? StopReason::Rejection : StopReason::ControllerStop;
      expected += round.accepted_drafts + 1;
      push_round(t, round);
    }
    ASSERT_EQ(t.output.size(), expected);
    DecodeTrace replay = new_trace(prompt);
    for (const DraftRound& r : t.rounds) push_round(replay, r);
    ASSERT_EQ(replay.output, t.output);
  }
}

}  // namespace
}  // namespace spexit
