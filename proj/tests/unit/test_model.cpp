#include <gtest/gtest.h>

#include <cmath>

#include "spexit/synthetic.hpp"

namespace spexit {
namespace {

TEST(Argmax, LowestIndexWinsTies) {
  const std::vector<float> logits{0.5f, 2.0f, 2.0f, -1.0f};
  EXPECT_EQ(argmax(logits).value, 1);
  EXPECT_THROW(argmax(std::span<const float>{}), PreconditionError);
}

TEST(ThetaSchedule, ParsesAllForms) {
  EXPECT_DOUBLE_EQ(ThetaSchedule::parse("constant:0.8")(17), 0.8);
  const ThetaSchedule p = ThetaSchedule::parse("piecewise:0.9@256,0.3");
  EXPECT_DOUBLE_EQ(p(255), 0.9);
  EXPECT_DOUBLE_EQ(p(256), 0.3);
  const ThetaSchedule s = ThetaSchedule::parse("sine:0.5,0.4,100");
  EXPECT_NEAR(s(25), 0.9, 1e-12);
  EXPECT_NEAR(s(75), 0.1, 1e-12);
  EXPECT_THROW(ThetaSchedule::parse("constant:1.5"), ConfigError);
  EXPECT_THROW(ThetaSchedule::parse("wave:0.5"), ConfigError);
  EXPECT_THROW(ThetaSchedule::parse("piecewise:0.9"), ConfigError);
}

TEST(SyntheticPair, RejectsTinyVocabulary) {
  EXPECT_THROW(synthetic_pair(ThetaSchedule::constant(0.5), 1, 0), PreconditionError);
}

TEST(SyntheticPair, TargetReplaysScriptedStream) {
  auto pair = synthetic_pair(ThetaSchedule::constant(0.5), 32, 9);
  const LanguageModel& target = pair->target();
  auto cache = target.new_cache();
  for (std::size_t p = 0; p < 100; ++p) {
    const StepOutput out = target.step(*cache, TokenId(static_cast<int>(p % 32)));
    ASSERT_EQ(out.logits.size(), 32u);
    ASSERT_EQ(out.hidden.size(), kSyntheticHiddenSize);
    ASSERT_EQ(argmax(out.logits), pair->target_token(p + 1));
  }
}

TEST(SyntheticPair, FullAgreementAndFullDisagreement) {
  auto agree = synthetic_pair(ThetaSchedule::constant(1.0), 8, 3);
  auto disagree = synthetic_pair(ThetaSchedule::constant(0.0), 8, 3);
  for (std::size_t p = 0; p < 500; ++p) {
    ASSERT_EQ(agree->draft_token(p), agree->target_token(p));
    ASSERT_NE(disagree->draft_token(p), disagree->target_token(p));
  }
}

TEST(SyntheticPair, EmpiricalAgreementMatchesTheta) {
  auto pair = synthetic_pair(ThetaSchedule::constant(0.8), 64, 2024);
  int agree = 0;
  const int n = 10000;
  for (int p = 0; p < n; ++p) agree += pair->draft_token(p) == pair->target_token(p);
  EXPECT_NEAR(agree / static_cast<double>(n), 0.8, 0.02);
}

TEST(SyntheticPair, AgreementWithinThreeSigmaForSeveralThetas) {
  for (double theta : {0.1, 0.3, 0.6, 0.95}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      auto pair = synthetic_pair(ThetaSchedule::constant(theta), 50, seed);
      const int n = 20000;
      int agree = 0;
      for (int p = 0; p < n; ++p) agree += pair->draft_token(p) == pair->target_token(p);
      const double sigma = std::sqrt(theta * (1 - theta) / n);
      EXPECT_NEAR(agree / static_cast<double>(n), theta, 3 * sigma) << theta << " " << seed;
    }
  }
}

TEST(SyntheticPair, BatchEqualsSequentialAndRollbackIsPure) {
  auto pair = synthetic_pair(ThetaSchedule::constant(0.7), 16, 5);
  const LanguageModel& draft = pair->draft();
  std::vector<TokenId> tokens;
  for (int i = 0; i < 12; ++i) tokens.push_back(TokenId(i % 16));
  auto a = draft.new_cache();
  auto b = draft.new_cache();
  const auto batch = draft.step_batch(*a, tokens);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const StepOutput s = draft.step(*b, tokens[i]);
    ASSERT_EQ(s.logits, batch[i].logits);
    ASSERT_EQ(s.hidden, batch[i].hidden);
  }
  draft.rollback(*a, 4);
  EXPECT_EQ(a->position(), 4u);
  EXPECT_THROW(draft.rollback(*a, 5), PreconditionError);
}

TEST(SyntheticPair, RejectsForeignCacheAndBadToken) {
  auto pair = synthetic_pair(ThetaSchedule::constant(0.7), 16, 5);
  auto cache = pair->draft().new_cache();
  EXPECT_THROW(pair->target().step(*cache, TokenId(1)), PreconditionError);
  auto own = pair->target().new_cache();
  EXPECT_THROW(pair->target().step(*own, TokenId(16)), PreconditionError);
}

TEST(SyntheticPair, HiddenEncodesTheta) {
  auto pair = synthetic_pair(ThetaSchedule::piecewise(0.9, 10, 0.1), 16, 5);
  auto cache = pair->draft().new_cache();
  for (int i = 0; i < 20; ++i) {
    const StepOutput out = pair->draft().step(*cache, TokenId(0));
    const double theta = pair->schedule()(cache->position());
    EXPECT_FLOAT_EQ(out.hidden[0], static_cast<float>(2 * theta - 1));
  }
}

}  // namespace
}  // namespace spexit
