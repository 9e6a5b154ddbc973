#include "spexit/engine.hpp"

#include <algorithm>
#include <chrono>
#include <string>

namespace spexit {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

bool is_stop(const std::vector<TokenId>& stops, TokenId t) {
  return std::find(stops.begin(), stops.end(), t) != stops.end();
}

}  // namespace

void EngineConfig::validate() const {
  if (max_len < 1) throw ConfigError("engine.max_len must be >= 1");
  if (draft_cap < 1) throw ConfigError("engine.draft_cap must be >= 1");
  controller.validate();
}

VerifyResult verify(const LanguageModel& target, SessionCache& cache, std::size_t prefix_pos,
                    TokenId pending, const TokenSequence& drafted) {
  if (drafted.empty()) throw PreconditionError("verify needs at least one drafted token");
  if (cache.position() != prefix_pos) {
    throw PreconditionError("target cache at position " + std::to_string(cache.position()) +
                            ", expected " + std::to_string(prefix_pos));
  }
  std::vector<TokenId> batch;
  batch.reserve(drafted.size() + 1);
  batch.push_back(pending);
  batch.insert(batch.end(), drafted.begin(), drafted.end());
  std::vector<StepOutput> outputs = target.step_batch(cache, batch);

  VerifyResult result;
  std::size_t a = 0;
  while (a < drafted.size() && drafted[a] == argmax(outputs[a].logits)) ++a;
  result.accepted_drafts = a;
  result.bonus = argmax(outputs[a].logits);
  result.bonus_hidden = std::move(outputs[a].hidden);
  target.rollback(cache, prefix_pos + a + 1);
  return result;
}

DecodeTrace decode(const ModelBundle& models, const TokenSequence& prompt,
                   const EngineConfig& config, Rng& rng) {
  config.validate();
  const LanguageModel& draft = models.draft();
  const LanguageModel& target = models.target();
  if (prompt.vocab_size() != target.vocab_size() || draft.vocab_size() != target.vocab_size()) {
    throw PreconditionError("prompt and model vocabularies differ");
  }
  if (prompt.empty()) throw PreconditionError("empty prompt");
  if (prompt.size() >= config.max_len) {
    throw ConfigError("prompt length " + std::to_string(prompt.size()) +
                      " leaves no room under max_len " + std::to_string(config.max_len));
  }
  for (const LanguageModel* m : {&draft, &target}) {
    if (m->max_positions() != 0 && config.max_len > m->max_positions()) {
      throw ConfigError("max_len " + std::to_string(config.max_len) +
                        " exceeds the model's max_seq_len " + std::to_string(m->max_positions()));
    }
  }

  const auto decode_start = Clock::now();
  DecodeTrace trace = new_trace(prompt, config.max_len);
  trace.stop_tokens = config.stop_tokens;
  std::unique_ptr<Controller> controller = make_controller(config.controller);
  BundleSession session = models.open_session();

  // Target consumes the whole prompt once to expose its last hidden state,
  // then drops the last token: that token is fed again as the head of the
  // first verification batch. The draft consumes all but the last token.
  std::vector<float> target_hidden =
      target.step_batch(*session.target, prompt.view()).back().hidden;
  target.rollback(*session.target, prompt.size() - 1);
  if (prompt.size() > 1) draft.step_batch(*session.draft, prompt.view().first(prompt.size() - 1));
  TokenId pending = prompt.back();
  bool draft_behind = false;

  while (!trace.finished()) {
    const std::size_t committed = trace.output.size();
    const std::size_t limit = std::min(config.draft_cap, config.max_len - committed);
    DraftRound round(prompt.vocab_size());

    auto t0 = Clock::now();
    if (draft_behind) {
      // All drafts were accepted last round; the newest one was never fed.
      draft.step(*session.draft, trace.output[committed - 2]);
      draft_behind = false;
    }
    TokenId feed = pending;
    round.draft_time += seconds_since(t0);
    while (true) {
      t0 = Clock::now();
      StepOutput out = draft.step(*session.draft, feed);
      const TokenId token = argmax(out.logits);
      round.drafted.push_back(token);
      feed = token;
      round.draft_time += seconds_since(t0);
      if (round.drafted.size() >= limit) {
        round.stop_reason = StopReason::LengthCap;
        break;
      }
      t0 = Clock::now();
      const DraftContext context{round.drafted.size(), target_hidden, out.hidden};
      const ControllerDecision decision = controller->decide(context, rng);
      round.sample_time += seconds_since(t0);
      if (!decision.continue_drafting) {
        round.stop_reason = StopReason::ControllerStop;
        break;
      }
    }

    t0 = Clock::now();
    VerifyResult verdict =
        verify(target, *session.target, committed - 1, pending, round.drafted);
    round.verify_time = seconds_since(t0);

    const std::size_t k = round.drafted.size();
    round.accepted_drafts = verdict.accepted_drafts;
    round.bonus = verdict.bonus;
    if (verdict.accepted_drafts < k) {
      round.stop_reason = StopReason::Rejection;
      draft.rollback(*session.draft, committed + verdict.accepted_drafts);
    } else {
      draft_behind = true;
    }
    target_hidden = std::move(verdict.bonus_hidden);
    pending = verdict.bonus;
    controller->observe(verdict.accepted_drafts, k);
    push_round(trace, std::move(round));
  }

  const double elapsed = seconds_since(decode_start);
  const PhaseTimes& w = trace.wall_times;
  trace.wall_times.other = elapsed - (w.drafting + w.verification + w.sampling);
  return trace;
}

TokenSequence autoregressive_reference(const LanguageModel& target, const TokenSequence& prompt,
                                       std::size_t max_len,
                                       const std::vector<TokenId>& stop_tokens) {
  if (prompt.empty()) throw PreconditionError("empty prompt");
  if (prompt.size() >= max_len) throw ConfigError("prompt leaves no room under max_len");
  if (target.max_positions() != 0 && max_len > target.max_positions()) {
    throw ConfigError("max_len exceeds the model's max_seq_len");
  }
  auto cache = target.new_cache();
  TokenSequence output = prompt;
  StepOutput out;
  for (TokenId t : prompt) out = target.step(*cache, t);
  while (true) {
    const TokenId next = argmax(out.logits);
    output.push_back(next);
    if (output.size() >= max_len || is_stop(stop_tokens, next)) break;
    out = target.step(*cache, next);
  }
  return output;
}

}  // namespace spexit
