#include "spexit/model.hpp"

#include <string>

namespace spexit {

TokenId argmax(std::span<const float> logits) {
  if (logits.empty()) throw PreconditionError("argmax over empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return TokenId(static_cast<std::int32_t>(best));
}

std::vector<StepOutput> LanguageModel::step_batch(SessionCache& cache,
                                                  std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw PreconditionError("step_batch needs at least one token");
  std::vector<StepOutput> outputs;
  outputs.reserve(tokens.size());
  for (TokenId t : tokens) outputs.push_back(step(cache, t));
  return outputs;
}

void LanguageModel::check_owner(const SessionCache& cache) const {
  if (cache.owner() != this) throw PreconditionError("cache does not belong to this model");
}

void LanguageModel::check_token(TokenId token) const {
  TokenId::checked(token.value, vocab_size());
}

BundleSession ModelBundle::open_session() const {
  return BundleSession{draft().new_cache(), target().new_cache()};
}

}  // namespace spexit
