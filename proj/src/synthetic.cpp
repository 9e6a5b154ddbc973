#include "spexit/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "spexit/rng.hpp"

namespace spexit {
namespace {

constexpr std::uint64_t kTargetStream = 0x7461726765740000ULL;
constexpr std::uint64_t kAgreeStream = 0x6167726565000000ULL;
constexpr std::uint64_t kOtherStream = 0x6f74686572000000ULL;
constexpr std::uint64_t kHiddenStream = 0x68696464656e0000ULL;

double check_theta(double theta) {
  if (!(theta >= 0.0 && theta <= 1.0)) {
    throw ConfigError("theta must lie in [0, 1], got " + std::to_string(theta));
  }
  return theta;
}

double parse_double(std::string_view text) {
  try {
    std::size_t used = 0;
    const std::string s(text);
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("invalid number '" + std::string(text) + "' in theta schedule");
  }
}

std::string format_double(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

class SyntheticCache : public SessionCache {
 public:
  explicit SyntheticCache(const void* owner) : SessionCache(owner) {}
  std::vector<TokenId>& tokens() { return history_; }
};

}  // namespace

ThetaSchedule ThetaSchedule::constant(double theta) {
  check_theta(theta);
  return ThetaSchedule([theta](std::size_t) { return theta; },
                       "constant:" + format_double(theta));
}

ThetaSchedule ThetaSchedule::piecewise(double theta_before, std::size_t boundary,
                                       double theta_after) {
  check_theta(theta_before);
  check_theta(theta_after);
  return ThetaSchedule(
      [=](std::size_t p) { return p < boundary ? theta_before : theta_after; },
      "piecewise:" + format_double(theta_before) + "@" + std::to_string(boundary) + "," +
          format_double(theta_after),
      boundary);
}

ThetaSchedule ThetaSchedule::sinusoidal(double mean, double amplitude, double period) {
  if (!(period > 0.0)) throw ConfigError("sine schedule period must be positive");
  return ThetaSchedule(
      [=](std::size_t p) {
        const double v =
            mean + amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(p) / period);
        return std::clamp(v, 0.0, 1.0);
      },
      "sine:" + format_double(mean) + "," + format_double(amplitude) + "," +
          format_double(period));
}

ThetaSchedule ThetaSchedule::parse(std::string_view spec) {
  const auto colon = spec.find(':');
  if (colon == std::string_view::npos) {
    throw ConfigError("theta schedule '" + std::string(spec) + "' lacks a kind prefix");
  }
  const std::string_view kind = spec.substr(0, colon);
  const std::string_view body = spec.substr(colon + 1);
  if (kind == "constant") return constant(parse_double(body));
  if (kind == "piecewise") {
    const auto at = body.find('@');
    const auto comma = body.find(',');
    if (at == std::string_view::npos || comma == std::string_view::npos || comma < at) {
      throw ConfigError("piecewise schedule must look like piecewise:0.9@256,0.3");
    }
    const double before = parse_double(body.substr(0, at));
    const double boundary = parse_double(body.substr(at + 1, comma - at - 1));
    if (boundary < 0 || boundary != std::floor(boundary)) {
      throw ConfigError("piecewise boundary must be a non-negative integer");
    }
    return piecewise(before, static_cast<std::size_t>(boundary),
                     parse_double(body.substr(comma + 1)));
  }
  if (kind == "sine") {
    const auto c1 = body.find(',');
    const auto c2 = c1 == std::string_view::npos ? c1 : body.find(',', c1 + 1);
    if (c2 == std::string_view::npos) {
      throw ConfigError("sine schedule must look like sine:mean,amplitude,period");
    }
    return sinusoidal(parse_double(body.substr(0, c1)),
                      parse_double(body.substr(c1 + 1, c2 - c1 - 1)),
                      parse_double(body.substr(c2 + 1)));
  }
  throw ConfigError("unknown theta schedule kind '" + std::string(kind) + "'");
}

class SyntheticPair::Side : public LanguageModel {
 public:
  Side(const SyntheticPair& pair, bool is_draft) : pair_(pair), is_draft_(is_draft) {}

  std::size_t vocab_size() const override { return pair_.vocab_size_; }
  std::size_t hidden_size() const override { return kSyntheticHiddenSize; }

  std::unique_ptr<SessionCache> new_cache() const override {
    return std::make_unique<SyntheticCache>(this);
  }

  StepOutput step(SessionCache& cache, TokenId token) const override {
    check_owner(cache);
    check_token(token);
    auto& c = static_cast<SyntheticCache&>(cache);
    c.tokens().push_back(token);
    const std::size_t predicted = c.position();
    const TokenId chosen = is_draft_ ? pair_.draft_token(predicted) : pair_.target_token(predicted);

    StepOutput out;
    out.logits.assign(pair_.vocab_size_, 0.0f);
    out.logits[static_cast<std::size_t>(chosen.value)] = 1.0f;
    out.hidden.resize(kSyntheticHiddenSize);
    out.hidden[0] = static_cast<float>(2.0 * pair_.schedule_(predicted) - 1.0);
    for (std::size_t i = 1; i < kSyntheticHiddenSize; ++i) {
      out.hidden[i] = static_cast<float>(
          2.0 * hash_unit(pair_.seed_ ^ kHiddenStream, predicted, i + (is_draft_ ? 64 : 0)) - 1.0);
    }
    return out;
  }

  void rollback(SessionCache& cache, std::size_t position) const override {
    check_owner(cache);
    auto& c = static_cast<SyntheticCache&>(cache);
    if (position > c.position()) throw PreconditionError("rollback past the cache position");
    c.tokens().resize(position);
  }

 private:
  const SyntheticPair& pair_;
  bool is_draft_;
};

SyntheticPair::SyntheticPair(ThetaSchedule schedule, std::size_t vocab_size, std::uint64_t seed)
    : schedule_(std::move(schedule)), vocab_size_(vocab_size), seed_(seed) {
  if (vocab_size < 2) throw PreconditionError("synthetic pair needs vocab_size >= 2");
  draft_ = std::make_unique<Side>(*this, true);
  target_ = std::make_unique<Side>(*this, false);
}

SyntheticPair::~SyntheticPair() = default;

const LanguageModel& SyntheticPair::draft() const { return *draft_; }
const LanguageModel& SyntheticPair::target() const { return *target_; }

TokenId SyntheticPair::target_token(std::size_t position) const {
  const std::uint64_t h = splitmix64(splitmix64(seed_ ^ kTargetStream) ^ position);
  return TokenId(static_cast<std::int32_t>(h % vocab_size_));
}

TokenId SyntheticPair::draft_token(std::size_t position) const {
  const TokenId scripted = target_token(position);
  const double theta = check_theta(schedule_(position));
  if (hash_unit(seed_, kAgreeStream, position) < theta) return scripted;
  // Uniform over the vocabulary minus the scripted token.
  const std::uint64_t h = splitmix64(splitmix64(seed_ ^ kOtherStream) ^ position);
  const auto r = static_cast<std::int32_t>(h % (vocab_size_ - 1));
  return TokenId(r < scripted.value ? r : r + 1);
}

std::unique_ptr<SyntheticPair> synthetic_pair(ThetaSchedule schedule, std::size_t vocab_size,
                                              std::uint64_t seed) {
  return std::make_unique<SyntheticPair>(std::move(schedule), vocab_size, seed);
}

}  // namespace spexit
