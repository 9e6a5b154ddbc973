#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "spexit/engine.hpp"
#include "spexit/nano_lm.hpp"
#include "spexit/simulate.hpp"
#include "spexit/training.hpp"

namespace spexit {

/// Flat `key = value` run configuration. Every key has a registered default;
/// unknown keys are rejected. Values are kept as text and parsed on access.
class RunConfig {
 public:
  /// All registered keys at their defaults.
  RunConfig();

  /// Applies a config file: `key = value` lines, `#` comments, blank lines.
  void load_file(const std::filesystem::path& path);
  /// Applies one assignment of the form `key=value`.
  void apply_assignment(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  [[nodiscard]] bool has(const std::string& key) const;
  [[nodiscard]] const std::string& text(const std::string& key) const;
  [[nodiscard]] std::size_t size(const std::string& key) const;
  [[nodiscard]] std::uint64_t u64(const std::string& key) const;
  [[nodiscard]] double real(const std::string& key) const;
  [[nodiscard]] bool flag(const std::string& key) const;
  [[nodiscard]] std::vector<std::size_t> size_list(const std::string& key) const;
  [[nodiscard]] std::vector<std::string> string_list(const std::string& key) const;

  /// Every key in registration order, grouped by section, in a form
  /// load_file reads back to an identical configuration.
  [[nodiscard]] std::string dump() const;

  [[nodiscard]] NanoConfig nano_config() const;
  [[nodiscard]] TrainConfig train_config() const;
  /// Exit-block training settings: train.* with the distill.* overrides.
  [[nodiscard]] TrainConfig exit_train_config() const;
  [[nodiscard]] DistillConfig distill_config() const;
  [[nodiscard]] LabelConfig label_config() const;
  [[nodiscard]] PredictorTrainConfig predictor_train_config() const;
  /// Controller fields other than the predictor weights.
  [[nodiscard]] ControllerSpec controller_spec() const;
  [[nodiscard]] EngineConfig engine_config() const;
  /// simulate.* plus the controller and predictor settings.
  [[nodiscard]] SimulateConfig simulate_config() const;

  friend bool operator==(const RunConfig& a, const RunConfig& b) { return a.values_ == b.values_; }

 private:
  struct Entry {
    std::string key;
    std::string help;
  };
  void add(const std::string& key, const std::string& value, const std::string& help);

  std::vector<Entry> order_;
  std::map<std::string, std::string> values_;
};

}  // namespace spexit
