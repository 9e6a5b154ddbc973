#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "spexit/nano_lm.hpp"

namespace spexit {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Contents of an NLM1 file: free-form metadata plus an ordered tensor list.
///
/// Layout: the bytes "NLM1", a u32 format version, a u32 header length, the
/// UTF-8 JSON header {"meta": ..., "tensors": [{name, shape, offset}...]},
/// then little-endian f32 tensor data. Every tensor starts at a file offset
/// that is a multiple of 64; gaps are zero-filled.
struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  /// Throws CheckpointError when no tensor has this name.
  [[nodiscard]] const Tensor& at(const std::string& name) const;
};

inline constexpr std::uint32_t kContainerVersion = 1;

void write_container(const std::filesystem::path& path, const Container& container);
Container read_container(const std::filesystem::path& path);

}  // namespace spexit
