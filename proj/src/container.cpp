#include "spexit/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace spexit {
namespace {

constexpr char kMagic[4] = {'N', 'L', 'M', '1'};
constexpr std::size_t kAlign = 64;

std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  }
  return v;
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

[[noreturn]] void corrupt(const std::filesystem::path& path, const std::string& why) {
  throw CheckpointError("corrupt checkpoint " + path.string() + ": " + why);
}

}  // namespace

const Tensor& Container::at(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw CheckpointError("checkpoint has no tensor named '" + name + "'");
}

void write_container(const std::filesystem::path& path, const Container& container) {
  // The header length depends on the offsets it contains, so offsets are
  // computed against a fixed-width placeholder pass until they settle.
  nlohmann::json directory = nlohmann::json::array();
  std::size_t header_len = 0;
  std::string header;
  for (int pass = 0; pass < 8; ++pass) {
    directory = nlohmann::json::array();
    std::size_t offset = align_up(12 + header_len);
    for (const NamedTensor& t : container.tensors) {
      std::size_t expected = 1;
      for (std::size_t s : t.tensor.shape) expected *= s;
      if (expected != t.tensor.numel()) {
        throw PreconditionError("tensor '" + t.name + "' has " + std::to_string(t.tensor.numel()) +
                                " values for its shape");
      }
      directory.push_back({{"name", t.name}, {"shape", t.tensor.shape}, {"offset", offset}});
      offset = align_up(offset + 4 * t.tensor.numel());
    }
    nlohmann::json head = {{"meta", container.meta}, {"tensors", directory}};
    std::string next = head.dump();
    if (next.size() == header_len) {
      header = std::move(next);
      break;
    }
    header_len = next.size();
    header = std::move(next);
  }

  std::string out(kMagic, 4);
  put_u32(out, kContainerVersion);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  for (std::size_t i = 0; i < container.tensors.size(); ++i) {
    const std::size_t offset = directory[i]["offset"].get<std::size_t>();
    if (out.size() > offset) throw Error("internal error: checkpoint layout did not converge");
    out.resize(offset, '\0');
    for (float f : container.tensors[i].tensor.values) put_f32(out, f);
  }
  out.resize(align_up(out.size()), '\0');

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw Error("cannot open " + path.string() + " for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw Error("failed writing " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());

  if (bytes.size() < 12) corrupt(path, "file shorter than the fixed preamble");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(path.string() + " is not an NLM1 checkpoint (bad magic)");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kContainerVersion) {
    throw CheckpointError(path.string() + " has unsupported format version " +
                          std::to_string(version));
  }
  const std::size_t header_len = get_u32(bytes, 8);
  if (12 + header_len > bytes.size()) corrupt(path, "header runs past end of file");

  Container c;
  nlohmann::json head;
  try {
    head = nlohmann::json::parse(bytes.begin() + 12,
                                 bytes.begin() + static_cast<std::ptrdiff_t>(12 + header_len));
    c.meta = head.at("meta");
    for (const auto& entry : head.at("tensors")) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      t.tensor.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      std::size_t n = 1;
      for (std::size_t s : t.tensor.shape) n *= s;
      if (offset % kAlign != 0) corrupt(path, "tensor '" + t.name + "' is not 64-byte aligned");
      if (offset < 12 + header_len || offset > bytes.size() || n > (bytes.size() - offset) / 4) {
        corrupt(path, "data of tensor '" + t.name + "' lies outside the file");
      }
      t.tensor.values.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        t.tensor.values[i] = std::bit_cast<float>(get_u32(bytes, offset + 4 * i));
      }
      c.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    corrupt(path, std::string("unreadable header: ") + e.what());
  }
  return c;
}

}  // namespace spexit
