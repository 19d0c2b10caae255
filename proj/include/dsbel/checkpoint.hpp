#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsbel/model.hpp"

namespace dsbel {

// Container layout (all integers little-endian):
//   "DSBL" | u32 version | u32 header_len | header text (ModelConfig::to_text
//   plus aux_frozen) | u64 param_count | f32[param_count] in parameters()
//   order | u32 section_count | { char[4] tag | u64 len | bytes }* |
//   u64 FNV-1a checksum of every preceding byte
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Section {
  std::array<char, 4> tag{};
  std::vector<std::uint8_t> payload;
};

struct Checkpoint {
  Model model;
  std::vector<Section> sections;

  const Section* find(std::string_view tag) const;
  void put(Section section);  // replaces a section with the same tag
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_checkpoint(Model& model, std::span<const Section> sections = {});
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(Model& model, const std::string& path, std::span<const Section> sections = {});
Checkpoint load_checkpoint(const std::string& path);

// Little-endian byte streams shared by the container and its sections.
class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void bytes(std::span<const std::uint8_t> b);
  void text(const std::string& s);  // u32 length + bytes
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::span<const std::uint8_t> bytes(std::size_t n);
  std::string text();
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace dsbel
