#include "dsbel/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace dsbel {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'D', 'S', 'B', 'L'};

}  // namespace

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

void ByteWriter::text(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.insert(buf_.end(), s.begin(), s.end());
}

std::span<const std::uint8_t> ByteReader::bytes(std::size_t n) {
  if (n > remaining()) throw FormatError("truncated data at byte " + std::to_string(pos_));
  auto out = data_.subspan(pos_, n);
  pos_ += n;
  return out;
}

std::uint32_t ByteReader::u32() {
  auto b = bytes(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  auto b = bytes(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::text() {
  const std::uint32_t n = u32();
  auto b = bytes(n);
  return std::string(b.begin(), b.end());
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

const Section* Checkpoint::find(std::string_view tag) const {
  for (const auto& s : sections)
    if (std::string_view(s.tag.data(), 4) == tag) return &s;
  return nullptr;
}

void Checkpoint::put(Section section) {
  for (auto& s : sections) {
    if (s.tag == section.tag) {
      s = std::move(section);
      return;
    }
  }
  sections.push_back(std::move(section));
}

std::vector<std::uint8_t> encode_checkpoint(Model& model, std::span<const Section> sections) {
  ByteWriter w;
  w.bytes(kMagic);
  w.u32(kCheckpointVersion);
  std::string header = model.config().to_text();
  header += "aux_frozen=" + std::string(model.aux_frozen() ? "1" : "0") + "\n";
  w.text(header);
  auto params = model.parameters();
  std::uint64_t count = 0;
  for (const auto& p : params) count += p.value.size();
  w.u64(count);
  for (const auto& p : params)
    for (float v : p.value) w.f32(v);
  w.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) {
    w.bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.tag.data()), 4));
    w.u64(s.payload.size());
    w.bytes(s.payload);
  }
  const std::uint64_t sum = fnv1a64(w.buffer());
  w.u64(sum);
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw FormatError("not a DSBL checkpoint (bad magic)");
  if (bytes.size() < 4 + 4 + 8) throw FormatError("truncated checkpoint");
  ByteReader r(bytes);
  r.bytes(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");

  const auto body = bytes.first(bytes.size() - 8);
  ByteReader tail(bytes.subspan(bytes.size() - 8));
  if (fnv1a64(body) != tail.u64()) throw FormatError("checkpoint checksum mismatch");

  ByteReader br(body);
  br.bytes(8);
  const std::string header = br.text();
  std::string config_text;
  bool aux_frozen = false;
  {
    std::istringstream is(header);
    std::string line;
    while (std::getline(is, line)) {
      if (line.rfind("aux_frozen=", 0) == 0) aux_frozen = line.substr(11) == "1";
      else config_text += line + "\n";
    }
  }
  Checkpoint ck;
  ck.model = Model::build(ModelConfig::from_text(config_text));
  ck.model.set_aux_frozen(aux_frozen);
  const std::uint64_t count = br.u64();
  if (count != ck.model.parameter_count())
    throw FormatError("checkpoint holds " + std::to_string(count) + " parameters, config implies " +
                      std::to_string(ck.model.parameter_count()));
  for (auto& p : ck.model.parameters())
    for (float& v : p.value) v = br.f32();
  const std::uint32_t n_sections = br.u32();
  for (std::uint32_t i = 0; i < n_sections; ++i) {
    Section s;
    auto tag = br.bytes(4);
    std::memcpy(s.tag.data(), tag.data(), 4);
    const std::uint64_t len = br.u64();
    auto payload = br.bytes(static_cast<std::size_t>(len));
    s.payload.assign(payload.begin(), payload.end());
    ck.sections.push_back(std::move(s));
  }
  if (br.remaining() != 0) throw FormatError("trailing bytes in checkpoint");
  ck.model.zero_grad();
  return ck;
}

void save_checkpoint(Model& model, const std::string& path, std::span<const Section> sections) {
  write_file_bytes(path, encode_checkpoint(model, sections));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace dsbel
