#include "dsbel/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "dsbel/checkpoint.hpp"

namespace dsbel {

namespace fs = std::filesystem;

GrayImage::GrayImage(int w, int h, std::uint8_t fill)
    : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {
  if (w < 0 || h < 0) throw ConfigError("negative image extent");
}

GrayImage bytes_to_image(std::span<const std::uint8_t> blob) {
  if (blob.empty()) throw DataError("bytes_to_image: empty input");
  const std::size_t len = blob.size();
  auto width = static_cast<std::size_t>(std::sqrt(static_cast<double>(len)));
  while (width * width < len) ++width;
  while (width > 1 && (width - 1) * (width - 1) >= len) --width;
  const std::size_t height = (len + width - 1) / width;
  GrayImage img(static_cast<int>(width), static_cast<int>(height));
  std::copy(blob.begin(), blob.end(), img.pixels.begin());
  return img;
}

GrayImage resize_nearest(const GrayImage& img, int side) {
  if (side < 1) throw ConfigError("resize_nearest: side must be >= 1");
  if (img.width < 1 || img.height < 1) throw ConfigError("resize_nearest: empty image");
  GrayImage out(side, side);
  for (int y = 0; y < side; ++y) {
    const int sy = static_cast<int>(static_cast<long long>(y) * img.height / side);
    for (int x = 0; x < side; ++x) {
      const int sx = static_cast<int>(static_cast<long long>(x) * img.width / side);
      out.at(y, x) = img.at(sy, sx);
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

GrayImage decode_pgm(std::span<const std::uint8_t> bytes, const std::string& name) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) -> FormatError { return FormatError(name + ": " + why); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&]() {
    skip_space();
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    if (t.empty()) throw fail("truncated PGM header");
    return t;
  };
  auto number = [&]() {
    const std::string t = token();
    if (!std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }) ||
        t.size() > 9)
      throw fail("bad PGM header number '" + t + "'");
    return std::stoi(t);
  };
  if (token() != "P5") throw fail("not a binary PGM (P5)");
  const int w = number();
  const int h = number();
  const int maxval = number();
  if (maxval != 255) throw fail("PGM maxval " + std::to_string(maxval) + " is not 255");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("missing whitespace after PGM header");
  ++pos;
  const std::size_t need = static_cast<std::size_t>(w) * h;
  if (bytes.size() - pos < need) throw fail("PGM pixel data truncated");
  GrayImage img(w, h);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), need, img.pixels.begin());
  return img;
}

void write_pgm(const GrayImage& img, const std::string& path) { write_file_bytes(path, encode_pgm(img)); }

GrayImage read_pgm(const std::string& path) { return decode_pgm(read_file_bytes(path), path); }

std::size_t LabeledDataset::count(Label label) const {
  return static_cast<std::size_t>(
      std::count_if(items.begin(), items.end(), [&](const LabeledItem& it) { return it.label == label; }));
}

void LabeledDataset::add(GrayImage image, Label label, std::string source) {
  items.push_back({std::move(image), label, std::move(source)});
}

std::vector<std::size_t> LabeledDataset::indices_of(Label label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (items[i].label == label) out.push_back(i);
  return out;
}

LabeledDataset load_dataset(const std::string& root, std::vector<std::string>* warnings) {
  LabeledDataset ds;
  for (const auto& [dir, label] : {std::pair{"benign", Label::Benign}, std::pair{"malware", Label::Malware}}) {
    const fs::path sub = fs::path(root) / dir;
    if (!fs::is_directory(sub)) throw DataError("missing subdirectory " + sub.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(sub))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty() && warnings) warnings->push_back("no images in " + sub.string());
    for (const auto& f : files) ds.add(read_pgm(f.string()), label, (fs::path(dir) / f.filename()).string());
  }
  return ds;
}

void save_dataset(const LabeledDataset& ds, const std::string& root) {
  for (const char* dir : {"benign", "malware"}) fs::create_directories(fs::path(root) / dir);
  std::size_t index = 0;
  for (const auto& item : ds.items) {
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.pgm", index++);
    const char* dir = item.label == Label::Benign ? "benign" : "malware";
    write_pgm(item.image, (fs::path(root) / dir / name).string());
  }
}

namespace {

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

// Bands of random height and intensity along one axis.
GrayImage banded(int side, bool horizontal, Rng& rng) {
  GrayImage img(side, side);
  std::vector<double> level(side);
  int pos = 0;
  while (pos < side) {
    const int band = 3 + static_cast<int>(rng.below(8));
    const double value = rng.uniform(0.0, 255.0);
    for (int k = pos; k < std::min(side, pos + band); ++k) level[k] = value;
    pos += band;
  }
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) img.at(y, x) = clamp_byte(level[horizontal ? y : x] + 24.0 * rng.normal());
  return img;
}

GrayImage diagonal_stripes(int side, Rng& rng) {
  GrayImage img(side, side);
  const int period = 4 + static_cast<int>(rng.below(8));
  const int offset = static_cast<int>(rng.below(static_cast<std::uint64_t>(period)));
  const bool anti = rng.bernoulli(0.5);
  const double lo = rng.uniform(0.0, 100.0);
  const double hi = rng.uniform(155.0, 255.0);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const int d = (anti ? (x - y + side * period) : (x + y)) + offset;
      const double v = (d / (period / 2 > 0 ? period / 2 : 1)) % 2 ? hi : lo;
      img.at(y, x) = clamp_byte(v + 24.0 * rng.normal());
    }
  }
  return img;
}

GrayImage checkerboard(int side, Rng& rng) {
  GrayImage img(side, side);
  const int cell = 3 + static_cast<int>(rng.below(8));
  const double lo = rng.uniform(0.0, 100.0);
  const double hi = rng.uniform(155.0, 255.0);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      img.at(y, x) = clamp_byte(((y / cell + x / cell) % 2 ? hi : lo) + 24.0 * rng.normal());
  return img;
}

}  // namespace

LabeledDataset generate_synthetic_corpus(int n_per_class, int side, std::uint64_t seed) {
  if (n_per_class < 1) throw ConfigError("synthetic corpus needs n_per_class >= 1");
  if (side < 1) throw ConfigError("synthetic corpus needs side >= 1");
  Rng rng(seed);
  LabeledDataset ds;
  for (int i = 0; i < n_per_class; ++i)
    ds.add(banded(side, true, rng), Label::Benign, "synthetic/benign/" + std::to_string(i));
  for (int i = 0; i < n_per_class; ++i)
    ds.add(banded(side, false, rng), Label::Malware, "synthetic/malware/" + std::to_string(i));
  return ds;
}

LabeledDataset generate_surrogate_textures(int n_per_class, int side, std::uint64_t seed) {
  if (n_per_class < 1) throw ConfigError("surrogate set needs n_per_class >= 1");
  Rng rng(seed ^ 0x5bd1e995ULL);
  LabeledDataset ds;
  for (int i = 0; i < n_per_class; ++i)
    ds.add(diagonal_stripes(side, rng), Label::Benign, "surrogate/stripes/" + std::to_string(i));
  for (int i = 0; i < n_per_class; ++i)
    ds.add(checkerboard(side, rng), Label::Malware, "surrogate/checker/" + std::to_string(i));
  return ds;
}

Tensor image_to_tensor(const GrayImage& img, int side) {
  const GrayImage& src = (img.width == side && img.height == side) ? img : resize_nearest(img, side);
  Tensor t(Shape{1, 1, side, side});
  for (std::size_t i = 0; i < src.pixels.size(); ++i) t[i] = static_cast<float>(src.pixels[i]) / 255.0f;
  return t;
}

Tensor to_batch(const LabeledDataset& ds, std::span<const std::size_t> indices, int side) {
  Tensor batch(Shape{static_cast<int>(indices.size()), 1, side, side});
  const std::size_t plane = static_cast<std::size_t>(side) * side;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Tensor one = image_to_tensor(ds.items.at(indices[k]).image, side);
    std::copy_n(one.data().begin(), plane, batch.data().begin() + static_cast<std::ptrdiff_t>(k * plane));
  }
  return batch;
}

}  // namespace dsbel
