#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsbel/tensor.hpp"

namespace dsbel {

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0);

  std::uint8_t at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
  std::uint8_t& at(int row, int col) { return pixels[static_cast<std::size_t>(row) * width + col]; }

  bool operator==(const GrayImage&) const = default;
};

// Byte k goes to (k / width, k % width) with width = ceil(sqrt(len)) and
// height = ceil(len / width); trailing cells are zero.
GrayImage bytes_to_image(std::span<const std::uint8_t> blob);

// Nearest-neighbour resample to side x side; source index is
// floor(dst * src_extent / side) on each axis.
GrayImage resize_nearest(const GrayImage& img, int side);

// Binary PGM (P5, maxval 255).
std::vector<std::uint8_t> encode_pgm(const GrayImage& img);
GrayImage decode_pgm(std::span<const std::uint8_t> bytes, const std::string& name = "<memory>");
void write_pgm(const GrayImage& img, const std::string& path);
GrayImage read_pgm(const std::string& path);

enum class Label : int { Benign = 0, Malware = 1 };

struct LabeledItem {
  GrayImage image;
  Label label = Label::Benign;
  std::string source;
};

struct LabeledDataset {
  std::vector<LabeledItem> items;

  std::size_t size() const { return items.size(); }
  std::size_t count(Label label) const;
  void add(GrayImage image, Label label, std::string source);
  // Indices of all items with the given label, in item order.
  std::vector<std::size_t> indices_of(Label label) const;
};

// Reads root/benign/*.pgm and root/malware/*.pgm in lexicographic order.
// Warnings (such as an empty class directory) are appended to `warnings`.
LabeledDataset load_dataset(const std::string& root, std::vector<std::string>* warnings = nullptr);

// Writes a dataset back to root/benign and root/malware as PGM files.
void save_dataset(const LabeledDataset& ds, const std::string& root);

// Benign images carry horizontal byte bands, malware images vertical bands,
// both with additive noise.
LabeledDataset generate_synthetic_corpus(int n_per_class, int side, std::uint64_t seed);

// Surrogate texture task for auxiliary-stem pretraining: class 0 diagonal
// stripes, class 1 checkerboard blocks, both with noise.
LabeledDataset generate_surrogate_textures(int n_per_class, int side, std::uint64_t seed);

// Stacks images (resized to side x side when needed) into an (n, 1, side,
// side) tensor scaled to [0, 1].
Tensor to_batch(const LabeledDataset& ds, std::span<const std::size_t> indices, int side);
Tensor image_to_tensor(const GrayImage& img, int side);

}  // namespace dsbel
