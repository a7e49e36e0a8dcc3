#pragma once

// Netpbm images and the on-disk dataset layout:
//   images/NNN.ppm   P6 8-bit color
//   masks/NNN.pgm    P5 8-bit, 0 or 255
//   expressions.jsonl  {"id", "tokens", "text", "seed", "objects", "target"} per line

#include <cstdint>
#include <string>
#include <vector>

#include "crformer/data.hpp"
#include "crformer/metrics.hpp"
#include "crformer/tensor.hpp"

namespace crformer {

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
};

struct ColorImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // RGB interleaved
};

void write_pgm(const std::string& path, const GrayImage& img);
void write_ppm(const std::string& path, const ColorImage& img);
/// Both readers accept only maxval 255 and throw FormatError otherwise.
GrayImage read_pgm(const std::string& path);
ColorImage read_ppm(const std::string& path);

GrayImage mask_to_gray(const BinaryMask& m);
/// Pixels >= 128 become 1.
BinaryMask gray_to_mask(const GrayImage& g);
/// Values in [0, 1] rounded to the nearest of 256 levels.
ColorImage tensor_to_color(const Tensor<float>& img);
Tensor<float> color_to_tensor(const ColorImage& img);

/// Zero-padded sample index used in file names.
std::string sample_stem(std::size_t index);

void export_dataset(const std::string& dir, const std::vector<SampleRecord>& samples);
/// Reads back images, masks, tokens and scene descriptors written by
/// export_dataset. Throws FormatError on inconsistent contents.
std::vector<SampleRecord> load_dataset(const std::string& dir);

}  // namespace crformer
