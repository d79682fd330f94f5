#pragma once

#include <torch/types.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace osediff {

/// 8-bit interleaved RGB raster.
struct Rgb8 {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> data;  // height * width * 3
};

/// [3, H, W] float tensor in [-1, 1] -> 8-bit raster (round to nearest, clamped).
Rgb8 to_rgb8(const torch::Tensor& image);
/// 8-bit raster -> [3, H, W] float tensor, v / 127.5 - 1.
torch::Tensor from_rgb8(const Rgb8& raster);

/// Snaps an image to the 8-bit grid, returning it in [-1, 1].
torch::Tensor quantize(const torch::Tensor& image);

std::vector<uint8_t> encode_png(const Rgb8& raster);
Rgb8 decode_png(const std::vector<uint8_t>& bytes);

Rgb8 read_png(const std::filesystem::path& path);
torch::Tensor load_png(const std::filesystem::path& path);
/// Written to a sibling temp file and renamed into place.
void save_png(const std::filesystem::path& path, const torch::Tensor& image);

/// Baseline JPEG encode + decode at `quality` (1..100).
Rgb8 jpeg_roundtrip(const Rgb8& raster, int quality);

/// Antialiased bicubic resampling of [3, H, W] or [B, 3, H, W].
torch::Tensor resize_bicubic(const torch::Tensor& image, int64_t height, int64_t width);

/// BT.601 luma on the 16..235 scale from a [3, H, W] image in [-1, 1].
torch::Tensor luma(const torch::Tensor& image);

std::vector<uint8_t> read_file(const std::filesystem::path& path);
/// Atomic write: temp file in the same directory, then rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
void write_file_atomic(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);

/// Sorted list of `*.png` files in a directory.
std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir);

}  // namespace osediff
