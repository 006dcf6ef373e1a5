#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "smi/dataset.hpp"
#include "smi/inversion.hpp"
#include "smi/vit.hpp"

namespace smi::io {

// IDX (big-endian header; 0x00000803 images, 0x00000801 labels).
// Pixels are scaled to [0,1]. Throws BadMagic, TruncatedFile, CountMismatch.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, int num_classes = 10);
/// Writes pixels as round(255·clamp(x,0,1)).
void save_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

// Binary PGM (P5) for one channel, PPM (P6) for three.
struct Pnm {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, channels innermost
};
/// Converts a display-range [H,W,C] image to bytes, round(255·clamp(x,0,1)).
Pnm to_pnm(const Tensor& display_image);
void write_pnm(const Pnm& image, const std::filesystem::path& path);
Pnm read_pnm(const std::filesystem::path& path);
/// Un-normalizes the canvas, zeroes stopped patches and writes P5/P6.
void write_image(const SparseImage& image, const Normalization& norm, const std::filesystem::path& path);

// "SMIV" checkpoint: magic, u32 version, VitConfig as eight u32, u32 tensor
// count, then per tensor u32 name length, name bytes, u32 rank, u32 dims,
// float32 data. Every integer and float is little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const VitModel& model, const std::filesystem::path& path);
/// Throws BadMagic, VersionMismatch, TruncatedFile, CountMismatch.
VitModel load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace smi::io
