#pragma once

// 8-bit PNG codec. Intensities map linearly between [0,1] and [0,255].

#include <cstdint>
#include <filesystem>
#include <vector>

#include "firm/imaging.hpp"

namespace firm {

ImagePlane read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImagePlane& img);

std::vector<std::uint8_t> encode_png(const ImagePlane& img);
ImagePlane decode_png(const std::vector<std::uint8_t>& bytes);

// Masks: single-channel, pixels > 127 are set.
BinaryMask read_mask_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask);

// Single-channel raw gray levels, used by the three-level mask encoding.
std::vector<std::uint8_t> encode_gray_png(int height, int width, const std::vector<std::uint8_t>& levels);
void write_gray_png(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& levels);
std::vector<std::uint8_t> read_gray_png(const std::filesystem::path& path, int& height, int& width);

std::uint8_t to_byte(double v);

}  // namespace firm
