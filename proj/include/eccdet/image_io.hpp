#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "eccdet/tensor.hpp"

namespace eccdet {

// 16-bit RGB PNG from a 3 x H x W tensor in [0, 1] (values are clamped).
void write_png16(const std::filesystem::path& path, const Tensor& rgb);
// Any 8/16-bit gray/RGB/RGBA PNG into a 3 x H x W tensor in [0, 1].
Tensor read_png(const std::filesystem::path& path);
// Interleaved 8-bit RGB buffer.
void write_png8(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb,
                int width, int height);

}  // namespace eccdet
