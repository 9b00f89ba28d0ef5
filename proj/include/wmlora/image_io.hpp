#pragma once

#include "wmlora/common.hpp"

#include <filesystem>

namespace wmlora {

/// Writes a (3,H,W) image in [0,1] as 8-bit RGB PNG.
void write_png(const torch::Tensor& image, const std::filesystem::path& path);

/// Reads an 8-bit PNG/JPEG into a (3,H,W) float tensor in [0,1].
torch::Tensor read_image(const std::filesystem::path& path);

/// Real codec round trip: quantize to 8 bits, JPEG encode at `quality`, decode.
/// Accepts (3,H,W) or (N,3,H,W).
torch::Tensor jpeg_roundtrip(const torch::Tensor& images, int quality);

/// Bilinear resize of (N,C,H,W) or (C,H,W) to `size`x`size`.
torch::Tensor resize_bilinear(const torch::Tensor& images, std::int64_t height, std::int64_t width);

/// Tiles (N,3,H,W) images into a grid with `cols` columns and a 1px border.
torch::Tensor make_grid(const torch::Tensor& images, std::int64_t cols);

}  // namespace wmlora
