#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "kdx/tensor.hpp"

namespace kdx {

// 8-bit image, row-major with interleaved channels (1 = gray, 2 = gray+alpha,
// 3 = RGB, 4 = RGBA).
struct Image {
    size_t width = 0, height = 0, channels = 0;
    std::vector<uint8_t> pixels;

    Image() = default;
    Image(size_t width_, size_t height_, size_t channels_)
        : width(width_), height(height_), channels(channels_),
          pixels(width_ * height_ * channels_, 0) {}

    uint8_t& at(size_t y, size_t x, size_t c) { return pixels[(y * width + x) * channels + c]; }
    uint8_t at(size_t y, size_t x, size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

// PNG, 8-bit, non-interlaced. Gray/gray+alpha/RGB/RGBA; palette images and
// other bit depths are rejected with a typed ParseError.
std::vector<uint8_t> encode_png(const Image& image);
Image decode_png(const uint8_t* data, size_t size);
void write_png(const Image& image, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

// [C,H,W] float tensor in [0,1] from an image. target_channels 1 or 3; gray
// promotes to RGB by replication, RGB reduces to gray by channel mean. Alpha
// is dropped.
Tensor image_to_tensor(const Image& image, size_t target_channels);

// Clamp to [0,1], quantize to 8 bits.
Image tensor_to_image(const Tensor& chw);

// Corner-aligned bilinear resize of a [C,H,W] or [H,W] tensor; channels are
// resized independently.
Tensor resize_bilinear(const Tensor& t, size_t out_h, size_t out_w);

}  // namespace kdx
