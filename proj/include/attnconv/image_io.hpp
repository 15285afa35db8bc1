#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace attnconv {

// 8-bit RGB image, row-major, interleaved (r,g,b per pixel).
struct ImageU8 {
    std::int64_t width = 0;
    std::int64_t height = 0;
    std::vector<std::uint8_t> pixels;
};

// Decodes PPM (P6), PNG, or JPEG by content sniffing; grayscale sources are
// replicated to three channels. Throws naming the path on failure.
ImageU8 decode_image(const std::string& path);

void write_ppm(const std::string& path, const ImageU8& image);

// 8-bit grayscale PGM (P5).
void write_pgm(const std::string& path, const std::vector<std::uint8_t>& pixels,
               std::int64_t width, std::int64_t height);

// Planar [3, H, W] float image in [0,1] from interleaved bytes and back.
std::vector<float> to_planar_float(const ImageU8& image);
ImageU8 from_planar_float(const std::vector<float>& planes, std::int64_t height,
                          std::int64_t width);

// Bilinear resample of a planar [3, H, W] image to [3, out_h, out_w]
// (half-pixel centers, edge clamped; aspect ratio not preserved).
std::vector<float> resize_bilinear(const std::vector<float>& planes, std::int64_t height,
                                   std::int64_t width, std::int64_t out_height,
                                   std::int64_t out_width);

}  // namespace attnconv
