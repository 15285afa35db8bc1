#include "attnconv/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "attnconv/util.hpp"

#ifdef ATTNCONV_HAVE_PNG
#include <png.h>
#endif
#ifdef ATTNCONV_HAVE_JPEG
#include <csetjmp>
#include <jpeglib.h>
#endif

namespace attnconv {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open image file: " + path);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                     std::istreambuf_iterator<char>());
}

// P6, maxval <= 255
ImageU8 decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& path) {
    std::size_t pos = 2;   // past "P6"
    auto skip_space = [&]() {
        while (pos < bytes.size()) {
            if (std::isspace(bytes[pos])) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&]() {
        skip_space();
        std::int64_t v = 0;
        bool any = false;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos] - '0');
            ++pos;
            any = true;
        }
        if (!any) fail("malformed PPM header: " + path);
        return v;
    };
    const std::int64_t w = read_int();
    const std::int64_t h = read_int();
    const std::int64_t maxval = read_int();
    if (maxval < 1 || maxval > 255) fail("unsupported PPM maxval in " + path);
    ++pos;   // single whitespace after maxval
    const std::size_t need = static_cast<std::size_t>(w * h * 3);
    if (bytes.size() - pos < need)
        fail("truncated PPM payload in " + path + ": expected " + std::to_string(need) +
             " bytes, got " + std::to_string(bytes.size() - pos));
    ImageU8 img{w, h, {}};
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                      bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
    if (maxval != 255)
        for (auto& p : img.pixels)
            p = static_cast<std::uint8_t>(p * 255 / maxval);
    return img;
}

#ifdef ATTNCONV_HAVE_PNG
ImageU8 decode_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) fail("cannot open image file: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        fail("libpng initialization failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        fail("cannot decode PNG: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    // normalize everything to 8-bit RGB
    png_set_expand(png);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    png_set_strip_alpha(png);
    const auto color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    ImageU8 img;
    img.width = static_cast<std::int64_t>(png_get_image_width(png, info));
    img.height = static_cast<std::int64_t>(png_get_image_height(png, info));
    img.pixels.resize(static_cast<std::size_t>(img.width * img.height * 3));
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    for (std::int64_t y = 0; y < img.height; ++y)
        rows[static_cast<std::size_t>(y)] = img.pixels.data() + y * img.width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}
#endif

#ifdef ATTNCONV_HAVE_JPEG
struct JpegErrorMgr {
    jpeg_error_mgr base;
    std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
    std::longjmp(reinterpret_cast<JpegErrorMgr*>(cinfo->err)->jump, 1);
}

ImageU8 decode_jpeg(const std::vector<std::uint8_t>& bytes, const std::string& path) {
    jpeg_decompress_struct cinfo;
    JpegErrorMgr err;
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        fail("cannot decode JPEG: " + path);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);

    ImageU8 img;
    img.width = cinfo.output_width;
    img.height = cinfo.output_height;
    img.pixels.resize(static_cast<std::size_t>(img.width * img.height * 3));
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = img.pixels.data() +
                       static_cast<std::int64_t>(cinfo.output_scanline) * img.width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}
#endif

}  // namespace

ImageU8 decode_image(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file(path);
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes, path);
    if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' &&
        bytes[3] == 'G') {
#ifdef ATTNCONV_HAVE_PNG
        return decode_png(path);
#else
        fail("PNG support not built in, cannot decode " + path);
#endif
    }
    if (bytes.size() >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8) {
#ifdef ATTNCONV_HAVE_JPEG
        return decode_jpeg(bytes, path);
#else
        fail("JPEG support not built in, cannot decode " + path);
#endif
    }
    fail("unrecognized image format: " + path);
}

void write_ppm(const std::string& path, const ImageU8& image) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("cannot write " + path);
    out << "P6\n" << image.width << " " << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()),
              static_cast<std::streamsize>(image.pixels.size()));
    if (!out) fail("short write to " + path);
}

void write_pgm(const std::string& path, const std::vector<std::uint8_t>& pixels,
               std::int64_t width, std::int64_t height) {
    if (static_cast<std::int64_t>(pixels.size()) != width * height)
        fail("write_pgm: pixel count does not match dimensions");
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("cannot write " + path);
    out << "P5\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()),
              static_cast<std::streamsize>(pixels.size()));
    if (!out) fail("short write to " + path);
}

std::vector<float> to_planar_float(const ImageU8& image) {
    const std::int64_t hw = image.width * image.height;
    std::vector<float> out(static_cast<std::size_t>(3 * hw));
    for (std::int64_t i = 0; i < hw; ++i)
        for (std::int64_t c = 0; c < 3; ++c)
            out[static_cast<std::size_t>(c * hw + i)] =
                static_cast<float>(image.pixels[static_cast<std::size_t>(i * 3 + c)]) / 255.0f;
    return out;
}

ImageU8 from_planar_float(const std::vector<float>& planes, std::int64_t height,
                          std::int64_t width) {
    const std::int64_t hw = width * height;
    ImageU8 img{width, height, std::vector<std::uint8_t>(static_cast<std::size_t>(hw * 3))};
    for (std::int64_t i = 0; i < hw; ++i)
        for (std::int64_t c = 0; c < 3; ++c) {
            const float v = std::clamp(planes[static_cast<std::size_t>(c * hw + i)], 0.0f, 1.0f);
            img.pixels[static_cast<std::size_t>(i * 3 + c)] =
                static_cast<std::uint8_t>(std::lround(v * 255.0f));
        }
    return img;
}

std::vector<float> resize_bilinear(const std::vector<float>& planes, std::int64_t height,
                                   std::int64_t width, std::int64_t out_height,
                                   std::int64_t out_width) {
    std::vector<float> out(static_cast<std::size_t>(3 * out_height * out_width));
    const double sy = static_cast<double>(height) / static_cast<double>(out_height);
    const double sx = static_cast<double>(width) / static_cast<double>(out_width);
    for (std::int64_t c = 0; c < 3; ++c) {
        const float* src = planes.data() + c * height * width;
        float* dst = out.data() + c * out_height * out_width;
        for (std::int64_t y = 0; y < out_height; ++y) {
            const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
            std::int64_t y0 = static_cast<std::int64_t>(std::floor(fy));
            const double wy = fy - static_cast<double>(y0);
            std::int64_t y1 = std::min(y0 + 1, height - 1);
            y0 = std::clamp<std::int64_t>(y0, 0, height - 1);
            for (std::int64_t x = 0; x < out_width; ++x) {
                const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
                std::int64_t x0 = static_cast<std::int64_t>(std::floor(fx));
                const double wx = fx - static_cast<double>(x0);
                std::int64_t x1 = std::min(x0 + 1, width - 1);
                x0 = std::clamp<std::int64_t>(x0, 0, width - 1);
                const double top = src[y0 * width + x0] * (1.0 - wx) + src[y0 * width + x1] * wx;
                const double bot = src[y1 * width + x0] * (1.0 - wx) + src[y1 * width + x1] * wx;
                dst[y * out_width + x] = static_cast<float>(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    return out;
}

}  // namespace attnconv
