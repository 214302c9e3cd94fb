#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "ibf/error.hpp"
#include "ibf/image.hpp"

namespace ibf {

std::size_t Mask::count() const {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
}

void snap_to_8bit(Image& img) {
    for (double& v : img.data) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

void crop_into(const Image& img, int y0, int x0, int p, Tensor& out, int n) {
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < p; ++y) {
            const double* src = &img.data[(static_cast<std::size_t>(c) * img.height + y0 + y) * img.width + x0];
            std::copy(src, src + p, &out.data[out.index(n, c, y, 0)]);
        }
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_raw(const std::filesystem::path& path, int width, int height, int color_type,
               const std::vector<std::uint8_t>& bytes, int channels) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng: out of memory");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng: failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(y) * width * channels));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

struct RawImage {
    int width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> bytes;
};

RawImage read_raw(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw DataError("cannot open " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw DataError("not a PNG file: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("libpng: out of memory");
    }
    RawImage raw;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("libpng: failed reading " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    raw.width = static_cast<int>(png_get_image_width(png, info));
    raw.height = static_cast<int>(png_get_image_height(png, info));
    raw.channels = png_get_channels(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    raw.bytes.resize(stride * raw.height);
    for (int y = 0; y < raw.height; ++y) png_read_row(png, raw.bytes.data() + y * stride, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return raw;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw ShapeError("write_png: need 1 or 3 channels");
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(img.width) * img.height * img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
                bytes[(static_cast<std::size_t>(y) * img.width + x) * img.channels + c] =
                    static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
    write_raw(path, img.width, img.height, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
              bytes, img.channels);
}

Image read_png(const std::filesystem::path& path) {
    const RawImage raw = read_raw(path);
    Image img(raw.width, raw.height, raw.channels == 1 || raw.channels == 2 ? 1 : 3);
    const int src_c = raw.channels;
    for (int y = 0; y < raw.height; ++y)
        for (int x = 0; x < raw.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                img.at(c, y, x) = raw.bytes[(static_cast<std::size_t>(y) * raw.width + x) * src_c + c] / 255.0;
    return img;
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
    std::vector<std::uint8_t> bytes(mask.data.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
    write_raw(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, bytes, 1);
}

Mask read_mask_png(const std::filesystem::path& path) {
    const Image img = read_png(path);
    Mask m(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) m.set(y, x, img.at(0, y, x) > 0.0);
    return m;
}

}  // namespace ibf
