#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pia/tensor.hpp"

// Binary Netpbm codecs: P6 (RGB) for dataset images, P5 (gray) for mask dumps.
namespace pia::image_io {

inline std::uint8_t quantize(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

namespace detail {

inline void write_netpbm(const std::filesystem::path& path, const char* magic, std::size_t width, std::size_t height,
                         const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << magic << '\n' << width << ' ' << height << '\n' << 255 << '\n';
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline std::size_t read_header_int(std::istream& in, const std::string& path) {
    // Skips whitespace and '#' comments before each header token.
    for (;;) {
        const int c = in.peek();
        if (c == '#') {
            std::string ignored;
            std::getline(in, ignored);
        } else if (c == ' ' || c == '\n' || c == '\r' || c == '\t') {
            in.get();
        } else {
            break;
        }
    }
    long long v = -1;
    in >> v;
    if (!in || v <= 0) throw IoError("malformed netpbm header in " + path);
    return static_cast<std::size_t>(v);
}

}  // namespace detail

/// Writes a [3,H,W] tensor with values in [0,1] as binary PPM.
inline void write_ppm(const std::filesystem::path& path, const Tensor& rgb) {
    if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("write_ppm: expected [3,H,W], got " + to_string(rgb.shape));
    const std::size_t h = rgb.dim(1), w = rgb.dim(2);
    std::vector<std::uint8_t> bytes(3 * h * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) bytes[(y * w + x) * 3 + c] = quantize(rgb[(c * h + y) * w + x]);
        }
    }
    detail::write_netpbm(path, "P6", w, h, bytes);
}

/// Reads a binary PPM into a [3,H,W] tensor scaled to [0,1].
inline Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("missing image file " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P6") throw IoError("not a binary PPM (P6): " + path.string());
    const auto w = detail::read_header_int(in, path.string());
    const auto h = detail::read_header_int(in, path.string());
    const auto maxv = detail::read_header_int(in, path.string());
    if (maxv != 255) throw IoError("unsupported PPM max value " + std::to_string(maxv) + " in " + path.string());
    in.get();
    std::vector<std::uint8_t> bytes(3 * h * w);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError("truncated PPM " + path.string());
    Tensor out = Tensor::zeros({3, h, w});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) out[(c * h + y) * w + x] = bytes[(y * w + x) * 3 + c] / 255.0;
        }
    }
    return out;
}

/// Writes an [H,W] or [1,H,W] map with values in [0,1] as binary PGM.
inline void write_pgm(const std::filesystem::path& path, const Tensor& gray) {
    std::size_t h = 0, w = 0;
    if (gray.rank() == 2) {
        h = gray.dim(0);
        w = gray.dim(1);
    } else if (gray.rank() == 3 && gray.dim(0) == 1) {
        h = gray.dim(1);
        w = gray.dim(2);
    } else {
        throw ShapeError("write_pgm: expected [H,W] or [1,H,W], got " + to_string(gray.shape));
    }
    std::vector<std::uint8_t> bytes(h * w);
    for (std::size_t i = 0; i < h * w; ++i) bytes[i] = quantize(gray[i]);
    detail::write_netpbm(path, "P5", w, h, bytes);
}

struct GrayImage {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;
};

inline GrayImage read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("missing image file " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P5") throw IoError("not a binary PGM (P5): " + path.string());
    GrayImage img;
    img.width = detail::read_header_int(in, path.string());
    img.height = detail::read_header_int(in, path.string());
    if (detail::read_header_int(in, path.string()) != 255) throw IoError("unsupported PGM max value in " + path.string());
    in.get();
    img.pixels.resize(img.width * img.height);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw IoError("truncated PGM " + path.string());
    return img;
}

}  // namespace pia::image_io
