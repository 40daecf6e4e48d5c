#pragma once

#include <png.h>

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "busu/tensor.hpp"

namespace busu {

/// 8-bit raster, interleaved channels (1 = gray, 3 = RGB).
struct Raster {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;

  Raster() = default;
  Raster(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }
};

namespace detail {

inline std::string lower_ext(const std::string& path) {
  const auto dot = path.rfind('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  for (auto& ch : ext) ch = char(std::tolower(static_cast<unsigned char>(ch)));
  return ext;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline Raster read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IngestionError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError("libpng initialisation failed");
  }
  Raster r;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError("corrupt PNG: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  r.width = png_get_image_width(png, info);
  r.height = png_get_image_height(png, info);
  r.channels = png_get_channels(png, info);
  r.pixels.resize(r.width * r.height * r.channels);
  rows.resize(r.height);
  for (std::size_t y = 0; y < r.height; ++y) rows[y] = r.pixels.data() + y * r.width * r.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  if (r.channels != 1 && r.channels != 3) throw IngestionError("unsupported PNG channel layout: " + path);
  return r;
}

inline void write_png(const std::string& path, const Raster& r) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw FormatError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng initialisation failed");
  }
  std::vector<png_bytep> rows(r.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("PNG write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, png_uint_32(r.width), png_uint_32(r.height), 8,
               r.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < r.height; ++y)
    rows[y] = const_cast<png_bytep>(r.pixels.data() + y * r.width * r.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline void skip_pnm_space(std::istream& is) {
  while (true) {
    int c = is.peek();
    if (c == '#') {
      std::string dummy;
      std::getline(is, dummy);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      return;
    }
  }
}

inline Raster read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5" && magic != "P6") throw IngestionError("unsupported PNM variant in " + path + " (need P5/P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  skip_pnm_space(is);
  is >> w;
  skip_pnm_space(is);
  is >> h;
  skip_pnm_space(is);
  is >> maxval;
  is.get();
  if (!is || w == 0 || h == 0 || maxval == 0 || maxval > 255) throw IngestionError("bad PNM header in " + path);
  Raster r(w, h, magic == "P5" ? 1 : 3);
  if (!is.read(reinterpret_cast<char*>(r.pixels.data()), std::streamsize(r.pixels.size())))
    throw IngestionError("truncated PNM data in " + path);
  if (maxval != 255)
    for (auto& p : r.pixels) p = std::uint8_t((unsigned(p) * 255 + maxval / 2) / maxval);
  return r;
}

inline void write_pnm(const std::string& path, const Raster& r) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << (r.channels == 1 ? "P5" : "P6") << "\n" << r.width << " " << r.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(r.pixels.data()), std::streamsize(r.pixels.size()));
}

}  // namespace detail

/// Reads PNG, PGM (P5) or PPM (P6) by extension.
inline Raster read_raster(const std::string& path) {
  const auto ext = detail::lower_ext(path);
  if (ext == "png") return detail::read_png(path);
  if (ext == "pgm" || ext == "ppm" || ext == "pnm") return detail::read_pnm(path);
  throw IngestionError("unsupported raster format '" + ext + "' for " + path + " (convert to PNG or PGM/PPM)");
}

inline void write_raster(const std::string& path, const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw FormatError("rasters must have 1 or 3 channels");
  const auto ext = detail::lower_ext(path);
  if (ext == "png") return detail::write_png(path, r);
  if (ext == "pgm" || ext == "ppm" || ext == "pnm") return detail::write_pnm(path, r);
  throw FormatError("unsupported raster format '" + ext + "' for " + path);
}

}  // namespace busu
