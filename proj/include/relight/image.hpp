#pragma once

// Float raster type plus the two file formats the toolkit speaks:
// PFM (portable float map) for all HDR data and PNG for masks and previews.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "relight/core.hpp"

namespace relight {

// Row-major float raster, y = 0 at the top, interleaved channels.
struct Image {
  int width = 0, height = 0, channels = 0;
  std::vector<float> px;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f) : width(w), height(h), channels(c) {
    px.assign(size_t(w) * h * c, fill);
  }

  float& at(int x, int y, int c = 0) { return px[(size_t(y) * width + x) * channels + c]; }
  float at(int x, int y, int c = 0) const { return px[(size_t(y) * width + x) * channels + c]; }
  float3 rgb(int x, int y) const {
    const float* p = &px[(size_t(y) * width + x) * channels];
    return channels >= 3 ? float3{p[0], p[1], p[2]} : float3{p[0], p[0], p[0]};
  }
  void set_rgb(int x, int y, const float3& v) {
    float* p = &px[(size_t(y) * width + x) * channels];
    p[0] = v.x;
    if (channels >= 3) { p[1] = v.y; p[2] = v.z; }
  }
  bool empty() const { return px.empty(); }
  size_t count() const { return px.size(); }

  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

// Bilinear fetch with clamp-to-edge; (u, v) in [0,1]^2, v = 0 at the top row.
inline float3 sample_bilinear(const Image& img, float u, float v) {
  float fx = clampf(u, 0.0f, 1.0f) * img.width - 0.5f;
  float fy = clampf(v, 0.0f, 1.0f) * img.height - 0.5f;
  int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
  float tx = fx - x0, ty = fy - y0;
  auto cx = [&](int x) { return std::clamp(x, 0, img.width - 1); };
  auto cy = [&](int y) { return std::clamp(y, 0, img.height - 1); };
  float3 a = img.rgb(cx(x0), cy(y0)), b = img.rgb(cx(x0 + 1), cy(y0));
  float3 c = img.rgb(cx(x0), cy(y0 + 1)), d = img.rgb(cx(x0 + 1), cy(y0 + 1));
  return lerp(lerp(a, b, tx), lerp(c, d, tx), ty);
}

// ---------------------------------------------------------------- PFM

// PFM: "PF" (3 channel) or "Pf" (1 channel), dims, scale line whose sign
// encodes endianness (negative = little endian), rows stored bottom-to-top.
inline void save_pfm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw IoError(cat("save_pfm: ", path, ": PFM supports 1 or 3 channels, got ", img.channels));
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError(cat("save_pfm: cannot open ", path));
  std::fprintf(f, "%s\n%d %d\n-1.0\n", img.channels == 3 ? "PF" : "Pf", img.width, img.height);
  for (int y = img.height - 1; y >= 0; --y) {
    const float* row = &img.px[size_t(y) * img.width * img.channels];
    if (std::fwrite(row, sizeof(float), size_t(img.width) * img.channels, f) !=
        size_t(img.width) * img.channels) {
      std::fclose(f);
      throw IoError(cat("save_pfm: short write to ", path));
    }
  }
  std::fclose(f);
}

inline Image load_pfm(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError(cat("load_pfm: cannot open ", path));
  char tag[3] = {0, 0, 0};
  int w = 0, h = 0;
  float scale = 0;
  if (std::fscanf(f, "%2s %d %d %f", tag, &w, &h, &scale) != 4 || w <= 0 || h <= 0) {
    std::fclose(f);
    throw IoError(cat("load_pfm: bad header in ", path));
  }
  std::fgetc(f);  // single whitespace after the scale line
  int channels = 0;
  if (std::strcmp(tag, "PF") == 0) channels = 3;
  else if (std::strcmp(tag, "Pf") == 0) channels = 1;
  else {
    std::fclose(f);
    throw IoError(cat("load_pfm: ", path, ": not a PFM file"));
  }
  if (scale >= 0) {
    std::fclose(f);
    throw IoError(cat("load_pfm: ", path, ": big-endian PFM not supported"));
  }
  Image img(w, h, channels);
  for (int y = h - 1; y >= 0; --y) {
    float* row = &img.px[size_t(y) * w * channels];
    if (std::fread(row, sizeof(float), size_t(w) * channels, f) != size_t(w) * channels) {
      std::fclose(f);
      throw IoError(cat("load_pfm: truncated data in ", path));
    }
  }
  std::fclose(f);
  return img;
}

// ---------------------------------------------------------------- VISM

// Raw float block with an 8-token text header: "VISM H W C 1 0 0 0".
inline void save_vism(const std::string& path, int H, int W, int C,
                      const std::vector<float>& data) {
  if (int64_t(data.size()) != int64_t(H) * W * C)
    throw ShapeError(cat("save_vism: ", data.size(), " floats for ", H, "x", W, "x", C));
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError(cat("save_vism: cannot open ", path));
  std::fprintf(f, "VISM %d %d %d 1 0 0 0\n", H, W, C);
  if (std::fwrite(data.data(), 4, data.size(), f) != data.size()) {
    std::fclose(f);
    throw IoError(cat("save_vism: short write to ", path));
  }
  std::fclose(f);
}

inline std::vector<float> load_vism(const std::string& path, int& H, int& W, int& C) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError(cat("load_vism: cannot open ", path));
  char magic[8] = {0};
  int version = 0, r0 = 0, r1 = 0, r2 = 0;
  if (std::fscanf(f, "%7s %d %d %d %d %d %d %d", magic, &H, &W, &C, &version, &r0, &r1, &r2) != 8 ||
      std::string(magic) != "VISM" || H <= 0 || W <= 0 || C <= 0) {
    std::fclose(f);
    throw IoError(cat("load_vism: bad header in ", path));
  }
  std::fgetc(f);  // newline after the header
  std::vector<float> data(size_t(H) * W * C);
  if (std::fread(data.data(), 4, data.size(), f) != data.size()) {
    std::fclose(f);
    throw IoError(cat("load_vism: truncated data in ", path));
  }
  std::fclose(f);
  return data;
}

// ---------------------------------------------------------------- PNG

namespace detail {
struct PngCloser {
  FILE* f = nullptr;
  ~PngCloser() { if (f) std::fclose(f); }
};
}  // namespace detail

// 8-bit PNG, grayscale (1 channel) or RGB (3 channels). Values clamped to [0,1].
inline void save_png(const std::string& path, const Image& img, float gamma = 1.0f) {
  if (img.channels != 1 && img.channels != 3)
    throw IoError(cat("save_png: ", path, ": need 1 or 3 channels, got ", img.channels));
  detail::PngCloser fc{std::fopen(path.c_str(), "wb")};
  if (!fc.f) throw IoError(cat("save_png: cannot open ", path));
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(cat("save_png: libpng failure writing ", path));
  }
  png_init_io(png, fc.f);
  png_set_IHDR(png, info, img.width, img.height, 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(size_t(img.width) * img.channels);
  float inv_gamma = 1.0f / gamma;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        float v = clampf(img.at(x, y, c), 0.0f, 1.0f);
        if (gamma != 1.0f) v = std::pow(v, inv_gamma);
        row[size_t(x) * img.channels + c] = png_byte(std::lround(v * 255.0f));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// 1-bit grayscale PNG for validity masks; nonzero pixels are stored as 1.
inline void save_png_mask(const std::string& path, const std::vector<uint8_t>& mask, int width,
                          int height) {
  if (int64_t(mask.size()) != int64_t(width) * height)
    throw ShapeError(cat("save_png_mask: mask size ", mask.size(), " != ", width, "x", height));
  detail::PngCloser fc{std::fopen(path.c_str(), "wb")};
  if (!fc.f) throw IoError(cat("save_png_mask: cannot open ", path));
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(cat("save_png_mask: libpng failure writing ", path));
  }
  png_init_io(png, fc.f);
  png_set_IHDR(png, info, width, height, 1, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row((width + 7) / 8);
  for (int y = 0; y < height; ++y) {
    std::fill(row.begin(), row.end(), 0);
    for (int x = 0; x < width; ++x)
      if (mask[size_t(y) * width + x]) row[x >> 3] |= png_byte(0x80 >> (x & 7));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Reads any grayscale/RGB(A) PNG; returns floats in [0,1] (alpha dropped).
inline Image load_png(const std::string& path) {
  detail::PngCloser fc{std::fopen(path.c_str(), "rb")};
  if (!fc.f) throw IoError(cat("load_png: cannot open ", path));
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fc.f) != 8 || png_sig_cmp(sig, 0, 8))
    throw IoError(cat("load_png: ", path, ": not a PNG file"));
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(cat("load_png: libpng failure reading ", path));
  }
  png_init_io(png, fc.f);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_set_expand(png);         // palettes, <8-bit gray, tRNS -> 8 bit
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  int w = int(png_get_image_width(png, info));
  int h = int(png_get_image_height(png, info));
  int c = int(png_get_channels(png, info));
  if (c != 1 && c != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(cat("load_png: ", path, ": unsupported channel count ", c));
  }
  std::vector<png_byte> row(size_t(w) * c);
  Image img(w, h, c);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (size_t i = 0; i < row.size(); ++i)
      img.px[size_t(y) * w * c + i] = float(row[i]) / 255.0f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline std::vector<uint8_t> load_png_mask(const std::string& path, int& width, int& height) {
  Image img = load_png(path);
  width = img.width;
  height = img.height;
  std::vector<uint8_t> mask(size_t(width) * height);
  for (size_t i = 0; i < mask.size(); ++i)
    mask[i] = img.px[i * img.channels] > 0.5f ? 1 : 0;
  return mask;
}

}  // namespace relight
