#pragma once

// Image codecs: 8-bit PNG (gray / RGB) and the PSID raw float format.
//
// PSID layout, little-endian throughout:
//   bytes 0..3   magic "PSID"
//   u32 h, u32 w, u32 c
//   h*w*c IEEE-754 binary32 values, row-major channel-last
// Float payloads round-trip bit-exactly; PNG quantizes with round-half-up.

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "psid/tensor.hpp"

namespace psid {

namespace detail {

inline void put_u32le(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline std::vector<unsigned char> read_file(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot open file: " + path);
  std::fseek(f.get(), 0, SEEK_END);
  const long len = std::ftell(f.get());
  if (len < 0) throw std::runtime_error("cannot stat file: " + path);
  std::fseek(f.get(), 0, SEEK_SET);
  std::vector<unsigned char> buf(static_cast<size_t>(len));
  if (len > 0 && std::fread(buf.data(), 1, buf.size(), f.get()) != buf.size()) {
    throw std::runtime_error("short read: " + path);
  }
  return buf;
}

inline void write_file(const std::string& path,
                       const std::vector<unsigned char>& bytes) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot open file for writing: " + path);
  if (!bytes.empty() &&
      std::fwrite(bytes.data(), 1, bytes.size(), f.get()) != bytes.size()) {
    throw std::runtime_error("short write: " + path);
  }
}

}  // namespace detail

// Round-half-up 8-bit quantization of a unit-range intensity.
inline unsigned char quantize_u8(double v) {
  const double clamped = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<unsigned char>(std::floor(clamped * 255.0 + 0.5));
}

// ---------------------------------------------------------------------------
// PSID raw codec
// ---------------------------------------------------------------------------

template <typename T>
std::vector<unsigned char> encode_psid(const Image<T>& img) {
  std::vector<unsigned char> out;
  out.reserve(16 + img.size() * 4);
  out.insert(out.end(), {'P', 'S', 'I', 'D'});
  detail::put_u32le(out, static_cast<std::uint32_t>(img.h));
  detail::put_u32le(out, static_cast<std::uint32_t>(img.w));
  detail::put_u32le(out, static_cast<std::uint32_t>(img.c));
  for (const T v : img.data) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32le(out, bits);
  }
  return out;
}

template <typename T>
Image<T> decode_psid(const std::vector<unsigned char>& bytes,
                     const std::string& origin = "<memory>") {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "PSID", 4) != 0) {
    throw std::runtime_error("not a PSID file: " + origin);
  }
  const std::uint32_t h = detail::get_u32le(&bytes[4]);
  const std::uint32_t w = detail::get_u32le(&bytes[8]);
  const std::uint32_t c = detail::get_u32le(&bytes[12]);
  const std::uint64_t count = std::uint64_t(h) * w * c;
  if (bytes.size() != 16 + count * 4) {
    throw std::runtime_error("PSID payload size mismatch: " + origin);
  }
  Image<T> img(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t bits = detail::get_u32le(&bytes[16 + i * 4]);
    float f;
    std::memcpy(&f, &bits, 4);
    img.data[i] = static_cast<T>(f);
  }
  return img;
}

// ---------------------------------------------------------------------------
// PNG codec (libpng). Only 8-bit gray and 8-bit RGB, non-interlaced.
// ---------------------------------------------------------------------------

namespace detail {

inline void png_throw(png_structp, png_const_charp msg) {
  throw std::runtime_error(std::string("libpng: ") + msg);
}
inline void png_ignore_warning(png_structp, png_const_charp) {}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  PngReader() {
    png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw,
                                 png_ignore_warning);
    if (png) info = png_create_info_struct(png);
    if (!png || !info) throw std::runtime_error("libpng: allocation failed");
  }
  ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  PngWriter() {
    png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw,
                                  png_ignore_warning);
    if (png) info = png_create_info_struct(png);
    if (!png || !info) throw std::runtime_error("libpng: allocation failed");
  }
  ~PngWriter() { png_destroy_write_struct(&png, &info); }
};

struct MemorySource {
  const unsigned char* data;
  size_t size;
  size_t pos;
};

inline void png_mem_read(png_structp png, png_bytep out, png_size_t n) {
  auto* src = static_cast<MemorySource*>(png_get_io_ptr(png));
  if (src->pos + n > src->size) png_error(png, "unexpected end of PNG data");
  std::memcpy(out, src->data + src->pos, n);
  src->pos += n;
}

inline void png_mem_write(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}

inline void png_mem_flush(png_structp) {}

}  // namespace detail

template <typename T>
Image<T> decode_png(const std::vector<unsigned char>& bytes,
                    const std::string& origin = "<memory>") {
  detail::PngReader r;
  detail::MemorySource src{bytes.data(), bytes.size(), 0};
  png_set_read_fn(r.png, &src, detail::png_mem_read);
  png_read_info(r.png, r.info);

  const png_uint_32 w = png_get_image_width(r.png, r.info);
  const png_uint_32 h = png_get_image_height(r.png, r.info);
  const int bit_depth = png_get_bit_depth(r.png, r.info);
  const int color_type = png_get_color_type(r.png, r.info);
  const int interlace = png_get_interlace_type(r.png, r.info);

  if (bit_depth != 8) {
    throw std::runtime_error("unsupported PNG bit depth " +
                             std::to_string(bit_depth) + " (want 8): " + origin);
  }
  if (color_type != PNG_COLOR_TYPE_GRAY && color_type != PNG_COLOR_TYPE_RGB) {
    throw std::runtime_error(
        "unsupported PNG color type (want 8-bit gray or RGB): " + origin);
  }
  if (interlace != PNG_INTERLACE_NONE) {
    throw std::runtime_error("interlaced PNG not supported: " + origin);
  }

  const int channels = (color_type == PNG_COLOR_TYPE_GRAY) ? 1 : 3;
  Image<T> img(static_cast<int>(h), static_cast<int>(w), channels);
  std::vector<unsigned char> row(static_cast<size_t>(w) * channels);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(r.png, row.data(), nullptr);
    for (size_t i = 0; i < row.size(); ++i) {
      img.data[static_cast<size_t>(y) * row.size() + i] =
          static_cast<T>(row[i]) / static_cast<T>(255);
    }
  }
  png_read_end(r.png, nullptr);
  return img;
}

template <typename T>
std::vector<unsigned char> encode_png(const Image<T>& img) {
  if (img.c != 1 && img.c != 3) {
    throw std::runtime_error("PNG export needs 1 or 3 channels, got " +
                             std::to_string(img.c));
  }
  detail::PngWriter wr;
  std::vector<unsigned char> out;
  png_set_write_fn(wr.png, &out, detail::png_mem_write, detail::png_mem_flush);
  const int color_type =
      (img.c == 1) ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(wr.png, wr.info, static_cast<png_uint_32>(img.w),
               static_cast<png_uint_32>(img.h), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(wr.png, wr.info);
  std::vector<unsigned char> row(static_cast<size_t>(img.w) * img.c);
  for (int y = 0; y < img.h; ++y) {
    for (size_t i = 0; i < row.size(); ++i) {
      row[i] = quantize_u8(
          static_cast<double>(img.data[static_cast<size_t>(y) * row.size() + i]));
    }
    png_write_row(wr.png, row.data());
  }
  png_write_end(wr.png, nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// Path-level entry points. Loading sniffs the content magic; saving picks the
// codec from the file extension (.png or .psid).
// ---------------------------------------------------------------------------

template <typename T = float>
Image<T> load_image(const std::string& path) {
  const auto bytes = detail::read_file(path);
  static const unsigned char png_sig[4] = {0x89, 'P', 'N', 'G'};
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), "PSID", 4) == 0) {
    return decode_psid<T>(bytes, path);
  }
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), png_sig, 4) == 0) {
    return decode_png<T>(bytes, path);
  }
  throw std::runtime_error("unrecognized image format (want PNG or PSID): " +
                           path);
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename T>
void save_image(const Image<T>& img, const std::string& path) {
  if (has_suffix(path, ".png")) {
    detail::write_file(path, encode_png(img));
  } else if (has_suffix(path, ".psid")) {
    detail::write_file(path, encode_psid(img));
  } else {
    throw std::runtime_error("unknown image extension (want .png or .psid): " +
                             path);
  }
}

}  // namespace psid
