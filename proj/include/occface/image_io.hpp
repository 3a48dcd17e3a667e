#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <csetjmp>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <png.h>

#include "occface/error.hpp"
#include "occface/image.hpp"

// Raster IO: 8/16-bit PNG through libpng, binary and ASCII PGM/PPM (P2, P3,
// P5, P6). Reading scales to [0,1]; writing rounds to 8 bits. The format is
// chosen by content on read and by extension on write.
//
// Depth dump layout (little-endian):
//   magic "OCCDEPTH" | uint32 W | uint32 H | W*H float32, row-major
// +inf marks uncovered pixels.

namespace occface {

namespace detail {

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (!std::filesystem::exists(path))
      throw Error(ErrorKind::MissingFile, "no such file: " + path.string());
    throw Error(ErrorKind::Io, "cannot open " + path.string());
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const void* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw Error(ErrorKind::Io, "short write to " + path.string());
}

inline unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

constexpr unsigned char kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

// libpng is C: errors must leave through longjmp, never a C++ throw. The
// setjmp frames below hold only trivially destructible locals; the message is
// copied out and the exception raised after the jump lands.
struct PngError {
  std::jmp_buf jump;
  char message[256];
};

inline void png_on_error(png_structp png, png_const_charp msg) {
  auto* err = static_cast<PngError*>(png_get_error_ptr(png));
  std::snprintf(err->message, sizeof err->message, "%s", msg);
  std::longjmp(err->jump, 1);
}
inline void png_on_warning(png_structp, png_const_charp) {}

struct PngSource {
  const unsigned char* data;
  std::size_t size;
  std::size_t pos;
};

inline void png_read_bytes(png_structp png, png_bytep out, png_size_t n) {
  auto* src = static_cast<PngSource*>(png_get_io_ptr(png));
  if (src->pos + n > src->size) png_error(png, "truncated file");
  std::memcpy(out, src->data + src->pos, n);
  src->pos += n;
}

struct PngHeader {
  png_uint_32 width, height;
  int channels, bits;
  std::size_t stride;
};

// Two passes so the caller can size the pixel buffer: with pixels == nullptr
// only the header is decoded.
inline bool png_decode_pass(const std::vector<unsigned char>& bytes, PngHeader& hdr,
                            unsigned char* pixels, PngError& err) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_on_error,
                                           png_on_warning);
  if (!png) {
    std::snprintf(err.message, sizeof err.message, "out of memory");
    return false;
  }
  png_infop info = png_create_info_struct(png);
  PngSource src{bytes.data(), bytes.size(), 0};
  png_bytep* volatile rows = nullptr;  // assigned after setjmp
  if (setjmp(err.jump)) {
    std::free(rows);
    png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    return false;
  }
  if (!info) png_error(png, "out of memory");
  png_set_read_fn(png, &src, png_read_bytes);
  png_read_info(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int type = png_get_color_type(png, info);
  if (type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (depth == 16 && std::endian::native == std::endian::little) png_set_swap(png);
  png_read_update_info(png, info);
  hdr.width = png_get_image_width(png, info);
  hdr.height = png_get_image_height(png, info);
  hdr.channels = png_get_channels(png, info);
  hdr.bits = png_get_bit_depth(png, info);
  hdr.stride = png_get_rowbytes(png, info);
  if (pixels) {
    rows = static_cast<png_bytep*>(std::malloc(sizeof(png_bytep) * hdr.height));
    if (!rows) png_error(png, "out of memory");
    for (png_uint_32 y = 0; y < hdr.height; ++y) rows[y] = pixels + y * hdr.stride;
    png_read_image(png, rows);
    png_read_end(png, nullptr);
  }
  std::free(rows);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

inline Image decode_png(const std::vector<unsigned char>& bytes) {
  PngError err{};
  PngHeader hdr{};
  if (!png_decode_pass(bytes, hdr, nullptr, err))
    throw Error(ErrorKind::CorruptFile, std::string("png: ") + err.message);
  if (hdr.width > (1u << 16) || hdr.height > (1u << 16))
    throw Error(ErrorKind::CorruptFile, "png: implausible dimensions");
  std::vector<unsigned char> raw(hdr.stride * hdr.height);
  if (!png_decode_pass(bytes, hdr, raw.data(), err))
    throw Error(ErrorKind::CorruptFile, std::string("png: ") + err.message);

  const std::size_t w = hdr.width, h = hdr.height, ch = static_cast<std::size_t>(hdr.channels);
  Image out(static_cast<int>(w), static_cast<int>(h), hdr.channels);
  auto dst = out.values();
  for (std::size_t y = 0; y < h; ++y) {
    const unsigned char* row = raw.data() + y * hdr.stride;
    for (std::size_t i = 0; i < w * ch; ++i) {
      if (hdr.bits == 16) {
        std::uint16_t v;
        std::memcpy(&v, row + 2 * i, 2);
        dst[y * w * ch + i] = v / 65535.0;
      } else {
        dst[y * w * ch + i] = row[i] / 255.0;
      }
    }
  }
  return out;
}

inline bool png_encode(std::FILE* fp, const unsigned char* raw, png_uint_32 w, png_uint_32 h,
                       int channels, PngError& err) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_on_error,
                                            png_on_warning);
  if (!png) {
    std::snprintf(err.message, sizeof err.message, "out of memory");
    return false;
  }
  png_infop info = png_create_info_struct(png);
  if (setjmp(err.jump)) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    return false;
  }
  if (!info) png_error(png, "out of memory");
  png_init_io(png, fp);
  png_set_IHDR(png, info, w, h, 8, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (png_uint_32 y = 0; y < h; ++y)
    png_write_row(png, raw + static_cast<std::size_t>(y) * w * static_cast<std::size_t>(channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

inline void encode_png(const Image& image, const std::filesystem::path& path) {
  detail::require(image.channels() == 1 || image.channels() == 3, ErrorKind::UnsupportedFormat,
                  "png output needs 1 or 3 channels");
  std::vector<unsigned char> raw(image.size());
  auto src = image.values();
  std::transform(src.begin(), src.end(), raw.begin(), to_byte);

  std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.string().c_str(), "wb"),
                                                     std::fclose);
  if (!fp) throw Error(ErrorKind::Io, "cannot write " + path.string());
  PngError err{};
  if (!png_encode(fp.get(), raw.data(), static_cast<png_uint_32>(image.width()),
                  static_cast<png_uint_32>(image.height()), image.channels(), err))
    throw Error(ErrorKind::Io, std::string("png: ") + err.message);
  if (std::fflush(fp.get()) != 0) throw Error(ErrorKind::Io, "short write to " + path.string());
}

/// Netpbm header tokens, skipping whitespace and # comments.
class PnmCursor {
 public:
  explicit PnmCursor(const std::vector<unsigned char>& b) : b_(b) {}

  long number() {
    skip();
    if (pos_ >= b_.size() || !std::isdigit(b_[pos_]))
      throw Error(ErrorKind::CorruptFile, "pnm: expected a number");
    long v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_++] - '0');
      if (v > (1L << 24)) throw Error(ErrorKind::CorruptFile, "pnm: value out of range");
    }
    return v;
  }
  // exactly one whitespace byte separates the header from binary samples
  void end_header() {
    if (pos_ >= b_.size() || !std::isspace(b_[pos_]))
      throw Error(ErrorKind::CorruptFile, "pnm: malformed header");
    ++pos_;
  }
  std::size_t pos() const { return pos_; }

 private:
  void skip() {
    while (pos_ < b_.size()) {
      if (std::isspace(b_[pos_])) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }
  const std::vector<unsigned char>& b_;
  std::size_t pos_ = 2;
};

inline Image decode_pnm(const std::vector<unsigned char>& bytes) {
  const char kind = static_cast<char>(bytes[1]);
  const int channels = kind == '2' || kind == '5' ? 1 : 3;
  const bool binary = kind == '5' || kind == '6';
  PnmCursor cur(bytes);
  const long w = cur.number(), h = cur.number(), maxval = cur.number();
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535)
    throw Error(ErrorKind::CorruptFile, "pnm: invalid dimensions or maxval");
  Image out(static_cast<int>(w), static_cast<int>(h), channels);
  auto dst = out.values();
  const auto maxd = static_cast<double>(maxval);
  if (binary) {
    cur.end_header();
    const std::size_t width = maxval > 255 ? 2 : 1;
    if (bytes.size() - cur.pos() < dst.size() * width)
      throw Error(ErrorKind::CorruptFile, "pnm: truncated pixel data");
    const unsigned char* p = bytes.data() + cur.pos();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      const long v = width == 2 ? (p[2 * i] << 8) | p[2 * i + 1] : p[i];
      if (v > maxval) throw Error(ErrorKind::CorruptFile, "pnm: sample exceeds maxval");
      dst[i] = static_cast<double>(v) / maxd;
    }
  } else {
    for (double& d : dst) {
      const long v = cur.number();
      if (v > maxval) throw Error(ErrorKind::CorruptFile, "pnm: sample exceeds maxval");
      d = static_cast<double>(v) / maxd;
    }
  }
  return out;
}

inline void encode_pnm(const Image& image, const std::filesystem::path& path) {
  detail::require(image.channels() == 1 || image.channels() == 3, ErrorKind::UnsupportedFormat,
                  "pnm output needs 1 or 3 channels");
  std::string header = (image.channels() == 1 ? "P5\n" : "P6\n") + std::to_string(image.width()) +
                       " " + std::to_string(image.height()) + "\n255\n";
  std::vector<unsigned char> bytes(header.begin(), header.end());
  for (double v : image.values()) bytes.push_back(to_byte(v));
  write_bytes(path, bytes.data(), bytes.size());
}

inline std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

}  // namespace detail

/// Loads PNG, PGM or PPM, values scaled to [0,1]. Alpha is dropped.
inline Image load_image(const std::filesystem::path& path) {
  const auto bytes = detail::read_bytes(path);
  if (bytes.size() >= 8 && std::equal(bytes.begin(), bytes.begin() + 8, detail::kPngSignature))
    return detail::decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && std::string_view("2356").find(static_cast<char>(bytes[1])) != std::string_view::npos)
    return detail::decode_pnm(bytes);
  const auto ext = detail::lower_extension(path);
  // a known extension with the wrong content is damage, anything else is just unsupported
  if (ext == ".png" || ext == ".pgm" || ext == ".ppm" || ext == ".pnm")
    throw Error(ErrorKind::CorruptFile, "unrecognized header in " + path.string());
  throw Error(ErrorKind::UnsupportedFormat, "unsupported image format: " + path.string());
}

/// Loads a mask; any nonzero sample becomes 1. Colour masks are reduced by
/// taking the maximum over channels.
inline Mask load_mask(const std::filesystem::path& path) {
  Image raw = load_image(path);
  if (raw.channels() == 1) return Mask::binarize(raw);
  Image gray(raw.width(), raw.height(), 1);
  for (int y = 0; y < raw.height(); ++y)
    for (int x = 0; x < raw.width(); ++x) {
      double m = 0.0;
      for (int c = 0; c < raw.channels(); ++c) m = std::max(m, raw.at(x, y, c));
      gray.at(x, y) = m;
    }
  return Mask::binarize(gray);
}

/// Writes PNG for .png, binary PGM/PPM for .pgm/.ppm/.pnm.
inline void save_image(const Image& image, const std::filesystem::path& path) {
  const auto ext = detail::lower_extension(path);
  if (ext == ".png") return detail::encode_png(image, path);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") {
    detail::require(ext != ".pgm" || image.channels() == 1, ErrorKind::UnsupportedFormat,
                    "pgm needs a single channel");
    detail::require(ext != ".ppm" || image.channels() == 3, ErrorKind::UnsupportedFormat,
                    "ppm needs three channels");
    return detail::encode_pnm(image, path);
  }
  throw Error(ErrorKind::UnsupportedFormat, "unsupported output format: " + path.string());
}

inline void save_mask(const Mask& mask, const std::filesystem::path& path) {
  save_image(mask.raster(), path);
}

inline constexpr std::array<char, 8> kDepthMagic{'O', 'C', 'C', 'D', 'E', 'P', 'T', 'H'};

inline std::vector<unsigned char> encode_depth(const Image& depth) {
  detail::require_dims(depth.channels() == 1, "depth raster must have one channel");
  std::vector<unsigned char> out(kDepthMagic.begin(), kDepthMagic.end());
  auto put32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  };
  put32(static_cast<std::uint32_t>(depth.width()));
  put32(static_cast<std::uint32_t>(depth.height()));
  for (double d : depth.values()) put32(std::bit_cast<std::uint32_t>(static_cast<float>(d)));
  return out;
}

inline Image decode_depth(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 16 || !std::equal(kDepthMagic.begin(), kDepthMagic.end(), bytes.begin()))
    throw Error(ErrorKind::CorruptFile, "depth dump: bad magic");
  auto get32 = [&](std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
    return v;
  };
  const std::uint32_t w = get32(8), h = get32(12);
  if (w > (1u << 16) || h > (1u << 16) ||
      bytes.size() != 16 + 4 * static_cast<std::size_t>(w) * h)
    throw Error(ErrorKind::CorruptFile, "depth dump: size does not match header");
  Image out(static_cast<int>(w), static_cast<int>(h), 1);
  auto dst = out.values();
  for (std::size_t i = 0; i < dst.size(); ++i)
    dst[i] = std::bit_cast<float>(get32(16 + 4 * i));
  return out;
}

inline void save_depth(const Image& depth, const std::filesystem::path& path) {
  const auto bytes = encode_depth(depth);
  detail::write_bytes(path, bytes.data(), bytes.size());
}

inline Image load_depth(const std::filesystem::path& path) {
  return decode_depth(detail::read_bytes(path));
}

}  // namespace occface
