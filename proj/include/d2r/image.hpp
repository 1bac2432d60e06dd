#pragma once

// Images are (h, w, 3) tensors with values in [0, 1]; grayscale images are
// (h, w). Decoding supports binary/ascii PPM and PGM and PNG (via libpng).

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "d2r/error.hpp"
#include "d2r/tensor.hpp"

namespace d2r {

namespace detail {

inline std::string next_pnm_token(std::istream& is) {
  std::string tok;
  char c;
  while (is.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

inline Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("image: cannot open " + path.string());
  const std::string magic = next_pnm_token(is);
  const bool color = magic == "P6" || magic == "P3";
  const bool binary = magic == "P6" || magic == "P5";
  if (magic != "P6" && magic != "P5" && magic != "P3" && magic != "P2")
    throw DataError("image: unsupported PNM type '" + magic + "' in " + path.string());
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_pnm_token(is));
    h = std::stoul(next_pnm_token(is));
    maxval = std::stoul(next_pnm_token(is));
  } catch (const std::exception&) {
    throw DataError("image: malformed PNM header in " + path.string());
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw DataError("image: unsupported PNM geometry in " + path.string());
  const std::size_t ch = color ? 3 : 1;
  Tensor img(color ? Shape{h, w, 3} : Shape{h, w});
  if (binary) {
    std::vector<unsigned char> buf(w * h * ch);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw DataError("image: truncated PNM payload in " + path.string());
    for (std::size_t i = 0; i < buf.size(); ++i) img[i] = buf[i] / double(maxval);
  } else {
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::stoul(next_pnm_token(is)) / double(maxval);
  }
  return img;
}

inline Tensor read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw DataError("image: cannot decode PNG " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("image: cannot decode PNG " + path.string() + ": " + image.message);
  }
  Tensor img({image.height, image.width, 3});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = buf[i] / 255.0;
  return img;
}

inline unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Decodes to (h, w, 3) in [0, 1]; grayscale inputs are replicated to 3 channels.
inline Tensor load_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  Tensor img = (ext == ".png" || ext == ".PNG") ? detail::read_png(path) : detail::read_pnm(path);
  if (img.rank() == 2) {
    Tensor rgb({img.extent(0), img.extent(1), 3});
    for (std::size_t i = 0; i < img.size(); ++i)
      for (std::size_t c = 0; c < 3; ++c) rgb[i * 3 + c] = img[i];
    return rgb;
  }
  return img;
}

inline void save_ppm(const std::filesystem::path& path, const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.extent(2) != 3) throw ShapeError("save_ppm: expected (h, w, 3)");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("image: cannot write " + path.string());
  os << "P6\n" << rgb.extent(1) << ' ' << rgb.extent(0) << "\n255\n";
  for (double v : rgb.values()) os.put(static_cast<char>(detail::to_byte(v)));
}

inline void save_png(const std::filesystem::path& path, const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.extent(2) != 3) throw ShapeError("save_png: expected (h, w, 3)");
  std::vector<unsigned char> buf(rgb.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = detail::to_byte(rgb[i]);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = png_uint_32(rgb.extent(1));
  image.height = png_uint_32(rgb.extent(0));
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buf.data(), 0, nullptr))
    throw DataError("image: cannot write PNG " + path.string() + ": " + image.message);
}

inline void save_pgm(const std::filesystem::path& path, const Tensor& gray) {
  if (gray.rank() != 2) throw ShapeError("save_pgm: expected (h, w)");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("image: cannot write " + path.string());
  os << "P5\n" << gray.extent(1) << ' ' << gray.extent(0) << "\n255\n";
  for (double v : gray.values()) os.put(static_cast<char>(detail::to_byte(v)));
}

inline Tensor load_gray(const std::filesystem::path& path) {
  Tensor img = detail::read_pnm(path);
  if (img.rank() == 3) throw DataError("image: expected a grayscale map in " + path.string());
  return img;
}

inline Tensor to_grayscale(const Tensor& img) {
  if (img.rank() == 2) return img;
  const std::size_t H = img.extent(0), W = img.extent(1), C = img.extent(2);
  Tensor g({H, W});
  for (std::size_t p = 0; p < H * W; ++p) {
    if (C >= 3)
      g[p] = 0.299 * img[p * C] + 0.587 * img[p * C + 1] + 0.114 * img[p * C + 2];
    else
      g[p] = img[p * C];
  }
  return g;
}

/// Bilinear resize with half-pixel centres (align_corners = false): output
/// pixel (y, x) samples source coordinate ((y + 0.5) * H / OH - 0.5, ...),
/// clamped at the borders. Works for (h, w) and (h, w, c).
inline Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: zero output extent");
  const std::size_t H = img.extent(0), W = img.extent(1), C = img.rank() == 3 ? img.extent(2) : 1;
  Tensor out(img.rank() == 3 ? Shape{out_h, out_w, C} : Shape{out_h, out_w});
  const double sy = double(H) / double(out_h), sx = double(W) / double(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(H - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - double(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(W - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - double(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const double a = img[(y0 * W + x0) * C + c], b = img[(y0 * W + x1) * C + c];
        const double d = img[(y1 * W + x0) * C + c], e = img[(y1 * W + x1) * C + c];
        out[(y * out_w + x) * C + c] = (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * d + wx * e);
      }
    }
  }
  return out;
}

/// Crops [x, x + w) x [y, y + h) in pixel coordinates.
inline Tensor crop(const Tensor& img, std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
  const std::size_t H = img.extent(0), W = img.extent(1), C = img.rank() == 3 ? img.extent(2) : 1;
  if (w == 0 || h == 0 || x + w > W || y + h > H)
    throw DataError("crop: rectangle [" + std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(w) + "," +
                    std::to_string(h) + "] outside " + std::to_string(W) + "x" + std::to_string(H) + " image");
  Tensor out(img.rank() == 3 ? Shape{h, w, C} : Shape{h, w});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t k = 0; k < C; ++k) out[(r * w + c) * C + k] = img[((y + r) * W + x + c) * C + k];
  return out;
}

/// Rotates by 90 degrees counter-clockwise: source (r, c) lands at (W - 1 - c, r).
inline Tensor rotate90(const Tensor& img) {
  const std::size_t H = img.extent(0), W = img.extent(1), C = img.rank() == 3 ? img.extent(2) : 1;
  Tensor out(img.rank() == 3 ? Shape{W, H, C} : Shape{W, H});
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t k = 0; k < C; ++k) out[((W - 1 - c) * H + r) * C + k] = img[(r * W + c) * C + k];
  return out;
}

}  // namespace d2r
