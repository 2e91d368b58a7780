#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "prototransfer/errors.hpp"
#include "prototransfer/tensor.hpp"

namespace prototransfer {

/// Planar CHW image with float pixels in [0, 1].
struct Image {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels[(c * height + y) * width + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  std::size_t plane() const noexcept { return height * width; }

  friend bool operator==(const Image&, const Image&) = default;
};

inline void clamp01(Image& img) {
  for (float& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

/// Bilinear resample of the box (top, left, h, w) to out_h x out_w using
/// half-pixel centers; samples outside the box clamp to its edge.
inline Image crop_resize(const Image& src, double top, double left, double h, double w,
                         std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw GeometryError("crop_resize: empty output size");
  if (h <= 0 || w <= 0) throw GeometryError("crop_resize: empty crop box");
  Image out(src.channels, out_h, out_w);
  const double sy = h / static_cast<double>(out_h);
  const double sx = w / static_cast<double>(out_w);
  const long y_lo = static_cast<long>(std::floor(top));
  const long x_lo = static_cast<long>(std::floor(left));
  const long y_hi = std::min(static_cast<long>(std::ceil(top + h)), static_cast<long>(src.height)) - 1;
  const long x_hi = std::min(static_cast<long>(std::ceil(left + w)), static_cast<long>(src.width)) - 1;
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double fy = top + (static_cast<double>(oy) + 0.5) * sy - 0.5;
    const long y0 = static_cast<long>(std::floor(fy));
    const double wy = fy - static_cast<double>(y0);
    const long ya = std::clamp(y0, y_lo, y_hi);
    const long yb = std::clamp(y0 + 1, y_lo, y_hi);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double fx = left + (static_cast<double>(ox) + 0.5) * sx - 0.5;
      const long x0 = static_cast<long>(std::floor(fx));
      const double wx = fx - static_cast<double>(x0);
      const long xa = std::clamp(x0, x_lo, x_hi);
      const long xb = std::clamp(x0 + 1, x_lo, x_hi);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double v00 = src.at(c, ya, xa), v01 = src.at(c, ya, xb);
        const double v10 = src.at(c, yb, xa), v11 = src.at(c, yb, xb);
        const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
        out.at(c, oy, ox) = static_cast<float>(v);
      }
    }
  }
  clamp01(out);
  return out;
}

inline Image resize(const Image& src, std::size_t out_h, std::size_t out_w) {
  if (src.height == out_h && src.width == out_w) return src;
  return crop_resize(src, 0, 0, static_cast<double>(src.height), static_cast<double>(src.width),
                     out_h, out_w);
}

/// Luma (0.299 R + 0.587 G + 0.114 B) single-channel copy; 1-channel input is returned as is.
inline Image to_grayscale(const Image& src) {
  if (src.channels == 1) return src;
  Image out(1, src.height, src.width);
  for (std::size_t i = 0; i < src.plane(); ++i) {
    out.pixels[i] = 0.299f * src.pixels[i] + 0.587f * src.pixels[src.plane() + i] +
                    0.114f * src.pixels[2 * src.plane() + i];
  }
  return out;
}

inline Image to_rgb(const Image& src) {
  if (src.channels == 3) return src;
  Image out(3, src.height, src.width);
  for (std::size_t c = 0; c < 3; ++c) {
    std::copy(src.pixels.begin(), src.pixels.end(), out.pixels.begin() + c * src.plane());
  }
  return out;
}

/// Images [B, C, H, W] packed from equally sized images.
inline Tensor stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw ContractError("stack_images: no images");
  const Image& f = *images.front();
  Tensor out(Shape{images.size(), f.channels, f.height, f.width});
  const std::size_t n = f.pixels.size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& im = *images[i];
    if (im.channels != f.channels || im.height != f.height || im.width != f.width) {
      throw ShapeError("stack_images: image " + std::to_string(i) + " geometry differs");
    }
    std::copy(im.pixels.begin(), im.pixels.end(), out.raw() + i * n);
  }
  return out;
}

inline Tensor stack_images(const std::vector<Image>& images) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(images.size());
  for (const auto& im : images) ptrs.push_back(&im);
  return stack_images(ptrs);
}

// ---- Netpbm (P5 grayscale / P6 color, binary) ------------------------------

namespace detail {

inline std::string pnm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {}
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

inline std::size_t pnm_number(std::istream& is, const std::string& what) {
  const std::string tok = pnm_token(is);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), ::isdigit)) {
    throw LoadError("PNM: bad " + what + " '" + tok + "'");
  }
  return std::stoul(tok);
}

}  // namespace detail

inline Image read_pnm(std::istream& is) {
  const std::string magic = detail::pnm_token(is);
  std::size_t channels;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw LoadError("PNM: unsupported magic '" + magic + "' (expected P5 or P6)");
  }
  const std::size_t w = detail::pnm_number(is, "width");
  const std::size_t h = detail::pnm_number(is, "height");
  const std::size_t maxval = detail::pnm_number(is, "maxval");
  if (w == 0 || h == 0) throw LoadError("PNM: empty image");
  if (maxval == 0 || maxval > 65535) throw LoadError("PNM: bad maxval");
  const std::size_t bytes = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> raw(w * h * channels * bytes);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw LoadError("PNM: truncated pixel data");
  }
  Image img(channels, h, w);
  const double scale = 1.0 / static_cast<double>(maxval);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t k = ((y * w + x) * channels + c) * bytes;
        const unsigned v = bytes == 1 ? raw[k] : (static_cast<unsigned>(raw[k]) << 8) | raw[k + 1];
        if (v > maxval) throw LoadError("PNM: sample exceeds maxval");
        img.at(c, y, x) = static_cast<float>(v * scale);
      }
    }
  }
  return img;
}

inline void write_pnm(std::ostream& os, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ContractError("PNM: need 1 or 3 channels");
  os << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.pixels.size());
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        raw[(y * img.width + x) * img.channels + c] =
            static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

inline Image load_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open '" + path.string() + "'");
  try {
    return read_pnm(is);
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

inline void save_pnm(const std::filesystem::path& path, const Image& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw LoadError("cannot open '" + path.string() + "' for writing");
  write_pnm(os, img);
}

}  // namespace prototransfer
