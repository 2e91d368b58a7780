#pragma once

// Random image transforms and the named augmentation presets used to draw
// query views during self-supervised pre-training. Every transform is a pure
// function of (image, parameters, rng) and maps [0,1] images to [0,1].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "prototransfer/errors.hpp"
#include "prototransfer/image.hpp"
#include "prototransfer/rng.hpp"

namespace prototransfer {

using Range = std::array<double, 2>;

inline Image random_resized_crop(const Image& img, Range scale, Range ratio, std::size_t out_size,
                                 Rng& rng) {
  if (out_size == 0 || out_size > 4096) {
    throw GeometryError("random_resized_crop: unsupported output size " + std::to_string(out_size));
  }
  if (!(scale[0] > 0 && scale[0] <= scale[1] && scale[1] <= 1.0)) {
    throw ContractError("random_resized_crop: scale range must lie in (0, 1]");
  }
  if (!(ratio[0] > 0 && ratio[0] <= ratio[1])) {
    throw ContractError("random_resized_crop: ratio range must be positive");
  }
  const double H = static_cast<double>(img.height), W = static_cast<double>(img.width);
  const double area = H * W;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(rng, scale[0], scale[1]);
    const double aspect = uniform(rng, ratio[0], ratio[1]);
    const double w = std::round(std::sqrt(target * aspect));
    const double h = std::round(std::sqrt(target / aspect));
    if (w > 0 && h > 0 && w <= W && h <= H) {
      const double top = std::uniform_int_distribution<long>(0, static_cast<long>(H - h))(rng);
      const double left = std::uniform_int_distribution<long>(0, static_cast<long>(W - w))(rng);
      return crop_resize(img, top, left, h, w, out_size, out_size);
    }
  }
  // Center crop at the closest admissible aspect ratio.
  const double in_ratio = W / H;
  double w = W, h = H;
  if (in_ratio < ratio[0]) {
    h = std::round(w / ratio[0]);
  } else if (in_ratio > ratio[1]) {
    w = std::round(h * ratio[1]);
  }
  return crop_resize(img, std::floor((H - h) / 2), std::floor((W - w) / 2), h, w, out_size,
                     out_size);
}

inline Image flip_h(const Image& img, double p, Rng& rng) {
  if (!bernoulli(rng, p)) return img;
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    }
  }
  return out;
}

inline Image flip_v(const Image& img, double p, Rng& rng) {
  if (!bernoulli(rng, p)) return img;
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, img.height - 1 - y, x);
    }
  }
  return out;
}

// ---- color ------------------------------------------------------------------

struct Hsv {
  double h, s, v;  // h in [0, 1)
};

inline Hsv rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  double h = 0;
  if (d > 0) {
    if (mx == r) {
      h = std::fmod((g - b) / d, 6.0);
    } else if (mx == g) {
      h = (b - r) / d + 2.0;
    } else {
      h = (r - g) / d + 4.0;
    }
    h /= 6.0;
    if (h < 0) h += 1.0;
  }
  return {h, mx > 0 ? d / mx : 0.0, mx};
}

inline std::array<double, 3> hsv_to_rgb(Hsv c) {
  const double h6 = (c.h - std::floor(c.h)) * 6.0;
  const int sector = static_cast<int>(std::floor(h6)) % 6;
  const double f = h6 - std::floor(h6);
  const double p = c.v * (1 - c.s), q = c.v * (1 - c.s * f), t = c.v * (1 - c.s * (1 - f));
  switch (sector) {
    case 0: return {c.v, t, p};
    case 1: return {q, c.v, p};
    case 2: return {p, c.v, t};
    case 3: return {p, q, c.v};
    case 4: return {t, p, c.v};
    default: return {c.v, p, q};
  }
}

namespace detail {

inline void adjust_brightness(Image& img, double f) {
  for (float& v : img.pixels) v = static_cast<float>(v * f);
  clamp01(img);
}

inline void adjust_contrast(Image& img, double f) {
  const Image gray = to_grayscale(img);
  const double m = std::accumulate(gray.pixels.begin(), gray.pixels.end(), 0.0) /
                   static_cast<double>(gray.pixels.size());
  for (float& v : img.pixels) v = static_cast<float>((v - m) * f + m);
  clamp01(img);
}

template <class Fn>
void map_hsv(Image& img, Fn&& fn) {
  const std::size_t n = img.plane();
  for (std::size_t i = 0; i < n; ++i) {
    Hsv c = rgb_to_hsv(img.pixels[i], img.pixels[n + i], img.pixels[2 * n + i]);
    fn(c);
    const auto rgb = hsv_to_rgb(c);
    for (std::size_t k = 0; k < 3; ++k) {
      img.pixels[k * n + i] = std::clamp(static_cast<float>(rgb[k]), 0.0f, 1.0f);
    }
  }
}

inline void adjust_saturation(Image& img, double f) {
  map_hsv(img, [f](Hsv& c) { c.s = std::clamp(c.s * f, 0.0, 1.0); });
}

inline void adjust_hue(Image& img, double shift) {
  map_hsv(img, [shift](Hsv& c) {
    c.h += shift;
    c.h -= std::floor(c.h);
  });
}

}  // namespace detail

/// With probability p, applies brightness, contrast, saturation and hue
/// jitter in a random order. Factors are uniform in [max(0, 1 - s), 1 + s];
/// the hue shift is uniform in [-hue, hue] (fraction of the hue circle).
/// Single-channel images receive brightness and contrast only.
inline Image color_jitter(const Image& img, double brightness, double contrast, double saturation,
                          double hue, double p, Rng& rng) {
  if (!bernoulli(rng, p)) return img;
  Image out = img;
  std::array<int, 4> order{0, 1, 2, 3};
  std::shuffle(order.begin(), order.end(), rng);
  const bool rgb = img.channels == 3;
  for (int op : order) {
    switch (op) {
      case 0:
        if (brightness > 0) {
          detail::adjust_brightness(out, uniform(rng, std::max(0.0, 1 - brightness), 1 + brightness));
        }
        break;
      case 1:
        if (contrast > 0) {
          detail::adjust_contrast(out, uniform(rng, std::max(0.0, 1 - contrast), 1 + contrast));
        }
        break;
      case 2:
        if (saturation > 0 && rgb) {
          detail::adjust_saturation(out, uniform(rng, std::max(0.0, 1 - saturation), 1 + saturation));
        }
        break;
      default:
        if (hue > 0 && rgb) detail::adjust_hue(out, uniform(rng, -hue, hue));
        break;
    }
  }
  return out;
}

/// With probability p, every channel becomes the luma of the pixel.
inline Image random_grayscale(const Image& img, double p, Rng& rng) {
  if (!bernoulli(rng, p) || img.channels == 1) return img;
  return to_rgb(to_grayscale(img));
}

/// Normalized 1-D Gaussian taps for offsets -r..r with r = ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0)) return {1.0};
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * static_cast<std::size_t>(r) + 1);
  double s = 0;
  for (int i = -r; i <= r; ++i) {
    k[static_cast<std::size_t>(i + r)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    s += k[static_cast<std::size_t>(i + r)];
  }
  for (double& v : k) v /= s;
  return k;
}

namespace detail {

inline long reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace detail

/// Separable Gaussian blur with fixed sigma and reflect padding.
inline Image gaussian_blur_sigma(const Image& img, double sigma) {
  const auto k = gaussian_kernel(sigma);
  if (k.size() == 1) return img;
  const long r = static_cast<long>(k.size() / 2);
  const long H = static_cast<long>(img.height), W = static_cast<long>(img.width);
  Image tmp = img, out = img;
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (long y = 0; y < H; ++y) {
      for (long x = 0; x < W; ++x) {
        double s = 0;
        for (long d = -r; d <= r; ++d) s += k[d + r] * img.at(c, y, detail::reflect_index(x + d, W));
        tmp.at(c, y, x) = static_cast<float>(s);
      }
    }
    for (long y = 0; y < H; ++y) {
      for (long x = 0; x < W; ++x) {
        double s = 0;
        for (long d = -r; d <= r; ++d) s += k[d + r] * tmp.at(c, detail::reflect_index(y + d, H), x);
        out.at(c, y, x) = static_cast<float>(s);
      }
    }
  }
  clamp01(out);
  return out;
}

inline Image gaussian_blur(const Image& img, Range sigma_range, Rng& rng) {
  return gaussian_blur_sigma(img, uniform(rng, sigma_range[0], sigma_range[1]));
}

/// With probability p_apply, zeroes each pixel location (all channels)
/// independently with probability drop_rate.
inline Image pixel_dropout(const Image& img, double p_apply, double drop_rate, Rng& rng) {
  if (!bernoulli(rng, p_apply)) return img;
  Image out = img;
  for (std::size_t i = 0; i < img.plane(); ++i) {
    if (bernoulli(rng, drop_rate)) {
      for (std::size_t c = 0; c < img.channels; ++c) out.pixels[c * img.plane() + i] = 0.0f;
    }
  }
  return out;
}

/// Sets one rectangle to 0. Its area fraction lies in `scale` and its
/// height/width ratio in `ratio`; after 10 failed placements the image is
/// returned unchanged.
inline Image random_erasing(const Image& img, Range scale, Range ratio, Rng& rng) {
  const double H = static_cast<double>(img.height), W = static_cast<double>(img.width);
  const double area = H * W;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(rng, scale[0], scale[1]);
    const double aspect = uniform(rng, ratio[0], ratio[1]);
    const double h = std::round(std::sqrt(target * aspect));
    const double w = std::round(std::sqrt(target / aspect));
    if (h >= H || w >= W) continue;
    const double frac = h * w / area;
    if (frac < scale[0] || frac > scale[1]) continue;
    if (h == 0 || w == 0) return img;
    const auto top = static_cast<std::size_t>(
        std::uniform_int_distribution<long>(0, static_cast<long>(H - h))(rng));
    const auto left = static_cast<std::size_t>(
        std::uniform_int_distribution<long>(0, static_cast<long>(W - w))(rng));
    Image out = img;
    for (std::size_t c = 0; c < img.channels; ++c) {
      for (std::size_t y = top; y < top + static_cast<std::size_t>(h); ++y) {
        for (std::size_t x = left; x < left + static_cast<std::size_t>(w); ++x) out.at(c, y, x) = 0.0f;
      }
    }
    return out;
  }
  return img;
}

// ---- pipelines --------------------------------------------------------------

enum class TransformKind {
  Resize,
  RandomResizedCrop,
  FlipH,
  FlipV,
  ColorJitter,
  Grayscale,
  GaussianBlur,
  PixelDropout,
  RandomErasing,
};

inline const char* transform_kind_name(TransformKind k) {
  switch (k) {
    case TransformKind::Resize: return "resize";
    case TransformKind::RandomResizedCrop: return "random_resized_crop";
    case TransformKind::FlipH: return "flip_h";
    case TransformKind::FlipV: return "flip_v";
    case TransformKind::ColorJitter: return "color_jitter";
    case TransformKind::Grayscale: return "grayscale";
    case TransformKind::GaussianBlur: return "gaussian_blur";
    case TransformKind::PixelDropout: return "pixel_dropout";
    case TransformKind::RandomErasing: return "random_erasing";
  }
  return "?";
}

inline TransformKind parse_transform_kind(const std::string& name) {
  for (int k = 0; k <= static_cast<int>(TransformKind::RandomErasing); ++k) {
    if (name == transform_kind_name(static_cast<TransformKind>(k))) return static_cast<TransformKind>(k);
  }
  throw ConfigError("unknown transform '" + name +
                    "' (valid: resize, random_resized_crop, flip_h, flip_v, color_jitter, grayscale, "
                    "gaussian_blur, pixel_dropout, random_erasing)");
}

/// One pipeline stage. Fields not used by `kind` are ignored.
struct TransformSpec {
  TransformKind kind = TransformKind::Resize;
  double p = 1.0;  // application probability
  std::size_t size = 28;
  Range scale{0.08, 1.0};
  Range ratio{3.0 / 4.0, 4.0 / 3.0};
  double brightness = 0, contrast = 0, saturation = 0, hue = 0;
  Range sigma{0.1, 0.2};
  double drop_rate = 0.5;

  friend bool operator==(const TransformSpec&, const TransformSpec&) = default;
};

struct AugmentationPipeline {
  std::string name = "custom";
  std::size_t channels = 1;
  std::size_t out_size = 28;
  std::vector<TransformSpec> transforms;

  friend bool operator==(const AugmentationPipeline&, const AugmentationPipeline&) = default;
};

inline Image apply_transform(const TransformSpec& t, const Image& img, Rng& rng) {
  switch (t.kind) {
    case TransformKind::Resize:
      return resize(img, t.size, t.size);
    case TransformKind::RandomResizedCrop:
      return random_resized_crop(img, t.scale, t.ratio, t.size, rng);
    case TransformKind::FlipH:
      return flip_h(img, t.p, rng);
    case TransformKind::FlipV:
      return flip_v(img, t.p, rng);
    case TransformKind::ColorJitter:
      return color_jitter(img, t.brightness, t.contrast, t.saturation, t.hue, t.p, rng);
    case TransformKind::Grayscale:
      return random_grayscale(img, t.p, rng);
    case TransformKind::GaussianBlur:
      return bernoulli(rng, t.p) ? gaussian_blur(img, t.sigma, rng) : img;
    case TransformKind::PixelDropout:
      return pixel_dropout(img, t.p, t.drop_rate, rng);
    case TransformKind::RandomErasing:
      return bernoulli(rng, t.p) ? random_erasing(img, t.scale, t.ratio, rng) : img;
  }
  return img;
}

/// Applies the stages in order, then resizes to the configured output size
/// if no stage produced it.
inline Image apply_pipeline(const AugmentationPipeline& pipeline, const Image& img, Rng& rng) {
  if (img.channels != pipeline.channels) {
    throw ContractError("apply_pipeline: pipeline '" + pipeline.name + "' expects " +
                        std::to_string(pipeline.channels) + " channel(s), image has " +
                        std::to_string(img.channels));
  }
  Image out = img;
  for (const auto& t : pipeline.transforms) out = apply_transform(t, out, rng);
  return resize(out, pipeline.out_size, pipeline.out_size);
}

namespace presets {

inline TransformSpec rrc(Range scale, std::size_t size) {
  TransformSpec t;
  t.kind = TransformKind::RandomResizedCrop;
  t.scale = scale;
  t.ratio = {3.0 / 4.0, 4.0 / 3.0};
  t.size = size;
  return t;
}

inline TransformSpec flip(TransformKind kind) {
  TransformSpec t;
  t.kind = kind;
  t.p = 0.5;
  return t;
}

inline TransformSpec jitter(double strength) {
  TransformSpec t;
  t.kind = TransformKind::ColorJitter;
  t.p = 0.8;
  t.brightness = t.contrast = t.saturation = strength;
  t.hue = 0.2;
  return t;
}

inline TransformSpec grayscale() {
  TransformSpec t;
  t.kind = TransformKind::Grayscale;
  t.p = 0.2;
  return t;
}

}  // namespace presets

/// Omniglot: resize, crop-resize (scale 0.6-1), flips, pixel dropout,
/// random erasing (scale 0.02-0.33, ratio 0.3-3.3).
inline AugmentationPipeline omniglot_pipeline(std::size_t out_size = 28) {
  AugmentationPipeline p{"omniglot", 1, out_size, {}};
  TransformSpec resize_t;
  resize_t.kind = TransformKind::Resize;
  resize_t.size = out_size;
  p.transforms.push_back(resize_t);
  p.transforms.push_back(presets::rrc({0.6, 1.0}, out_size));
  p.transforms.push_back(presets::flip(TransformKind::FlipH));
  p.transforms.push_back(presets::flip(TransformKind::FlipV));
  TransformSpec drop;
  drop.kind = TransformKind::PixelDropout;
  drop.p = 0.3;
  drop.drop_rate = 0.5;
  p.transforms.push_back(drop);
  TransformSpec erase;
  erase.kind = TransformKind::RandomErasing;
  erase.p = 0.5;
  erase.scale = {0.02, 0.33};
  erase.ratio = {0.3, 3.3};
  p.transforms.push_back(erase);
  return p;
}

/// mini-ImageNet / CUB: crop-resize (scale 0.5-1), flips, jitter 0.4/hue 0.2
/// at p 0.8, grayscale at p 0.2.
inline AugmentationPipeline mini_pipeline(std::size_t out_size = 84) {
  AugmentationPipeline p{"mini", 3, out_size, {}};
  p.transforms.push_back(presets::rrc({0.5, 1.0}, out_size));
  p.transforms.push_back(presets::flip(TransformKind::FlipH));
  p.transforms.push_back(presets::flip(TransformKind::FlipV));
  p.transforms.push_back(presets::jitter(0.4));
  p.transforms.push_back(presets::grayscale());
  return p;
}

/// Cross-domain: crop-resize (scale 0.08-1), horizontal flip, jitter 0.8/hue
/// 0.2 at p 0.8, grayscale at p 0.2, Gaussian blur sigma 0.1-0.2.
inline AugmentationPipeline cdfsl_pipeline(std::size_t out_size = 224) {
  AugmentationPipeline p{"cdfsl", 3, out_size, {}};
  p.transforms.push_back(presets::rrc({0.08, 1.0}, out_size));
  p.transforms.push_back(presets::flip(TransformKind::FlipH));
  p.transforms.push_back(presets::jitter(0.8));
  p.transforms.push_back(presets::grayscale());
  TransformSpec blur;
  blur.kind = TransformKind::GaussianBlur;
  blur.sigma = {0.1, 0.2};
  p.transforms.push_back(blur);
  return p;
}

/// Preset by name ("omniglot", "mini", "cdfsl"); out_size 0 keeps the preset default.
inline AugmentationPipeline pipeline_preset(const std::string& name, std::size_t out_size = 0) {
  if (name == "omniglot") return out_size ? omniglot_pipeline(out_size) : omniglot_pipeline();
  if (name == "mini") return out_size ? mini_pipeline(out_size) : mini_pipeline();
  if (name == "cdfsl") return out_size ? cdfsl_pipeline(out_size) : cdfsl_pipeline();
  throw ConfigError("unknown augmentation preset '" + name + "' (valid: omniglot, mini, cdfsl)");
}

}  // namespace prototransfer
