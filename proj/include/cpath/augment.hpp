#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cpath/image.hpp"
#include "cpath/rng.hpp"

namespace cpath {

// Two-view augmentation for contrastive training. A policy is an ordered
// list of stochastic ops, each with an apply probability and a magnitude
// whose meaning depends on the op. Same seed + same input => identical
// output pair.

enum class AugKind {
  RandomResizedCrop,  // magnitude: minimum area scale
  HorizontalFlip,
  ColorJitter,        // magnitude: jitter strength
  Grayscale,
  GaussianBlur,       // magnitude: maximum sigma
  Solarize            // magnitude: threshold in [0,1]
};

struct AugOp {
  AugKind kind;
  double prob;
  double magnitude;
};

struct AugmentationPolicy {
  std::vector<AugOp> ops;
  std::uint64_t seed = 0;

  /// Desk-scale recipe: the usual contrastive augmentation stack with
  /// magnitudes halved for tiny inputs.
  static AugmentationPolicy desk_default(std::uint64_t seed = 0) {
    AugmentationPolicy p;
    p.seed = seed;
    p.ops = {
        {AugKind::RandomResizedCrop, 1.0, 0.6},
        {AugKind::HorizontalFlip, 0.5, 0.0},
        {AugKind::ColorJitter, 0.8, 0.2},
        {AugKind::Grayscale, 0.2, 0.0},
        {AugKind::GaussianBlur, 0.5, 1.0},
        {AugKind::Solarize, 0.1, 0.5},
    };
    return p;
  }

  /// Everything off: views equal the original stream.
  static AugmentationPolicy disabled(std::uint64_t seed = 0) {
    AugmentationPolicy p = desk_default(seed);
    for (auto& op : p.ops) op.prob = 0.0;
    return p;
  }
};

namespace detail {

inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  v = mx;
  const float d = mx - mn;
  s = mx <= 0.f ? 0.f : d / mx;
  if (d <= 0.f) {
    h = 0.f;
    return;
  }
  if (mx == r) h = std::fmod((g - b) / d, 6.0f);
  else if (mx == g) h = (b - r) / d + 2.0f;
  else h = (r - g) / d + 4.0f;
  h /= 6.0f;
  if (h < 0) h += 1.0f;
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float i = std::floor(h * 6.0f);
  const float f = h * 6.0f - i;
  const float p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

inline ImageF random_resized_crop(const ImageF& img, double min_scale, int out, Rng& rng) {
  const double area = static_cast<double>(img.h) * img.w;
  int ch = img.h, cw = img.w, y0 = 0, x0 = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double scale = uniform_real(rng, min_scale, 1.0);
    const double ratio = std::exp(uniform_real(rng, std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
    const double target = area * scale;
    const int tw = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int th = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (tw < 1 || th < 1 || tw > img.w || th > img.h) continue;
    cw = tw;
    ch = th;
    y0 = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(img.h - th + 1)));
    x0 = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(img.w - tw + 1)));
    break;
  }
  ImageF crop(ch, cw, img.c);
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x)
      for (int k = 0; k < img.c; ++k) crop.at(y, x, k) = img.at(y0 + y, x0 + x, k);
  return resize_bilinear(crop, out, out);
}

inline void horizontal_flip(ImageF& img) {
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w / 2; ++x)
      for (int k = 0; k < img.c; ++k) std::swap(img.at(y, x, k), img.at(y, img.w - 1 - x, k));
}

inline void color_jitter(ImageF& img, double strength, Rng& rng) {
  const float fb = static_cast<float>(uniform_real(rng, 1 - strength, 1 + strength));
  const float fc = static_cast<float>(uniform_real(rng, 1 - strength, 1 + strength));
  const float fs = static_cast<float>(uniform_real(rng, 1 - strength, 1 + strength));
  const float fh = static_cast<float>(uniform_real(rng, -strength / 4, strength / 4));
  float mean = 0;
  for (float v : img.pix) mean += v;
  mean /= static_cast<float>(img.pix.size());
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      float r = img.at(y, x, 0) * fb, g = img.at(y, x, 1) * fb, b = img.at(y, x, 2) * fb;
      r = (r - mean) * fc + mean;
      g = (g - mean) * fc + mean;
      b = (b - mean) * fc + mean;
      float h, s, v;
      rgb_to_hsv(std::clamp(r, 0.f, 1.f), std::clamp(g, 0.f, 1.f), std::clamp(b, 0.f, 1.f), h, s, v);
      s = std::clamp(s * fs, 0.f, 1.f);
      h = h + fh;
      h -= std::floor(h);
      hsv_to_rgb(h, s, v, r, g, b);
      img.at(y, x, 0) = r;
      img.at(y, x, 1) = g;
      img.at(y, x, 2) = b;
    }
}

inline void grayscale_inplace(ImageF& img) {
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const float g =
          0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
      for (int k = 0; k < 3; ++k) img.at(y, x, k) = g;
    }
}

inline void blur_inplace(ImageF& img, double max_sigma, Rng& rng) {
  const double sigma = uniform_real(rng, 0.1, std::max(0.11, max_sigma));
  for (int k = 0; k < img.c; ++k) {
    std::vector<float> chan(static_cast<std::size_t>(img.h) * img.w);
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) chan[static_cast<std::size_t>(y) * img.w + x] = img.at(y, x, k);
    chan = gaussian_blur(chan, img.h, img.w, sigma);
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) img.at(y, x, k) = chan[static_cast<std::size_t>(y) * img.w + x];
  }
}

inline void solarize_inplace(ImageF& img, double threshold) {
  for (float& v : img.pix)
    if (v > threshold) v = 1.0f - v;
}

inline ImageF apply_ops(const ImageF& src, const AugmentationPolicy& policy, int out_size,
                        Rng& rng) {
  ImageF img = src;
  bool resized = false;
  for (const auto& op : policy.ops) {
    const bool apply = uniform_real(rng) < op.prob;
    if (!apply) continue;
    switch (op.kind) {
      case AugKind::RandomResizedCrop:
        img = random_resized_crop(img, op.magnitude, out_size, rng);
        resized = true;
        break;
      case AugKind::HorizontalFlip: horizontal_flip(img); break;
      case AugKind::ColorJitter: color_jitter(img, op.magnitude, rng); break;
      case AugKind::Grayscale: grayscale_inplace(img); break;
      case AugKind::GaussianBlur: blur_inplace(img, op.magnitude, rng); break;
      case AugKind::Solarize: solarize_inplace(img, op.magnitude); break;
    }
  }
  if (!resized) img = resize_bilinear(img, out_size, out_size);
  return img;
}

}  // namespace detail

struct ViewTriple {
  ImageF view_a, view_b, original;
};

/// Two independent augmentation draws plus the resize-only original stream.
inline ViewTriple two_views(const ImageF& patch, const AugmentationPolicy& policy, int out_size) {
  Rng rng(policy.seed);
  ViewTriple out;
  out.view_a = detail::apply_ops(patch, policy, out_size, rng);
  out.view_b = detail::apply_ops(patch, policy, out_size, rng);
  out.original = resize_bilinear(patch, out_size, out_size);
  return out;
}

inline ViewTriple two_views(const ImageU8& patch, const AugmentationPolicy& policy, int out_size) {
  return two_views(to_float(patch), policy, out_size);
}

}  // namespace cpath
