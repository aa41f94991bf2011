#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <string>
#include <vector>

#include "cpath/errors.hpp"

namespace cpath {

// 8-bit RGB images plus the small amount of image processing the pipeline
// needs: PNG round-trips (via zlib), bilinear resize, grayscale, Gaussian
// blur and Canny edges. Everything is deterministic scalar code.

struct ImageU8 {
  int h = 0, w = 0, c = 3;
  std::vector<std::uint8_t> pix;  // row-major, interleaved channels

  ImageU8() = default;
  ImageU8(int h_, int w_, int c_ = 3) : h(h_), w(w_), c(c_), pix(static_cast<std::size_t>(h_) * w_ * c_, 0) {}
  std::uint8_t& at(int y, int x, int ch) { return pix[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
  std::uint8_t at(int y, int x, int ch) const { return pix[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
};

struct ImageF {
  int h = 0, w = 0, c = 3;
  std::vector<float> pix;  // [0,1] nominal range

  ImageF() = default;
  ImageF(int h_, int w_, int c_ = 3) : h(h_), w(w_), c(c_), pix(static_cast<std::size_t>(h_) * w_ * c_, 0.f) {}
  float& at(int y, int x, int ch) { return pix[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
  float at(int y, int x, int ch) const { return pix[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
};

inline ImageF to_float(const ImageU8& img) {
  ImageF out(img.h, img.w, img.c);
  for (std::size_t i = 0; i < img.pix.size(); ++i) out.pix[i] = img.pix[i] / 255.0f;
  return out;
}

inline ImageU8 to_u8(const ImageF& img) {
  ImageU8 out(img.h, img.w, img.c);
  for (std::size_t i = 0; i < img.pix.size(); ++i) {
    const float v = std::min(1.0f, std::max(0.0f, img.pix[i]));
    out.pix[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return out;
}

// ---- PNG -------------------------------------------------------------------
// 8-bit RGB, non-interlaced. The writer emits filter-0 rows; the reader
// handles the standard filters so foreign RGB8 files also load.

namespace pngio {

inline void put_u32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  v.push_back(static_cast<std::uint8_t>(x >> 24));
  v.push_back(static_cast<std::uint8_t>(x >> 16));
  v.push_back(static_cast<std::uint8_t>(x >> 8));
  v.push_back(static_cast<std::uint8_t>(x));
}

inline void write_chunk(std::ofstream& out, const char type[4],
                        const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint8_t> head;
  put_u32(head, static_cast<std::uint32_t>(payload.size()));
  out.write(reinterpret_cast<const char*>(head.data()), 4);
  std::vector<std::uint8_t> body(type, type + 4);
  body.insert(body.end(), payload.begin(), payload.end());
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  const auto crc = crc32(0L, body.data(), static_cast<uInt>(body.size()));
  std::vector<std::uint8_t> tail;
  put_u32(tail, static_cast<std::uint32_t>(crc));
  out.write(reinterpret_cast<const char*>(tail.data()), 4);
}

}  // namespace pngio

inline void write_png(const std::string& path, const ImageU8& img) {
  if (img.c != 3) throw IoError("write_png: RGB images only");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  out.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<std::uint8_t> ihdr;
  pngio::put_u32(ihdr, static_cast<std::uint32_t>(img.w));
  pngio::put_u32(ihdr, static_cast<std::uint32_t>(img.h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter method
  ihdr.push_back(0);   // no interlace
  pngio::write_chunk(out, "IHDR", ihdr);

  const std::size_t stride = static_cast<std::size_t>(img.w) * 3;
  std::vector<std::uint8_t> raw((stride + 1) * static_cast<std::size_t>(img.h));
  for (int y = 0; y < img.h; ++y) {
    raw[static_cast<std::size_t>(y) * (stride + 1)] = 0;  // filter 0
    std::memcpy(raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1,
                img.pix.data() + static_cast<std::size_t>(y) * stride, stride);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> zdata(bound);
  if (compress2(zdata.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png deflate failed");
  zdata.resize(bound);
  pngio::write_chunk(out, "IDAT", zdata);
  pngio::write_chunk(out, "IEND", {});
  if (!out) throw IoError("write failed for " + path);
}

inline ImageU8 read_png(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw IoError("not a png: " + path);

  auto u32 = [&](std::size_t off) {
    return (static_cast<std::uint32_t>(bytes[off]) << 24) |
           (static_cast<std::uint32_t>(bytes[off + 1]) << 16) |
           (static_cast<std::uint32_t>(bytes[off + 2]) << 8) | bytes[off + 3];
  };

  int w = 0, h = 0;
  std::vector<std::uint8_t> zdata;
  std::size_t off = 8;
  bool done = false;
  while (off + 8 <= bytes.size() && !done) {
    const std::uint32_t len = u32(off);
    const std::string type(reinterpret_cast<const char*>(bytes.data() + off + 4), 4);
    const std::size_t payload = off + 8;
    if (payload + len + 4 > bytes.size()) throw IoError("truncated png: " + path);
    if (type == "IHDR") {
      w = static_cast<int>(u32(payload));
      h = static_cast<int>(u32(payload + 4));
      const int depth = bytes[payload + 8], color = bytes[payload + 9], inter = bytes[payload + 12];
      if (depth != 8 || color != 2 || inter != 0)
        throw IoError("unsupported png format (need 8-bit RGB): " + path);
    } else if (type == "IDAT") {
      zdata.insert(zdata.end(), bytes.begin() + static_cast<std::ptrdiff_t>(payload),
                   bytes.begin() + static_cast<std::ptrdiff_t>(payload + len));
    } else if (type == "IEND") {
      done = true;
    }
    off = payload + len + 4;
  }
  if (w <= 0 || h <= 0 || zdata.empty()) throw IoError("malformed png: " + path);

  const std::size_t stride = static_cast<std::size_t>(w) * 3;
  std::vector<std::uint8_t> raw((stride + 1) * static_cast<std::size_t>(h));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, zdata.data(), static_cast<uLong>(zdata.size())) != Z_OK ||
      raw_len != raw.size())
    throw IoError("png inflate failed: " + path);

  ImageU8 img(h, w, 3);
  const int bpp = 3;
  for (int y = 0; y < h; ++y) {
    const std::uint8_t filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
    const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
    std::uint8_t* cur = img.pix.data() + static_cast<std::size_t>(y) * stride;
    const std::uint8_t* up = y > 0 ? img.pix.data() + static_cast<std::size_t>(y - 1) * stride : nullptr;
    for (std::size_t i = 0; i < stride; ++i) {
      const int a = i >= static_cast<std::size_t>(bpp) ? cur[i - bpp] : 0;
      const int b = up ? up[i] : 0;
      const int cc = (up && i >= static_cast<std::size_t>(bpp)) ? up[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: {
          const int p = a + b - cc;
          const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - cc);
          v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : cc);
          break;
        }
        default: throw IoError("bad png filter: " + path);
      }
      cur[i] = static_cast<std::uint8_t>(v & 0xff);
    }
  }
  return img;
}

// ---- resampling and filtering ------------------------------------------------

inline ImageF resize_bilinear(const ImageF& img, int out_h, int out_w) {
  if (out_h == img.h && out_w == img.w) return img;
  ImageF out(out_h, out_w, img.c);
  const float sy = static_cast<float>(img.h) / out_h;
  const float sx = static_cast<float>(img.w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const float fy = (y + 0.5f) * sy - 0.5f;
    const int y0 = std::max(0, static_cast<int>(std::floor(fy)));
    const int y1 = std::min(img.h - 1, y0 + 1);
    const float wy = std::min(1.0f, std::max(0.0f, fy - y0));
    for (int x = 0; x < out_w; ++x) {
      const float fx = (x + 0.5f) * sx - 0.5f;
      const int x0 = std::max(0, static_cast<int>(std::floor(fx)));
      const int x1 = std::min(img.w - 1, x0 + 1);
      const float wx = std::min(1.0f, std::max(0.0f, fx - x0));
      for (int ch = 0; ch < img.c; ++ch) {
        const float top = img.at(y0, x0, ch) * (1 - wx) + img.at(y0, x1, ch) * wx;
        const float bot = img.at(y1, x0, ch) * (1 - wx) + img.at(y1, x1, ch) * wx;
        out.at(y, x, ch) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

/// Luma grayscale on the 0..255 scale.
inline std::vector<float> grayscale255(const ImageU8& img) {
  std::vector<float> g(static_cast<std::size_t>(img.h) * img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      g[static_cast<std::size_t>(y) * img.w + x] =
          0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
  return g;
}

/// Separable Gaussian blur with clamped borders on a single-channel field.
inline std::vector<float> gaussian_blur(const std::vector<float>& in, int h, int w, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] =
        static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
    sum += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (auto& k : kernel) k = static_cast<float>(k / sum);

  std::vector<float> tmp(in.size()), out(in.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        const int xx = std::min(w - 1, std::max(0, x + i));
        acc += in[static_cast<std::size_t>(y) * w + xx] * kernel[static_cast<std::size_t>(i + radius)];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        const int yy = std::min(h - 1, std::max(0, y + i));
        acc += tmp[static_cast<std::size_t>(yy) * w + x] * kernel[static_cast<std::size_t>(i + radius)];
      }
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  return out;
}

// ---- Canny -------------------------------------------------------------------

struct CannyParams {
  double sigma = 1.4;
  double low = 40.0;    // hysteresis thresholds on the 8-bit Sobel magnitude
  double high = 100.0;
  double min_edge_fraction = 0.02;
};

/// Binary edge map: Gaussian smoothing, Sobel, non-maximum suppression and
/// hysteresis linking.
inline std::vector<std::uint8_t> canny_edges(const ImageU8& img, const CannyParams& p = {}) {
  const int h = img.h, w = img.w;
  const auto smooth = gaussian_blur(grayscale255(img), h, w, p.sigma);

  std::vector<float> mag(static_cast<std::size_t>(h) * w, 0.f);
  std::vector<std::uint8_t> dir(static_cast<std::size_t>(h) * w, 0);
  auto sm = [&](int y, int x) {
    y = std::min(h - 1, std::max(0, y));
    x = std::min(w - 1, std::max(0, x));
    return smooth[static_cast<std::size_t>(y) * w + x];
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float gx = (sm(y - 1, x + 1) + 2 * sm(y, x + 1) + sm(y + 1, x + 1)) -
                       (sm(y - 1, x - 1) + 2 * sm(y, x - 1) + sm(y + 1, x - 1));
      const float gy = (sm(y + 1, x - 1) + 2 * sm(y + 1, x) + sm(y + 1, x + 1)) -
                       (sm(y - 1, x - 1) + 2 * sm(y - 1, x) + sm(y - 1, x + 1));
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      mag[i] = std::sqrt(gx * gx + gy * gy);
      // quantize gradient direction to 0 / 45 / 90 / 135 degrees
      const float angle = std::atan2(gy, gx);
      const float deg = angle * 180.0f / static_cast<float>(M_PI);
      float a = deg < 0 ? deg + 180.0f : deg;
      if (a < 22.5f || a >= 157.5f) dir[i] = 0;        // horizontal gradient
      else if (a < 67.5f) dir[i] = 1;                  // diagonal /
      else if (a < 112.5f) dir[i] = 2;                 // vertical
      else dir[i] = 3;                                 // diagonal backslash
    }

  // non-maximum suppression along the gradient direction
  std::vector<float> thin(static_cast<std::size_t>(h) * w, 0.f);
  auto m = [&](int y, int x) -> float {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0.f;
    return mag[static_cast<std::size_t>(y) * w + x];
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      float n1, n2;
      switch (dir[i]) {
        case 0: n1 = m(y, x - 1); n2 = m(y, x + 1); break;
        case 1: n1 = m(y - 1, x + 1); n2 = m(y + 1, x - 1); break;
        case 2: n1 = m(y - 1, x); n2 = m(y + 1, x); break;
        default: n1 = m(y - 1, x - 1); n2 = m(y + 1, x + 1); break;
      }
      if (mag[i] >= n1 && mag[i] >= n2) thin[i] = mag[i];
    }

  // double threshold + hysteresis (8-connected)
  std::vector<std::uint8_t> edges(static_cast<std::size_t>(h) * w, 0);  // 2 strong, 1 weak
  std::deque<std::pair<int, int>> frontier;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (thin[i] >= p.high) {
        edges[i] = 2;
        frontier.emplace_back(y, x);
      } else if (thin[i] >= p.low) {
        edges[i] = 1;
      }
    }
  while (!frontier.empty()) {
    const auto [y, x] = frontier.front();
    frontier.pop_front();
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int yy = y + dy, xx = x + dx;
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        const std::size_t j = static_cast<std::size_t>(yy) * w + xx;
        if (edges[j] == 1) {
          edges[j] = 2;
          frontier.emplace_back(yy, xx);
        }
      }
  }
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w, 0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = edges[i] == 2 ? 1 : 0;
  return out;
}

inline double edge_fraction(const ImageU8& img, const CannyParams& p = {}) {
  const auto e = canny_edges(img, p);
  std::size_t n = 0;
  for (auto v : e) n += v;
  return static_cast<double>(n) / static_cast<double>(e.size());
}

/// Tissue/background call: keep the patch iff its Canny edge fraction
/// reaches the configured minimum.
inline bool reject_background(const ImageU8& patch, const CannyParams& p = {}) {
  return edge_fraction(patch, p) >= p.min_edge_fraction;
}

}  // namespace cpath
