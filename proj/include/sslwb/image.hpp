#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>

#include "sslwb/common.hpp"
#include "sslwb/tensor.hpp"

namespace sslwb {

// Images are float tensors [H,W,3] with values in [0,1] until normalization.
// On disk the corpus uses binary PPM (P6, 8-bit): trivial to write
// byte-identically, no codec dependencies.

using Image = Tensor<float>;

inline std::uint8_t quantize8(float v) {
  float x = std::clamp(v, 0.0f, 1.0f) * 255.0f;
  return static_cast<std::uint8_t>(std::lround(x));
}

inline std::string encode_ppm(const Image& img) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + h * w * 3);
  for (std::size_t i = 0; i < h * w * 3; ++i)
    out.push_back(static_cast<char>(quantize8(img[i])));
  return out;
}

inline void write_ppm(const fs::path& path, const Image& img) {
  write_file_atomic(path, encode_ppm(img));
}

inline Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw EngineError("cannot open image: " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw EngineError("not a P6 PPM file: " + path.string());
  auto next_token = [&in, &path]() {
    std::string tok;
    // PPM headers may carry '#' comments between tokens.
    while (in >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return tok;
    }
    throw EngineError("truncated PPM header: " + path.string());
  };
  std::size_t w = std::stoul(next_token());
  std::size_t h = std::stoul(next_token());
  std::size_t maxv = std::stoul(next_token());
  if (maxv != 255) throw EngineError("unsupported PPM maxval: " + path.string());
  in.get();  // single whitespace after maxval
  std::string raw(h * w * 3, '\0');
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw EngineError("truncated PPM payload: " + path.string());
  Image img({h, w, 3});
  for (std::size_t i = 0; i < raw.size(); ++i)
    img[i] = static_cast<float>(static_cast<std::uint8_t>(raw[i])) / 255.0f;
  return img;
}

/// Bilinear resize to out_h x out_w (align-corners=false convention).
inline Image resize_bilinear(const Image& src, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = src.dim(0), w = src.dim(1);
  Image dst({out_h, out_w, 3});
  const float sy = static_cast<float>(h) / static_cast<float>(out_h);
  const float sx = static_cast<float>(w) / static_cast<float>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    float fy = (static_cast<float>(y) + 0.5f) * sy - 0.5f;
    fy = std::clamp(fy, 0.0f, static_cast<float>(h - 1));
    std::size_t y0 = static_cast<std::size_t>(fy);
    std::size_t y1 = std::min(y0 + 1, h - 1);
    float wy = fy - static_cast<float>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      float fx = (static_cast<float>(x) + 0.5f) * sx - 0.5f;
      fx = std::clamp(fx, 0.0f, static_cast<float>(w - 1));
      std::size_t x0 = static_cast<std::size_t>(fx);
      std::size_t x1 = std::min(x0 + 1, w - 1);
      float wx = fx - static_cast<float>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        float top = src.at(y0, x0, c) * (1.0f - wx) + src.at(y0, x1, c) * wx;
        float bot = src.at(y1, x0, c) * (1.0f - wx) + src.at(y1, x1, c) * wx;
        dst.at(y, x, c) = top * (1.0f - wy) + bot * wy;
      }
    }
  }
  return dst;
}

inline Image crop(const Image& src, std::size_t y, std::size_t x, std::size_t ch,
                  std::size_t cw) {
  Image dst({ch, cw, 3});
  for (std::size_t i = 0; i < ch; ++i)
    for (std::size_t j = 0; j < cw; ++j)
      for (std::size_t c = 0; c < 3; ++c) dst.at(i, j, c) = src.at(y + i, x + j, c);
  return dst;
}

inline void hflip_inplace(Image& img) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w / 2; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        std::swap(img.at(y, x, c), img.at(y, w - 1 - x, c));
}

/// h in [0,360), s,v in [0,1].
inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  float c = v * s;
  float hp = h / 60.0f;
  float x = c * (1.0f - std::fabs(std::fmod(hp, 2.0f) - 1.0f));
  float m = v - c;
  float rr = 0, gg = 0, bb = 0;
  if (hp < 1)      { rr = c; gg = x; }
  else if (hp < 2) { rr = x; gg = c; }
  else if (hp < 3) { gg = c; bb = x; }
  else if (hp < 4) { gg = x; bb = c; }
  else if (hp < 5) { rr = x; bb = c; }
  else             { rr = c; bb = x; }
  r = rr + m;
  g = gg + m;
  b = bb + m;
}

}  // namespace sslwb
