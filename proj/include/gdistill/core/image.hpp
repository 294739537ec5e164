/*
 * Copyright 2026 The gdistill Contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace gdistill {

/// RGB image, row-major HWC, intensities in [0,1].
struct Image {
  int h = 0, w = 0;
  std::vector<float> data;  // h*w*3

  Image() = default;
  Image(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_ * 3, 0.f) {}

  float& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  size_t size() const { return data.size(); }
};

/// Binary mask, row-major, values 0/1.
struct Mask {
  int h = 0, w = 0;
  std::vector<uint8_t> data;  // h*w

  Mask() = default;
  Mask(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_, 0) {}

  uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * w + x]; }

  int64_t area() const {
    int64_t a = 0;
    for (uint8_t v : data) a += v;
    return a;
  }
  bool empty_mask() const { return area() == 0; }
};

inline float clamp01(float v) { return std::min(1.f, std::max(0.f, v)); }

/// Bilinear resize with the half-pixel (align_corners=false) convention;
/// resizing to the source size is an exact identity.
inline Image resize_bilinear(const Image& src, int oh, int ow) {
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("resize_bilinear: bad output size");
  Image out(oh, ow);
  const double sy = static_cast<double>(src.h) / oh;
  const double sx = static_cast<double>(src.w) / ow;
  for (int y = 0; y < oh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int y1 = std::min(y0 + 1, src.h - 1);
    y0 = std::max(y0, 0);
    for (int x = 0; x < ow; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int x1 = std::min(x0 + 1, src.w - 1);
      x0 = std::max(x0, 0);
      for (int c = 0; c < 3; ++c) {
        double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
        double bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
        out.at(y, x, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

inline Mask resize_nearest(const Mask& src, int oh, int ow) {
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("resize_nearest: bad output size");
  Mask out(oh, ow);
  const double sy = static_cast<double>(src.h) / oh;
  const double sx = static_cast<double>(src.w) / ow;
  for (int y = 0; y < oh; ++y) {
    int yy = std::min(static_cast<int>((y + 0.5) * sy), src.h - 1);
    for (int x = 0; x < ow; ++x) {
      int xx = std::min(static_cast<int>((x + 0.5) * sx), src.w - 1);
      out.at(y, x) = src.at(yy, xx);
    }
  }
  return out;
}

inline Image crop(const Image& src, int x0, int y0, int cw, int ch) {
  if (x0 < 0 || y0 < 0 || cw <= 0 || ch <= 0 || x0 + cw > src.w || y0 + ch > src.h)
    throw std::invalid_argument("crop: box outside image");
  Image out(ch, cw);
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = src.at(y0 + y, x0 + x, c);
  return out;
}

inline Mask crop(const Mask& src, int x0, int y0, int cw, int ch) {
  if (x0 < 0 || y0 < 0 || cw <= 0 || ch <= 0 || x0 + cw > src.w || y0 + ch > src.h)
    throw std::invalid_argument("crop: box outside mask");
  Mask out(ch, cw);
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x) out.at(y, x) = src.at(y0 + y, x0 + x);
  return out;
}

inline Image hflip(const Image& src) {
  Image out(src.h, src.w);
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = src.at(y, src.w - 1 - x, c);
  return out;
}

inline Mask hflip(const Mask& src) {
  Mask out(src.h, src.w);
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x) out.at(y, x) = src.at(y, src.w - 1 - x);
  return out;
}

// RGB <-> HSV on [0,1] channels, hue in [0,1).
inline void rgb_to_hsv(float r, float g, float b, float& hh, float& ss, float& vv) {
  float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  float d = mx - mn;
  vv = mx;
  ss = mx > 0 ? d / mx : 0.f;
  if (d <= 0) {
    hh = 0.f;
    return;
  }
  float h6;
  if (mx == r)
    h6 = std::fmod((g - b) / d + 6.f, 6.f);
  else if (mx == g)
    h6 = (b - r) / d + 2.f;
  else
    h6 = (r - g) / d + 4.f;
  hh = h6 / 6.f;
}

inline void hsv_to_rgb(float hh, float ss, float vv, float& r, float& g, float& b) {
  hh = hh - std::floor(hh);
  float h6 = hh * 6.f;
  int i = std::min(5, static_cast<int>(h6));
  float f = h6 - i;
  float p = vv * (1 - ss), q = vv * (1 - ss * f), t = vv * (1 - ss * (1 - f));
  switch (i) {
    case 0: r = vv; g = t; b = p; break;
    case 1: r = q; g = vv; b = p; break;
    case 2: r = p; g = vv; b = t; break;
    case 3: r = p; g = q; b = vv; break;
    case 4: r = t; g = p; b = vv; break;
    default: r = vv; g = p; b = q; break;
  }
}

}  // namespace gdistill
