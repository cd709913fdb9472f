#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include "mimco/image.hpp"
#include "mimco/rng.hpp"

namespace mimco {

// Weak augmentation: random resized crop + horizontal flip + per-channel
// normalization. Color jitter knobs exist for the contrastive pre-training
// recipe and default to off.
struct AugmentationConfig {
  double crop_scale_lo = 0.67;
  double crop_scale_hi = 1.0;
  double aspect_lo = 3.0 / 4.0;
  double aspect_hi = 4.0 / 3.0;
  double hflip_prob = 0.5;
  int out_h = 64;
  int out_w = 64;
  std::array<float, 3> mean = {0.5f, 0.5f, 0.5f};
  std::array<float, 3> stddev = {0.25f, 0.25f, 0.25f};
  double color_jitter = 0.0;    // brightness/contrast/saturation strength
  double grayscale_prob = 0.0;

  void validate() const {
    if (!(crop_scale_lo > 0.0 && crop_scale_lo <= crop_scale_hi && crop_scale_hi <= 1.0))
      throw std::invalid_argument("AugmentationConfig: crop_scale must satisfy 0 < lo <= hi <= 1");
    if (!(aspect_lo > 0.0 && aspect_lo <= aspect_hi))
      throw std::invalid_argument("AugmentationConfig: aspect bounds must be positive and ordered");
    if (hflip_prob < 0.0 || hflip_prob > 1.0)
      throw std::invalid_argument("AugmentationConfig: hflip_prob must be in [0, 1]");
    if (out_h <= 0 || out_w <= 0)
      throw std::invalid_argument("AugmentationConfig: output size must be positive");
    for (float s : stddev)
      if (s <= 0.f) throw std::invalid_argument("AugmentationConfig: stddev must be positive");
    if (color_jitter < 0.0 || grayscale_prob < 0.0 || grayscale_prob > 1.0)
      throw std::invalid_argument("AugmentationConfig: bad color jitter settings");
  }

  AugmentationConfig identity_for(int h, int w) const {
    AugmentationConfig c = *this;
    c.crop_scale_lo = c.crop_scale_hi = 1.0;
    c.aspect_lo = c.aspect_hi = 1.0;
    c.hflip_prob = 0.0;
    c.out_h = h;
    c.out_w = w;
    c.mean = {0.f, 0.f, 0.f};
    c.stddev = {1.f, 1.f, 1.f};
    c.color_jitter = 0.0;
    c.grayscale_prob = 0.0;
    return c;
  }
};

namespace detail {

struct CropBox {
  int top, left, h, w;
};

inline CropBox sample_crop(int img_h, int img_w, const AugmentationConfig& cfg, Rng& rng) {
  const double area = static_cast<double>(img_h) * img_w;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(cfg.crop_scale_lo, cfg.crop_scale_hi);
    const double ratio = std::exp(rng.uniform(std::log(cfg.aspect_lo), std::log(cfg.aspect_hi)));
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= img_w && h <= img_h) {
      const int top = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(img_h - h + 1)));
      const int left = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(img_w - w + 1)));
      return {top, left, h, w};
    }
  }
  // Fallback: center crop at the nearest valid aspect ratio.
  const double in_ratio = static_cast<double>(img_w) / img_h;
  int w, h;
  if (in_ratio < cfg.aspect_lo) {
    w = img_w;
    h = std::max(1, static_cast<int>(std::lround(w / cfg.aspect_lo)));
  } else if (in_ratio > cfg.aspect_hi) {
    h = img_h;
    w = std::max(1, static_cast<int>(std::lround(h * cfg.aspect_hi)));
  } else {
    w = img_w;
    h = img_h;
  }
  return {(img_h - h) / 2, (img_w - w) / 2, h, w};
}

// Bilinear resample of a crop box to (out_h, out_w), half-pixel centers.
inline Image resize_crop(const Image& src, const CropBox& box, int out_h, int out_w) {
  Image dst(out_h, out_w, src.c);
  const double sy = static_cast<double>(box.h) / out_h;
  const double sx = static_cast<double>(box.w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(box.h - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, box.h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(box.w - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, box.w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < src.c; ++ch) {
        const double v00 = src.at(ch, box.top + y0, box.left + x0);
        const double v01 = src.at(ch, box.top + y0, box.left + x1);
        const double v10 = src.at(ch, box.top + y1, box.left + x0);
        const double v11 = src.at(ch, box.top + y1, box.left + x1);
        const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
        dst.at(ch, y, x) = static_cast<float>(v);
      }
    }
  }
  return dst;
}

inline void hflip_inplace(Image& img) {
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w / 2; ++x)
        std::swap(img.at(ch, y, x), img.at(ch, y, img.w - 1 - x));
}

inline float luma(const Image& img, int y, int x) {
  return 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
}

inline void color_jitter_inplace(Image& img, double strength, double grayscale_prob, Rng& rng) {
  if (strength > 0.0) {
    const float fb = static_cast<float>(rng.uniform(std::max(0.0, 1.0 - strength), 1.0 + strength));
    const float fc = static_cast<float>(rng.uniform(std::max(0.0, 1.0 - strength), 1.0 + strength));
    const float fs = static_cast<float>(rng.uniform(std::max(0.0, 1.0 - strength), 1.0 + strength));
    for (auto& v : img.data) v *= fb;
    double mean_luma = 0.0;
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) mean_luma += luma(img, y, x);
    const float ml = static_cast<float>(mean_luma / (static_cast<double>(img.h) * img.w));
    for (auto& v : img.data) v = (v - ml) * fc + ml;
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        const float l = luma(img, y, x);
        for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = (img.at(ch, y, x) - l) * fs + l;
      }
  }
  if (grayscale_prob > 0.0 && rng.bernoulli(grayscale_prob)) {
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        const float l = luma(img, y, x);
        for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = l;
      }
  }
  for (auto& v : img.data) v = std::clamp(v, 0.f, 1.f);
}

inline void normalize_inplace(Image& img, const AugmentationConfig& cfg) {
  for (int ch = 0; ch < img.c; ++ch) {
    const float m = cfg.mean[static_cast<std::size_t>(ch)];
    const float inv = 1.f / cfg.stddev[static_cast<std::size_t>(ch)];
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) img.at(ch, y, x) = (img.at(ch, y, x) - m) * inv;
  }
}

}  // namespace detail

// One augmented crop at the training resolution. Pure in (image, cfg, rng
// stream): a fixed seed reproduces the output byte for byte.
inline Image apply_weak_augmentation(const Image& image, const AugmentationConfig& cfg, Rng& rng) {
  cfg.validate();
  if (image.c != 3) throw std::invalid_argument("apply_weak_augmentation: need a 3-channel image");
  if (image.h < 2 || image.w < 2)
    throw std::invalid_argument("apply_weak_augmentation: image smaller than minimum crop");
  const detail::CropBox box = detail::sample_crop(image.h, image.w, cfg, rng);
  Image out = detail::resize_crop(image, box, cfg.out_h, cfg.out_w);
  if (cfg.hflip_prob > 0.0 && rng.bernoulli(cfg.hflip_prob)) detail::hflip_inplace(out);
  if (cfg.color_jitter > 0.0 || cfg.grayscale_prob > 0.0)
    detail::color_jitter_inplace(out, cfg.color_jitter, cfg.grayscale_prob, rng);
  detail::normalize_inplace(out, cfg);
  return out;
}

// Deterministic evaluation transform: full-image resize + normalization.
inline Image eval_transform(const Image& image, const AugmentationConfig& cfg) {
  cfg.validate();
  if (image.c != 3) throw std::invalid_argument("eval_transform: need a 3-channel image");
  if (image.h < 2 || image.w < 2)
    throw std::invalid_argument("eval_transform: image smaller than minimum crop");
  Image out = detail::resize_crop(image, {0, 0, image.h, image.w}, cfg.out_h, cfg.out_w);
  detail::normalize_inplace(out, cfg);
  return out;
}

}  // namespace mimco
