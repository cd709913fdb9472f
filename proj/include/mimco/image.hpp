#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mimco {

// Planar channels-first float image, values nominally in [0, 1] before
// normalization.
struct Image {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<float> data;  // c * h * w, plane by plane

  Image() = default;
  Image(int height, int width, int channels, float fill = 0.f)
      : h(height), w(width), c(channels),
        data(checked_size(height, width, channels), fill) {}

  // Validates before the vector allocates so bad dims surface as an
  // argument error, not a length_error from a wrapped size_t.
  static std::size_t checked_size(int height, int width, int channels) {
    if (height <= 0 || width <= 0 || channels <= 0)
      throw std::invalid_argument("Image: dimensions must be positive");
    return static_cast<std::size_t>(height) * width * channels;
  }

  float& at(int ch, int y, int x) {
    return data[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }
  float at(int ch, int y, int x) const {
    return data[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }
  std::size_t size() const { return data.size(); }
};

inline void save_ppm(const Image& img, const std::string& path) {
  if (img.c != 3) throw std::invalid_argument("save_ppm: need a 3-channel image");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_ppm: cannot open " + path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const float v = std::clamp(img.at(ch, y, x), 0.f, 1.f);
        row[static_cast<std::size_t>(x) * 3 + ch] =
            static_cast<unsigned char>(std::lround(v * 255.f));
      }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw std::runtime_error("save_ppm: write failed for " + path);
}

inline Image load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_ppm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw std::runtime_error("load_ppm: not a binary PPM: " + path);
  auto next_token = [&f, &path]() {
    // Skips whitespace and '#' comment lines.
    std::string tok;
    while (f >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(f, rest);
        continue;
      }
      return tok;
    }
    throw std::runtime_error("load_ppm: truncated header in " + path);
  };
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxv = std::stoi(next_token());
  if (w <= 0 || h <= 0 || maxv <= 0 || maxv > 255)
    throw std::runtime_error("load_ppm: unsupported header in " + path);
  f.get();  // single whitespace after maxval
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (f.gcount() != static_cast<std::streamsize>(raw.size()))
    throw std::runtime_error("load_ppm: truncated pixel data in " + path);
  Image img(h, w, 3);
  const float scale = 1.f / static_cast<float>(maxv);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        img.at(ch, y, x) = static_cast<float>(raw[(static_cast<std::size_t>(y) * w + x) * 3 + ch]) * scale;
  return img;
}

}  // namespace mimco
