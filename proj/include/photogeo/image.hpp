#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "photogeo/errors.hpp"

namespace photogeo {

/// Row-major single-channel float image.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, float fill = 0.0f)
      : width(w), height(h), data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  float& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  float at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

  bool inside(double x, double y, double margin = 0.0) const {
    return x >= margin && y >= margin && x <= width - 1 - margin && y <= height - 1 - margin;
  }

  /// Bilinear sample; caller guarantees inside(x, y).
  double bilinear(double x, double y) const {
    const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, width - 2);
    const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, height - 2);
    const double ax = x - x0, ay = y - y0;
    const double v00 = at(x0, y0), v10 = at(x0 + 1, y0);
    const double v01 = at(x0, y0 + 1), v11 = at(x0 + 1, y0 + 1);
    return (1 - ay) * ((1 - ax) * v00 + ax * v10) + ay * ((1 - ax) * v01 + ax * v11);
  }
};

/// Per-pixel z-depth in metres; 0 marks an invalid pixel.
struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<double> depth;

  DepthMap() = default;
  DepthMap(int w, int h)
      : width(w), height(h), depth(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), 0.0) {}

  double& at(int x, int y) { return depth[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return depth[static_cast<std::size_t>(y) * width + x]; }
  bool valid(int x, int y) const {
    return x >= 0 && y >= 0 && x < width && y < height && at(x, y) > 0.0;
  }
};

// 8-bit binary PGM (P5). Intensities are clamped to [0, 255].

inline void save_pgm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write image " + path);
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::clamp(std::lround(img.data[i]), 0L, 255L));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Image load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open image " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw ParseError(path + ": not a binary PGM");
  auto next_int = [&]() {
    int v = 0;
    while (in >> std::ws && in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
    }
    if (!(in >> v)) throw ParseError(path + ": truncated PGM header");
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255) throw ParseError(path + ": unsupported PGM header");
  in.get();
  Image img(w, h);
  std::vector<unsigned char> bytes(img.data.size());
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw ParseError(path + ": truncated PGM data");
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i];
  return img;
}

}  // namespace photogeo
