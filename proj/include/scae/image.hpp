#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace scae {

// Single-channel image, row-major, intensities nominally in [0,1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::vector<double> px)
      : height(h), width(w), pixels(std::move(px)) {
    if (pixels.size() != h * w) throw std::invalid_argument("Image: pixel count != height*width");
  }

  std::size_t size() const { return pixels.size(); }
  double at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

}  // namespace scae
