#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dsatrack/head.hpp"
#include "dsatrack/tensor.hpp"

namespace dsa {

/// 8-bit RGB, row-major, interleaved.
struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0);

  std::uint8_t& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool empty() const noexcept { return rgb.empty(); }
};

/// Binary PPM (P6, maxval 255) or PNG, chosen by content.
Image read_image(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& img);

/// Box in frame pixels: top-left corner plus extent.
struct FrameBox {
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
};

/// Square frame region resampled to out_size x out_size.
struct CropWindow {
  double x0 = 0.0, y0 = 0.0;  ///< top-left in frame pixels
  double side = 0.0;          ///< frame pixels covered
  int out_size = 0;
};

/// Square window centered on the box with side factor * sqrt(w * h).
CropWindow crop_window(const FrameBox& box, double factor, int out_size);

/// Bilinear resample of the window; outside the frame reads mid gray.
/// Values are normalized as (v / 255 - 0.5) / 0.25; shape [out, out, 3].
Tensor crop_normalized(const Image& frame, const CropWindow& win);

/// Normalized crop coordinates <-> frame pixels.
FrameBox to_frame(const BBox& b, const CropWindow& win);
BBox to_crop(const FrameBox& b, const CropWindow& win);

/// Intersection-over-union and center distance in frame pixels.
double frame_iou(const FrameBox& a, const FrameBox& b);
double center_error(const FrameBox& a, const FrameBox& b);

}  // namespace dsa
