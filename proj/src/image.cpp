#include "dsatrack/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace dsa {

Image::Image(int w, int h, std::uint8_t fill) : width(w), height(h) {
  if (w <= 0 || h <= 0) throw ValidationError("Image: non-positive size");
  rgb.assign(static_cast<std::size_t>(w) * h * 3, fill);
}

namespace {

// skips whitespace and '#' comments between header fields
void skip_blank(std::istream& in) {
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

Image read_ppm(std::istream& in, const std::filesystem::path& path) {
  char magic[2] = {};
  in.read(magic, 2);
  if (magic[0] != 'P' || magic[1] != '6') throw ValidationError(path.string() + ": not a binary PPM");
  int w = 0, h = 0, maxval = 0;
  skip_blank(in);
  in >> w;
  skip_blank(in);
  in >> h;
  skip_blank(in);
  in >> maxval;
  if (!in || w <= 0 || h <= 0 || maxval != 255) {
    throw ValidationError(path.string() + ": unsupported PPM header (need maxval 255)");
  }
  in.get();  // single whitespace before the raster
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) {
    throw ValidationError(path.string() + ": truncated PPM raster");
  }
  return img;
}

Image read_png(const std::filesystem::path& path) {
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str())) {
    throw ValidationError(path.string() + ": " + pi.message);
  }
  pi.format = PNG_FORMAT_RGB;
  Image img(static_cast<int>(pi.width), static_cast<int>(pi.height));
  if (!png_image_finish_read(&pi, nullptr, img.rgb.data(), 0, nullptr)) {
    const std::string msg = pi.message;
    png_image_free(&pi);
    throw ValidationError(path.string() + ": " + msg);
  }
  return img;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open image " + path.string());
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  in.clear();
  in.seekg(0);
  if (png_sig_cmp(sig, 0, 8) == 0) return read_png(path);
  return read_ppm(in, path);
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw ValidationError("short write to " + path.string());
}

CropWindow crop_window(const FrameBox& box, double factor, int out_size) {
  if (!(box.w > 0.0) || !(box.h > 0.0)) throw ValidationError("crop_window: degenerate box");
  if (!(factor > 0.0) || out_size <= 0) throw ValidationError("crop_window: bad factor or size");
  const double side = factor * std::sqrt(box.w * box.h);
  return {box.cx() - 0.5 * side, box.cy() - 0.5 * side, side, out_size};
}

Tensor crop_normalized(const Image& frame, const CropWindow& win) {
  const int n = win.out_size;
  Tensor out({n, n, 3});
  const double step = win.side / n;
  auto norm = [](double v) { return (v / 255.0 - 0.5) / 0.25; };
  const double gray = 128.0;
  for (int oy = 0; oy < n; ++oy) {
    // sample at output pixel centers; frame pixel centers sit at integer + 0.5
    const double fy = win.y0 + (oy + 0.5) * step - 0.5;
    const int y0 = static_cast<int>(std::floor(fy));
    const double ty = fy - y0;
    for (int ox = 0; ox < n; ++ox) {
      const double fx = win.x0 + (ox + 0.5) * step - 0.5;
      const int x0 = static_cast<int>(std::floor(fx));
      const double tx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        auto px = [&](int x, int y) -> double {
          if (x < 0 || y < 0 || x >= frame.width || y >= frame.height) return gray;
          return frame.at(x, y, c);
        };
        const double top = px(x0, y0) * (1.0 - tx) + px(x0 + 1, y0) * tx;
        const double bot = px(x0, y0 + 1) * (1.0 - tx) + px(x0 + 1, y0 + 1) * tx;
        out[(static_cast<std::size_t>(oy) * n + ox) * 3 + c] = norm(top * (1.0 - ty) + bot * ty);
      }
    }
  }
  return out;
}

FrameBox to_frame(const BBox& b, const CropWindow& win) {
  const double w = b.w * win.side, h = b.h * win.side;
  return {win.x0 + b.cx * win.side - 0.5 * w, win.y0 + b.cy * win.side - 0.5 * h, w, h};
}

BBox to_crop(const FrameBox& b, const CropWindow& win) {
  return {(b.cx() - win.x0) / win.side, (b.cy() - win.y0) / win.side, b.w / win.side, b.h / win.side};
}

double frame_iou(const FrameBox& a, const FrameBox& b) {
  const double iw = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double ih = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double center_error(const FrameBox& a, const FrameBox& b) { return std::hypot(a.cx() - b.cx(), a.cy() - b.cy()); }

}  // namespace dsa
