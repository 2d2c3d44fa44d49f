#include "dsatrack/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "dsatrack/rng.hpp"
#include "dsatrack/tracker.hpp"

namespace dsa {

const char* to_string(Attribute a) {
  switch (a) {
    case Attribute::CameraMotion: return "camera-motion";
    case Attribute::FastMotion: return "fast-motion";
    case Attribute::LowResolution: return "low-resolution";
    case Attribute::Occlusion: return "occlusion";
    case Attribute::ScaleVariation: return "scale-variation";
  }
  return "?";
}

std::optional<Attribute> parse_attribute(const std::string& name) {
  for (Attribute a : {Attribute::CameraMotion, Attribute::FastMotion, Attribute::LowResolution, Attribute::Occlusion,
                      Attribute::ScaleVariation}) {
    if (name == to_string(a)) return a;
  }
  return std::nullopt;
}

bool SequenceSpec::has(Attribute a) const { return std::find(attributes.begin(), attributes.end(), a) != attributes.end(); }

namespace {

// stateless per-pixel noise in [-1, 1]
double hash_noise(std::uint64_t seed, std::int64_t x, std::int64_t y) {
  std::uint64_t z = seed ^ (static_cast<std::uint64_t>(x) * 0x9E3779B97F4A7C15ULL) ^
                    (static_cast<std::uint64_t>(y) * 0xC2B2AE3D27D4EB4FULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return static_cast<double>(z >> 11) * 0x1.0p-53 * 2.0 - 1.0;
}

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

struct Rgb {
  double r, g, b;
};

Rgb hue_color(double hue) {
  // saturated HSV (s = 0.85, v = 0.95) to RGB
  const double s = 0.85, v = 0.95 * 255.0;
  const double h6 = hue * 6.0;
  const int sector = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct Background {
  double base;
  double amp[3], freq[3], phase[3];
  double tint[3];
  std::uint64_t seed;

  double at(std::int64_t wx, std::int64_t wy, int c) const {
    const double x = static_cast<double>(wx), y = static_cast<double>(wy);
    const double v = base + amp[0] * std::sin(freq[0] * x + phase[0]) + amp[1] * std::sin(freq[1] * y + phase[1]) +
                     amp[2] * std::sin(freq[2] * (x + y) + phase[2]) + 10.0 * hash_noise(seed, wx, wy);
    return v + tint[c];
  }
};

Image downsample_upsample(const Image& img, int f) {
  const int sw = std::max(1, img.width / f), sh = std::max(1, img.height / f);
  std::vector<double> small(static_cast<std::size_t>(sw) * sh * 3, 0.0);
  for (int y = 0; y < sh; ++y)
    for (int x = 0; x < sw; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int dy = 0; dy < f; ++dy)
          for (int dx = 0; dx < f; ++dx) acc += img.at(std::min(x * f + dx, img.width - 1), std::min(y * f + dy, img.height - 1), c);
        small[(static_cast<std::size_t>(y) * sw + x) * 3 + c] = acc / (f * f);
      }
  Image out(img.width, img.height);
  auto px = [&](int x, int y, int c) {
    x = std::clamp(x, 0, sw - 1);
    y = std::clamp(y, 0, sh - 1);
    return small[(static_cast<std::size_t>(y) * sw + x) * 3 + c];
  };
  for (int y = 0; y < img.height; ++y) {
    const double fy = (y + 0.5) / f - 0.5;
    const int y0 = static_cast<int>(std::floor(fy));
    const double ty = fy - y0;
    for (int x = 0; x < img.width; ++x) {
      const double fx = (x + 0.5) / f - 0.5;
      const int x0 = static_cast<int>(std::floor(fx));
      const double tx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = px(x0, y0, c) * (1 - tx) + px(x0 + 1, y0, c) * tx;
        const double bot = px(x0, y0 + 1, c) * (1 - tx) + px(x0 + 1, y0 + 1, c) * tx;
        out.at(x, y, c) = to_u8(top * (1 - ty) + bot * ty);
      }
    }
  }
  return out;
}

}  // namespace

SequenceRecord generate_sequence(const SequenceSpec& spec) {
  if (spec.length < 2) throw ValidationError("generate_sequence: length must be >= 2");
  if (spec.frame_size < 32 || spec.target_size < 4 || spec.target_size * 2 > spec.frame_size) {
    throw ValidationError("generate_sequence: frame/target sizes out of range");
  }
  RngStream rng(spec.seed);
  const double S = spec.frame_size;

  Background bg{};
  bg.base = rng.uniform(95.0, 155.0);
  for (int i = 0; i < 3; ++i) {
    bg.amp[i] = rng.uniform(4.0, 14.0);
    bg.freq[i] = rng.uniform(0.02, 0.25);
    bg.phase[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    bg.tint[i] = rng.uniform(-6.0, 6.0);
  }
  bg.seed = rng.next_u64();

  const Rgb color = hue_color(rng.uniform());
  const double base_w = spec.target_size * rng.uniform(0.8, 1.2);
  const double base_h = spec.target_size * rng.uniform(0.8, 1.2);
  const double stripe_freq = rng.uniform(2.0, 4.0);
  const double stripe_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const bool stripes_vertical = rng.uniform() < 0.5;
  const std::uint64_t target_seed = rng.next_u64();

  double speed = spec.speed;
  if (speed < 0.0) speed = spec.has(Attribute::FastMotion) ? rng.uniform(22.0, 30.0) : rng.uniform(2.0, 6.0);
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  double vx = speed * std::cos(angle), vy = speed * std::sin(angle);
  const double scale_period = rng.uniform(40.0, 80.0);
  const double scale_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  // world trajectory, reflecting off the frame border
  const double margin = 0.6 * spec.target_size * 1.35;
  double cx = rng.uniform(margin, S - margin), cy = rng.uniform(margin, S - margin);
  std::vector<FrameBox> world(static_cast<std::size_t>(spec.length));
  for (int t = 0; t < spec.length; ++t) {
    const double s = spec.has(Attribute::ScaleVariation)
                         ? 1.0 + 0.3 * std::sin(2.0 * std::numbers::pi * t / scale_period + scale_phase)
                         : 1.0;
    const double w = base_w * s, h = base_h * s;
    if (t > 0) {
      cx += vx;
      cy += vy;
    }
    if (cx - w / 2 < 0) { cx = w - cx; vx = -vx; }
    if (cx + w / 2 > S) { cx = 2 * (S - w / 2) - cx; vx = -vx; }
    if (cy - h / 2 < 0) { cy = h - cy; vy = -vy; }
    if (cy + h / 2 > S) { cy = 2 * (S - h / 2) - cy; vy = -vy; }
    cx = std::clamp(cx, w / 2, S - w / 2);
    cy = std::clamp(cy, h / 2, S - h / 2);
    world[t] = {cx - w / 2, cy - h / 2, w, h};
  }

  // static bar the target passes behind, across its dominant direction of motion
  struct Bar {
    bool vertical;
    double lo, hi;
  };
  std::optional<Bar> bar;
  if (spec.has(Attribute::Occlusion)) {
    const FrameBox& mid = world[static_cast<std::size_t>(spec.length / 2)];
    const bool vertical = std::abs(vx) >= std::abs(vy);
    const double c = vertical ? mid.cx() : mid.cy();
    const double half = 0.4 * (vertical ? mid.w : mid.h);
    bar = Bar{vertical, c - half, c + half};
  }

  SequenceRecord rec;
  char name[64];
  std::snprintf(name, sizeof name, "syn%06llu", static_cast<unsigned long long>(spec.seed));
  rec.name = name;
  for (Attribute a : spec.attributes) rec.attributes.emplace_back(to_string(a));
  const int n = spec.frame_size;
  for (int t = 0; t < spec.length; ++t) {
    std::int64_t jx = 0, jy = 0;
    if (spec.has(Attribute::CameraMotion)) {
      jx = std::lround(spec.camera_sigma * rng.normal());
      jy = std::lround(spec.camera_sigma * rng.normal());
    }
    const FrameBox& wb = world[t];
    // frame pixel (x, y) shows world point (x + jx, y + jy)
    const FrameBox fb{wb.x - static_cast<double>(jx), wb.y - static_cast<double>(jy), wb.w, wb.h};
    Image img(n, n);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const std::int64_t wx = x + jx, wy = y + jy;
        const double px = wx + 0.5, py = wy + 0.5;
        double rgb[3];
        const bool in_target = px >= wb.x && px < wb.x + wb.w && py >= wb.y && py < wb.y + wb.h;
        const bool in_bar = bar && (bar->vertical ? (px >= bar->lo && px < bar->hi) : (py >= bar->lo && py < bar->hi));
        if (in_bar) {
          const double v = 70.0 + 12.0 * hash_noise(bg.seed ^ 0x5bd1e995ULL, wx, wy);
          rgb[0] = rgb[1] = rgb[2] = v;
        } else if (in_target) {
          const double u = (px - wb.x) / wb.w, v = (py - wb.y) / wb.h;
          const double k = stripes_vertical ? u : v;
          const double stripe = std::sin(2.0 * std::numbers::pi * stripe_freq * k + stripe_phase) > 0 ? 1.0 : 0.7;
          // noise indexed by target-local texel so it moves with the target
          const double tex = 0.08 * hash_noise(target_seed, std::lround(u * 16), std::lround(v * 16));
          const double m = stripe + tex;
          rgb[0] = color.r * m;
          rgb[1] = color.g * m;
          rgb[2] = color.b * m;
        } else {
          for (int c = 0; c < 3; ++c) rgb[c] = bg.at(wx, wy, c);
        }
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = to_u8(rgb[c]);
      }
    }
    if (spec.has(Attribute::LowResolution)) img = downsample_upsample(img, spec.low_res_factor);
    rec.frames.push_back(std::move(img));
    rec.groundtruth.push_back(fb);
  }
  return rec;
}

void write_sequence(const std::filesystem::path& dir, const SequenceRecord& rec) {
  std::filesystem::create_directories(dir);
  char name[32];
  for (std::size_t i = 0; i < rec.frames.size(); ++i) {
    std::snprintf(name, sizeof name, "%04zu.ppm", i + 1);
    write_ppm(dir / name, rec.frames[i]);
  }
  write_boxes(dir / "groundtruth.txt", rec.groundtruth);
  std::ofstream attrs(dir / "attributes.txt");
  for (const auto& a : rec.attributes) attrs << a << '\n';
}

std::vector<SequenceRecord> synthetic_suite(int count, std::uint64_t base_seed, const std::vector<Attribute>& attrs,
                                            int length) {
  std::vector<SequenceRecord> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    SequenceSpec spec;
    spec.attributes = attrs;
    spec.length = length;
    spec.seed = base_seed + static_cast<std::uint64_t>(i);
    out.push_back(generate_sequence(spec));
  }
  return out;
}

}  // namespace dsa
