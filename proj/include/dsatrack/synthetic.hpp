#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dsatrack/image.hpp"

namespace dsa {

enum class Attribute { CameraMotion, FastMotion, LowResolution, Occlusion, ScaleVariation };

const char* to_string(Attribute a);
/// Accepts the hyphenated names ("camera-motion", "fast-motion", ...).
std::optional<Attribute> parse_attribute(const std::string& name);

struct SequenceSpec {
  std::vector<Attribute> attributes;
  int length = 100;
  std::uint64_t seed = 0;
  int frame_size = 256;
  double target_size = 32.0;  ///< mean side of the target rectangle
  double speed = -1.0;        ///< px per frame; negative draws 2-6 (22-30 with fast-motion)
  double camera_sigma = 3.0;  ///< global jitter, px
  int low_res_factor = 4;

  bool has(Attribute a) const;
};

struct SequenceRecord {
  std::string name;
  std::vector<Image> frames;
  std::vector<FrameBox> groundtruth;
  std::vector<std::string> attributes;
};

/// Textured rectangle over a textured gray background, deterministic per seed.
SequenceRecord generate_sequence(const SequenceSpec& spec);

/// frames as 0001.ppm..., groundtruth.txt and attributes.txt.
void write_sequence(const std::filesystem::path& dir, const SequenceRecord& rec);

/// `count` sequences with seeds base_seed, base_seed + 1, ...
std::vector<SequenceRecord> synthetic_suite(int count, std::uint64_t base_seed, const std::vector<Attribute>& attrs,
                                            int length);

}  // namespace dsa
