#pragma once

#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dsatrack/image.hpp"
#include "dsatrack/model.hpp"

namespace dsa {

/// Frames between patch updates: 5 up to t = 100, doubling per 100-frame band
/// (bands are (100k, 100(k+1)]), capped at 160 from t = 501 on.
int update_interval(int t);

/// Slot 0 is the fixed template; later slots are a FIFO of online patches.
class TemplateBank {
 public:
  explicit TemplateBank(int capacity = 3);

  void reset(Tensor fixed);
  void push(Tensor patch, int t);

  int capacity() const noexcept { return capacity_; }
  int size() const noexcept { return fixed_.empty() ? 0 : 1 + static_cast<int>(patches_.size()); }
  int patch_count() const noexcept { return static_cast<int>(patches_.size()); }
  int last_update() const noexcept { return last_update_; }
  const Tensor& fixed() const noexcept { return fixed_; }
  /// Fixed template first, then patches oldest to newest.
  std::vector<Tensor> crops() const;

 private:
  int capacity_;
  Tensor fixed_;
  std::deque<Tensor> patches_;
  int last_update_ = 0;
};

struct TrackerOptions {
  double template_factor = 2.0;
  double search_factor = 4.0;
  bool quality_gate = false;  ///< push a patch only when the peak score clears the threshold
  double quality_threshold = 0.5;
  bool single_precision = true;  ///< binary32 GEMMs in the forward pass
  double min_size = 2.0;         ///< smallest box extent in frame pixels
};

struct TrackerState {
  FrameBox box;
  int t = 0;
  double search_factor = 4.0;
  RngStream rng;
};

struct StepInfo {
  FrameBox box;
  double score = 0.0;
  bool clamped = false;  ///< prediction left the frame and was pulled back
  bool pushed = false;
};

class Tracker {
 public:
  /// The model (and f32, when given) must outlive the tracker.
  Tracker(const Model& model, TrackerOptions options = {}, const Float32Weights* f32 = nullptr,
          std::uint64_t seed = 0);

  void init(const Image& frame, const FrameBox& box);
  FrameBox step(const Image& frame);

  const StepInfo& last() const noexcept { return last_; }
  const TrackerState& state() const noexcept { return state_; }
  const TemplateBank& bank() const noexcept { return bank_; }
  int pushes() const noexcept { return pushes_; }
  int clamp_warnings() const noexcept { return clamps_; }

 private:
  const Model& model_;
  TrackerOptions opt_;
  std::optional<Float32Weights> own_f32_;
  const Float32Weights* f32_ = nullptr;
  std::uint64_t seed_;
  TrackerState state_;
  TemplateBank bank_;
  StepInfo last_;
  int pushes_ = 0;
  int clamps_ = 0;
  bool ready_ = false;
};

/// Numbered frames (.ppm or .png, sorted by name) plus groundtruth.txt.
struct SequenceDir {
  std::string name;
  std::vector<std::filesystem::path> frames;
  std::vector<FrameBox> groundtruth;  ///< empty when the file is absent
  std::vector<std::string> attributes;
};
SequenceDir scan_sequence(const std::filesystem::path& dir);

/// "x,y,w,h" per line; commas, tabs or spaces separate fields.
std::vector<FrameBox> read_boxes(const std::filesystem::path& path);
void write_boxes(const std::filesystem::path& path, const std::vector<FrameBox>& boxes);

/// One-pass run: init on frame 0 with `init_box`, step through the rest.
/// Returns one box per frame, the first being `init_box`.
std::vector<FrameBox> track_frames(const Model& model, const std::function<Image(int)>& frame, int count,
                                   const FrameBox& init_box, const TrackerOptions& opt = {},
                                   const Float32Weights* f32 = nullptr, std::uint64_t seed = 0,
                                   int* clamp_warnings = nullptr);
std::vector<FrameBox> track_sequence(const Model& model, const SequenceDir& seq, const FrameBox& init_box,
                                     const TrackerOptions& opt = {}, const Float32Weights* f32 = nullptr,
                                     std::uint64_t seed = 0, int* clamp_warnings = nullptr);

}  // namespace dsa
