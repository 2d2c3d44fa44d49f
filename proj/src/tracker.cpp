#include "dsatrack/tracker.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace dsa {

int update_interval(int t) {
  if (t < 1) throw ValidationError("update_interval: t must be >= 1, got " + std::to_string(t));
  if (t <= 100) return 5;
  const int band = (t - 1) / 100;  // (100k, 100(k+1)] -> k
  return std::min(160, 5 << band);
}

TemplateBank::TemplateBank(int capacity) : capacity_(capacity) {
  if (capacity < 1) throw ValidationError("TemplateBank: capacity must be >= 1");
}

void TemplateBank::reset(Tensor fixed) {
  fixed_ = std::move(fixed);
  patches_.clear();
  last_update_ = 0;
}

void TemplateBank::push(Tensor patch, int t) {
  if (fixed_.empty()) throw ValidationError("TemplateBank: push before reset");
  if (capacity_ == 1) return;
  patches_.push_back(std::move(patch));
  while (static_cast<int>(patches_.size()) > capacity_ - 1) patches_.pop_front();
  last_update_ = t;
}

std::vector<Tensor> TemplateBank::crops() const {
  std::vector<Tensor> out;
  out.reserve(patches_.size() + 1);
  out.push_back(fixed_);
  for (const auto& p : patches_) out.push_back(p);
  return out;
}

Tracker::Tracker(const Model& model, TrackerOptions options, const Float32Weights* f32, std::uint64_t seed)
    : model_(model), opt_(options), seed_(seed), bank_(static_cast<int>(model.config.bank_size)) {
  if (opt_.single_precision) {
    if (f32 == nullptr) own_f32_ = float32_weights(model);
    f32_ = f32 ? f32 : &*own_f32_;
  }
}

void Tracker::init(const Image& frame, const FrameBox& box) {
  if (!(box.w > 0.0) || !(box.h > 0.0)) throw ValidationError("Tracker::init: degenerate box");
  if (box.x + box.w <= 0.0 || box.y + box.h <= 0.0 || box.x >= frame.width || box.y >= frame.height) {
    throw ValidationError("Tracker::init: box lies outside the frame");
  }
  state_ = TrackerState{box, 0, opt_.search_factor, RngStream(seed_)};
  const CropWindow win = crop_window(box, opt_.template_factor, static_cast<int>(model_.config.template_size));
  bank_.reset(crop_normalized(frame, win));
  last_ = StepInfo{box, 1.0, false, false};
  pushes_ = 0;
  clamps_ = 0;
  ready_ = true;
}

FrameBox Tracker::step(const Image& frame) {
  if (!ready_) throw ValidationError("Tracker::step before init");
  ++state_.t;
  const CropWindow win = crop_window(state_.box, state_.search_factor, static_cast<int>(model_.config.search_size));
  const Tensor search = crop_normalized(frame, win);

  Tape tape;
  tape.set_float32_weights(f32_);
  ParamBinder binder(tape);
  ForwardOptions fo;
  fo.rng = &state_.rng;
  const ForwardResult r = model_forward(model_, bank_.crops(), search, fo, binder);
  const HeadOutput out = head_output(r.head);
  const Cell peak = peak_cell(out.score);
  StepInfo info;
  info.score = out.score[peak.row * out.score.dim(1) + peak.col];

  FrameBox b = to_frame(decode_box(out), win);
  b.w = std::clamp(b.w, opt_.min_size, static_cast<double>(frame.width));
  b.h = std::clamp(b.h, opt_.min_size, static_cast<double>(frame.height));
  // local tracker, no re-detection: a box that left the frame is pulled back to the border
  if (b.x + b.w <= 0.0 || b.y + b.h <= 0.0 || b.x >= frame.width || b.y >= frame.height) {
    b.x = std::clamp(b.x, 0.0, frame.width - b.w);
    b.y = std::clamp(b.y, 0.0, frame.height - b.h);
    info.clamped = true;
    ++clamps_;
  }
  state_.box = b;
  info.box = b;

  if (state_.t % update_interval(state_.t) == 0 && (!opt_.quality_gate || info.score > opt_.quality_threshold)) {
    const CropWindow pw = crop_window(b, opt_.template_factor, static_cast<int>(model_.config.template_size));
    bank_.push(crop_normalized(frame, pw), state_.t);
    info.pushed = true;
    ++pushes_;
  }
  last_ = info;
  return b;
}

namespace {

bool is_frame_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".ppm" || ext == ".png";
}

}  // namespace

std::vector<FrameBox> read_boxes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<FrameBox> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    for (char& c : line)
      if (c == ',' || c == '\t') c = ' ';
    std::istringstream ls(line);
    FrameBox b;
    if (!(ls >> b.x)) continue;  // blank line
    if (!(ls >> b.y >> b.w >> b.h)) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected x,y,w,h");
    }
    out.push_back(b);
  }
  return out;
}

void write_boxes(const std::filesystem::path& path, const std::vector<FrameBox>& boxes) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  char buf[128];
  for (const auto& b : boxes) {
    std::snprintf(buf, sizeof buf, "%.3f,%.3f,%.3f,%.3f\n", b.x, b.y, b.w, b.h);
    out << buf;
  }
}

SequenceDir scan_sequence(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("not a sequence directory: " + dir.string());
  SequenceDir seq;
  seq.name = dir.filename().string();
  if (seq.name.empty()) seq.name = dir.parent_path().filename().string();
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && is_frame_file(e.path())) seq.frames.push_back(e.path());
  }
  std::sort(seq.frames.begin(), seq.frames.end());
  if (seq.frames.empty()) throw ValidationError("no .ppm/.png frames in " + dir.string());
  if (std::filesystem::exists(dir / "groundtruth.txt")) seq.groundtruth = read_boxes(dir / "groundtruth.txt");
  if (std::filesystem::exists(dir / "attributes.txt")) {
    std::ifstream in(dir / "attributes.txt");
    std::string tag;
    while (in >> tag) seq.attributes.push_back(tag);
  }
  return seq;
}

std::vector<FrameBox> track_frames(const Model& model, const std::function<Image(int)>& frame, int count,
                                   const FrameBox& init_box, const TrackerOptions& opt, const Float32Weights* f32,
                                   std::uint64_t seed, int* clamp_warnings) {
  if (count < 1) throw ValidationError("track: empty sequence");
  Tracker tr(model, opt, f32, seed);
  std::vector<FrameBox> out;
  out.reserve(count);
  tr.init(frame(0), init_box);
  out.push_back(init_box);
  for (int i = 1; i < count; ++i) out.push_back(tr.step(frame(i)));
  if (clamp_warnings) *clamp_warnings = tr.clamp_warnings();
  return out;
}

std::vector<FrameBox> track_sequence(const Model& model, const SequenceDir& seq, const FrameBox& init_box,
                                     const TrackerOptions& opt, const Float32Weights* f32, std::uint64_t seed,
                                     int* clamp_warnings) {
  return track_frames(
      model, [&](int i) { return read_image(seq.frames[static_cast<std::size_t>(i)]); },
      static_cast<int>(seq.frames.size()), init_box, opt, f32, seed, clamp_warnings);
}

}  // namespace dsa
