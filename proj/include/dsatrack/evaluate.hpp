#pragma once

#include <functional>
#include <vector>

#include "dsatrack/metrics.hpp"
#include "dsatrack/synthetic.hpp"
#include "dsatrack/tracker.hpp"

namespace dsa {

/// Runs fn(0..count-1) on up to `jobs` threads; the first exception is rethrown.
void parallel_for(int count, int jobs, const std::function<void(int)>& fn);

struct TrackedSequence {
  SequenceResult result;
  std::vector<FrameBox> boxes;
  int clamp_warnings = 0;
};

/// Tracks each in-memory sequence from its first ground-truth box and scores it.
std::vector<TrackedSequence> track_records(const Model& model, const std::vector<SequenceRecord>& records,
                                           const TrackerOptions& opt, int jobs, std::uint64_t seed);
/// Same for sequence directories; frames are read lazily. Every directory
/// needs ground truth (the first line initializes the tracker).
std::vector<TrackedSequence> track_dirs(const Model& model, const std::vector<SequenceDir>& dirs,
                                        const TrackerOptions& opt, int jobs, std::uint64_t seed);

SuiteReport summarize_tracked(const std::vector<TrackedSequence>& tracked);

/// Convenience for experiments: overall suite report of `records`.
SuiteReport evaluate_records(const Model& model, const std::vector<SequenceRecord>& records,
                             const TrackerOptions& opt = {}, int jobs = 1, std::uint64_t seed = 0);

}  // namespace dsa
