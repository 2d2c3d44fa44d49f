#include "dsatrack/evaluate.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

namespace dsa {

void parallel_for(int count, int jobs, const std::function<void(int)>& fn) {
  if (jobs < 1) throw ValidationError("--jobs must be >= 1");
  jobs = std::min(jobs, count);
  if (jobs <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int j = 0; j < jobs; ++j) {
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first) first = std::current_exception();
          next = count;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

std::vector<TrackedSequence> track_records(const Model& model, const std::vector<SequenceRecord>& records,
                                           const TrackerOptions& opt, int jobs, std::uint64_t seed) {
  const Float32Weights f32 = float32_weights(model);
  std::vector<TrackedSequence> out(records.size());
  parallel_for(static_cast<int>(records.size()), jobs, [&](int i) {
    const SequenceRecord& r = records[i];
    if (r.groundtruth.empty()) throw ValidationError(r.name + ": no ground truth");
    TrackedSequence& t = out[i];
    t.boxes = track_frames(
        model, [&](int k) { return r.frames[k]; }, static_cast<int>(r.frames.size()), r.groundtruth[0], opt,
        opt.single_precision ? &f32 : nullptr, seed, &t.clamp_warnings);
    t.result = {r.name, r.attributes, precision_success(t.boxes, r.groundtruth)};
  });
  return out;
}

std::vector<TrackedSequence> track_dirs(const Model& model, const std::vector<SequenceDir>& dirs,
                                        const TrackerOptions& opt, int jobs, std::uint64_t seed) {
  const Float32Weights f32 = float32_weights(model);
  std::vector<TrackedSequence> out(dirs.size());
  parallel_for(static_cast<int>(dirs.size()), jobs, [&](int i) {
    const SequenceDir& d = dirs[i];
    if (d.groundtruth.empty()) throw ValidationError(d.name + ": missing groundtruth.txt");
    TrackedSequence& t = out[i];
    t.boxes = track_sequence(model, d, d.groundtruth[0], opt, opt.single_precision ? &f32 : nullptr, seed,
                             &t.clamp_warnings);
    t.result = {d.name, d.attributes, precision_success(t.boxes, d.groundtruth)};
  });
  return out;
}

SuiteReport summarize_tracked(const std::vector<TrackedSequence>& tracked) {
  std::vector<SequenceResult> results;
  for (const auto& t : tracked) results.push_back(t.result);
  return summarize(std::move(results));
}

SuiteReport evaluate_records(const Model& model, const std::vector<SequenceRecord>& records,
                             const TrackerOptions& opt, int jobs, std::uint64_t seed) {
  return summarize_tracked(track_records(model, records, opt, jobs, seed));
}

}  // namespace dsa
