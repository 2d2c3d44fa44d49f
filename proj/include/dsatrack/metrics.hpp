#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dsatrack/image.hpp"

namespace dsa {

inline constexpr int kPrecisionMaxPx = 50;  ///< thresholds 0, 1, ..., 50 px
inline constexpr int kSuccessSteps = 20;    ///< IoU thresholds 0, 0.05, ..., 1

double success_threshold(int k);

struct MetricReport {
  std::vector<double> precision;  ///< fraction of frames with center error <= k px
  std::vector<double> success;    ///< fraction of frames with IoU >= success_threshold(k)
  double precision_at_20 = 0.0;
  double success_auc = 0.0;  ///< mean of the success curve
  int frames = 0;
};

/// One-pass scores over all frames of one sequence.
MetricReport precision_success(const std::vector<FrameBox>& pred, const std::vector<FrameBox>& gt);

struct SequenceResult {
  std::string name;
  std::vector<std::string> attributes;
  MetricReport metrics;
};

/// Curves averaged over sequences, overall and per attribute tag.
struct SuiteReport {
  MetricReport overall;
  std::map<std::string, MetricReport> per_attribute;
  std::map<std::string, int> attribute_counts;
  std::vector<SequenceResult> sequences;
};

/// Unweighted mean of per-sequence curves. Empty input is rejected.
MetricReport mean_report(const std::vector<const MetricReport*>& reports);
SuiteReport summarize(std::vector<SequenceResult> results);

/// kind,threshold,value rows; one row per threshold of each curve.
void write_metrics_csv(const std::filesystem::path& path, const MetricReport& r);
/// Precision and success plots side by side.
void write_metrics_svg(const std::filesystem::path& path, const MetricReport& r, const std::string& title);
std::string summary_json(const SuiteReport& s);

}  // namespace dsa
