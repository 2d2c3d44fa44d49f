#pragma once

#include <functional>
#include <vector>

#include "dsatrack/model.hpp"
#include "dsatrack/synthetic.hpp"

namespace dsa {

struct SampleOptions {
  int max_bank = 3;           ///< templates per sample drawn from 1..max_bank
  double max_shift = 0.2;     ///< search-center jitter, fraction of the search side
  double scale_jitter = 0.4;  ///< search side scaled by up to (1 +/- this)
  double template_factor = 2.0;
  double search_factor = 4.0;
};

/// (templates, search crop, target box in search coordinates)
struct TrainSample {
  std::vector<Tensor> templates;
  Tensor search;
  BBox target;
};

/// Fixed template from one frame, optional extra patches from others, search
/// region from a random frame with a jittered center.
TrainSample sample_pair(const SequenceRecord& seq, const ModelConfig& config, RngStream& rng,
                        const SampleOptions& opt = {});

struct TrainOptions {
  int steps = 2000;
  double lr = 0.01;
  double clip_norm = 5.0;             ///< global gradient-norm clip; 0 disables
  std::uint64_t seed = 1;
  std::vector<int> trainable_layers;  ///< empty: the model's DSA layers
  LossWeights weights;
  SampleOptions sampling;
  std::function<void(int step, const TrackingLoss& loss, double grad_norm)> on_step;
};

struct TrainReport {
  std::vector<double> losses;  ///< total loss per step
  std::size_t parameters = 0;  ///< trainable scalar count
};

/// Plain gradient descent on the head plus the trainable layers. A non-finite
/// loss or gradient aborts with a NumericalError naming the step.
TrainReport toy_train(Model& model, const std::vector<SequenceRecord>& sequences, const TrainOptions& opt);

/// Means of consecutive non-overlapping windows of `window` steps.
std::vector<double> window_means(const std::vector<double>& losses, int window);

}  // namespace dsa
