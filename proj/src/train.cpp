#include "dsatrack/train.hpp"

#include <cmath>
#include <sstream>

#include "dsatrack/image.hpp"

namespace dsa {

TrainSample sample_pair(const SequenceRecord& seq, const ModelConfig& config, RngStream& rng,
                        const SampleOptions& opt) {
  const auto n = static_cast<std::int64_t>(seq.frames.size());
  if (n < 1 || seq.groundtruth.size() != seq.frames.size()) throw ValidationError("sample_pair: malformed sequence");
  const int tsize = static_cast<int>(config.template_size), ssize = static_cast<int>(config.search_size);
  TrainSample s;
  const std::int64_t banks = rng.uniform_int(1, std::max(1, opt.max_bank));
  const std::int64_t first = rng.uniform_int(0, n - 1);
  s.templates.push_back(crop_normalized(seq.frames[first], crop_window(seq.groundtruth[first], opt.template_factor, tsize)));
  for (std::int64_t k = 1; k < banks; ++k) {
    const std::int64_t f = rng.uniform_int(0, n - 1);
    s.templates.push_back(crop_normalized(seq.frames[f], crop_window(seq.groundtruth[f], opt.template_factor, tsize)));
  }

  const std::int64_t j = rng.uniform_int(0, n - 1);
  const FrameBox& gt = seq.groundtruth[j];
  const double scale = std::exp(rng.uniform(-std::log1p(opt.scale_jitter), std::log1p(opt.scale_jitter)));
  const double side = opt.search_factor * std::sqrt(gt.w * gt.h) * scale;
  const double dx = rng.uniform(-opt.max_shift, opt.max_shift) * side;
  const double dy = rng.uniform(-opt.max_shift, opt.max_shift) * side;
  const CropWindow win{gt.cx() + dx - 0.5 * side, gt.cy() + dy - 0.5 * side, side, ssize};
  s.search = crop_normalized(seq.frames[j], win);
  s.target = to_crop(gt, win);
  return s;
}

TrainReport toy_train(Model& model, const std::vector<SequenceRecord>& sequences, const TrainOptions& opt) {
  if (opt.steps < 0) throw ValidationError("toy_train: negative step count");
  if (!(opt.lr > 0.0)) throw ValidationError("toy_train: learning rate must be positive");
  TrainReport report;
  if (opt.steps == 0) return report;
  if (sequences.empty()) throw ValidationError("toy_train: no training sequences");

  const std::vector<int> layers = opt.trainable_layers.empty() ? model.dsa_indices() : opt.trainable_layers;
  for (int i : layers) model.layer(i);  // throws on a layer the model lacks
  const auto trainable = trainable_set(model, layers);
  std::vector<Tensor*> params;
  model.visit([&](const std::string&, Tensor& t) {
    if (trainable.contains(&t)) params.push_back(&t);
  });
  for (const Tensor* p : params) report.parameters += p->size();

  RngStream rng(opt.seed);
  RngStream sample_rng = rng.fork();
  report.losses.reserve(static_cast<std::size_t>(opt.steps));
  for (int step = 0; step < opt.steps; ++step) {
    const auto& seq = sequences[static_cast<std::size_t>(sample_rng.uniform_int(0, static_cast<std::int64_t>(sequences.size()) - 1))];
    const TrainSample s = sample_pair(seq, model.config, sample_rng, opt.sampling);

    Tape tape;
    ParamBinder binder(tape, &trainable);
    ForwardOptions fo;
    fo.mode = RunMode::Train;
    fo.rng = &rng;
    TrackingLoss loss;
    std::vector<Tensor> grads;
    double norm2 = 0.0;
    try {
      const ForwardResult r = model_forward(model, s.templates, s.search, fo, binder);
      loss = tracking_loss(r.head, s.target, opt.weights);
      tape.backward(loss.total);
      grads.reserve(params.size());
      for (Tensor* p : params) {
        auto it = binder.bound().find(p);
        grads.push_back(it == binder.bound().end() ? Tensor(p->shape()) : tape.grad(it->second));
        for (double g : grads.back().data()) norm2 += g * g;
      }
    } catch (const NumericalError& e) {
      std::ostringstream msg;
      msg << "training diverged at step " << step << " (" << e.what() << ")";
      if (!report.losses.empty()) msg << "; previous loss " << report.losses.back();
      throw NumericalError(msg.str());
    }
    const double total = loss.total.value().item();
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(total) || !std::isfinite(norm)) {
      std::ostringstream msg;
      msg << "training diverged at step " << step << ": loss " << total << " (focal " << loss.focal << ", l1 "
          << loss.l1 << ", giou " << loss.giou << "), gradient norm " << norm;
      throw NumericalError(msg.str());
    }
    const double factor = (opt.clip_norm > 0.0 && norm > opt.clip_norm) ? opt.clip_norm / norm : 1.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = grads[i];
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= opt.lr * factor * g[k];
    }
    report.losses.push_back(total);
    if (opt.on_step) opt.on_step(step, loss, norm);
  }
  return report;
}

std::vector<double> window_means(const std::vector<double>& losses, int window) {
  if (window < 1) throw ValidationError("window_means: window must be >= 1");
  std::vector<double> out;
  for (std::size_t i = 0; i + window <= losses.size(); i += window) {
    double acc = 0.0;
    for (int k = 0; k < window; ++k) acc += losses[i + k];
    out.push_back(acc / window);
  }
  return out;
}

}  // namespace dsa
