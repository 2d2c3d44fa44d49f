#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <unordered_set>
#include <vector>

#include "dsatrack/attention.hpp"
#include "dsatrack/head.hpp"
#include "dsatrack/weights_io.hpp"

namespace dsa {

struct ModelConfig {
  std::int64_t d_model = 192;
  std::int64_t heads = 3;
  std::int64_t layers = 12;
  std::vector<int> dsa_layers = {4, 7, 10};             ///< 1-based
  std::vector<int> retention_permille = {900, 800, 700};  ///< one per DSA layer
  std::int64_t patch = 16;
  std::int64_t template_size = 128;
  std::int64_t search_size = 256;
  std::int64_t bank_size = 3;
  double tau = 1.0;
  DegreeMode degree = DegreeMode::SelfLoop;

  /// Defaults of the reference setup (128 / 256 px crops).
  static ModelConfig reference();
  /// Desk-scale crops (64 / 128 px) with the same widths and layer layout.
  static ModelConfig toy();
  /// Same as `base` but every layer is a standard block.
  static ModelConfig standard_baseline(ModelConfig base);

  ModelDims dims() const { return {d_model, heads}; }
  std::int64_t template_grid() const { return template_size / patch; }
  std::int64_t search_grid() const { return search_size / patch; }
  std::int64_t tokens_per_template() const { return template_grid() * template_grid(); }
  std::int64_t search_tokens() const { return search_grid() * search_grid(); }
  void validate() const;
};

/// floor(n_original * permille / 1000) in integer arithmetic.
std::int64_t retained_count(std::int64_t n_original, int permille);

struct Layer {
  int index = 0;  ///< position in the unpruned backbone, 1-based
  BlockKind kind = BlockKind::Standard;
  int retention_permille = 0;  ///< 0 = no elimination
  BlockParams params;
};

struct Model {
  ModelConfig config;
  Tensor patch_w, patch_b;  ///< [patch^2 * 3, d]
  Tensor pos_z, pos_x;      ///< per-crop template and search positional embeddings
  std::vector<Layer> layers;
  LayerNormParams final_norm;
  HeadParams head;

  static Model init(const ModelConfig& config, std::uint64_t seed);

  void visit(const std::function<void(const std::string&, Tensor&)>& fn);
  void visit(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  std::vector<int> layer_indices() const;
  std::vector<int> dsa_indices() const;
  const Layer& layer(int index) const;
  std::uint64_t hash() const;
};

/// Head plus every parameter of the listed layers.
std::unordered_set<const Tensor*> trainable_set(const Model& m, const std::vector<int>& layer_indices);

/// [H, W, 3] -> [(H/p) * (W/p), p * p * 3], patches in row-major order.
Tensor patchify(const Tensor& image, std::int64_t patch);

struct HiddenState {
  Tensor z, x;
  std::vector<std::int64_t> alive;
};

struct ForwardOptions {
  RunMode mode = RunMode::Infer;
  RngStream* rng = nullptr;       ///< Train mode only
  bool record_hidden = false;
};

struct ForwardResult {
  HeadVars head;
  TokenSet tokens;
  std::vector<HiddenState> hidden;       ///< input to each layer, then the final output
  std::vector<std::int64_t> retained;    ///< template count after each eliminating layer
};

TokenSet embed_tokens(const Model& m, const std::vector<Tensor>& templates, const Tensor& search, ParamBinder& b);

/// Runs the layer list in order, eliminating template tokens where scheduled.
TokenSet backbone_forward(const Model& m, TokenSet tokens, const ForwardOptions& opt, ParamBinder& b,
                          std::vector<HiddenState>* hidden = nullptr, std::vector<std::int64_t>* retained = nullptr);

ForwardResult model_forward(const Model& m, const std::vector<Tensor>& templates, const Tensor& search,
                            const ForwardOptions& opt, ParamBinder& b);

/// Binary32 mirrors of every weight matrix; pins the model, which must stay put.
Float32Weights float32_weights(const Model& m);

/// DSAW round trip; the architecture goes in a leading "config" tensor.
std::vector<NamedTensor> model_tensors(const Model& m);
Model model_from_tensors(const std::vector<NamedTensor>& tensors);
void save_model(const std::filesystem::path& path, const Model& m);
Model load_model(const std::filesystem::path& path);

struct LayerFlops {
  int index = 0;
  BlockKind kind = BlockKind::Standard;
  std::int64_t flops = 0;
};

struct FlopReport {
  std::int64_t embed = 0, head = 0, total = 0;
  std::vector<LayerFlops> layers;
};

/// Analytic multiply-add count (x2) of one inference forward with
/// `templates` crops in the bank.
FlopReport count_flops(const Model& m, std::int64_t templates);

}  // namespace dsa
