#pragma once

#include <map>
#include <string>
#include <vector>

#include "dsatrack/model.hpp"

namespace dsa {

enum class LayerGroup { D, S };

struct LayerProfile {
  int index = 0;
  double delta = 0.0;
  std::int64_t samples = 0;
  LayerGroup group = LayerGroup::S;
};

/// 1 - mean cosine between paired states, each flattened. Throws on a
/// zero-norm state or mismatched lists.
double layer_contribution(const std::vector<Tensor>& states, const std::vector<Tensor>& next);

struct PruneSpec {
  std::string method;  ///< "crp" or "sp"
  double p_d = 0.0, p_s = 0.0;
  std::vector<int> group_d, group_s;
  std::vector<int> removed_d, removed_s;
  std::vector<int> retained;
  std::map<int, double> contributions;

  std::vector<int> removed() const;
};

/// Layers never offered as pruning candidates.
inline const std::vector<int> kExemptLayers = {1};

/// Removes ceil(p * |group|) layers per group, lowest contribution first; on
/// equal contribution the higher index goes first.
PruneSpec rank_and_prune(const std::vector<LayerProfile>& profiles, double p_d, double p_s,
                         const std::vector<int>& exempt = kExemptLayers);

/// Same budgets, removed in ascending index order regardless of contribution.
PruneSpec sequential_prune(const std::vector<int>& group_d, const std::vector<int>& group_s, double p_d, double p_s,
                           const std::vector<int>& exempt = kExemptLayers);

/// Keeps the retained layers with their weights; throws if the spec names a
/// layer the model does not have.
Model build_pruned_model(const Model& full, const PruneSpec& spec);

struct ProfileSample {
  std::vector<Tensor> templates;
  Tensor search;
};

/// Contribution of every layer from hidden states recorded over `samples`.
/// Template rows are matched through the alive indices so that states on
/// either side of an eliminating layer compare the same tokens.
std::vector<LayerProfile> profile_layers(const Model& m, const std::vector<ProfileSample>& samples);

/// Profiles for the canonical 12-layer layout from a {layer: delta} table.
std::vector<LayerProfile> profiles_from_table(const std::map<int, double>& table, const std::vector<int>& dsa_layers);

struct PruneVariant {
  std::string name;
  double p_d, p_s;
};
const std::vector<PruneVariant>& canonical_variants();
const PruneVariant& variant_by_name(const std::string& name);

/// Contribution values reported for the reference 12-layer model, layers 2-12.
const std::map<int, double>& reference_contributions();

std::string prune_spec_json(const PruneSpec& spec);
std::map<int, double> read_contributions_json(const std::string& text);

}  // namespace dsa
