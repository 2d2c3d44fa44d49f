#include "dsatrack/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <set>

namespace dsa {

namespace {

std::int64_t budget(double p, std::size_t group_size, const char* which) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError(std::string("pruning ratio ") + which + " outside [0, 1]");
  return static_cast<std::int64_t>(std::ceil(p * static_cast<double>(group_size) - 1e-9));
}

bool exempt_layer(int index, const std::vector<int>& exempt) {
  return std::find(exempt.begin(), exempt.end(), index) != exempt.end();
}

void finish(PruneSpec& s) {
  std::sort(s.removed_d.begin(), s.removed_d.end());
  std::sort(s.removed_s.begin(), s.removed_s.end());
  std::set<int> gone(s.removed_d.begin(), s.removed_d.end());
  gone.insert(s.removed_s.begin(), s.removed_s.end());
  std::set<int> all(s.group_d.begin(), s.group_d.end());
  all.insert(s.group_s.begin(), s.group_s.end());
  s.retained.clear();
  for (int i : all)
    if (!gone.count(i)) s.retained.push_back(i);
}

std::vector<int> candidates_of(const std::vector<int>& group, const std::vector<int>& exempt, std::int64_t need,
                               const char* which) {
  std::vector<int> c;
  for (int i : group)
    if (!exempt_layer(i, exempt)) c.push_back(i);
  if (need > static_cast<std::int64_t>(c.size())) {
    throw ValidationError(std::string("pruning budget for group ") + which + " (" + std::to_string(need) +
                          ") exceeds its " + std::to_string(c.size()) + " prunable layers");
  }
  return c;
}

double cosine(const double* a, const double* b, std::size_t n) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (!(aa > 0.0) || !(bb > 0.0)) throw NumericalError("layer_contribution: zero-norm hidden state");
  return ab / std::sqrt(aa * bb);
}

// [z rows alive in both states; all x rows], flattened
std::pair<Tensor, Tensor> aligned_pair(const HiddenState& a, const HiddenState& b) {
  const std::int64_t d = a.x.dim(1);
  std::vector<std::pair<std::int64_t, std::int64_t>> rows;
  std::size_t j = 0;
  for (std::size_t i = 0; i < a.alive.size(); ++i) {
    while (j < b.alive.size() && b.alive[j] < a.alive[i]) ++j;
    if (j < b.alive.size() && b.alive[j] == a.alive[i]) rows.emplace_back(static_cast<std::int64_t>(i), static_cast<std::int64_t>(j));
  }
  const auto nz = static_cast<std::int64_t>(rows.size()), nx = a.x.dim(0);
  Tensor ta({(nz + nx) * d}), tb({(nz + nx) * d});
  for (std::int64_t r = 0; r < nz; ++r) {
    std::copy_n(a.z.ptr() + rows[r].first * d, d, ta.ptr() + r * d);
    std::copy_n(b.z.ptr() + rows[r].second * d, d, tb.ptr() + r * d);
  }
  std::copy_n(a.x.ptr(), nx * d, ta.ptr() + nz * d);
  std::copy_n(b.x.ptr(), nx * d, tb.ptr() + nz * d);
  return {std::move(ta), std::move(tb)};
}

}  // namespace

std::vector<int> PruneSpec::removed() const {
  std::vector<int> out = removed_d;
  out.insert(out.end(), removed_s.begin(), removed_s.end());
  std::sort(out.begin(), out.end());
  return out;
}

double layer_contribution(const std::vector<Tensor>& states, const std::vector<Tensor>& next) {
  if (states.empty() || states.size() != next.size()) {
    throw ValidationError("layer_contribution: need equally many states on both sides, at least one");
  }
  double total = 0.0;
  for (std::size_t m = 0; m < states.size(); ++m) {
    if (states[m].size() != next[m].size()) throw ShapeError("layer_contribution: paired states differ in size");
    total += cosine(states[m].ptr(), next[m].ptr(), states[m].size());
  }
  return 1.0 - total / static_cast<double>(states.size());
}

PruneSpec rank_and_prune(const std::vector<LayerProfile>& profiles, double p_d, double p_s, const std::vector<int>& exempt) {
  PruneSpec s;
  s.method = "crp";
  s.p_d = p_d;
  s.p_s = p_s;
  for (const auto& p : profiles) {
    (p.group == LayerGroup::D ? s.group_d : s.group_s).push_back(p.index);
    s.contributions[p.index] = p.delta;
  }
  std::sort(s.group_d.begin(), s.group_d.end());
  std::sort(s.group_s.begin(), s.group_s.end());
  auto prune = [&](const std::vector<int>& group, double p, const char* which, std::vector<int>& removed) {
    const std::int64_t need = budget(p, group.size(), which);
    std::vector<int> c = candidates_of(group, exempt, need, which);
    std::sort(c.begin(), c.end(), [&](int a, int b) {
      const double da = s.contributions.at(a), db = s.contributions.at(b);
      return da != db ? da < db : a > b;
    });
    removed.assign(c.begin(), c.begin() + need);
  };
  prune(s.group_d, p_d, "D", s.removed_d);
  prune(s.group_s, p_s, "S", s.removed_s);
  finish(s);
  return s;
}

PruneSpec sequential_prune(const std::vector<int>& group_d, const std::vector<int>& group_s, double p_d, double p_s,
                           const std::vector<int>& exempt) {
  PruneSpec s;
  s.method = "sp";
  s.p_d = p_d;
  s.p_s = p_s;
  s.group_d = group_d;
  s.group_s = group_s;
  std::sort(s.group_d.begin(), s.group_d.end());
  std::sort(s.group_s.begin(), s.group_s.end());
  auto prune = [&](const std::vector<int>& group, double p, const char* which, std::vector<int>& removed) {
    const std::int64_t need = budget(p, group.size(), which);
    const std::vector<int> c = candidates_of(group, exempt, need, which);
    removed.assign(c.begin(), c.begin() + need);
  };
  prune(s.group_d, p_d, "D", s.removed_d);
  prune(s.group_s, p_s, "S", s.removed_s);
  finish(s);
  return s;
}

Model build_pruned_model(const Model& full, const PruneSpec& spec) {
  const std::vector<int> have = full.layer_indices();
  for (int i : spec.removed()) {
    if (std::find(have.begin(), have.end(), i) == have.end()) {
      throw ValidationError("prune spec removes layer " + std::to_string(i) + ", which the model does not have");
    }
  }
  for (int i : spec.retained) {
    if (std::find(have.begin(), have.end(), i) == have.end()) {
      throw ValidationError("prune spec retains layer " + std::to_string(i) + ", which the model does not have");
    }
  }
  const std::vector<int> gone = spec.removed();
  Model out = full;
  out.layers.clear();
  for (const auto& l : full.layers)
    if (std::find(gone.begin(), gone.end(), l.index) == gone.end()) out.layers.push_back(l);
  out.config.dsa_layers.clear();
  out.config.retention_permille.clear();
  for (const auto& l : out.layers) {
    if (l.kind != BlockKind::Dsa) continue;
    out.config.dsa_layers.push_back(l.index);
    out.config.retention_permille.push_back(l.retention_permille);
  }
  return out;
}

std::vector<LayerProfile> profile_layers(const Model& m, const std::vector<ProfileSample>& samples) {
  if (samples.empty()) throw ValidationError("profile_layers: no samples");
  const std::size_t n_layers = m.layers.size();
  std::vector<std::vector<Tensor>> before(n_layers), after(n_layers);
  for (const auto& s : samples) {
    Tape tape;
    ParamBinder b(tape);
    ForwardOptions opt;
    opt.record_hidden = true;
    const ForwardResult r = model_forward(m, s.templates, s.search, opt, b);
    for (std::size_t k = 0; k < n_layers; ++k) {
      auto [a, c] = aligned_pair(r.hidden[k], r.hidden[k + 1]);
      before[k].push_back(std::move(a));
      after[k].push_back(std::move(c));
    }
  }
  std::vector<LayerProfile> out;
  for (std::size_t k = 0; k < n_layers; ++k) {
    const Layer& l = m.layers[k];
    out.push_back({l.index, layer_contribution(before[k], after[k]), static_cast<std::int64_t>(samples.size()),
                   l.kind == BlockKind::Dsa ? LayerGroup::D : LayerGroup::S});
  }
  return out;
}

std::vector<LayerProfile> profiles_from_table(const std::map<int, double>& table, const std::vector<int>& dsa_layers) {
  std::vector<LayerProfile> out;
  for (const auto& [index, delta] : table) {
    const bool d = std::find(dsa_layers.begin(), dsa_layers.end(), index) != dsa_layers.end();
    out.push_back({index, delta, 1, d ? LayerGroup::D : LayerGroup::S});
  }
  // an exempt layer missing from the table still belongs to its group
  for (int e : kExemptLayers) {
    if (!table.count(e)) {
      const bool d = std::find(dsa_layers.begin(), dsa_layers.end(), e) != dsa_layers.end();
      out.push_back({e, 0.0, 0, d ? LayerGroup::D : LayerGroup::S});
    }
  }
  std::sort(out.begin(), out.end(), [](const LayerProfile& a, const LayerProfile& b) { return a.index < b.index; });
  return out;
}

const std::vector<PruneVariant>& canonical_variants() {
  static const std::vector<PruneVariant> v = {
      {"d8", 2.0 / 3.0, 2.0 / 9.0}, {"d7", 2.0 / 3.0, 3.0 / 9.0}, {"d6", 2.0 / 3.0, 4.0 / 9.0}, {"d4", 2.0 / 3.0, 6.0 / 9.0}};
  return v;
}

const PruneVariant& variant_by_name(const std::string& name) {
  for (const auto& v : canonical_variants())
    if (v.name == name) return v;
  throw ValidationError("unknown pruning variant '" + name + "' (expected d8, d7, d6 or d4)");
}

const std::map<int, double>& reference_contributions() {
  static const std::map<int, double> t = {{2, 0.1325}, {3, 0.0739}, {4, 0.0615},  {5, 0.0581},
                                          {6, 0.0429}, {7, 0.0457}, {8, 0.0438},  {9, 0.0358},
                                          {10, 0.0428}, {11, 0.0657}, {12, 0.1444}};
  return t;
}

std::string prune_spec_json(const PruneSpec& s) {
  nlohmann::json j;
  j["method"] = s.method;
  j["p_d"] = s.p_d;
  j["p_s"] = s.p_s;
  j["group_d"] = s.group_d;
  j["group_s"] = s.group_s;
  j["removed_d"] = s.removed_d;
  j["removed_s"] = s.removed_s;
  j["removed"] = s.removed();
  j["retained"] = s.retained;
  nlohmann::json c = nlohmann::json::object();
  for (const auto& [i, d] : s.contributions) c[std::to_string(i)] = d;
  j["contributions"] = c;
  return j.dump(2) + "\n";
}

std::map<int, double> read_contributions_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("contributions: invalid JSON: ") + e.what());
  }
  if (j.contains("contributions")) j = j["contributions"];
  if (!j.is_object()) throw ValidationError("contributions: expected an object of {layer: delta}");
  std::map<int, double> out;
  for (const auto& [k, v] : j.items()) {
    int index = 0;
    try {
      std::size_t used = 0;
      index = std::stoi(k, &used);
      if (used != k.size()) throw std::invalid_argument(k);
    } catch (const std::exception&) {
      throw ValidationError("contributions: key '" + k + "' is not a layer index");
    }
    if (!v.is_number()) throw ValidationError("contributions: value for layer " + k + " is not a number");
    out[index] = v.get<double>();
  }
  return out;
}

}  // namespace dsa
