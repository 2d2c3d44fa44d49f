#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dsatrack/model.hpp"
#include "dsatrack/synthetic.hpp"
#include "dsatrack/tracker.hpp"
#include "dsatrack/train.hpp"

namespace dsa {

/// Everything a CLI run can be told. Defaults are the desk-scale setup.
struct RunConfig {
  std::string preset = "toy";
  ModelConfig model = ModelConfig::toy();
  std::uint64_t seed = 1;
  int jobs = 1;
  std::filesystem::path out = "out";
  std::filesystem::path data;  ///< sequence root; DSATRACK_DATA when unset

  TrainOptions train;
  std::string train_layers = "dsa";  ///< "dsa", "all" or a comma list
  int train_sequences = 8;
  int train_length = 60;

  SequenceSpec synth;
  int synth_count = 1;

  TrackerOptions tracker;
};

/// Applies one key. Unknown keys and unparsable values throw ValidationError.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

/// "key = value" lines; '#' starts a comment. "preset" is applied first so the
/// remaining keys land on top of it regardless of their order.
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config");
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// Resolved trainable layer list for `m`.
std::vector<int> resolve_train_layers(const RunConfig& cfg, const Model& m);

std::vector<Attribute> parse_attribute_list(const std::string& text);
std::vector<int> parse_int_list(const std::string& text);

}  // namespace dsa
