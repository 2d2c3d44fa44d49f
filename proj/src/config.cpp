#include "dsatrack/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dsa {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, sep)) {
    part = trim(part);
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ValidationError("config: bad value '" + v + "' for " + key);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ValidationError("config: bad boolean '" + v + "' for " + key);
}

}  // namespace

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  for (const auto& p : split(text, ',')) out.push_back(parse_number<int>("list", p));
  return out;
}

std::vector<Attribute> parse_attribute_list(const std::string& text) {
  std::vector<Attribute> out;
  for (const auto& p : split(text, ',')) {
    if (p == "none") continue;
    const auto a = parse_attribute(p);
    if (!a) throw ValidationError("unknown attribute '" + p + "'");
    out.push_back(*a);
  }
  return out;
}

void apply_setting(RunConfig& c, const std::string& key, const std::string& v) {
  auto i64 = [&] { return parse_number<std::int64_t>(key, v); };
  auto i32 = [&] { return parse_number<int>(key, v); };
  auto f64 = [&] { return parse_number<double>(key, v); };
  ModelConfig& m = c.model;
  if (key == "preset") {
    if (v == "toy") m = ModelConfig::toy();
    else if (v == "reference") m = ModelConfig::reference();
    else throw ValidationError("config: preset must be toy or reference");
    c.preset = v;
  } else if (key == "d_model") m.d_model = i64();
  else if (key == "heads") m.heads = i64();
  else if (key == "layers") m.layers = i64();
  else if (key == "dsa_layers") m.dsa_layers = v == "none" ? std::vector<int>{} : parse_int_list(v);
  else if (key == "retention") {
    // ratios, e.g. 0.9,0.8,0.7
    m.retention_permille.clear();
    for (const auto& p : split(v, ',')) {
      const double r = parse_number<double>(key, p);
      if (!(r > 0.0 && r <= 1.0)) throw ValidationError("config: retention ratios must lie in (0, 1]");
      m.retention_permille.push_back(static_cast<int>(std::lround(r * 1000.0)));
    }
  } else if (key == "patch") m.patch = i64();
  else if (key == "template_size") m.template_size = i64();
  else if (key == "search_size") m.search_size = i64();
  else if (key == "bank_size") m.bank_size = i64();
  else if (key == "tau") m.tau = f64();
  else if (key == "degree") {
    if (v == "self-loop") m.degree = DegreeMode::SelfLoop;
    else if (v == "literal") m.degree = DegreeMode::Literal;
    else throw ValidationError("config: degree must be self-loop or literal");
  } else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "jobs") c.jobs = i32();
  else if (key == "out") c.out = v;
  else if (key == "data") c.data = v;
  else if (key == "train.steps") c.train.steps = i32();
  else if (key == "train.lr") c.train.lr = f64();
  else if (key == "train.clip") c.train.clip_norm = f64();
  else if (key == "train.layers") c.train_layers = v;
  else if (key == "train.sequences") c.train_sequences = i32();
  else if (key == "train.length") c.train_length = i32();
  else if (key == "train.max_shift") c.train.sampling.max_shift = f64();
  else if (key == "train.scale_jitter") c.train.sampling.scale_jitter = f64();
  else if (key == "synth.attributes") c.synth.attributes = parse_attribute_list(v);
  else if (key == "synth.length") c.synth.length = i32();
  else if (key == "synth.count") c.synth_count = i32();
  else if (key == "synth.frame_size") c.synth.frame_size = i32();
  else if (key == "synth.target_size") c.synth.target_size = f64();
  else if (key == "synth.speed") c.synth.speed = f64();
  else if (key == "synth.camera_sigma") c.synth.camera_sigma = f64();
  else if (key == "tracker.quality_gate") c.tracker.quality_gate = parse_bool(key, v);
  else if (key == "tracker.threshold") c.tracker.quality_threshold = f64();
  else if (key == "tracker.single_precision") c.tracker.single_precision = parse_bool(key, v);
  else if (key == "tracker.search_factor") c.tracker.search_factor = f64();
  else throw ValidationError("config: unknown key '" + key + "'");
}

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::stringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError(origin + ":" + std::to_string(n) + ": expected key = value");
    kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  for (const auto& [k, v] : kv)
    if (k == "preset") apply_setting(cfg, k, v);
  for (const auto& [k, v] : kv)
    if (k != "preset") apply_setting(cfg, k, v);
  cfg.model.validate();
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str(), path.string());
}

std::vector<int> resolve_train_layers(const RunConfig& cfg, const Model& m) {
  if (cfg.train_layers == "dsa") return m.dsa_indices();
  if (cfg.train_layers == "all") return m.layer_indices();
  return parse_int_list(cfg.train_layers);
}

}  // namespace dsa
