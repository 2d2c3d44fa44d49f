#include "dsatrack/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "dsatrack/kernels.hpp"

namespace dsa {

namespace {

constexpr int kConfigFormat = 1;
constexpr std::size_t kConfigHeader = 11;

int permille_for(const ModelConfig& c, int index) {
  for (std::size_t i = 0; i < c.dsa_layers.size(); ++i)
    if (c.dsa_layers[i] == index) return c.retention_permille[i];
  return 0;
}

bool is_dsa(const ModelConfig& c, int index) {
  return std::find(c.dsa_layers.begin(), c.dsa_layers.end(), index) != c.dsa_layers.end();
}

std::string layer_prefix(int index) { return "layer" + std::to_string(index) + "."; }

}  // namespace

ModelConfig ModelConfig::reference() { return {}; }

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.template_size = 64;
  c.search_size = 128;
  return c;
}

ModelConfig ModelConfig::standard_baseline(ModelConfig base) {
  base.dsa_layers.clear();
  base.retention_permille.clear();
  return base;
}

void ModelConfig::validate() const {
  if (d_model <= 0 || heads <= 0 || d_model % heads != 0) throw ValidationError("config: d_model must be a positive multiple of heads");
  if (layers <= 0) throw ValidationError("config: layers must be positive");
  if (patch <= 0 || template_size % patch != 0 || search_size % patch != 0 || template_size <= 0 || search_size <= 0) {
    throw ValidationError("config: crop sizes must be positive multiples of the patch size");
  }
  if (dsa_layers.size() != retention_permille.size()) {
    throw ValidationError("config: one retention ratio is needed per DSA layer");
  }
  for (std::size_t i = 0; i < dsa_layers.size(); ++i) {
    if (dsa_layers[i] < 1 || dsa_layers[i] > layers) throw ValidationError("config: DSA layer index out of range");
    if (retention_permille[i] < 0 || retention_permille[i] > 1000) throw ValidationError("config: retention outside [0, 1]");
  }
  if (bank_size < 1) throw ValidationError("config: bank_size must be at least 1");
  if (!(tau > 0.0)) throw ValidationError("config: tau must be positive");
}

std::int64_t retained_count(std::int64_t n_original, int permille) { return n_original * permille / 1000; }

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  RngStream rng(seed);
  Model m;
  m.config = config;
  const std::int64_t d = config.d_model, pp = config.patch * config.patch * 3;
  m.patch_w = rng.normal_tensor({pp, d}, 0.02);
  m.patch_b = Tensor({d});
  m.pos_z = rng.normal_tensor({config.tokens_per_template(), d}, 0.02);
  m.pos_x = rng.normal_tensor({config.search_tokens(), d}, 0.02);
  for (int i = 1; i <= config.layers; ++i) {
    const BlockKind kind = is_dsa(config, i) ? BlockKind::Dsa : BlockKind::Standard;
    m.layers.push_back({i, kind, permille_for(config, i), BlockParams::init(config.dims(), kind, rng)});
  }
  m.final_norm = LayerNormParams::init(d);
  m.head = HeadParams::init(d, rng);
  return m;
}

void Model::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("embed.w", patch_w);
  fn("embed.b", patch_b);
  fn("pos.z", pos_z);
  fn("pos.x", pos_x);
  for (auto& l : layers) l.params.visit(layer_prefix(l.index), fn);
  fn("norm.gamma", final_norm.gamma);
  fn("norm.beta", final_norm.beta);
  head.visit("head.", fn);
}

Float32Weights float32_weights(const Model& m) {
  Float32Weights out;
  m.visit([&](const std::string&, const Tensor& t) {
    if (t.rank() == 2) out.add(t);
  });
  return out;
}

void Model::visit(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<Model*>(this)->visit([&](const std::string& n, Tensor& t) { fn(n, t); });
}

std::vector<int> Model::layer_indices() const {
  std::vector<int> out;
  for (const auto& l : layers) out.push_back(l.index);
  return out;
}

std::vector<int> Model::dsa_indices() const {
  std::vector<int> out;
  for (const auto& l : layers)
    if (l.kind == BlockKind::Dsa) out.push_back(l.index);
  return out;
}

const Layer& Model::layer(int index) const {
  for (const auto& l : layers)
    if (l.index == index) return l;
  throw ValidationError("model has no layer " + std::to_string(index));
}

std::uint64_t Model::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  visit([&](const std::string&, const Tensor& t) { h = hash_tensor(t, h); });
  return h;
}

std::unordered_set<const Tensor*> trainable_set(const Model& m, const std::vector<int>& layer_indices) {
  std::unordered_set<const Tensor*> out;
  auto& mm = const_cast<Model&>(m);
  mm.head.visit("", [&](const std::string&, Tensor& t) { out.insert(&t); });
  for (auto& l : mm.layers) {
    if (std::find(layer_indices.begin(), layer_indices.end(), l.index) == layer_indices.end()) continue;
    l.params.visit("", [&](const std::string&, Tensor& t) { out.insert(&t); });
  }
  return out;
}

Tensor patchify(const Tensor& image, std::int64_t patch) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("patchify: expected [H, W, 3], got " + shape_str(image.shape()));
  const std::int64_t h = image.dim(0), w = image.dim(1);
  if (h % patch != 0 || w % patch != 0) throw ShapeError("patchify: image not divisible into patches");
  const std::int64_t gh = h / patch, gw = w / patch, row = patch * patch * 3;
  Tensor out({gh * gw, row});
  for (std::int64_t py = 0; py < gh; ++py)
    for (std::int64_t px = 0; px < gw; ++px) {
      double* dst = out.ptr() + (py * gw + px) * row;
      for (std::int64_t y = 0; y < patch; ++y)
        std::copy_n(image.ptr() + ((py * patch + y) * w + px * patch) * 3, patch * 3, dst + y * patch * 3);
    }
  return out;
}

TokenSet embed_tokens(const Model& m, const std::vector<Tensor>& templates, const Tensor& search, ParamBinder& b) {
  if (templates.empty()) throw ValidationError("embed_tokens: at least one template crop is required");
  Tape& tape = b.tape();
  const auto& c = m.config;
  auto embed = [&](const Tensor& img, std::int64_t size, const Tensor& pos) {
    if (img.rank() != 3 || img.dim(0) != size || img.dim(1) != size) {
      throw ShapeError("embed_tokens: crop " + shape_str(img.shape()) + " does not match " + std::to_string(size) + "px");
    }
    return add(linear(tape.constant(patchify(img, c.patch)), b(m.patch_w), b(m.patch_b)), b(pos));
  };
  std::vector<Var> zs;
  for (const auto& t : templates) zs.push_back(embed(t, c.template_size, m.pos_z));
  Var z = zs.size() == 1 ? zs[0] : concat(zs, 0);
  return make_token_set(z, embed(search, c.search_size, m.pos_x));
}

TokenSet backbone_forward(const Model& m, TokenSet tokens, const ForwardOptions& opt, ParamBinder& b,
                          std::vector<HiddenState>* hidden, std::vector<std::int64_t>* retained) {
  BlockOptions bo;
  bo.mode = opt.mode;
  bo.rng = opt.rng;
  bo.tau = m.config.tau;
  bo.degree = m.config.degree;
  auto record = [&] {
    if (hidden) hidden->push_back({tokens.z.value(), tokens.x.value(), tokens.alive});
  };
  for (const auto& l : m.layers) {
    record();
    bo.keep = -1;
    if (l.kind == BlockKind::Dsa && l.retention_permille > 0) {
      bo.keep = std::max<std::int64_t>(1, retained_count(tokens.n_z_original, l.retention_permille));
    }
    tokens = block_forward(tokens, l.params, l.kind, bo, b);
    if (bo.keep >= 0 && retained) retained->push_back(tokens.z.dim(0));
  }
  record();
  return tokens;
}

ForwardResult model_forward(const Model& m, const std::vector<Tensor>& templates, const Tensor& search,
                            const ForwardOptions& opt, ParamBinder& b) {
  ForwardResult r;
  r.tokens = backbone_forward(m, embed_tokens(m, templates, search, b), opt, b,
                              opt.record_hidden ? &r.hidden : nullptr, &r.retained);
  Var x = layer_norm(r.tokens.x, b(m.final_norm.gamma), b(m.final_norm.beta));
  r.head = head_forward(m.head, x, m.config.search_grid(), m.config.search_grid(), b);
  return r;
}

std::vector<NamedTensor> model_tensors(const Model& m) {
  const auto& c = m.config;
  std::vector<double> cfg = {kConfigFormat,
                             static_cast<double>(c.d_model),
                             static_cast<double>(c.heads),
                             static_cast<double>(c.layers),
                             static_cast<double>(c.patch),
                             static_cast<double>(c.template_size),
                             static_cast<double>(c.search_size),
                             static_cast<double>(c.bank_size),
                             std::round(c.tau * 1000.0),
                             c.degree == DegreeMode::SelfLoop ? 0.0 : 1.0,
                             static_cast<double>(m.layers.size())};
  for (const auto& l : m.layers) {
    cfg.push_back(l.index);
    cfg.push_back(l.kind == BlockKind::Dsa ? 1.0 : 0.0);
    cfg.push_back(l.retention_permille);
  }
  std::vector<NamedTensor> out;
  out.push_back({"config", Tensor({static_cast<std::int64_t>(cfg.size())}, cfg)});
  m.visit([&](const std::string& n, const Tensor& t) { out.push_back({n, t}); });
  return out;
}

Model model_from_tensors(const std::vector<NamedTensor>& tensors) {
  if (tensors.empty() || tensors[0].name != "config") throw ValidationError("weights: missing leading config tensor");
  const Tensor& cfg = tensors[0].value;
  if (cfg.rank() != 1 || cfg.size() < kConfigHeader) throw ValidationError("weights: config tensor too short");
  auto geti = [&](std::size_t i) {
    const double v = cfg[i];
    if (v != std::round(v)) throw ValidationError("weights: non-integer config entry");
    return static_cast<std::int64_t>(v);
  };
  if (geti(0) != kConfigFormat) throw ValidationError("weights: unknown config format");
  ModelConfig c;
  c.d_model = geti(1);
  c.heads = geti(2);
  c.layers = geti(3);
  c.patch = geti(4);
  c.template_size = geti(5);
  c.search_size = geti(6);
  c.bank_size = geti(7);
  c.tau = static_cast<double>(geti(8)) / 1000.0;
  c.degree = geti(9) == 0 ? DegreeMode::SelfLoop : DegreeMode::Literal;
  const auto n = static_cast<std::size_t>(geti(10));
  if (cfg.size() != kConfigHeader + 3 * n) throw ValidationError("weights: config layer table has the wrong length");
  c.dsa_layers.clear();
  c.retention_permille.clear();
  struct Entry {
    int index;
    BlockKind kind;
    int permille;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < n; ++i) {
    const Entry e{static_cast<int>(geti(kConfigHeader + 3 * i)), geti(kConfigHeader + 3 * i + 1) ? BlockKind::Dsa : BlockKind::Standard,
                  static_cast<int>(geti(kConfigHeader + 3 * i + 2))};
    if (!entries.empty() && e.index <= entries.back().index) throw ValidationError("weights: layer indices must increase");
    if (e.kind == BlockKind::Dsa) {
      c.dsa_layers.push_back(e.index);
      c.retention_permille.push_back(e.permille);
    }
    entries.push_back(e);
  }
  c.validate();

  Model m = Model::init(c, 0);
  std::vector<Layer> layers;
  for (const auto& e : entries) {
    Layer l = m.layer(e.index);
    l.retention_permille = e.permille;
    layers.push_back(std::move(l));
  }
  m.layers = std::move(layers);

  std::map<std::string, const Tensor*> by_name;
  for (std::size_t i = 1; i < tensors.size(); ++i) {
    if (!by_name.emplace(tensors[i].name, &tensors[i].value).second) {
      throw ValidationError("weights: duplicate tensor " + tensors[i].name);
    }
  }
  std::size_t used = 0;
  m.visit([&](const std::string& name, Tensor& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ValidationError("weights: missing tensor " + name);
    if (it->second->shape() != t.shape()) {
      throw ValidationError("weights: tensor " + name + " has shape " + shape_str(it->second->shape()) + ", expected " +
                            shape_str(t.shape()));
    }
    t = *it->second;
    ++used;
  });
  if (used != by_name.size()) throw ValidationError("weights: file holds tensors the architecture does not use");
  return m;
}

void save_model(const std::filesystem::path& path, const Model& m) { write_weights(path, model_tensors(m)); }

Model load_model(const std::filesystem::path& path) { return model_from_tensors(read_weights(path)); }

FlopReport count_flops(const Model& m, std::int64_t templates) {
  const auto& c = m.config;
  const std::int64_t d = c.d_model, l = c.heads, nx = c.search_tokens();
  const std::int64_t n_orig = templates * c.tokens_per_template();
  std::int64_t nz = n_orig;
  FlopReport r;
  r.embed = 2 * (nz + nx) * c.patch * c.patch * 3 * d;
  auto mlp = [&](std::int64_t rows) { return 2 * rows * (l * 2 * l + 2 * l * 2); };
  auto ffn_and_out = [&](std::int64_t n) { return 2 * n * d * d + 2 * n * d * 4 * d * 2; };
  for (const auto& layer : m.layers) {
    std::int64_t f = 2 * (nz + nx) * d * 3 * d;
    if (layer.kind == BlockKind::Standard) {
      const std::int64_t n = nz + nx;
      f += 2 * 2 * n * n * d + ffn_and_out(n);
    } else {
      std::int64_t keep = nz;
      if (layer.retention_permille > 0) {
        keep = std::min(nz, std::max<std::int64_t>(1, retained_count(n_orig, layer.retention_permille)));
      }
      f += 2 * nx * nz * d;                     // correlation
      f += nz * nz * l + mlp(nz * nz);          // node similarity, edge logits
      f += 2 * nx * nz * nz * l + 2 * nx * nz * l * l;  // diffusion, head mixing
      f += mlp(nz);                             // importance
      f += 2 * 2 * keep * keep * d + 2 * 2 * nx * nx * d + 2 * nx * keep * d;
      f += ffn_and_out(keep + nx);
      nz = keep;
    }
    r.layers.push_back({layer.index, layer.kind, f});
  }
  const std::int64_t g = c.search_grid();
  for (const auto& branch : m.head.branches)
    for (const auto& conv : branch) r.head += 2 * g * g * conv.w.dim(0) * conv.w.dim(1);
  r.total = r.embed + r.head;
  for (const auto& lf : r.layers) r.total += lf.flops;
  return r;
}

}  // namespace dsa
