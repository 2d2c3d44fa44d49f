#include <gtest/gtest.h>

#include <filesystem>

#include "dsatrack/model.hpp"

using namespace dsa;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 12;
  c.heads = 3;
  c.patch = 4;
  c.template_size = 8;
  c.search_size = 16;
  return c;
}

std::vector<Tensor> crops(RngStream& rng, std::int64_t n, std::int64_t size) {
  std::vector<Tensor> out;
  for (std::int64_t i = 0; i < n; ++i) out.push_back(rng.normal_tensor({size, size, 3}, 1.0));
  return out;
}

}  // namespace

TEST(Retention, FloorArithmetic) {
  EXPECT_EQ(retained_count(192, 900), 172);
  EXPECT_EQ(retained_count(192, 800), 153);
  EXPECT_EQ(retained_count(192, 700), 134);
  EXPECT_EQ(retained_count(10, 999), 9);
}

TEST(Retention, BackboneAppliesSchedule) {
  ModelConfig c = small_config();
  c.template_size = 32;  // 8 x 8 = 64 tokens per crop
  const Model m = Model::init(c, 3);
  RngStream rng(4);
  Tape tape;
  ParamBinder b(tape);
  const ForwardResult r = model_forward(m, crops(rng, 3, 32), rng.normal_tensor({16, 16, 3}, 1.0), {}, b);
  EXPECT_EQ(r.retained, (std::vector<std::int64_t>{172, 153, 134}));
  EXPECT_EQ(r.tokens.z.dim(0), 134);
  EXPECT_TRUE(std::is_sorted(r.tokens.alive.begin(), r.tokens.alive.end()));
  EXPECT_EQ(std::adjacent_find(r.tokens.alive.begin(), r.tokens.alive.end()), r.tokens.alive.end());
  EXPECT_LT(r.tokens.alive.back(), 192);
}

TEST(Backbone, HiddenRecordAndSingleLayer) {
  ModelConfig c = small_config();
  const Model m = Model::init(c, 5);
  RngStream rng(6);
  Tape tape;
  ParamBinder b(tape);
  ForwardOptions opt;
  opt.record_hidden = true;
  const std::vector<Tensor> z = crops(rng, 1, 8);
  const Tensor x = rng.normal_tensor({16, 16, 3}, 1.0);
  const ForwardResult r = model_forward(m, z, x, opt, b);
  EXPECT_EQ(r.hidden.size(), m.layers.size() + 1);
  EXPECT_TRUE(r.hidden.back().x.bitwise_equal(r.tokens.x.value()));

  Model one = m;
  one.layers = {m.layers[3]};
  const TokenSet in = embed_tokens(one, z, x, b);
  const TokenSet via_backbone = backbone_forward(one, in, {}, b);
  BlockOptions bo;
  bo.keep = std::max<std::int64_t>(1, retained_count(in.n_z_original, one.layers[0].retention_permille));
  const TokenSet direct = block_forward(in, one.layers[0].params, BlockKind::Dsa, bo, b);
  EXPECT_TRUE(via_backbone.x.value().bitwise_equal(direct.x.value()));
  EXPECT_TRUE(via_backbone.z.value().bitwise_equal(direct.z.value()));
}

TEST(Backbone, TwelveLayerForwardIsStable) {
  const Model m = Model::init(small_config(), 7);
  auto run = [&] {
    RngStream rng(8);
    Tape tape;
    ParamBinder b(tape);
    const ForwardResult r = model_forward(m, crops(rng, 3, 8), rng.normal_tensor({16, 16, 3}, 1.0), {}, b);
    return hash_tensor(r.head.score_logits.value(), hash_tensor(r.tokens.x.value()));
  };
  const auto first = run();
  for (int i = 0; i < 3; ++i) EXPECT_EQ(run(), first);
}

TEST(Patchify, RowMajorPatches) {
  Tensor img({4, 4, 3});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
  const Tensor p = patchify(img, 2);
  ASSERT_EQ(p.shape(), (Shape{4, 12}));
  // patch (0, 1) starts at pixel (0, 2); its second row starts at pixel (1, 2)
  EXPECT_EQ(p.at({1, 0}), img.at({0, 2, 0}));
  EXPECT_EQ(p.at({1, 6}), img.at({1, 2, 0}));
  EXPECT_EQ(p.at({2, 0}), img.at({2, 0, 0}));
  EXPECT_THROW(patchify(Tensor({5, 4, 3}), 2), ShapeError);
}

TEST(Weights, ModelRoundTrip) {
  const Model m = Model::init(small_config(), 9);
  const auto dir = std::filesystem::temp_directory_path() / "dsatrack_model_rt";
  std::filesystem::create_directories(dir);
  save_model(dir / "a.dsaw", m);
  const Model back = load_model(dir / "a.dsaw");
  save_model(dir / "b.dsaw", back);
  EXPECT_EQ(encode_weights(model_tensors(back)), encode_weights(model_tensors(load_model(dir / "b.dsaw"))));
  EXPECT_EQ(back.layer_indices(), m.layer_indices());
  EXPECT_EQ(back.dsa_indices(), (std::vector<int>{4, 7, 10}));
  EXPECT_EQ(back.config.template_size, 8);
  // values survive at binary32 precision
  EXPECT_LT(max_abs_diff(back.layers[3].params.w_qkv, m.layers[3].params.w_qkv), 1e-7);
  std::filesystem::remove_all(dir);
}

TEST(Weights, RejectsMismatch) {
  const Model m = Model::init(small_config(), 10);
  auto tensors = model_tensors(m);
  auto missing = tensors;
  missing.pop_back();
  EXPECT_THROW(model_from_tensors(missing), ValidationError);
  auto extra = tensors;
  extra.push_back({"bogus", Tensor({1})});
  EXPECT_THROW(model_from_tensors(extra), ValidationError);
  auto noconf = tensors;
  noconf.erase(noconf.begin());
  EXPECT_THROW(model_from_tensors(noconf), ValidationError);
}

TEST(Config, Validation) {
  ModelConfig c = small_config();
  c.retention_permille.pop_back();
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_config();
  c.template_size = 9;
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_NO_THROW(ModelConfig::toy().validate());
  EXPECT_TRUE(ModelConfig::standard_baseline(ModelConfig::toy()).dsa_layers.empty());
}

TEST(Flops, CountsPositiveAndLayerwise) {
  const Model m = Model::init(small_config(), 11);
  const FlopReport r = count_flops(m, 3);
  EXPECT_EQ(r.layers.size(), 12u);
  std::int64_t sum = r.embed + r.head;
  for (const auto& l : r.layers) {
    EXPECT_GT(l.flops, 0);
    sum += l.flops;
  }
  EXPECT_EQ(sum, r.total);
  Model fewer = m;
  fewer.layers.erase(fewer.layers.begin() + 5);
  EXPECT_LT(count_flops(fewer, 3).total, r.total);
}
