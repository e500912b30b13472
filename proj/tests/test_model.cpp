#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "trfeddis/model.hpp"

using namespace trfeddis;
using model::Head;
using model::PartitionTag;

namespace {

model::ModelConfig small_conv() { return model::ModelConfig::conv_default({3, 12, 12}, 5); }

model::Model make(const model::ModelConfig& c, std::uint64_t seed = 3) {
  specfun::RngStream rng(seed, specfun::stream_key(specfun::StreamPurpose::kInit, 0));
  return model::init_model(c, rng);
}

nd::Tensor input_batch(std::size_t b, const nd::Shape& sample, std::uint64_t owner) {
  auto rng = testutil::test_rng(owner);
  nd::Shape s{b};
  s.insert(s.end(), sample.begin(), sample.end());
  return testutil::normal_tensor(rng, s).cast<float>();
}

}  // namespace

TEST(ModelConfig, DefaultShapes) {
  const auto c = small_conv();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.feature_dim(), 64u);
  EXPECT_EQ(c.head_layers, 3u);
  ASSERT_EQ(c.encoder.size(), 3u);
  EXPECT_EQ(c.encoder[0].width, 8u);
  EXPECT_EQ(c.encoder[1].width, 16u);
}

TEST(ModelConfig, RejectsBadConfigs) {
  auto c = small_conv();
  c.num_classes = 1;
  EXPECT_THROW(c.validate(), model::ConfigError);
  c = small_conv();
  c.encoder.pop_back();  // last block must be dense
  EXPECT_THROW(c.validate(), model::ConfigError);
  c = small_conv();
  c.input_shape = {3, 2, 2};
  EXPECT_THROW(c.validate(), model::ConfigError);
  c = small_conv();
  c.head_layers = 0;
  EXPECT_THROW(c.validate(), model::ConfigError);
}

TEST(Model, InitIsDeterministicPerSeed) {
  const auto c = small_conv();
  EXPECT_EQ(make(c, 3).params, make(c, 3).params);
  EXPECT_FALSE(make(c, 3).params == make(c, 4).params);
}

TEST(Model, InitStatistics) {
  const auto m = make(small_conv());
  for (const auto& e : m.params.entries()) {
    const auto& n = e.name;
    if (n.ends_with(".bias") || n.ends_with("bn.beta") || n.ends_with("running_mean")) {
      for (float v : e.value.data()) ASSERT_EQ(v, 0.0f) << n;
    } else if (n.ends_with("bn.gamma") || n.ends_with("running_var")) {
      for (float v : e.value.data()) ASSERT_EQ(v, 1.0f) << n;
    }
  }
  // fan-in scaled: variance 1/fan_in
  const auto& w = m.params.at("encoder.2.dense.weight").value;
  const double fan_in = static_cast<double>(w.dim(0));
  double sq = 0.0;
  for (float v : w.data()) {
    sq += double(v) * v;
    ASSERT_LE(std::abs(v), std::sqrt(3.0 / fan_in) + 1e-6);
  }
  EXPECT_NEAR(sq / w.size() * fan_in, 1.0, 0.05);
}

TEST(Model, PartitionProperty) {
  const auto m = make(small_conv());
  std::multiset<std::string> seen;
  for (auto tag : model::all_tags()) {
    for (const auto& n : model::partition_view(m, {tag}).names()) seen.insert(n);
  }
  const auto all = m.params.names();
  EXPECT_EQ(seen.size(), all.size());
  for (const auto& n : all) EXPECT_EQ(seen.count(n), 1u) << n;
  EXPECT_EQ(model::partition_view(m, model::all_tags()).names(), all);
}

TEST(Model, LocalHeadViewIsThreeDenseLayers) {
  const auto m = make(small_conv());
  const auto v = model::partition_view(m, {PartitionTag::kLocalHead});
  EXPECT_EQ(v.names(), (std::vector<std::string>{"head_local.0.weight", "head_local.0.bias", "head_local.1.weight",
                                                 "head_local.1.bias", "head_local.2.weight", "head_local.2.bias"}));
  EXPECT_EQ(v.at("head_local.2.weight").value.shape(), (nd::Shape{64, 5}));
}

TEST(Model, NoBatchNormMeansEmptyBnView) {
  auto c = small_conv();
  c.use_batchnorm = false;
  EXPECT_TRUE(model::partition_view(make(c), {PartitionTag::kLocalBN}).empty());
  c.local_head = false;
  EXPECT_TRUE(model::partition_view(make(c), {PartitionTag::kLocalHead}).empty());
}

TEST(ParamSet, AssignAndErrors) {
  auto a = make(small_conv(), 1);
  const auto b = make(small_conv(), 2);
  const auto shared = b.params.subset({PartitionTag::kSharedEncoder});
  a.params.assign_from(shared);
  EXPECT_EQ(a.params.at("encoder.0.conv.weight"), b.params.at("encoder.0.conv.weight"));
  EXPECT_FALSE(a.params.at("head_global.0.weight") == b.params.at("head_global.0.weight"));

  model::ParamSet bad;
  bad.add("nope", PartitionTag::kSharedEncoder, true, nd::Tensor({1}));
  EXPECT_THROW(a.params.assign_from(bad), std::invalid_argument);
  model::ParamSet wrong_shape;
  wrong_shape.add("encoder.0.conv.bias", PartitionTag::kSharedEncoder, true, nd::Tensor({3}));
  EXPECT_THROW(a.params.assign_from(wrong_shape), std::invalid_argument);
  EXPECT_THROW(bad.add("nope", PartitionTag::kLocalBN, true, nd::Tensor({1})), std::invalid_argument);
  EXPECT_THROW(a.params.at("missing"), std::out_of_range);
}

TEST(ParamSet, TagNamesRoundTrip) {
  for (auto t : model::all_tags()) EXPECT_EQ(model::parse_tag(model::to_string(t)), t);
  EXPECT_THROW(model::parse_tag("Bogus"), std::invalid_argument);
}

TEST(Forward, DeterministicAndShapes) {
  const auto m = make(small_conv());
  const auto x = input_batch(4, {3, 12, 12}, 1);
  auto run = [&] {
    nd::Graph<float> g;
    model::Forward<float> f(g, m);
    auto o = f.run(g.constant(x));
    return std::make_tuple(o.features.value(), o.raw_global.value(), o.raw_local.value());
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a, b);
  EXPECT_EQ(std::get<0>(a).shape(), (nd::Shape{4, 64}));
  EXPECT_EQ(std::get<1>(a).shape(), (nd::Shape{4, 5}));
  EXPECT_EQ(std::get<2>(a).shape(), (nd::Shape{4, 5}));
}

TEST(Forward, IdenticalHeadsGiveIdenticalOutputs) {
  auto m = make(small_conv());
  for (auto& e : m.params.entries()) {
    if (e.tag == PartitionTag::kLocalHead) {
      std::string g = e.name;
      g.replace(0, std::string("head_local").size(), "head_global");
      e.value = m.params.at(g).value;
    }
  }
  nd::Graph<float> g;
  model::Forward<float> f(g, m);
  auto o = f.run(g.constant(input_batch(3, {3, 12, 12}, 2)));
  EXPECT_EQ(o.raw_global.value(), o.raw_local.value());
}

TEST(Forward, ZeroFeaturesZeroBiasesGiveZeroOutput) {
  const auto m = make(small_conv());
  nd::Graph<float> g;
  model::Forward<float> f(g, m);
  const auto out = f.head(g.constant(nd::Tensor({2, 64})), Head::kGlobal).value();
  for (float v : out.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(f.head(g.constant(nd::Tensor({2, 63})), Head::kLocal), nd::ShapeError);
  EXPECT_THROW(f.encode(g.constant(nd::Tensor({2, 3, 11, 12}))), nd::ShapeError);
}

TEST(Forward, SingleHeadModelRejectsLocalHead) {
  auto c = small_conv();
  c.local_head = false;
  const auto m = make(c);
  nd::Graph<float> g;
  model::Forward<float> f(g, m);
  auto o = f.run(g.constant(input_batch(2, {3, 12, 12}, 3)));
  EXPECT_FALSE(o.raw_local.valid());
  EXPECT_THROW(f.head(o.features, Head::kLocal), std::logic_error);
}

TEST(Forward, BothHeadsShareOneEncoding) {
  const auto m = make(small_conv());
  nd::Graph<float> g;
  model::Forward<float> f(g, m);
  auto o = f.run(g.constant(input_batch(2, {3, 12, 12}, 4)));
  // exactly one encoding: the feature node feeds one dense op per head
  std::size_t readers = 0;
  for (std::size_t id = 0; id < g.size(); ++id) {
    for (auto i : g.inputs(id)) readers += i == o.features.id();
  }
  EXPECT_EQ(readers, 2u);
}

TEST(Forward, TrainModeUpdatesRunningStatsEvalDoesNot) {
  auto m = make(small_conv());
  const auto before = m.params.at("encoder.0.bn.running_mean").value;
  const auto x = input_batch(4, {3, 12, 12}, 5);
  {
    nd::Graph<float> g;
    model::Forward<float> f(g, m);
    f.run(g.constant(x));
  }
  EXPECT_EQ(m.params.at("encoder.0.bn.running_mean").value, before);
  {
    nd::Graph<float> g;
    model::Forward<float> f(g, m, nd::Mode::kTrain);
    f.run(g.constant(x));
  }
  EXPECT_FALSE(m.params.at("encoder.0.bn.running_mean").value == before);
}

TEST(Forward, SgdMovesOnlyParametersWithGradient) {
  auto m = make(small_conv());
  const auto before = m.params;
  nd::Graph<float> g;
  model::Forward<float> f(g, m, nd::Mode::kTrain);
  auto feats = f.encode(g.constant(input_batch(4, {3, 12, 12}, 6)));
  auto loss = nd::sum(f.head(feats, Head::kGlobal));
  g.backward(loss);
  f.apply_sgd(0.1);
  EXPECT_FALSE(m.params.at("head_global.0.weight") == before.at("head_global.0.weight"));
  EXPECT_EQ(m.params.at("head_local.0.weight"), before.at("head_local.0.weight"));
}

TEST(Forward, MlpEncoder) {
  const auto c = model::ModelConfig::mlp_default(10, 3);
  const auto m = make(c);
  nd::Graph<float> g;
  model::Forward<float> f(g, m);
  auto o = f.run(g.constant(input_batch(5, {10}, 7)));
  EXPECT_EQ(o.raw_global.shape(), (nd::Shape{5, 3}));
}

// Outputs of a fixed model on a fixed input, captured once from this
// implementation to guard against silent numerical drift.
TEST(Forward, GoldenOutput) {
  const auto m = make(small_conv(), 11);
  nd::Graph<float> g;
  model::Forward<float> f(g, m);
  const auto out = f.run(g.constant(input_batch(2, {3, 12, 12}, 8))).raw_global.value();
  const std::vector<float> golden = {0.0633947402f, 0.00259600347f, -0.0805061981f, 0.109152488f, 0.070623152f,
                                     0.0745252967f, 0.035350129f, -0.0995026082f, 0.138426512f, -0.0124993082f};
  ASSERT_EQ(out.size(), golden.size());
  for (std::size_t i = 0; i < golden.size(); ++i) EXPECT_NEAR(out[i], golden[i], 1e-5) << i;
}
