#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <filesystem>
#include <vector>

#include "hydra/errors.hpp"
#include "hydra/hpnet.hpp"
#include "hydra/ops.hpp"
#include "hydra/random.hpp"
#include "hydra/trainer.hpp"

using namespace hydra;
using namespace hydra::train;
using net::NetworkParams;

namespace {

net::HPNetConfig tiny_config() {
  net::HPNetConfig c;
  c.stem_channels = 4;
  c.block_channels = {8, 8, 12};
  c.attention_channels = 3;
  c.num_attributes = 4;
  c.feature_dim = 6;
  c.input_height = 32;
  c.input_width = 16;
  return c;
}

data::LoadedSplit tiny_split(std::size_t n, std::uint64_t seed, const net::HPNetConfig& c) {
  Engine eng = make_engine(seed, "tiny-split");
  data::LoadedSplit s;
  std::vector<float> v(n * 3 * c.input_height * c.input_width);
  for (auto& x : v) x = static_cast<float>(uniform(eng, -1, 1));
  s.images = Tensor({n, 3, c.input_height, c.input_width}, std::move(v));
  s.num_attributes = c.num_attributes;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c.num_attributes; ++j) s.attrs.push_back(static_cast<std::uint8_t>((i + j) % 2));
    s.ids.push_back(static_cast<std::int64_t>(i / 4));
    s.cameras.push_back(static_cast<std::int64_t>(i % 2));
  }
  return s;
}

TrainHyper quick_hyper() {
  TrainHyper h;
  h.stage1 = {1, 0.05, 0.9, 8, 0, 0.1, 1e-4};
  h.stage2 = {1, 0.05, 0.9, 8, 0, 0.1, 1e-4};
  h.stage3 = {2, 0.05, 0.9, 8, 0, 0.1, 1e-3};
  return h;
}

LossSpec loss_for(const data::LoadedSplit& s) { return LossSpec::from_labels(s.attrs, s.num_attributes); }

// Every entry outside `changed` (trainable names, plus running statistics
// under `train_prefix`) must be bit-identical between the snapshots.
void expect_frozen(const NetworkParams& before, const NetworkParams& after, const StagePlan& plan,
                   const std::string& train_prefix) {
  std::size_t moved = 0;
  for (const auto& [name, t] : before.entries) {
    ASSERT_TRUE(after.contains(name)) << name;
    const auto a = t.data();
    const auto b = after.at(name).data();
    const bool same = std::equal(a.begin(), a.end(), b.begin(), b.end());
    if (plan.trainable.count(name)) {
      moved += same ? 0 : 1;
      continue;
    }
    if (net::is_running_stat(name) && name.starts_with(train_prefix)) continue;
    EXPECT_TRUE(same) << "frozen entry changed: " << name;
  }
  EXPECT_GT(moved, 0u) << "no trainable entry moved";
}

}  // namespace

TEST(WeightedLoss, PositiveWeightFixture) {
  LossSpec spec{LossSpec::Kind::kWeightedBce, {0.2}, 1.0};
  const Tensor logits({1, 1}, {0.f});
  const std::vector<std::uint8_t> labels{1};
  EXPECT_NEAR(weighted_attribute_loss(logits, labels, spec).item(), std::exp(0.8) * std::log(2.0), 1e-6);
  const std::vector<std::uint8_t> neg{0};
  EXPECT_NEAR(weighted_attribute_loss(logits, neg, spec).item(), std::exp(0.2) * std::log(2.0), 1e-6);
}

TEST(WeightedLoss, BalancedRatioScalesPlainBce) {
  LossSpec spec{LossSpec::Kind::kWeightedBce, {0.5, 0.5}, 1.0};
  const Tensor logits({2, 2}, {1.5f, -0.5f, 0.25f, 2.f});
  const std::vector<std::uint8_t> labels{1, 0, 0, 1};
  double bce = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.data()[i])));
    bce += labels[i] ? -std::log(p) : -std::log(1.0 - p);
  }
  EXPECT_NEAR(weighted_attribute_loss(logits, labels, spec).item(), std::exp(0.5) * bce / 4.0, 1e-5);
}

TEST(WeightedLoss, ConfidentCorrectPredictionsApproachZero) {
  LossSpec spec{LossSpec::Kind::kWeightedBce, {0.3, 0.7}, 1.0};
  const Tensor logits({1, 2}, {40.f, -40.f});
  const std::vector<std::uint8_t> labels{1, 0};
  EXPECT_LT(weighted_attribute_loss(logits, labels, spec).item(), 1e-12);
}

TEST(WeightedLoss, RatiosAndValidation) {
  const std::vector<std::uint8_t> labels{1, 0, 1, 1, 0, 0, 1, 0};
  const auto spec = LossSpec::from_labels(labels, 2);
  ASSERT_EQ(spec.ratios.size(), 2u);
  EXPECT_DOUBLE_EQ(spec.ratios[0], 0.75);
  EXPECT_DOUBLE_EQ(spec.ratios[1], 0.25);
  EXPECT_NEAR(spec.positive_weights()[1], std::exp(0.75), 1e-12);
  EXPECT_NEAR(spec.negative_weights()[1], std::exp(0.25), 1e-12);
  EXPECT_THROW(LossSpec::from_labels(std::vector<std::uint8_t>{1, 1, 1, 1}, 1).validate(), ConfigError);
  LossSpec bad{LossSpec::Kind::kWeightedBce, {0.5}, 0.0};
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Sgd, SingleStepWithoutMomentum) {
  std::vector<float> p{1.f, -2.f}, v{0.f, 0.f};
  const std::vector<float> g{0.5f, 0.25f};
  sgd_update(p, g, v, 0.1, 0.0);
  EXPECT_FLOAT_EQ(p[0], 0.95f);
  EXPECT_FLOAT_EQ(p[1], -2.025f);
}

TEST(Sgd, ZeroGradientLeavesParameters) {
  std::vector<float> p{1.f, -2.f}, v{0.f, 0.f};
  const std::vector<float> g{0.f, 0.f};
  sgd_update(p, g, v, 0.1, 0.9);
  EXPECT_EQ(p, (std::vector<float>{1.f, -2.f}));
}

TEST(Sgd, TwoMomentumSteps) {
  // v1 = g, v2 = 0.9 g + g; total displacement lr * g * (1 + 1.9).
  std::vector<float> p{0.f}, v{0.f};
  const std::vector<float> g{1.f};
  sgd_update(p, g, v, 0.1, 0.9);
  sgd_update(p, g, v, 0.1, 0.9);
  EXPECT_NEAR(p[0], -0.1 * 2.9, 1e-6);
  EXPECT_NEAR(v[0], 1.9, 1e-6);
}

TEST(Sgd, WeightDecayAddsToGradient) {
  std::vector<float> p{2.f}, v{0.f};
  const std::vector<float> g{0.f};
  sgd_update(p, g, v, 0.5, 0.0, 0.1);
  EXPECT_NEAR(p[0], 2.0 - 0.5 * 0.2, 1e-6);
}

TEST(Schedule, StepDecay) {
  StageHyper h{10, 0.1, 0.9, 8, 3, 0.5, 0.0};
  EXPECT_DOUBLE_EQ(h.lr_at(0), 0.1);
  EXPECT_DOUBLE_EQ(h.lr_at(2), 0.1);
  EXPECT_DOUBLE_EQ(h.lr_at(3), 0.05);
  EXPECT_DOUBLE_EQ(h.lr_at(7), 0.025);
  StageHyper bad{1, -0.1, 0.9, 8, 0, 0.1, 0.0};
  EXPECT_THROW(bad.validate("1"), ConfigError);
}

TEST(Stages, ConstructAfnetCopiesMnetExactly) {
  const auto c = tiny_config();
  NetworkParams mnet = net::build_mnet(c, 3);
  mnet.stage_markers.insert("1");
  const NetworkParams af = construct_afnet(mnet, c, 3);
  const auto column = mnet.names_with_prefix("mnet.");
  std::size_t column_values = 0;
  for (const auto& name : column) column_values += mnet.at(name).numel();
  std::size_t attention_values = 0;
  for (std::size_t i = 1; i <= 3; ++i) {
    for (const auto& name : column) {
      const auto copy = "afnet" + std::to_string(i) + name.substr(4);
      ASSERT_TRUE(af.contains(copy)) << copy;
      const auto a = mnet.at(name).data();
      const auto b = af.at(copy).data();
      EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << copy;
      EXPECT_NE(a.data(), b.data()) << "copy shares storage: " << copy;
    }
    for (const auto& name : af.names_with_prefix(net::attention_prefix(i) + ".")) attention_values += af.at(name).numel();
  }
  EXPECT_GT(attention_values, 0u);
  EXPECT_EQ(af.total_values(), 4 * column_values + attention_values);
}

TEST(Stages, OrderViolationsRejected) {
  const auto c = tiny_config();
  const auto s = tiny_split(16, 1, c);
  const auto loss = loss_for(s);
  const auto h = quick_hyper();
  NetworkParams fresh = net::build_mnet(c, 1);
  EXPECT_THROW(construct_afnet(fresh, c, 1), StageOrderError);
  EXPECT_THROW(stage2_finetune(fresh, c, 1, s, loss, h.stage2, {}), StageOrderError);
  EXPECT_THROW(stage3_train_fusion(fresh, c, s, loss, h.stage3, {}), StageOrderError);

  NetworkParams mnet = stage1_train(c, s, loss, h.stage1, {});
  NetworkParams af = construct_afnet(mnet, c, 1);
  EXPECT_THROW(stage3_train_fusion(af, c, s, loss, h.stage3, {}), StageOrderError);
  // Stage 2 directly on the M-net: no AF-net column yet.
  EXPECT_THROW(stage2_finetune(mnet, c, 2, s, loss, h.stage2, {}), StageOrderError);

  auto pruned = c;
  pruned.connectivity = net::Connectivity::named("two_branches_pruned");
  NetworkParams af2 = construct_afnet(mnet, pruned, 1);
  EXPECT_THROW(stage2_finetune(af2, pruned, 1, s, loss, h.stage2, {}), ParameterError);
  EXPECT_THROW(require_stages_before(af2, pruned, "4"), ParameterError);
}

TEST(Stages, FrozenParametersBitIdentical) {
  const auto c = tiny_config();
  const auto s = tiny_split(16, 2, c);
  const auto loss = loss_for(s);
  const auto h = quick_hyper();

  const NetworkParams init = net::build_mnet(c, 5);
  NetworkParams mnet = stage1_train(c, s, loss, h.stage1, {5, nullptr});
  expect_frozen(init, mnet, plan_stage(mnet, c, "1", h.stage1), "mnet.");

  NetworkParams params = construct_afnet(mnet, c, 5);
  for (std::size_t i = 1; i <= 3; ++i) {
    const NetworkParams before = params.deep_copy();
    const auto plan = plan_stage(params, c, stage2_id(i), h.stage2);
    stage2_finetune(params, c, i, s, loss, h.stage2, {5, nullptr});
    expect_frozen(before, params, plan, net::attention_prefix(i) + ".");
    // Only blocks after the first enabled direction (k = 1) may train.
    EXPECT_FALSE(plan.trainable.count(net::column_prefix(i) + ".stem.conv.w"));
  }
  const NetworkParams before = params.deep_copy();
  stage3_train_fusion(params, c, s, loss, h.stage3, {5, nullptr});
  for (const auto& [name, t] : before.entries) {
    if (name.starts_with("fusion.") || name.starts_with("head.")) continue;
    const auto a = t.data();
    const auto b = params.at(name).data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << name;
  }
  EXPECT_EQ(params.stage_markers, (std::set<std::string>{"1", "2a", "2b", "2c", "3"}));
}

TEST(Stages, TrainablePlanFollowsFirstDirection) {
  auto c = tiny_config();
  c.connectivity = net::Connectivity::parse("000,011,001");
  NetworkParams mnet = net::build_mnet(c, 1);
  mnet.stage_markers.insert("1");
  const auto af = construct_afnet(mnet, c, 1);
  const auto plan = plan_stage(af, c, "2b", {});
  bool block2 = false, block3 = false, block1 = false;
  for (const auto& name : plan.trainable) {
    block1 |= name.starts_with(net::block_prefix("afnet2", 1) + ".");
    block2 |= name.starts_with(net::block_prefix("afnet2", 2) + ".");
    block3 |= name.starts_with(net::block_prefix("afnet2", 3) + ".");
    EXPECT_TRUE(name.starts_with("afnet2.") || name.starts_with("att2.")) << name;
    EXPECT_FALSE(net::is_running_stat(name)) << name;
  }
  EXPECT_FALSE(block1);
  EXPECT_FALSE(block2);
  EXPECT_TRUE(block3);
}

TEST(Stages, ZeroEpochsKeepInitialization) {
  const auto c = tiny_config();
  const auto s = tiny_split(16, 3, c);
  auto h = quick_hyper();
  h.stage1.epochs = 0;
  const NetworkParams mnet = stage1_train(c, s, loss_for(s), h.stage1, {7, nullptr});
  const NetworkParams init = net::build_mnet(c, 7);
  for (const auto& [name, t] : init.entries) {
    const auto a = t.data();
    const auto b = mnet.at(name).data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << name;
  }
}

TEST(Stages, LogRecordsEveryEpoch) {
  const auto c = tiny_config();
  const auto s = tiny_split(16, 4, c);
  auto h = quick_hyper();
  h.stage1.epochs = 2;
  const auto path = std::filesystem::temp_directory_path() / "hydra_trainer_log.jsonl";
  TrainLog log(path);
  stage1_train(c, s, loss_for(s), h.stage1, {9, &log});
  ASSERT_EQ(log.records().size(), 2u);
  EXPECT_EQ(log.records()[0].stage, "1");
  EXPECT_EQ(log.records()[1].epoch, 2u);
  EXPECT_EQ(log.records()[1].seed, 9u);
  EXPECT_TRUE(std::isfinite(log.records()[0].loss));
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) lines += line.empty() ? 0 : 1;
  EXPECT_EQ(lines, 2u);
  std::filesystem::remove(path);
}

TEST(Pipeline, DeterministicAndCacheEquivalent) {
  const auto c = tiny_config();
  const auto s = tiny_split(16, 5, c);
  const auto loss = loss_for(s);
  const auto h = quick_hyper();
  auto pruned = c;
  pruned.connectivity = net::Connectivity::named("two_branches_pruned");

  const auto a = encode_checkpoint(train_all(pruned, s, loss, h, {11, nullptr}));
  const auto b = encode_checkpoint(train_all(pruned, s, loss, h, {11, nullptr}));
  EXPECT_EQ(a, b);

  // Row 3 of the complete mask equals row 3 of the pruned one, so the cached
  // module must reproduce the uncached result exactly.
  PipelineCache cache;
  train_all(c, s, loss, h, {11, nullptr}, &cache);
  EXPECT_EQ(cache.modules.size(), 3u);
  const auto cached = encode_checkpoint(train_all(pruned, s, loss, h, {11, nullptr}, &cache));
  EXPECT_EQ(cached, a);
}

TEST(Pipeline, IdentityHeadTrains) {
  auto c = tiny_config();
  c.task = net::Task::kReid;
  const auto s = tiny_split(16, 6, c);
  std::size_t classes = 0;
  const auto dense = dense_identity_labels(s.ids, &classes);
  EXPECT_EQ(classes, 4u);
  EXPECT_EQ(dense.front(), 0);
  EXPECT_EQ(dense.back(), 3);
  c.num_identities = classes;
  auto h = quick_hyper();
  c.connectivity = net::Connectivity::named("two_branches_pruned");
  const auto params = train_all(c, s, LossSpec::identity(), h, {1, nullptr});
  EXPECT_EQ(params.at("head.w").dim(1), 4u);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const auto c = tiny_config();
  NetworkParams p = net::build_hpnet(c, 2);
  p.stage_markers = {"1", "2a"};
  const auto bytes = encode_checkpoint(p);
  const NetworkParams q = decode_checkpoint(bytes);
  EXPECT_TRUE(p.bit_equal(q));
  EXPECT_EQ(q.stage_markers, p.stage_markers);
  EXPECT_EQ(encode_checkpoint(q), bytes);

  const auto path = std::filesystem::temp_directory_path() / "hydra_ckpt_test.bin";
  save_checkpoint(p, path);
  EXPECT_TRUE(load_checkpoint(path).bit_equal(p));
  std::filesystem::remove(path);
}

TEST(Checkpoint, EntriesInLexicographicOrder) {
  NetworkParams p;
  p.add("b", Tensor({1}, {2.f}));
  p.add("a", Tensor({2}, {1.f, 3.f}));
  const auto bytes = encode_checkpoint(p);
  // magic(4) version(4) count(4) then u16 length and the first name.
  ASSERT_GT(bytes.size(), 15u);
  EXPECT_EQ(bytes[0], 'H');
  EXPECT_EQ(bytes[3], '1');
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[12], 1);
  EXPECT_EQ(bytes[14], 'a');
}

TEST(Checkpoint, CorruptionReportsOffset) {
  NetworkParams p;
  p.add("w", Tensor({2, 2}, {1.f, 2.f, 3.f, 4.f}));
  auto bytes = encode_checkpoint(p);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    decode_checkpoint(bad_magic, "ck");
    FAIL() << "bad magic accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos) << e.what();
  }

  auto bad_version = bytes;
  bad_version[4] = 9;
  try {
    decode_checkpoint(bad_version, "ck");
    FAIL() << "bad version accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 4"), std::string::npos) << e.what();
  }

  auto truncated = bytes;
  truncated.resize(truncated.size() - 6);
  EXPECT_THROW(decode_checkpoint(truncated), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), FormatError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.bin"), FormatError);
}
