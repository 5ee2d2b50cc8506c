#include <gtest/gtest.h>

#include <random>
#include <set>

#include "test_support.hpp"

using namespace fundusam;

TEST(Modes, ParseAndName) {
  for (auto m : {TrainMode::Peft, TrainMode::Full, TrainMode::Scratch}) EXPECT_EQ(parse_mode(mode_name(m)), m);
  EXPECT_THROW(parse_mode("lora"), InvalidArgument);
}

TEST(Modes, TrainableTags) {
  const auto peft = trainable_tags(TrainMode::Peft);
  EXPECT_FALSE(peft.at(ParamTag::BaseEncoder));
  EXPECT_TRUE(peft.at(ParamTag::Adapter));
  EXPECT_TRUE(peft.at(ParamTag::Cbam));
  EXPECT_FALSE(peft.at(ParamTag::PromptEncoder));
  EXPECT_FALSE(peft.at(ParamTag::MaskDecoder));
  for (auto mode : {TrainMode::Full, TrainMode::Scratch}) {
    for (auto [tag, on] : trainable_tags(mode)) EXPECT_TRUE(on) << tag_name(tag);
  }
}

TEST(Tags, RoundTrip) {
  for (auto t : kAllTags) EXPECT_EQ(parse_tag(tag_name(t)), t);
}

TEST(Partition, CoversModelWithUniqueNames) {
  FunduSam<float> m(ModelConfig::desk(), true);
  const auto p = partition_parameters(m.parameters(), TrainMode::Peft);
  EXPECT_EQ(p.entries.size(), m.parameters().size());
  EXPECT_EQ(p.total(), m.parameters().total_numel());
  std::set<std::string> names;
  std::size_t by_tag = 0;
  for (const auto& e : p.entries) EXPECT_TRUE(names.insert(e.name).second) << e.name;
  for (auto t : kAllTags) by_tag += p.count_for(t);
  EXPECT_EQ(by_tag, p.total());
  EXPECT_EQ(p.trainable_count(), p.count_for(ParamTag::Adapter) + p.count_for(ParamTag::Cbam));
}

TEST(Partition, CensusText) {
  FunduSam<float> m(test::tiny_model(), true);
  const auto p = partition_parameters(m.parameters(), TrainMode::Peft);
  const auto text = p.census();
  EXPECT_NE(text.find("adapter\t"), std::string::npos);
  EXPECT_NE(text.find("total\t" + std::to_string(p.total()) + "\t" + std::to_string(p.trainable_count())),
            std::string::npos);
}

TEST(Fraction, VitBLikeUnderFivePercent) {
  FunduSam<float> m(ModelConfig::sam_vit_b_like(), true);
  const double f = trainable_fraction(partition_parameters(m.parameters(), TrainMode::Peft));
  EXPECT_GT(f, 0.0);
  EXPECT_LT(f, 0.05);
}

TEST(Fraction, DeskUnderFifteenPercent) {
  FunduSam<float> m(ModelConfig::desk(), true);
  const double f = trainable_fraction(partition_parameters(m.parameters(), TrainMode::Peft));
  EXPECT_GT(f, 0.0);
  EXPECT_LT(f, 0.15);
  EXPECT_DOUBLE_EQ(trainable_fraction(partition_parameters(m.parameters(), TrainMode::Scratch)), 1.0);
}

TEST(Fraction, ShapeOnlyMatchesMaterialised) {
  FunduSam<float> a(test::tiny_model(), true);
  FunduSam<float> b(test::tiny_model(), false);
  EXPECT_EQ(a.parameters().total_numel(), b.parameters().total_numel());
  EXPECT_EQ(a.parameters().size(), b.parameters().size());
}

class FreezeContract : public ::testing::Test {
 protected:
  FunduSam<double> model{test::tiny_model(3)};
  PolarRaster img;
  PolarMask disc{64, 64};
  PolarMask cup{64, 64};

  void SetUp() override {
    std::mt19937_64 rng(4);
    img = test::random_polar(64, 64, 3, rng);
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        disc.set(y, x, y < 30);
        cup.set(y, x, y < 12);
      }
    }
  }

  void train_steps(Adam<double>& opt, int n) {
    for (int s = 0; s < n; ++s) {
      model.parameters().zero_grad();
      auto logits = model.forward(img, {10, 5, PromptLabel::Foreground});
      ag::backward(joint_loss<double>(logits, disc.bits(), cup.bits(), LossWeights{}).first);
      opt.step();
    }
  }
};

TEST_F(FreezeContract, PeftStepsLeaveFrozenBitwiseUnchanged) {
  const auto part = partition_parameters(model.parameters(), TrainMode::Peft);
  Adam<double> opt(model.parameters(), part, AdamConfig{1e-3});
  const auto before = snapshot(model.parameters());
  train_steps(opt, 3);
  auto report = verify_frozen(before, snapshot(model.parameters()), part);
  EXPECT_TRUE(report.pass) << report.summary();
  EXPECT_GE(report.changed_per_tag[ParamTag::Adapter], 1u);
  EXPECT_GE(report.changed_per_tag[ParamTag::Cbam], 1u);
  EXPECT_EQ(report.changed_per_tag.count(ParamTag::BaseEncoder), 0u);
  EXPECT_EQ(opt.steps(), 3u);
}

TEST_F(FreezeContract, OptimizerRegistersTrainableOnly) {
  const auto part = partition_parameters(model.parameters(), TrainMode::Peft);
  Adam<double> opt(model.parameters(), part, AdamConfig{});
  for (auto i : opt.indices()) EXPECT_TRUE(part.entries[i].trainable);
  std::size_t trainable = 0;
  for (const auto& e : part.entries) trainable += e.trainable ? 1 : 0;
  EXPECT_EQ(opt.indices().size(), trainable);
}

TEST_F(FreezeContract, ViolationIsReported) {
  const auto part = partition_parameters(model.parameters(), TrainMode::Peft);
  const auto before = snapshot(model.parameters());
  auto& victim = model.parameters().all()[0];
  ASSERT_FALSE(part.entries[0].trainable);
  victim.var.mutable_value()(0, 0) += 0.25;
  auto report = verify_frozen(before, snapshot(model.parameters()), part);
  EXPECT_FALSE(report.pass);
  ASSERT_EQ(report.violators.size(), 1u);
  EXPECT_EQ(report.violators[0].name, victim.name);
  EXPECT_NEAR(report.violators[0].max_abs_change, 0.25, 1e-12);
}

TEST_F(FreezeContract, ScratchModeMovesBase) {
  const auto part = partition_parameters(model.parameters(), TrainMode::Scratch);
  Adam<double> opt(model.parameters(), part, AdamConfig{1e-3});
  const auto before = snapshot(model.parameters());
  train_steps(opt, 1);
  auto report = verify_frozen(before, snapshot(model.parameters()), part);
  EXPECT_TRUE(report.pass);
  EXPECT_GE(report.changed_per_tag[ParamTag::BaseEncoder], 1u);
  EXPECT_GE(report.changed_per_tag[ParamTag::MaskDecoder], 1u);
}

TEST(AdamTest, MatchesHandComputedFirstStep) {
  ParameterStore<double> store(1, false);
  auto w = store.add("w", ParamTag::Adapter, 1, 2, Init::Zeros);
  w.mutable_value() << 1.0, -2.0;
  const auto part = partition_parameters(store, TrainMode::Peft);
  Adam<double> opt(store, part, AdamConfig{0.1, 0.9, 0.999, 1e-8});
  ag::backward(ag::sum(ag::mul(w, ag::constant<double>(ag::Matrix<double>::Constant(1, 2, 3.0)))));
  opt.step();
  // First step moves each weight by lr * g / (|g| + eps') = lr * sign(g).
  EXPECT_NEAR(w.value()(0, 0), 0.9, 1e-7);
  EXPECT_NEAR(w.value()(0, 1), -2.1, 1e-7);
}
