#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace iterseg;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsValidate) {
  ExperimentConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.n_splits, 4);
  EXPECT_EQ(c.eval.episodes, 1000);
}

TEST(Config, EmptyObjectGivesDefaults) {
  EXPECT_EQ(format_config(parse_config("{}")), format_config(ExperimentConfig{}));
}

TEST(Config, RoundTripIsStable) {
  ExperimentConfig c;
  c.seed = 77;
  c.split = 2;
  c.train.cascade.steps = 3;
  c.train.cascade.weight_mode = WeightMode::identical;
  c.train.cascade.prior_mode = PriorMode::plain;
  c.train.base_lr = 0.0025;
  c.fusion.scales = {16, 8, 4, 2};
  c.eval.shots = 5;
  c.out_dir = "/tmp/x";
  const std::string text = format_config(c);
  const ExperimentConfig back = parse_config(text);
  EXPECT_EQ(format_config(back), text);
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.train.cascade.weight_mode, WeightMode::identical);
  EXPECT_EQ(back.train.cascade.prior_mode, PriorMode::plain);
  EXPECT_EQ(back.fusion.scales, (std::vector<int>{16, 8, 4, 2}));
}

TEST(Config, CommentsAreAllowed) {
  const auto c = parse_config(R"({
    // run seed
    "seed": 5, /* split */ "splits": {"index": 1}
  })");
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.split, 1);
}

TEST(Config, UnknownFieldsAreNamed) {
  EXPECT_NE(error_of(R"({"sed": 1})").find("sed"), std::string::npos);
  EXPECT_NE(error_of(R"({"train": {"lr": 0.1}})").find("train.lr"), std::string::npos);
}

TEST(Config, InvalidValuesNameTheField) {
  EXPECT_NE(error_of(R"({"train": {"momentum": 1.5}})").find("momentum"), std::string::npos);
  EXPECT_NE(error_of(R"({"splits": {"index": 9}})").find("splits.index"), std::string::npos);
  EXPECT_NE(error_of(R"({"cascade": {"steps": 0}})").find("cascade.steps"), std::string::npos);
  EXPECT_NE(error_of(R"({"cascade": {"weight_mode": "shared"}})").find("shared"), std::string::npos);
  EXPECT_NE(error_of(R"({"train": {"epochs": "ten"}})").find("train.epochs"), std::string::npos);
  EXPECT_NE(error_of(R"({"eval": {"shots": 0}})").find("eval.shots"), std::string::npos);
  EXPECT_NE(error_of(R"({"seed": )").find("JSON"), std::string::npos);
}

TEST(Config, DerivedSeedsDifferPerConsumerAndSplit) {
  ExperimentConfig a;
  a.seed = 3;
  EXPECT_NE(a.data_seed(), a.train_seed());
  EXPECT_NE(a.pretrain_seed(), a.train_seed());
  ExperimentConfig b = a;
  b.split = 1;
  EXPECT_NE(a.train_seed(), b.train_seed());
  EXPECT_EQ(a.data_seed(), b.data_seed());
  EXPECT_EQ(a.fusion_config().mid_channels, a.backbone.mid_channels());
}

TEST(Config, LoadFromFile) {
  const auto dir = testsupport::temp_dir("config");
  {
    std::ofstream(dir / "c.json") << R"({"seed": 12})";
  }
  EXPECT_EQ(load_config(dir / "c.json").seed, 12u);
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
  std::filesystem::remove_all(dir);
}
