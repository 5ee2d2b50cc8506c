#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"

using namespace fundusam;

namespace {

Mask strip(int h, int w, int y0, int y1, int x0, int x1) {
  Mask m(h, w);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) m.set(y, x, true);
  }
  return m;
}

struct Fixture {
  std::vector<SampleRecord> records;
  std::vector<PreparedSample> prepared;
};

Fixture synthetic_fixture(int n) {
  SyntheticConfig cfg;
  cfg.image_size = 96;
  cfg.disc_axis_min = 14;
  cfg.disc_axis_max = 20;
  Fixture f;
  for (const auto& s : synthesize_dataset(cfg, n)) f.records.push_back(s.record);
  f.prepared = preprocess_all(f.records, PreprocessConfig{PolarGrid{64, 64}, 1.5, 64, true}, 1);
  return f;
}

}  // namespace

TEST(Dice, Examples) {
  const auto a = strip(4, 4, 0, 1, 0, 4);
  EXPECT_EQ(dice(a, a), 1.0);
  EXPECT_EQ(dice(a, strip(4, 4, 2, 3, 0, 4)), 0.0);
  EXPECT_EQ(dice(a, strip(4, 4, 0, 1, 2, 4) ), 2.0 * 2 / (4 + 2));
  EXPECT_DOUBLE_EQ(dice(a, strip(4, 4, 0, 2, 2, 4)), 0.5);  // |a|=|b|=4, overlap 2
  EXPECT_EQ(dice(Mask(3, 3), Mask(3, 3)), 1.0);
  EXPECT_THROW(dice(Mask(2, 2), Mask(2, 3)), InvalidArgument);
}

TEST(Iou, Examples) {
  const auto a = strip(4, 4, 0, 1, 0, 4);
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, strip(4, 4, 3, 4, 0, 4)), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, strip(4, 4, 0, 2, 2, 4)), 1.0 / 3.0);  // overlap 2, union 6
}

TEST(Identities, DiceFromIou) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> p(0.05, 0.95);
  for (int i = 0; i < 1000; ++i) {
    const auto a = test::random_mask(9, 11, p(rng), rng);
    const auto b = test::random_mask(9, 11, p(rng), rng);
    const double j = iou(a, b);
    const double d = dice(a, b);
    ASSERT_NEAR(d, 2 * j / (1 + j), 1e-12);
    ASSERT_GE(d, 0.0);
    ASSERT_LE(d, 1.0);
    ASSERT_GE(d, j);
  }
}

TEST(VerticalDiameter, Examples) {
  EXPECT_EQ(vertical_diameter(strip(20, 5, 3, 13, 2, 3)), 10);
  EXPECT_EQ(vertical_diameter(Mask(5, 5)), 0);
  const auto e = test::ellipse_mask(100, 100, 50.0, 50.0, 12.0, 20.0);
  EXPECT_NEAR(vertical_diameter(e), 40, 1);
}

TEST(Cdr, Examples) {
  const auto disc = test::ellipse_mask(200, 200, 100, 100, 60, 50);
  EXPECT_EQ(cdr(disc, disc), 1.0);
  EXPECT_EQ(cdr(disc, Mask(200, 200)), 0.0);
  const auto d100 = test::ellipse_mask(200, 200, 100, 100, 45, 50);
  const auto c40 = test::ellipse_mask(200, 200, 100, 100, 15, 20);
  EXPECT_NEAR(cdr(d100, c40), 0.40, 0.02);
  EXPECT_THROW(cdr(Mask(3, 3), Mask(3, 3)), EmptyMaskError);
}

TEST(Report, AggregateMeans) {
  MetricReport r;
  r.samples.push_back({"a", 1.0, 1.0, 0.5, 0.25, 0.1});
  r.samples.push_back({"b", 0.5, 0.25, 0.0, 0.0, std::nullopt});
  r.aggregate();
  EXPECT_DOUBLE_EQ(r.disc_dice, 0.75);
  EXPECT_DOUBLE_EQ(r.disc_iou, 0.625);
  EXPECT_DOUBLE_EQ(r.cup_dice, 0.25);
  EXPECT_DOUBLE_EQ(r.cup_iou, 0.125);
  EXPECT_EQ(r.cdr_count, 1u);
  EXPECT_DOUBLE_EQ(*r.mean_cdr_error, 0.1);
  EXPECT_THROW(MetricReport{}.aggregate(), InvalidArgument);
}

TEST(Report, TableFormat) {
  MetricReport r;
  r.samples.push_back({"a", 0.9, 0.8, 0.7, 0.6, std::nullopt});
  r.aggregate();
  EXPECT_EQ(format_table(r), "method\tdisc_dice\tdisc_iou\tcup_dice\tcup_iou\tn\nFunduSAM\t0.900000\t0.800000\t0.700000\t0.600000\t1\n");
  EXPECT_NE(format_per_sample(r).find("a\t0.900000\t0.800000\t0.700000\t0.600000\tNA"), std::string::npos);
  const auto j = report_json(r);
  EXPECT_EQ(j["count"], 1);
  EXPECT_DOUBLE_EQ(j["mean"]["cup"]["iou"].get<double>(), 0.6);
  EXPECT_TRUE(j["cdr_error"].is_null());
}

TEST(Evaluate, OracleScoresOne) {
  const auto f = synthetic_fixture(4);
  const Predictor oracle = [](const SampleRecord& r, const PreparedSample&, std::size_t) {
    return MaskPair{r.disc, r.cup};
  };
  const auto rep = evaluate(oracle, f.records, f.prepared, 1);
  EXPECT_EQ(rep.disc_dice, 1.0);
  EXPECT_EQ(rep.disc_iou, 1.0);
  EXPECT_EQ(rep.cup_dice, 1.0);
  EXPECT_EQ(rep.cup_iou, 1.0);
  EXPECT_EQ(*rep.mean_cdr_error, 0.0);
}

TEST(Evaluate, ZeroModelScoresZeroDisc) {
  const auto f = synthetic_fixture(3);
  const Predictor zero = [](const SampleRecord& r, const PreparedSample&, std::size_t) {
    return MaskPair{Mask(r.disc.height(), r.disc.width()), Mask(r.disc.height(), r.disc.width())};
  };
  const auto rep = evaluate(zero, f.records, f.prepared, 1);
  EXPECT_EQ(rep.disc_dice, 0.0);
  EXPECT_EQ(rep.cup_dice, 0.0);
  EXPECT_FALSE(rep.mean_cdr_error.has_value());
}

TEST(Evaluate, PolarGroundTruthThroughInverseWarp) {
  const auto f = synthetic_fixture(4);
  const Predictor polar_truth = [](const SampleRecord&, const PreparedSample& s, std::size_t) {
    return MaskPair{to_source_frame(s.masks.disc, s), to_source_frame(s.masks.cup, s)};
  };
  const auto rep = evaluate(polar_truth, f.records, f.prepared, 1);
  EXPECT_GE(rep.disc_dice, 0.9);
  EXPECT_GE(rep.cup_dice, 0.8);
}

TEST(Evaluate, UntrainedModelReportInRange) {
  auto f = synthetic_fixture(10);
  const auto stats = NormStats::compute(f.prepared);
  for (auto& p : f.prepared) stats.apply(p.image);
  FunduSam<float> model(test::tiny_model(2));
  const auto rep = evaluate(model_predictor(model, 42), f.records, f.prepared, 2);
  ASSERT_EQ(rep.count(), 10u);
  for (double v : {rep.disc_dice, rep.disc_iou, rep.cup_dice, rep.cup_iou}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Evaluate, EmptyOrMismatchedInputsFail) {
  const Predictor any = [](const SampleRecord& r, const PreparedSample&, std::size_t) { return MaskPair{r.disc, r.cup}; };
  EXPECT_THROW(evaluate(any, {}, {}, 1), InvalidArgument);
  const auto f = synthetic_fixture(2);
  EXPECT_THROW(evaluate(any, f.records, {f.prepared[0]}, 1), InvalidArgument);
}
