#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "boundless/errors.hpp"
#include "boundless/random.hpp"
#include "boundless/task.hpp"

using boundless::Label;
namespace task = boundless::task;

TEST(Task, GoldIsInclusiveBracketTest) {
  EXPECT_EQ(task::make_instance(100, 400, 100).gold, Label::Yes);
  EXPECT_EQ(task::make_instance(100, 400, 400).gold, Label::Yes);
  EXPECT_EQ(task::make_instance(100, 400, 99).gold, Label::No);
  EXPECT_EQ(task::make_instance(100, 400, 401).gold, Label::No);
}

TEST(Task, GeneratedInstancesAreValid) {
  const auto data = task::gen_task_dataset(5000, 9);
  std::size_t yes = 0;
  for (const auto& t : data) {
    ASSERT_TRUE(task::is_valid(t));
    const int width = t.upper - t.lower;
    EXPECT_GE(width, task::kMinWidth);
    EXPECT_LE(width, task::kMaxWidth);
    EXPECT_GE(t.amount, 0);
    EXPECT_LE(t.amount, task::kMaxCents);
    yes += t.gold == Label::Yes;
  }
  // Brackets cover between a quarter and three quarters of the range.
  EXPECT_GT(yes, 1000u);
  EXPECT_LT(yes, 4000u);
}

TEST(Task, IsValidRejectsWrongGoldAndWidth) {
  auto t = task::make_instance(100, 400, 200);
  t.gold = Label::No;
  EXPECT_FALSE(task::is_valid(t));
  EXPECT_FALSE(task::is_valid(task::make_instance(100, 200, 150)));
  EXPECT_FALSE(task::is_valid(task::make_instance(100, 900, 150)));
}

TEST(Task, DatasetsAreSeedDeterministic) {
  EXPECT_EQ(task::gen_task_dataset(100, 3), task::gen_task_dataset(100, 3));
  EXPECT_NE(task::gen_task_dataset(100, 3), task::gen_task_dataset(100, 4));
}

TEST(Task, EncodingRoundTripsAndHasFixedLayout) {
  const auto t = task::make_instance(5, 707, 390);
  const auto e = task::encode(t);
  const std::array<std::uint8_t, task::kSeqLen> want{0, 0, 5, 10, 7, 0, 7, 10, 3, 9, 0, 10};
  EXPECT_EQ(e.tokens, want);
  EXPECT_EQ(e.tokens[task::kQueryPrefixPosition], task::kSeparator);
  EXPECT_EQ(task::decode(e), t);
  for (const auto& x : task::gen_task_dataset(2000, 1)) EXPECT_EQ(task::decode(task::encode(x)), x);
}

TEST(Task, DecodeRejectsMalformedTokens) {
  auto e = task::encode(task::make_instance(100, 400, 200));
  e.tokens[3] = 4;
  EXPECT_THROW(task::decode(e), boundless::FormatError);
  e = task::encode(task::make_instance(100, 400, 200));
  e.tokens[0] = task::kSeparator;
  EXPECT_THROW(task::decode(e), boundless::FormatError);
}

TEST(Task, CsvRoundTrip) {
  const auto data = task::gen_task_dataset(50, 12);
  std::stringstream s;
  task::write_csv(s, data);
  EXPECT_EQ(task::read_csv(s), data);
}

TEST(Task, CsvRejectsInconsistentGold) {
  std::istringstream bad("lower_cents,upper_cents,amount_cents,gold\n100,400,200,No\n");
  EXPECT_THROW(task::read_csv(bad), boundless::FormatError);
  std::istringstream no_header("100,400,200,Yes\n");
  EXPECT_THROW(task::read_csv(no_header), boundless::FormatError);
}

TEST(Task, LabelStrings) {
  EXPECT_EQ(boundless::to_string(Label::Yes), "Yes");
  EXPECT_EQ(boundless::label_from_string("No"), Label::No);
  EXPECT_THROW(boundless::label_from_string("maybe"), boundless::FormatError);
}

TEST(Random, BoundedDrawsCoverRange) {
  boundless::Rng rng(0);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) seen.insert(rng.below(7));
  EXPECT_EQ(seen.size(), 7u);
  EXPECT_EQ(*seen.rbegin(), 6u);
}

TEST(Random, DerivedSeedsDiffer) {
  EXPECT_NE(boundless::derive_seed(1, 0), boundless::derive_seed(1, 1));
  EXPECT_NE(boundless::derive_seed(1, 0), boundless::derive_seed(2, 0));
  EXPECT_EQ(boundless::derive_seed(5, 9), boundless::derive_seed(5, 9));
}
