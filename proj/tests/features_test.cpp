#include <gtest/gtest.h>

#include "sarnet/features.hpp"
#include "sarnet/records.hpp"

namespace sarnet {
namespace {

InteractionRecord sample_record(RawId user, RawId item, RawId scenario, std::size_t behaviors) {
  InteractionRecord r;
  r.label = 1;
  r.scenario_id = scenario;
  r.user_id = user;
  r.item_id = item;
  r.category_id = item % 3;
  r.destination_id = 100 + item % 5;
  r.timestamp = 1000;
  for (std::size_t k = 0; k < behaviors; ++k)
    r.behaviors.push_back({static_cast<RawId>(10 + k), static_cast<RawId>(k % 3), static_cast<RawId>(100 + k % 5),
                           static_cast<RawId>(k % 2 ? scenario : scenario + 1), static_cast<RawId>(k % 2), 3});
  return r;
}

std::vector<InteractionRecord> corpus() {
  return {sample_record(1, 10, 0, 4), sample_record(2, 11, 1, 2), sample_record(3, 12, 1, 0)};
}

TEST(Records, FormatParseRoundTrip) {
  const auto r = sample_record(7, 42, 3, 3);
  EXPECT_EQ(parse_record(format_record(r)), r);
  const auto empty = sample_record(7, 42, 3, 0);
  EXPECT_EQ(parse_record(format_record(empty)), empty);
}

TEST(Records, RejectsMalformedLines) {
  EXPECT_THROW(parse_record("1\t2\t3"), DataError);
  EXPECT_THROW(parse_record("2\t0\t1\t1\t1\t1\t1\t"), DataError);
  EXPECT_THROW(parse_record("1\t0\t1\t1\t1\t1\t1\t1,2,3"), DataError);
  EXPECT_THROW(parse_record("1\t0\tx\t1\t1\t1\t1\t"), DataError);
}

TEST(Vocab, LookupUnseenAndInjectivity) {
  const auto vocab = FeatureVocab::build(corpus());
  EXPECT_EQ(encode_one_hot(Field::kUserId, 1, vocab), 1u);
  EXPECT_EQ(encode_one_hot(Field::kUserId, 3, vocab), 3u);
  EXPECT_EQ(encode_one_hot(Field::kUserId, 999, vocab), 0u);
  const auto a = encode_one_hot(Field::kItemId, 10, vocab);
  const auto b = encode_one_hot(Field::kItemId, 11, vocab);
  EXPECT_NE(a, 0u);
  EXPECT_NE(b, 0u);
  EXPECT_NE(a, b);
  EXPECT_THROW(encode_one_hot(99, 1, vocab), ContractViolation);
}

TEST(Vocab, InCorpusValuesNeverMapToPadding) {
  const auto data = corpus();
  const auto vocab = FeatureVocab::build(data);
  const FeatureGroupLayout layout;
  for (const auto& r : data) {
    const auto e = encode_record(r, vocab, layout, 50);
    for (auto i : e.user) EXPECT_NE(i, 0u);
    for (auto i : e.item) EXPECT_NE(i, 0u);
    for (const auto& part : e.behavior_item)
      for (auto i : part) EXPECT_NE(i, 0u);
    for (const auto& part : e.behavior_context)
      for (auto i : part) EXPECT_NE(i, 0u);
  }
}

TEST(Vocab, TextRoundTrip) {
  const auto vocab = FeatureVocab::build(corpus());
  const auto back = FeatureVocab::from_text(vocab.to_text());
  EXPECT_EQ(back.to_text(), vocab.to_text());
  EXPECT_THROW(FeatureVocab::from_text("user_id\t5\t0\n"), DataError);
  EXPECT_THROW(FeatureVocab::from_text("user_id\t5\t2\n"), DataError);
}

TEST(Embedding, IdentityTableGivesBasisVector) {
  ParameterStore store;
  Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1.0;
  auto table = EmbeddingTable::wrap(store.add("eye", eye));
  EXPECT_EQ(embed(2, table), (std::vector<double>{0, 0, 1, 0}));
  EXPECT_THROW(embed(4, table), ContractViolation);
}

TEST(Embedding, ColumnEqualsDenseOneHotProduct) {
  ParameterStore store;
  Rng rng(5);
  EmbeddingTable table(store, "e", 3, 9, rng);
  for (std::size_t idx = 0; idx < 9; ++idx) {
    const auto got = embed(idx, table);
    for (std::size_t d = 0; d < 3; ++d) {
      double dense = 0.0;
      for (std::size_t n = 0; n < 9; ++n) dense += table.parameter().value(d, n) * (n == idx ? 1.0 : 0.0);
      EXPECT_EQ(got[d], dense);
    }
  }
  EXPECT_EQ(embed(0, table), (std::vector<double>{0, 0, 0}));
  EXPECT_THROW(EmbeddingTable(store, "too_wide", 9, 9, rng), ContractViolation);
}

TEST(Assemble, MasksAndWidths) {
  const auto data = corpus();
  const auto vocab = FeatureVocab::build(data);
  const FeatureGroupLayout layout;
  ParameterStore store;
  Rng rng(1);
  FeatureTables tables(store, vocab, 8, rng);

  const auto empty = assemble_record(encode_record(data[2], vocab, layout, 50), tables, layout, 50);
  for (double v : empty.behavior_items.values()) EXPECT_EQ(v, 0.0);
  for (double v : empty.behavior_contexts.values()) EXPECT_EQ(v, 0.0);
  for (char m : empty.mask) EXPECT_EQ(m, 0);

  auto three = data[0];
  truncate_behaviors(three, 3);
  const auto a = assemble_record(encode_record(three, vocab, layout, 50), tables, layout, 50);
  EXPECT_EQ(std::count(a.mask.begin(), a.mask.end(), 1), 3);
  std::size_t expected = 0;
  for (Field f : layout.target_item) expected += tables.table(f).dim();
  EXPECT_EQ(a.behavior_items.cols(), expected);
  EXPECT_EQ(a.target_item.cols(), a.behavior_items.cols());
  EXPECT_EQ(a.scenario.cols(), a.behavior_contexts.cols());
}

TEST(Assemble, OverlongSequenceIsRejected) {
  const auto data = corpus();
  const auto vocab = FeatureVocab::build(data);
  EXPECT_THROW(encode_record(data[0], vocab, FeatureGroupLayout{}, 3), ContractViolation);
}

TEST(Truncate, KeepsMostRecent) {
  auto r = sample_record(1, 1, 0, 6);
  truncate_behaviors(r, 2);
  ASSERT_EQ(r.behaviors.size(), 2u);
  EXPECT_EQ(r.behaviors[0].item_id, 14);
  EXPECT_EQ(r.behaviors[1].item_id, 15);
}

TEST(TimeBucket, LogSpacedAndCapped) {
  EXPECT_EQ(time_bucket(0, 10.0), 0);
  EXPECT_EQ(time_bucket(10, 10.0), 1);
  EXPECT_EQ(time_bucket(30, 10.0), 2);
  EXPECT_EQ(time_bucket(1'000'000, 10.0), kTimeBuckets - 1);
}

}  // namespace
}  // namespace sarnet
