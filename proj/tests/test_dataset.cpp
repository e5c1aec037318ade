#include <gtest/gtest.h>

#include "attnlab/dataset.hpp"

using namespace attnlab;

TEST(Vocabulary, Lookup) {
  EXPECT_EQ(token_id("[PAD]"), kPadId);
  EXPECT_EQ(token_id("[CLS]"), kClsId);
  EXPECT_EQ(token_id("[SEP]"), kSepId);
  for (int i = 0; i < kVocabSize; ++i) EXPECT_EQ(token_id(token_name(i)), i);
  try {
    token_id("SUM");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownToken);
  }
  EXPECT_TRUE(is_special("[SEP]"));
  EXPECT_FALSE(is_special("["));
}

TEST(Records, JsonlRoundTrip) {
  const std::vector<Record> recs = {{listops::tokenize("[MAX 2 3 ]"), "3"}, {Tokens{"x", "o", "-", "|"}, "x"}};
  const std::string text = to_jsonl(recs);
  EXPECT_EQ(text.substr(0, text.find('\n')), R"({"tokens":"[ MAX 2 3 ]","label":"3"})");
  EXPECT_EQ(parse_jsonl(text), recs);
  EXPECT_EQ(parse_jsonl(text + "\n  \n"), recs);
  try {
    parse_jsonl("{\"tokens\": \"1\"}\nnot json\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IoFailure);
    EXPECT_EQ(e.index(), 1u);
  }
}

TEST(Records, TsvExport) {
  const std::vector<Record> recs = {{listops::tokenize("[MAX 2 [MIN 4 1 ] ]"), "2"}};
  EXPECT_EQ(to_tsv(recs), "Source\tTarget\n[MAX 2 [MIN 4 1 ] ]\t2\n");
}

TEST(Records, Conversions) {
  listops::Sample s{listops::tokenize("[MIN 4 7 ]"), 4};
  EXPECT_EQ(to_record(s).label, "4");
  EXPECT_EQ(label_index(class_labels(DatasetKind::TicTacToe), "o"), 1);
  EXPECT_THROW(label_index(class_labels(DatasetKind::ListOps), "x"), Error);
  EXPECT_EQ(dataset_kind_from("listops-mod"), DatasetKind::ListOpsModified);
  EXPECT_THROW(dataset_kind_from("mnist"), Error);
}

TEST(Split, DeterministicContentHash) {
  std::vector<Record> recs;
  for (int i = 0; i < 1000; ++i) recs.push_back({Tokens{std::to_string(i % 10), std::to_string(i / 10 % 10), std::to_string(i / 100)}, std::to_string(i % 7)});
  const auto [kept, held] = split_by_hash(recs, 0.02, 3);
  EXPECT_EQ(held.size(), 20u);
  EXPECT_EQ(kept.size(), 980u);
  const auto again = split_by_hash(recs, 0.02, 3);
  EXPECT_EQ(again.second, held);
  EXPECT_NE(split_by_hash(recs, 0.02, 4).second, held);
  // Membership depends on content, not on position in the file.
  std::vector<Record> reversed(recs.rbegin(), recs.rend());
  auto held_rev = split_by_hash(reversed, 0.02, 3).second;
  std::reverse(held_rev.begin(), held_rev.end());
  EXPECT_EQ(held_rev, held);
}

TEST(Files, AtomicWriteAndRead) {
  const auto dir = std::filesystem::temp_directory_path() / "attnlab-dataset-test";
  std::filesystem::remove_all(dir);
  write_file(dir / "a" / "b.txt", "hello");
  EXPECT_EQ(read_file(dir / "a" / "b.txt"), "hello");
  EXPECT_FALSE(std::filesystem::exists(dir / "a" / "b.txt.tmp"));
  EXPECT_THROW(read_file(dir / "missing"), Error);
  std::filesystem::remove_all(dir);
}
