#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tmoe/data.hpp"

namespace tmoe {
namespace {

std::string reference_caesar(const std::string& s, int k) {
  const std::string letters = "abcdefghijklmnopqrstuvwxyz", digits = "0123456789";
  std::string out;
  for (char c : s) {
    auto p = letters.find(c);
    if (p != std::string::npos) {
      out.push_back(letters[(p + static_cast<std::size_t>(k % 26 + 26)) % 26]);
      continue;
    }
    p = digits.find(c);
    out.push_back(p != std::string::npos ? digits[(p + static_cast<std::size_t>(k % 10 + 10)) % 10] : c);
  }
  return out;
}

TEST(Transforms, Examples) {
  EXPECT_EQ(apply_transform({TransformKind::kCopy}, "abcd"), "abcd");
  EXPECT_EQ(apply_transform({TransformKind::kReverse}, "abcd"), "dcba");
  EXPECT_EQ(apply_transform({TransformKind::kCaesar, 3}, "abz"), "dec");
  EXPECT_EQ(apply_transform({TransformKind::kCaesar, 3}, "x79"), "a02");
  EXPECT_EQ(apply_transform({TransformKind::kSwapPairs}, "abcde"), "badce");
  EXPECT_EQ(apply_transform({TransformKind::kDuplicateOdd}, "abcd"), "aabccd");
  EXPECT_EQ(apply_transform({TransformKind::kSortChars}, "dbca"), "abcd");
  EXPECT_EQ(apply_transform({TransformKind::kReverse}, ""), "");
}

TEST(Transforms, OraclesAndLengthBoundOnRandomStrings) {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    std::string s(static_cast<std::size_t>(rng.uniform_int(0, 24)), 'a');
    for (auto& c : s) c = alphabet()[static_cast<std::size_t>(rng.uniform_int(0, 35))];
    for (int k : {3, 7, 11}) {
      EXPECT_EQ(apply_transform({TransformKind::kCaesar, k}, s), reference_caesar(s, k));
      EXPECT_EQ(apply_transform({TransformKind::kCaesar, -k}, apply_transform({TransformKind::kCaesar, k}, s)), s);
    }
    EXPECT_EQ(apply_transform({TransformKind::kReverse}, apply_transform({TransformKind::kReverse}, s)), s);
    EXPECT_EQ(apply_transform({TransformKind::kSwapPairs}, apply_transform({TransformKind::kSwapPairs}, s)), s);
    for (auto kind : {TransformKind::kCopy, TransformKind::kReverse, TransformKind::kCaesar, TransformKind::kDuplicateOdd,
                      TransformKind::kSwapPairs, TransformKind::kSortChars}) {
      EXPECT_LE(apply_transform({kind, 5}, s).size(), 2 * s.size());
    }
  }
}

TEST(Vocab, LayoutAndRoundTrip) {
  Vocab v;
  EXPECT_EQ(v.size(), 40);
  EXPECT_EQ(v.tokenize(""), (std::vector<std::int64_t>{kBosId, kEosId}));
  EXPECT_EQ(v.id('a'), 4);
  EXPECT_EQ(v.id('9'), 39);
  EXPECT_EQ(v.id('#'), kUnkId);
  EXPECT_EQ(v.id('A'), kUnkId);
  EXPECT_EQ(v.detokenize(v.tokenize("a#b")), "a?b");
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    std::string s(static_cast<std::size_t>(rng.uniform_int(0, 30)), 'a');
    for (auto& c : s) c = alphabet()[static_cast<std::size_t>(rng.uniform_int(0, 35))];
    EXPECT_EQ(v.detokenize(v.tokenize(s)), s);
  }
  EXPECT_EQ(v.detokenize({5, 6, kEosId, 7}), "bc");
}

TEST(Generation, TargetsMatchTransformAndLengths) {
  for (const auto& name : suite_names()) {
    for (const auto& task : generate_suite(suite_specs(name), 3)) {
      for (const auto* c : {&task.train, &task.valid, &task.test}) {
        for (const auto& p : c->pairs) {
          const auto raw = task.spec.direction == Direction::kForward ? p.source : p.target;
          const auto out = task.spec.direction == Direction::kForward ? p.target : p.source;
          ASSERT_EQ(apply_transform(task.spec.transform, raw), out) << task.spec.name;
          ASSERT_GE(raw.size(), 4u);
          ASSERT_LE(raw.size(), 24u);
          ASSERT_EQ(p.task, task.task_index);
        }
      }
    }
  }
}

TEST(Generation, SplitsDisjointBySourceAndSized) {
  const auto suite = default_suite(8);
  ASSERT_EQ(suite.size(), 6u);
  std::map<std::string, std::int64_t> expected_train{{"copy", 1000}, {"reverse", 1000}, {"swap-pairs", 100},
                                                     {"caesar3", 1000}, {"caesar7", 1000}, {"caesar11", 100}};
  for (const auto& t : suite) {
    std::set<std::string> seen;
    std::size_t total = 0;
    for (const auto* c : {&t.train, &t.valid, &t.test}) {
      for (const auto& p : c->pairs) seen.insert(p.source);
      total += c->pairs.size();
    }
    EXPECT_EQ(seen.size(), total) << t.spec.name;
    EXPECT_EQ(static_cast<std::int64_t>(t.train.pairs.size()), expected_train[t.spec.name]);
    EXPECT_EQ(t.valid.pairs.size(), 50u);
    EXPECT_EQ(t.test.pairs.size(), 100u);
  }
}

TEST(Generation, GroupsAndLowResourceTiers) {
  const auto specs = suite_specs("default");
  std::map<std::string, std::vector<std::string>> groups;
  std::map<std::string, int> low;
  for (const auto& s : specs) {
    groups[s.group].push_back(s.name);
    low[s.group] += s.tier == ResourceTier::kLow;
  }
  EXPECT_EQ(groups["A"], (std::vector<std::string>{"copy", "reverse", "swap-pairs"}));
  EXPECT_EQ(groups["B"], (std::vector<std::string>{"caesar3", "caesar7", "caesar11"}));
  EXPECT_EQ(low["A"], 1);
  EXPECT_EQ(low["B"], 1);
  std::set<std::string> a, b;
  for (const auto& s : suite_specs("merge-a")) a.insert(s.name);
  for (const auto& s : suite_specs("merge-b")) b.insert(s.name);
  EXPECT_EQ(a.size(), 4u);
  EXPECT_EQ(b.size(), 4u);
  for (const auto& n : a) EXPECT_FALSE(b.count(n)) << n;
  EXPECT_THROW(suite_specs("nope"), Error);
}

TEST(Generation, DeterministicPerSeed) {
  const auto a = default_suite(21), b = default_suite(21), c = default_suite(22);
  for (std::size_t t = 0; t < a.size(); ++t) {
    ASSERT_EQ(a[t].train.pairs.size(), b[t].train.pairs.size());
    for (std::size_t i = 0; i < a[t].train.pairs.size(); ++i) {
      EXPECT_EQ(a[t].train.pairs[i].source, b[t].train.pairs[i].source);
      EXPECT_EQ(a[t].train.pairs[i].target, b[t].train.pairs[i].target);
    }
  }
  EXPECT_NE(a[0].train.pairs[0].source, c[0].train.pairs[0].source);
}

TEST(Generation, InverseOfNonInvertibleRejected) {
  auto s = make_spec("dup-inv", "A", TransformKind::kDuplicateOdd, 0, Direction::kInverse);
  try {
    generate_task(s, 0, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kConfig);
  }
}

TEST(Batches, EpochIsPermutation) {
  for (std::int64_t bs : {1, 7, 32, 5000}) {
    const auto batches = multitask_batches(4200, bs, 3, 1);
    std::vector<int> hits(4200, 0);
    for (const auto& b : batches) {
      EXPECT_LE(static_cast<std::int64_t>(b.size()), bs);
      for (auto i : b) ++hits[i];
    }
    for (int h : hits) ASSERT_EQ(h, 1);
  }
  EXPECT_EQ(multitask_batches(10, 3, 1, 1), multitask_batches(10, 3, 1, 1));
  EXPECT_NE(multitask_batches(100, 100, 1, 1), multitask_batches(100, 100, 1, 2));
}

TEST(Batches, SingleTaskIsPlainShuffle) {
  CorpusSizes sizes;
  sizes.train = 64;
  const auto suite = generate_suite({make_spec("copy", "A", TransformKind::kCopy, 0, Direction::kForward,
                                               ResourceTier::kHigh, sizes)},
                                    2);
  const auto pool = pooled(suite, "train");
  std::size_t total = 0;
  for (const auto& b : multitask_batches(pool.size(), 10, 2, 1)) {
    total += b.size();
    for (auto i : b) EXPECT_EQ(pool[i].task, 0);
  }
  EXPECT_EQ(total, 64u);
}

// Over one epoch every example appears once, so each task's share of batch
// slots equals its share of the pooled corpus.
TEST(Batches, TaskFrequencyFollowsCorpusSize) {
  const auto suite = default_suite(4);
  const auto pool = pooled(suite, "train");
  std::map<std::int64_t, std::int64_t> counts;
  for (const auto& b : multitask_batches(pool.size(), 32, 4, 3)) {
    for (auto i : b) ++counts[pool[i].task];
  }
  for (const auto& t : suite) EXPECT_EQ(counts[t.task_index], static_cast<std::int64_t>(t.train.pairs.size()));
  EXPECT_EQ(counts[0], 10 * counts[2]);
}

TEST(Batches, BatchFromPairsCarriesTasks) {
  const std::vector<SentencePair> pairs{{"ab", "ba", 1}, {"xyz", "zyx", 0}};
  Vocab v;
  const auto b = batch_from_pairs(pairs, {1, 0}, v);
  EXPECT_EQ(b.task, (std::vector<std::int64_t>{0, 1}));
  EXPECT_EQ(b.src_len, 4);
  EXPECT_EQ(b.tgt_len, 4);
  EXPECT_EQ(b.src[3], kEosId);
  EXPECT_EQ(b.tgt_in[0], kBosId);
  EXPECT_EQ(b.tgt_out[3], kEosId);
  EXPECT_EQ(b.src[4 + 2], kEosId);
  EXPECT_EQ(b.src[4 + 3], kPadId);
  EXPECT_THROW(batch_from_pairs(pairs, {0, 2}, v), Error);
}

TEST(Tsv, RoundTripAndErrors) {
  const auto dir = std::filesystem::temp_directory_path() / "tmoe_data_test";
  std::filesystem::create_directories(dir);
  const auto suite = default_suite(6);
  const auto names = task_names(suite);
  const auto pool = pooled(suite, "valid");
  const auto path = (dir / "valid.tsv").string();
  write_tsv(path, pool, names);
  const auto back = read_tsv(path, names);
  ASSERT_EQ(back.size(), pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    EXPECT_EQ(back[i].source, pool[i].source);
    EXPECT_EQ(back[i].target, pool[i].target);
    EXPECT_EQ(back[i].task, pool[i].task);
  }
  try {
    read_tsv(path, {"copy"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kUnknownTask);
  }
  {
    std::ofstream f(dir / "bad.tsv");
    f << "abc\tdef\n";
  }
  try {
    read_tsv((dir / "bad.tsv").string(), names);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kFormat);
  }
  EXPECT_THROW(read_tsv((dir / "missing.tsv").string(), names), Error);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace tmoe
