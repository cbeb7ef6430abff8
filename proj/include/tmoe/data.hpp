#pragma once

// Synthetic multitask "translation" corpora: deterministic string
// transformations over a shared character vocabulary.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "tmoe/error.hpp"
#include "tmoe/model.hpp"
#include "tmoe/rng.hpp"

namespace tmoe {

inline const std::string& alphabet() {
  static const std::string a = "abcdefghijklmnopqrstuvwxyz0123456789";
  return a;
}

// pad, bos, eos, unk, then the alphabet.
class Vocab {
 public:
  Vocab() {
    for (std::size_t i = 0; i < alphabet().size(); ++i) index_[alphabet()[i]] = static_cast<std::int64_t>(i) + 4;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(alphabet().size()) + 4; }

  std::int64_t id(char c) const {
    auto it = index_.find(c);
    return it == index_.end() ? kUnkId : it->second;
  }

  // Symbol ids without bos/eos.
  std::vector<std::int64_t> encode(const std::string& s) const {
    std::vector<std::int64_t> out;
    out.reserve(s.size());
    for (char c : s) out.push_back(id(c));
    return out;
  }

  std::vector<std::int64_t> tokenize(const std::string& s) const {
    std::vector<std::int64_t> out{kBosId};
    for (char c : s) out.push_back(id(c));
    out.push_back(kEosId);
    return out;
  }

  // Drops bos/pad, stops at eos; unknown ids render as '?'.
  std::string detokenize(const std::vector<std::int64_t>& ids) const {
    std::string s;
    for (auto t : ids) {
      if (t == kEosId) break;
      if (t == kBosId || t == kPadId) continue;
      if (t >= 4 && t < size()) {
        s.push_back(alphabet()[static_cast<std::size_t>(t - 4)]);
      } else {
        s.push_back('?');
      }
    }
    return s;
  }

 private:
  std::unordered_map<char, std::int64_t> index_;
};

enum class TransformKind { kCopy, kReverse, kCaesar, kDuplicateOdd, kSwapPairs, kSortChars };

struct Transform {
  TransformKind kind = TransformKind::kCopy;
  int shift = 0;

  bool invertible() const { return kind != TransformKind::kDuplicateOdd && kind != TransformKind::kSortChars; }
};

inline char caesar_char(char c, int shift) {
  if (c >= 'a' && c <= 'z') return static_cast<char>('a' + ((c - 'a' + shift) % 26 + 26) % 26);
  if (c >= '0' && c <= '9') return static_cast<char>('0' + ((c - '0' + shift) % 10 + 10) % 10);
  return c;
}

inline std::string apply_transform(const Transform& t, const std::string& s) {
  std::string out;
  switch (t.kind) {
    case TransformKind::kCopy:
      return s;
    case TransformKind::kReverse:
      return std::string(s.rbegin(), s.rend());
    case TransformKind::kCaesar:
      out = s;
      for (auto& c : out) c = caesar_char(c, t.shift);
      return out;
    case TransformKind::kDuplicateOdd:
      // 1-based odd positions (first, third, ...) are doubled.
      for (std::size_t i = 0; i < s.size(); ++i) {
        out.push_back(s[i]);
        if (i % 2 == 0) out.push_back(s[i]);
      }
      return out;
    case TransformKind::kSwapPairs:
      out = s;
      for (std::size_t i = 0; i + 1 < out.size(); i += 2) std::swap(out[i], out[i + 1]);
      return out;
    case TransformKind::kSortChars:
      out = s;
      std::sort(out.begin(), out.end());
      return out;
  }
  return s;
}

enum class Direction { kForward, kInverse };
enum class ResourceTier { kHigh, kLow };

struct CorpusSizes {
  std::int64_t train = 1000;
  std::int64_t valid = 50;
  std::int64_t test = 100;
  std::int64_t low_resource_divisor = 10;
};

struct TaskSpec {
  std::string name;
  std::string group;
  Transform transform;
  Direction direction = Direction::kForward;
  ResourceTier tier = ResourceTier::kHigh;
  CorpusSizes sizes;
  std::int64_t min_len = 4;
  std::int64_t max_len = 24;

  std::int64_t train_size() const {
    return tier == ResourceTier::kLow ? std::max<std::int64_t>(1, sizes.train / sizes.low_resource_divisor)
                                      : sizes.train;
  }

  std::pair<std::string, std::string> make_pair(const std::string& raw) const {
    const auto t = apply_transform(transform, raw);
    return direction == Direction::kForward ? std::pair{raw, t} : std::pair{t, raw};
  }
};

struct SentencePair {
  std::string source;
  std::string target;
  std::int64_t task = 0;
};

struct Corpus {
  std::string split;
  std::vector<SentencePair> pairs;
};

struct TaskCorpus {
  TaskSpec spec;
  std::int64_t task_index = 0;
  Corpus train, valid, test;

  const Corpus& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "valid") return valid;
    if (name == "test") return test;
    fail(ErrorCategory::kConfig, "unknown split '" + name + "'");
  }
};

// Sources are unique within a task, so the splits are disjoint by source.
inline TaskCorpus generate_task(const TaskSpec& spec, std::int64_t task_index, std::uint64_t seed) {
  require(spec.direction == Direction::kForward || spec.transform.invertible(), ErrorCategory::kConfig,
          "task " + spec.name + ": inverse direction needs an invertible transformation");
  require(spec.min_len >= 1 && spec.min_len <= spec.max_len, ErrorCategory::kConfig,
          "task " + spec.name + ": bad length range");
  Rng rng(hash_combine(seed, hash_string(spec.name)));
  std::unordered_set<std::string> used;
  auto draw = [&]() {
    for (;;) {
      const auto len = rng.uniform_int(spec.min_len, spec.max_len);
      std::string s(static_cast<std::size_t>(len), 'a');
      for (auto& c : s) c = alphabet()[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(alphabet().size()) - 1))];
      const auto [src, tgt] = spec.make_pair(s);
      if (used.insert(src).second) return SentencePair{src, tgt, task_index};
    }
  };
  TaskCorpus tc;
  tc.spec = spec;
  tc.task_index = task_index;
  tc.train.split = "train";
  tc.valid.split = "valid";
  tc.test.split = "test";
  for (std::int64_t i = 0; i < spec.sizes.test; ++i) tc.test.pairs.push_back(draw());
  for (std::int64_t i = 0; i < spec.sizes.valid; ++i) tc.valid.pairs.push_back(draw());
  for (std::int64_t i = 0; i < spec.train_size(); ++i) tc.train.pairs.push_back(draw());
  return tc;
}

inline TaskSpec make_spec(std::string name, std::string group, TransformKind kind, int shift = 0,
                          Direction dir = Direction::kForward, ResourceTier tier = ResourceTier::kHigh,
                          CorpusSizes sizes = {}) {
  TaskSpec s;
  s.name = std::move(name);
  s.group = std::move(group);
  s.transform = {kind, shift};
  s.direction = dir;
  s.tier = tier;
  s.sizes = sizes;
  return s;
}

inline std::vector<std::string> suite_names() { return {"default", "merge-a", "merge-b"}; }

// default: two groups of three similar tasks, one low-resource task each.
// merge-a / merge-b: disjoint four-task suites for the merging experiment.
inline std::vector<TaskSpec> suite_specs(const std::string& name, const CorpusSizes& sizes = {}) {
  using K = TransformKind;
  const auto fwd = Direction::kForward, inv = Direction::kInverse;
  const auto hi = ResourceTier::kHigh, lo = ResourceTier::kLow;
  if (name == "default") {
    return {make_spec("copy", "A", K::kCopy, 0, fwd, hi, sizes),
            make_spec("reverse", "A", K::kReverse, 0, fwd, hi, sizes),
            make_spec("swap-pairs", "A", K::kSwapPairs, 0, fwd, lo, sizes),
            make_spec("caesar3", "B", K::kCaesar, 3, fwd, hi, sizes),
            make_spec("caesar7", "B", K::kCaesar, 7, fwd, hi, sizes),
            make_spec("caesar11", "B", K::kCaesar, 11, fwd, lo, sizes)};
  }
  if (name == "merge-a") {
    return {make_spec("copy", "A", K::kCopy, 0, fwd, hi, sizes),
            make_spec("swap-pairs", "A", K::kSwapPairs, 0, fwd, hi, sizes),
            make_spec("caesar3", "B", K::kCaesar, 3, fwd, hi, sizes),
            make_spec("caesar7", "B", K::kCaesar, 7, fwd, hi, sizes)};
  }
  if (name == "merge-b") {
    return {make_spec("reverse", "A", K::kReverse, 0, fwd, hi, sizes),
            make_spec("duplicate-odd", "A", K::kDuplicateOdd, 0, fwd, hi, sizes),
            make_spec("caesar3-inv", "B", K::kCaesar, 3, inv, hi, sizes),
            make_spec("caesar7-inv", "B", K::kCaesar, 7, inv, hi, sizes)};
  }
  fail(ErrorCategory::kConfig, "unknown task suite '" + name + "'");
}

inline std::vector<TaskCorpus> generate_suite(const std::vector<TaskSpec>& specs, std::uint64_t seed) {
  std::vector<TaskCorpus> out;
  for (std::size_t i = 0; i < specs.size(); ++i) out.push_back(generate_task(specs[i], static_cast<std::int64_t>(i), seed));
  return out;
}

inline std::vector<TaskCorpus> default_suite(std::uint64_t seed, const CorpusSizes& sizes = {}) {
  return generate_suite(suite_specs("default", sizes), seed);
}

inline std::vector<std::string> task_names(const std::vector<TaskCorpus>& suite) {
  std::vector<std::string> names;
  for (const auto& t : suite) names.push_back(t.spec.name);
  return names;
}

// Every pair of `split` across tasks, in task order.
inline std::vector<SentencePair> pooled(const std::vector<TaskCorpus>& suite, const std::string& split) {
  std::vector<SentencePair> all;
  for (const auto& t : suite) {
    const auto& c = t.split(split);
    all.insert(all.end(), c.pairs.begin(), c.pairs.end());
  }
  return all;
}

// One epoch of batches over the pooled corpus: a global shuffle keyed by
// (seed, epoch), then consecutive slices. No per-task resampling, so task
// frequency follows corpus size.
inline std::vector<std::vector<std::size_t>> multitask_batches(std::size_t n_examples, std::int64_t batch_size,
                                                               std::uint64_t seed, std::int64_t epoch) {
  require(batch_size >= 1, ErrorCategory::kConfig, "batch size must be positive");
  std::vector<std::size_t> order(n_examples);
  for (std::size_t i = 0; i < n_examples; ++i) order[i] = i;
  Rng rng(hash_combine(seed, static_cast<std::uint64_t>(epoch) + 0x5EEDULL));
  shuffle_in_place(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n_examples; i += static_cast<std::size_t>(batch_size)) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n_examples, i + static_cast<std::size_t>(batch_size))));
  }
  return batches;
}

inline Batch batch_from_pairs(const std::vector<SentencePair>& pairs, const std::vector<std::size_t>& idx,
                              const Vocab& vocab) {
  std::vector<std::vector<std::int64_t>> src, tgt;
  std::vector<std::int64_t> tasks;
  for (auto i : idx) {
    require(i < pairs.size(), ErrorCategory::kIndex,
            "batch index " + std::to_string(i) + " outside " + std::to_string(pairs.size()) + " pairs");
    src.push_back(vocab.encode(pairs[i].source));
    tgt.push_back(vocab.encode(pairs[i].target));
    tasks.push_back(pairs[i].task);
  }
  return make_batch(src, tgt, tasks);
}

// UTF-8 TSV: source<TAB>target<TAB>task_name, one pair per line.
inline void write_tsv(const std::string& path, const std::vector<SentencePair>& pairs,
                      const std::vector<std::string>& task_names) {
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCategory::kIo, "cannot write " + path);
  for (const auto& p : pairs) f << p.source << '\t' << p.target << '\t' << task_names[static_cast<std::size_t>(p.task)] << '\n';
  require(static_cast<bool>(f), ErrorCategory::kIo, "write failed for " + path);
}

inline std::vector<SentencePair> read_tsv(const std::string& path, const std::vector<std::string>& task_names) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCategory::kIo, "cannot read " + path);
  std::unordered_map<std::string, std::int64_t> index;
  for (std::size_t i = 0; i < task_names.size(); ++i) index[task_names[i]] = static_cast<std::int64_t>(i);
  std::vector<SentencePair> out;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    require(b != std::string::npos, ErrorCategory::kFormat,
            path + ":" + std::to_string(lineno) + ": expected source<TAB>target<TAB>task");
    const auto task = line.substr(b + 1);
    auto it = index.find(task);
    require(it != index.end(), ErrorCategory::kUnknownTask, path + ":" + std::to_string(lineno) + ": unknown task '" + task + "'");
    out.push_back({line.substr(0, a), line.substr(a + 1, b - a - 1), it->second});
  }
  return out;
}

}  // namespace tmoe
