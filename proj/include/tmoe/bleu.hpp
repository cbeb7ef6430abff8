#pragma once

// Corpus-level BLEU-4: clipped n-gram precisions pooled over the corpus,
// brevity penalty exp(1 - r/c) for c < r, add-one smoothing of precisions
// with a zero numerator, and a score of zero when no unigram matches.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tmoe/error.hpp"

namespace tmoe {

using TokenSeq = std::vector<std::string>;

struct BleuScore {
  double score = 0.0;
  std::array<double, 4> precisions{};
  std::array<std::int64_t, 4> matches{};
  std::array<std::int64_t, 4> totals{};
  double brevity_penalty = 1.0;
  std::int64_t hyp_len = 0;
  std::int64_t ref_len = 0;
};

inline TokenSeq whitespace_tokens(const std::string& s) {
  TokenSeq out;
  std::string cur;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Character-level outputs are spaced out into one symbol per character
// before the whitespace split, so 4-grams span four characters.
inline TokenSeq tokenize_for_bleu(const std::string& s, bool char_level = true) {
  if (!char_level) return whitespace_tokens(s);
  std::string spaced;
  for (char c : s) {
    if (c == ' ') continue;
    spaced.push_back(c);
    spaced.push_back(' ');
  }
  return whitespace_tokens(spaced);
}

inline BleuScore corpus_bleu(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
  require(!hyps.empty(), ErrorCategory::kContract, "corpus_bleu: empty corpus");
  require(hyps.size() == refs.size(), ErrorCategory::kContract,
          "corpus_bleu: " + std::to_string(hyps.size()) + " hypotheses for " + std::to_string(refs.size()) +
              " references");
  BleuScore b;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto& h = hyps[s];
    const auto& r = refs[s];
    b.hyp_len += static_cast<std::int64_t>(h.size());
    b.ref_len += static_cast<std::int64_t>(r.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      if (h.size() < n) continue;
      std::map<TokenSeq, std::int64_t> ref_counts;
      if (r.size() >= n) {
        for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[TokenSeq(r.begin() + i, r.begin() + i + n)];
      }
      std::map<TokenSeq, std::int64_t> hyp_counts;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[TokenSeq(h.begin() + i, h.begin() + i + n)];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) b.matches[n - 1] += std::min(c, it->second);
      }
      b.totals[n - 1] += static_cast<std::int64_t>(h.size() - n + 1);
    }
  }
  if (b.matches[0] == 0 || b.hyp_len == 0) {
    b.score = 0.0;
    b.brevity_penalty = b.hyp_len == 0 ? 0.0 : b.brevity_penalty;
    for (std::size_t n = 0; n < 4; ++n) {
      b.precisions[n] = b.totals[n] > 0 ? static_cast<double>(b.matches[n]) / static_cast<double>(b.totals[n]) : 0.0;
    }
    return b;
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    const double num = b.matches[n] == 0 ? 1.0 : static_cast<double>(b.matches[n]);
    const double den = b.matches[n] == 0 ? static_cast<double>(b.totals[n]) + 1.0 : static_cast<double>(b.totals[n]);
    b.precisions[n] = num / den;
    log_sum += std::log(b.precisions[n]);
  }
  b.brevity_penalty = b.hyp_len < b.ref_len
                          ? std::exp(1.0 - static_cast<double>(b.ref_len) / static_cast<double>(b.hyp_len))
                          : 1.0;
  b.score = 100.0 * b.brevity_penalty * std::exp(log_sum / 4.0);
  return b;
}

inline BleuScore corpus_bleu_strings(const std::vector<std::string>& hyps, const std::vector<std::string>& refs,
                                     bool char_level = true) {
  std::vector<TokenSeq> h, r;
  for (const auto& s : hyps) h.push_back(tokenize_for_bleu(s, char_level));
  for (const auto& s : refs) r.push_back(tokenize_for_bleu(s, char_level));
  return corpus_bleu(h, r);
}

}  // namespace tmoe
