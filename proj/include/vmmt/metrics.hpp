#pragma once

// Corpus BLEU4 (no smoothing, standard brevity penalty, case-folded
// whitespace tokens) and chrF3 (character n-grams n=1..6, beta=3,
// whitespace removed, macro-averaged over segments).

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "vmmt/tensor.hpp"
#include "vmmt/text.hpp"

namespace vmmt {

namespace detail {

inline std::vector<std::string> fold_tokens(const std::string& s) {
  return preprocess(s);  // lowercases and splits; inputs are already text
}

inline std::map<std::vector<std::string>, int64_t> ngram_counts(
    const std::vector<std::string>& toks, int n) {
  std::map<std::vector<std::string>, int64_t> counts;
  if (static_cast<int>(toks.size()) < n) return counts;
  for (size_t i = 0; i + n <= toks.size(); ++i)
    counts[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)]++;
  return counts;
}

}  // namespace detail

// Geometric mean of modified n-gram precisions (n=1..4) times the brevity
// penalty; any zero precision zeroes the score.
inline double bleu4(const std::vector<std::string>& hypotheses,
                    const std::vector<std::string>& references) {
  check(!references.empty(), "bleu4: empty reference set");
  check(hypotheses.size() == references.size(),
        "bleu4: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
            std::to_string(references.size()) + " references");
  int64_t match[4] = {0, 0, 0, 0};
  int64_t total[4] = {0, 0, 0, 0};
  int64_t hyp_len = 0, ref_len = 0;
  for (size_t s = 0; s < hypotheses.size(); ++s) {
    auto hyp = detail::fold_tokens(hypotheses[s]);
    auto ref = detail::fold_tokens(references[s]);
    hyp_len += static_cast<int64_t>(hyp.size());
    ref_len += static_cast<int64_t>(ref.size());
    for (int n = 1; n <= 4; ++n) {
      auto hc = detail::ngram_counts(hyp, n);
      auto rc = detail::ngram_counts(ref, n);
      for (const auto& [gram, cnt] : hc) {
        total[n - 1] += cnt;
        auto it = rc.find(gram);
        if (it != rc.end()) match[n - 1] += std::min(cnt, it->second);
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_prec = 0.0;
  for (int n = 0; n < 4; ++n) {
    if (total[n] == 0 || match[n] == 0) return 0.0;
    log_prec += std::log(static_cast<double>(match[n]) /
                         static_cast<double>(total[n]));
  }
  double bp = hyp_len >= ref_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(ref_len) /
                                       static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_prec / 4.0);
}

namespace detail {

inline std::vector<uint32_t> chrf_chars(const std::string& s) {
  std::vector<uint32_t> out;
  for (uint32_t cp : utf8_decode(s))
    if (!is_space_cp(cp)) out.push_back(lowercase_cp(cp));
  return out;
}

inline std::map<std::vector<uint32_t>, int64_t> char_ngrams(
    const std::vector<uint32_t>& cs, int n) {
  std::map<std::vector<uint32_t>, int64_t> counts;
  if (static_cast<int>(cs.size()) < n) return counts;
  for (size_t i = 0; i + n <= cs.size(); ++i)
    counts[std::vector<uint32_t>(cs.begin() + i, cs.begin() + i + n)]++;
  return counts;
}

}  // namespace detail

// Per-segment F_beta (beta=3) over character n-gram precision and recall
// averaged across n=1..6, then macro-averaged over the corpus. Orders where
// neither side has any n-gram are skipped (otherwise identical short
// strings could never reach 100).
inline double chrf3(const std::vector<std::string>& hypotheses,
                    const std::vector<std::string>& references) {
  check(!hypotheses.empty() && !references.empty(), "chrf3: empty inputs");
  check(hypotheses.size() == references.size(),
        "chrf3: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
            std::to_string(references.size()) + " references");
  const double beta2 = 9.0;
  double total = 0.0;
  for (size_t s = 0; s < hypotheses.size(); ++s) {
    auto hyp = detail::chrf_chars(hypotheses[s]);
    auto ref = detail::chrf_chars(references[s]);
    double psum = 0.0, rsum = 0.0;
    int orders = 0;
    for (int n = 1; n <= 6; ++n) {
      auto hc = detail::char_ngrams(hyp, n);
      auto rc = detail::char_ngrams(ref, n);
      if (hc.empty() && rc.empty()) continue;
      ++orders;
      int64_t match = 0, hyp_total = 0, ref_total = 0;
      for (const auto& [g, c] : hc) {
        hyp_total += c;
        auto it = rc.find(g);
        if (it != rc.end()) match += std::min(c, it->second);
      }
      for (const auto& [g, c] : rc) ref_total += c;
      psum += hyp_total > 0
                  ? static_cast<double>(match) / static_cast<double>(hyp_total)
                  : 0.0;
      rsum += ref_total > 0
                  ? static_cast<double>(match) / static_cast<double>(ref_total)
                  : 0.0;
    }
    if (orders == 0) continue;
    double p = psum / orders, r = rsum / orders;
    double f = (p + r) > 0.0
                   ? (1.0 + beta2) * p * r / (beta2 * p + r)
                   : 0.0;
    total += 100.0 * f;
  }
  return total / static_cast<double>(hypotheses.size());
}

}  // namespace vmmt
