#pragma once

// Byte pair encoding over word types: iterative most-frequent-pair merging
// with lexicographic tie-breaking so retraining is deterministic. Words are
// sequences of codepoint symbols with a trailing "</w>" marker.

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "vmmt/tensor.hpp"
#include "vmmt/text.hpp"

namespace vmmt {

inline constexpr const char* kEow = "</w>";

struct BpeModel {
  std::vector<std::pair<std::string, std::string>> merges;

  bool empty() const { return merges.empty(); }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "bpe: cannot open '" + path + "' for writing");
    for (const auto& [l, r] : merges) f << l << " " << r << "\n";
  }

  static BpeModel load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "bpe: cannot open '" + path + "'");
    BpeModel m;
    std::string line;
    size_t ln = 0;
    while (std::getline(f, line)) {
      ++ln;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      auto sp = line.find(' ');
      check(sp != std::string::npos && sp > 0 && sp + 1 < line.size(),
            "bpe: malformed merge at line " + std::to_string(ln) + " of '" +
                path + "'");
      m.merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return m;
  }
};

namespace detail {

inline std::vector<std::string> word_symbols(const std::string& word) {
  std::vector<std::string> syms;
  for (uint32_t cp : utf8_decode(word)) {
    std::string s;
    utf8_append(s, cp);
    syms.push_back(std::move(s));
  }
  syms.push_back(kEow);
  return syms;
}

inline void merge_in_place(std::vector<std::string>& syms,
                           const std::pair<std::string, std::string>& pair) {
  std::vector<std::string> out;
  out.reserve(syms.size());
  for (size_t i = 0; i < syms.size(); ++i) {
    if (i + 1 < syms.size() && syms[i] == pair.first &&
        syms[i + 1] == pair.second) {
      out.push_back(syms[i] + syms[i + 1]);
      ++i;
    } else {
      out.push_back(syms[i]);
    }
  }
  syms = std::move(out);
}

}  // namespace detail

// Trains on a word-frequency dictionary (both languages pooled for the
// bilingual model). Pair counts are maintained incrementally so 10k merges
// stay tractable on full-size corpora.
inline BpeModel bpe_train(const std::map<std::string, int64_t>& word_freq,
                          int merge_count) {
  check(merge_count >= 0, "bpe_train: merges must be >= 0");
  check(!word_freq.empty(), "bpe_train: empty corpus");

  std::vector<std::vector<std::string>> words;
  std::vector<int64_t> freq;
  for (const auto& [w, n] : word_freq) {
    if (w.empty()) continue;
    words.push_back(detail::word_symbols(w));
    freq.push_back(n);
  }
  check(!words.empty(), "bpe_train: corpus has no words");

  using Pair = std::pair<std::string, std::string>;
  std::map<Pair, int64_t> counts;
  std::map<Pair, std::set<size_t>> where;
  auto count_word = [&](size_t wi, int64_t sign) {
    const auto& syms = words[wi];
    for (size_t i = 0; i + 1 < syms.size(); ++i) {
      Pair p{syms[i], syms[i + 1]};
      counts[p] += sign * freq[wi];
      if (sign > 0) {
        where[p].insert(wi);
      } else if (counts[p] <= 0) {
        counts.erase(p);
        where[p].erase(wi);
        if (where[p].empty()) where.erase(p);
      }
    }
  };
  for (size_t wi = 0; wi < words.size(); ++wi) count_word(wi, +1);

  BpeModel model;
  for (int step = 0; step < merge_count; ++step) {
    if (counts.empty()) break;
    // Most frequent pair; ties broken by lexicographic order of the pair
    // (std::map iteration order), which makes retraining reproducible.
    Pair best;
    int64_t best_n = -1;
    for (const auto& [p, n] : counts) {
      if (n > best_n) {
        best = p;
        best_n = n;
      }
    }
    model.merges.push_back(best);
    std::vector<size_t> affected(where[best].begin(), where[best].end());
    for (size_t wi : affected) {
      count_word(wi, -1);
      detail::merge_in_place(words[wi], best);
      count_word(wi, +1);
    }
  }
  return model;
}

// Greedy application engine with a priority index and per-word memo, so
// full corpora tokenize quickly under a 10k-merge model.
class BpeApplier {
 public:
  explicit BpeApplier(const BpeModel& model) : model_(&model) {
    for (size_t i = 0; i < model.merges.size(); ++i)
      rank_.emplace(model.merges[i].first + "\n" + model.merges[i].second, i);
  }

  // Merges fire in priority order until none applies. Unknown characters
  // pass through as singleton symbols (mapped to <unk> at id-lookup time).
  const std::vector<std::string>& apply(const std::string& word) {
    auto it = memo_.find(word);
    if (it != memo_.end()) return it->second;
    std::vector<std::string> syms;
    if (!word.empty()) {
      syms = detail::word_symbols(word);
      while (syms.size() > 1) {
        size_t best = model_->merges.size();
        for (size_t i = 0; i + 1 < syms.size(); ++i) {
          auto r = rank_.find(syms[i] + "\n" + syms[i + 1]);
          if (r != rank_.end() && r->second < best) best = r->second;
        }
        if (best == model_->merges.size()) break;
        detail::merge_in_place(syms, model_->merges[best]);
      }
    }
    return memo_.emplace(word, std::move(syms)).first->second;
  }

 private:
  const BpeModel* model_;
  std::unordered_map<std::string, size_t> rank_;
  std::unordered_map<std::string, std::vector<std::string>> memo_;
};

inline std::vector<std::string> bpe_apply(const BpeModel& model,
                                          const std::string& word) {
  BpeApplier applier(model);
  return applier.apply(word);
}

// Tokens for one sentence: preprocess, then subword-split each word when a
// model is present.
inline std::vector<std::string> tokenize_line(const std::string& line,
                                              BpeApplier* bpe) {
  std::vector<std::string> words = preprocess(line);
  if (!bpe) return words;
  std::vector<std::string> out;
  for (const auto& w : words) {
    const auto& subs = bpe->apply(w);
    out.insert(out.end(), subs.begin(), subs.end());
  }
  return out;
}

// Inverse of tokenize_line over subwords: concatenate up to each </w>.
inline std::vector<std::string> merge_subwords(
    const std::vector<std::string>& subs) {
  std::vector<std::string> words;
  std::string cur;
  for (const auto& s : subs) {
    if (s.size() >= 4 && s.compare(s.size() - 4, 4, kEow) == 0) {
      cur += s.substr(0, s.size() - 4);
      words.push_back(cur);
      cur.clear();
    } else {
      cur += s;
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

}  // namespace vmmt
