#pragma once

// Joint source/target vocabulary. Ids 0..3 are reserved for <pad>, <s>,
// </s> and <unk>, in that order, in every vocabulary and vocabulary file.

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "vmmt/batch.hpp"
#include "vmmt/tensor.hpp"

namespace vmmt {

inline const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> r = {"<pad>", "<s>", "</s>", "<unk>"};
  return r;
}

class Vocab {
 public:
  Vocab() { for (const auto& t : reserved_tokens()) push(t); }

  explicit Vocab(const std::vector<std::string>& tokens) : Vocab() {
    for (const auto& t : tokens) add(t);
  }

  // Frequency-sorted build (count desc, then lexicographic) for determinism.
  static Vocab from_counts(const std::map<std::string, int64_t>& counts) {
    std::vector<std::pair<std::string, int64_t>> items(counts.begin(),
                                                       counts.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocab v;
    for (const auto& [tok, n] : items) v.add(tok);
    return v;
  }

  int add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    return push(token);
  }

  // Lookup; out-of-vocabulary tokens map to <unk>.
  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& token) const {
    return index_.count(token) > 0;
  }

  const std::string& token(int id) const {
    check(id >= 0 && id < static_cast<int>(tokens_.size()),
          "vocab: id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> to_ids(const std::vector<std::string>& toks) const {
    std::vector<int> ids(toks.size());
    for (size_t i = 0; i < toks.size(); ++i) ids[i] = id(toks[i]);
    return ids;
  }

  std::vector<std::string> to_tokens(const std::vector<int>& ids) const {
    std::vector<std::string> out(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) out[i] = token(ids[i]);
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "vocab: cannot open '" + path + "' for writing");
    for (const auto& t : tokens_) f << t << "\n";
  }

  static Vocab load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "vocab: cannot open '" + path + "'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
    check(lines.size() >= reserved_tokens().size(),
          "vocab: file '" + path + "' too short for reserved tokens");
    for (size_t i = 0; i < reserved_tokens().size(); ++i)
      check(lines[i] == reserved_tokens()[i],
            "vocab: line " + std::to_string(i) + " of '" + path +
                "' must be " + reserved_tokens()[i] + ", got '" + lines[i] +
                "'");
    Vocab v;
    for (size_t i = reserved_tokens().size(); i < lines.size(); ++i) {
      check(!v.contains(lines[i]),
            "vocab: duplicate token '" + lines[i] + "'");
      v.push(lines[i]);
    }
    return v;
  }

 private:
  int push(const std::string& token) {
    int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_[token] = id;
    return id;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace vmmt
