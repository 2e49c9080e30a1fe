#pragma once

// Corpus and feature ingestion, batching, gold/synthetic mixing, and the
// deterministic synthetic grounded-translation task used for desk-scale
// verification.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vmmt/batch.hpp"
#include "vmmt/bpe.hpp"
#include "vmmt/rng.hpp"
#include "vmmt/tensor.hpp"
#include "vmmt/vocab.hpp"

namespace vmmt {

// ------------------------------ FVEC files ------------------------------

// On disk: magic "FVEC" | version u32 LE = 1 | rows u64 LE | cols u64 LE |
// rows*cols f32 LE, row-major. Values are widened to double in memory.
struct FeatureMatrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<float> data;

  std::vector<double> row(int64_t r) const {
    check(r >= 0 && r < rows, "features: row " + std::to_string(r) +
                                  " out of range [0," + std::to_string(rows) +
                                  ")");
    return std::vector<double>(data.begin() + r * cols,
                               data.begin() + (r + 1) * cols);
  }
};

namespace detail {

inline void put_u32le(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}
inline void put_u64le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}
inline uint32_t get_u32le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) |
         (static_cast<uint32_t>(p[3]) << 24);
}
inline uint64_t get_u64le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline std::string read_file_bytes(const std::string& path,
                                   const char* what) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), std::string(what) + ": cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace detail

inline void save_features(const FeatureMatrix& m, const std::string& path) {
  std::string bytes;
  bytes += "FVEC";
  detail::put_u32le(bytes, 1);
  detail::put_u64le(bytes, static_cast<uint64_t>(m.rows));
  detail::put_u64le(bytes, static_cast<uint64_t>(m.cols));
  size_t off = bytes.size();
  bytes.resize(off + m.data.size() * 4);
  for (size_t i = 0; i < m.data.size(); ++i) {
    uint32_t u;
    std::memcpy(&u, &m.data[i], 4);
    for (int k = 0; k < 4; ++k)
      bytes[off + i * 4 + k] = static_cast<char>(u >> (8 * k));
  }
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "features: cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline FeatureMatrix load_features(const std::string& path) {
  std::string bytes = detail::read_file_bytes(path, "features");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  check(bytes.size() >= 24,
        "features: '" + path + "' truncated at byte offset " +
            std::to_string(bytes.size()) + " (header needs 24 bytes)");
  check(std::memcmp(p, "FVEC", 4) == 0,
        "features: bad magic in '" + path + "' at byte offset 0");
  uint32_t version = detail::get_u32le(p + 4);
  check(version == 1, "features: unsupported version " +
                          std::to_string(version) + " at byte offset 4");
  uint64_t rows = detail::get_u64le(p + 8);
  uint64_t cols = detail::get_u64le(p + 16);
  check(rows > 0 && cols > 0 && rows <= (1ull << 40) && cols <= (1ull << 20),
        "features: implausible dims " + std::to_string(rows) + "x" +
            std::to_string(cols) + " in header");
  uint64_t expect = 24 + rows * cols * 4;
  check(bytes.size() == expect,
        "features: '" + path + "' has " + std::to_string(bytes.size()) +
            " bytes, expected " + std::to_string(expect) +
            " (truncated or trailing garbage at byte offset " +
            std::to_string(std::min<uint64_t>(bytes.size(), expect)) + ")");
  FeatureMatrix m;
  m.rows = static_cast<int64_t>(rows);
  m.cols = static_cast<int64_t>(cols);
  m.data.resize(rows * cols);
  for (size_t i = 0; i < m.data.size(); ++i) {
    uint32_t u = detail::get_u32le(p + 24 + i * 4);
    float v;
    std::memcpy(&v, &u, 4);
    if (!std::isfinite(v))
      throw TensorError("features: non-finite value at row " +
                        std::to_string(i / cols) + ", col " +
                        std::to_string(i % cols));
    m.data[i] = v;
  }
  return m;
}

// ------------------------------- corpora --------------------------------

struct Sentence {
  std::vector<int> src;
  std::vector<int> tgt;
  int64_t feature_row = -1;  // index into an attached FeatureMatrix
  int feature_bank = 0;      // which matrix, when several are attached
  bool synthetic = false;
};

struct ParallelCorpus {
  std::vector<Sentence> sentences;

  int64_t size() const { return static_cast<int64_t>(sentences.size()); }
  bool empty() const { return sentences.empty(); }
};

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "corpus: cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

// Parallel files aligned by line number; optional feature rows attach by
// the same line index.
inline ParallelCorpus load_corpus(const std::vector<std::string>& src_lines,
                                  const std::vector<std::string>& tgt_lines,
                                  const Vocab& vocab, BpeApplier* bpe,
                                  bool attach_features = false,
                                  bool synthetic = false,
                                  int feature_bank = 0) {
  check(src_lines.size() == tgt_lines.size(),
        "corpus: source has " + std::to_string(src_lines.size()) +
            " lines but target has " + std::to_string(tgt_lines.size()));
  ParallelCorpus c;
  c.sentences.reserve(src_lines.size());
  for (size_t i = 0; i < src_lines.size(); ++i) {
    Sentence s;
    s.src = vocab.to_ids(tokenize_line(src_lines[i], bpe));
    s.tgt = vocab.to_ids(tokenize_line(tgt_lines[i], bpe));
    s.feature_row = attach_features ? static_cast<int64_t>(i) : -1;
    s.feature_bank = feature_bank;
    s.synthetic = synthetic;
    c.sentences.push_back(std::move(s));
  }
  return c;
}

// ------------------------------- batching -------------------------------

// Epoch-level shuffle by seed, padding to the longest sentence per batch;
// the final short batch is kept. `banks` holds one matrix per feature bank
// referenced by the corpus (empty when the model takes no images).
inline std::vector<Batch> make_batches(
    const ParallelCorpus& corpus, int batch_size, uint64_t seed,
    const std::vector<const FeatureMatrix*>& banks) {
  check(!corpus.empty(), "make_batches: empty corpus");
  check(batch_size >= 1, "make_batches: batch size must be >= 1");
  std::vector<int64_t> order(corpus.size());
  for (int64_t i = 0; i < corpus.size(); ++i) order[i] = i;
  Rng rng = Rng::derive(seed, {0xba7c});
  for (int64_t i = corpus.size() - 1; i > 0; --i) {
    size_t j = rng.uniform_index(static_cast<size_t>(i) + 1);
    std::swap(order[i], order[j]);
  }

  std::vector<Batch> batches;
  for (int64_t start = 0; start < corpus.size(); start += batch_size) {
    int64_t end = std::min<int64_t>(start + batch_size, corpus.size());
    Batch b;
    int src_max = 0, tgt_max = 0;
    for (int64_t k = start; k < end; ++k) {
      const Sentence& s = corpus.sentences[order[k]];
      src_max = std::max<int>(src_max, static_cast<int>(s.src.size()));
      tgt_max = std::max<int>(tgt_max, static_cast<int>(s.tgt.size()));
    }
    for (int64_t k = start; k < end; ++k) {
      const Sentence& s = corpus.sentences[order[k]];
      std::vector<int> src = s.src, tgt = s.tgt;
      src.resize(src_max, kPadId);
      tgt.resize(tgt_max, kPadId);
      b.src.push_back(std::move(src));
      b.tgt.push_back(std::move(tgt));
      b.src_len.push_back(static_cast<int>(s.src.size()));
      b.tgt_len.push_back(static_cast<int>(s.tgt.size()));
      b.synthetic.push_back(s.synthetic ? 1 : 0);
      if (!banks.empty()) {
        check(s.feature_row >= 0,
              "make_batches: sentence lacks a feature row");
        check(s.feature_bank >= 0 &&
                  s.feature_bank < static_cast<int>(banks.size()) &&
                  banks[s.feature_bank] != nullptr,
              "make_batches: sentence references missing feature bank " +
                  std::to_string(s.feature_bank));
        b.features.push_back(banks[s.feature_bank]->row(s.feature_row));
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

// Convenience overload for a single feature matrix (bank 0).
inline std::vector<Batch> make_batches(const ParallelCorpus& corpus,
                                       int batch_size, uint64_t seed,
                                       const FeatureMatrix* features) {
  std::vector<const FeatureMatrix*> banks;
  if (features) banks.push_back(features);
  return make_batches(corpus, batch_size, seed, banks);
}

// One pretraining epoch: every synthetic example exactly once, gold
// resampled with replacement to the same count (taken as-is when the sizes
// already match). Origin flags survive.
inline ParallelCorpus mix_upsample(const ParallelCorpus& gold,
                                   const ParallelCorpus& synthetic,
                                   uint64_t seed) {
  check(!gold.empty() && !synthetic.empty(),
        "mix_upsample: both corpora must be non-empty");
  ParallelCorpus epoch;
  epoch.sentences = synthetic.sentences;
  if (gold.size() == synthetic.size()) {
    epoch.sentences.insert(epoch.sentences.end(), gold.sentences.begin(),
                           gold.sentences.end());
  } else {
    Rng rng = Rng::derive(seed, {0x901d});
    for (int64_t i = 0; i < synthetic.size(); ++i) {
      size_t j = rng.uniform_index(static_cast<size_t>(gold.size()));
      epoch.sentences.push_back(gold.sentences[j]);
    }
  }
  return epoch;
}

// ---------------------------- synthetic task ----------------------------

// Deterministic grounded-translation stand-in: sources are uniform random
// token sequences, targets are word-by-word lexicon substitution followed
// by reversal, and image features are a fixed random projection of the
// target bag-of-words plus Gaussian noise. A perfect model scores BLEU 100
// and can predict features from the target semantics.
struct SynthData {
  Vocab vocab;
  ParallelCorpus corpus;
  FeatureMatrix features;
  // The projection used to generate features (|tgt lexicon| columns),
  // exposed so tests can verify recoverability.
  std::vector<double> projection;  // o x |tgt_lexicon|, row-major
  std::vector<std::string> src_words;
  std::vector<std::string> tgt_words;
};

inline SynthData synth_task(uint64_t seed, int64_t n_pairs,
                            const std::vector<std::string>& src_vocab,
                            const std::map<std::string, std::string>& lexicon,
                            int feature_dim, double noise_sigma) {
  check(feature_dim >= 4, "synth_task: feature dim must be >= 4");
  check(!src_vocab.empty(), "synth_task: empty source vocabulary");
  check(lexicon.size() == src_vocab.size(),
        "synth_task: lexicon must cover the source vocabulary");

  SynthData d;
  d.src_words = src_vocab;
  for (const auto& w : src_vocab) {
    auto it = lexicon.find(w);
    check(it != lexicon.end(), "synth_task: lexicon misses '" + w + "'");
    d.tgt_words.push_back(it->second);
  }
  for (const auto& w : d.src_words) d.vocab.add(w);
  for (const auto& w : d.tgt_words) d.vocab.add(w);

  int tv = static_cast<int>(d.tgt_words.size());
  Rng rng = Rng::derive(seed, {0x5f9d});
  d.projection.resize(static_cast<size_t>(feature_dim) * tv);
  for (auto& v : d.projection) v = rng.normal(0.0, 0.5);

  d.features.rows = n_pairs;
  d.features.cols = feature_dim;
  d.features.data.resize(static_cast<size_t>(n_pairs) * feature_dim);

  for (int64_t i = 0; i < n_pairs; ++i) {
    int len = 3 + static_cast<int>(rng.uniform_index(10));  // 3..12
    Sentence s;
    std::vector<int> bow(tv, 0);
    for (int t = 0; t < len; ++t) {
      int w = static_cast<int>(rng.uniform_index(d.src_words.size()));
      s.src.push_back(d.vocab.id(d.src_words[w]));
      s.tgt.push_back(d.vocab.id(d.tgt_words[w]));
      bow[w] += 1;
    }
    std::reverse(s.tgt.begin(), s.tgt.end());
    s.feature_row = i;
    for (int o = 0; o < feature_dim; ++o) {
      double v = 0;
      for (int w = 0; w < tv; ++w)
        v += d.projection[static_cast<size_t>(o) * tv + w] * bow[w];
      if (noise_sigma > 0.0) v += rng.normal(0.0, noise_sigma);
      d.features.data[static_cast<size_t>(i) * feature_dim + o] =
          static_cast<float>(v);
    }
    d.corpus.sentences.push_back(std::move(s));
  }
  return d;
}

// Default word lists for the CLI: src00..srcNN mapped to tgt00..tgtNN.
inline std::vector<std::string> default_synth_src_vocab(int n = 30) {
  std::vector<std::string> v;
  for (int i = 0; i < n; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "src%02d", i);
    v.push_back(buf);
  }
  return v;
}

inline std::map<std::string, std::string> default_synth_lexicon(int n = 30) {
  std::map<std::string, std::string> m;
  for (int i = 0; i < n; ++i) {
    char a[16], b[16];
    std::snprintf(a, sizeof(a), "src%02d", i);
    std::snprintf(b, sizeof(b), "tgt%02d", i);
    m[a] = b;
  }
  return m;
}

}  // namespace vmmt
