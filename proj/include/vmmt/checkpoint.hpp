#pragma once

// Checkpoints: parameters stored as f32 plus a JSON metadata blob carrying
// the model config, vocabulary, BPE merges and training metadata, so a
// checkpoint file is self-contained for translate/evaluate.
//
// On disk: magic "VMCK" | version u32 LE = 1 | entry count u32 LE |
// per entry: name length u16 LE, UTF-8 name, rank u8, dims u64 LE each,
// f32 LE data | metadata length u64 LE | UTF-8 JSON metadata.

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vmmt/bpe.hpp"
#include "vmmt/data.hpp"
#include "vmmt/model.hpp"
#include "vmmt/params.hpp"
#include "vmmt/vocab.hpp"

namespace vmmt {

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"variant", to_string(cfg.variant)},
                        {"vocab_size", cfg.vocab_size},
                        {"embed_dim", cfg.embed_dim},
                        {"hidden_dim", cfg.hidden_dim},
                        {"latent_dim", cfg.latent_dim},
                        {"image_dim", cfg.image_dim},
                        {"obs_scale", cfg.obs_scale},
                        {"free_bits", cfg.free_bits},
                        {"dropout", cfg.dropout},
                        {"cell_type", to_string(cfg.cell_type)},
                        {"image_loss_weight", cfg.image_loss_weight},
                        {"enc_layers", cfg.enc_layers}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.variant = variant_from_string(j.value("variant", "vmmt_f"));
  cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
  cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
  cfg.hidden_dim = j.value("hidden_dim", cfg.hidden_dim);
  cfg.latent_dim = j.value("latent_dim", cfg.latent_dim);
  cfg.image_dim = j.value("image_dim", cfg.image_dim);
  cfg.obs_scale = j.value("obs_scale", cfg.obs_scale);
  cfg.free_bits = j.value("free_bits", cfg.free_bits);
  cfg.dropout = j.value("dropout", cfg.dropout);
  cfg.cell_type = cell_type_from_string(j.value("cell_type", "lstm"));
  cfg.image_loss_weight = j.value("image_loss_weight", cfg.image_loss_weight);
  cfg.enc_layers = j.value("enc_layers", cfg.enc_layers);
  return cfg;
}

struct Checkpoint {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };
  std::vector<Entry> entries;
  ModelConfig config;
  Vocab vocab;
  BpeModel bpe;
  int epoch = 0;
  double best_val_bleu = -1.0;
  uint64_t seed = 0;

  // Rounds parameters to f32 storage precision.
  static Checkpoint from_store(const ParamStore& store,
                               const ModelConfig& cfg, const Vocab& vocab,
                               const BpeModel& bpe, int epoch,
                               double best_val_bleu, uint64_t seed) {
    Checkpoint ck;
    ck.config = cfg;
    ck.vocab = vocab;
    ck.bpe = bpe;
    ck.epoch = epoch;
    ck.best_val_bleu = best_val_bleu;
    ck.seed = seed;
    for (const auto& p : store.all()) {
      Entry e;
      e.name = p.name;
      e.shape = p.shape;
      e.data.assign(p.data.begin(), p.data.end());
      ck.entries.push_back(std::move(e));
    }
    return ck;
  }

  // Widens f32 storage back to the f64 working representation.
  ParamStore to_store() const {
    ParamStore store = build_params(config);
    check(store.size() == entries.size(),
          "checkpoint: expected " + std::to_string(store.size()) +
              " parameters for this config, file has " +
              std::to_string(entries.size()));
    for (const auto& e : entries) {
      Param& p = store.at(e.name);
      check(p.shape == e.shape, "checkpoint: shape mismatch for '" + e.name +
                                    "': " + shape_str(p.shape) + " vs " +
                                    shape_str(e.shape));
      p.data.assign(e.data.begin(), e.data.end());
    }
    return store;
  }

  void save(const std::string& path) const {
    std::string bytes;
    bytes += "VMCK";
    detail::put_u32le(bytes, 1);
    detail::put_u32le(bytes, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
      check(e.name.size() <= 0xFFFF, "checkpoint: name too long");
      bytes.push_back(static_cast<char>(e.name.size() & 0xFF));
      bytes.push_back(static_cast<char>((e.name.size() >> 8) & 0xFF));
      bytes += e.name;
      bytes.push_back(static_cast<char>(e.shape.size()));
      for (int d : e.shape)
        detail::put_u64le(bytes, static_cast<uint64_t>(d));
      size_t off = bytes.size();
      bytes.resize(off + e.data.size() * 4);
      for (size_t i = 0; i < e.data.size(); ++i) {
        uint32_t u;
        std::memcpy(&u, &e.data[i], 4);
        for (int k = 0; k < 4; ++k)
          bytes[off + i * 4 + k] = static_cast<char>(u >> (8 * k));
      }
    }
    nlohmann::json meta{{"config", config_to_json(config)},
                        {"vocab", vocab.tokens()},
                        {"epoch", epoch},
                        {"best_val_bleu", best_val_bleu},
                        {"seed", seed}};
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [l, r] : bpe.merges)
      merges.push_back(nlohmann::json::array({l, r}));
    meta["bpe_merges"] = merges;
    std::string meta_s = meta.dump();
    detail::put_u64le(bytes, meta_s.size());
    bytes += meta_s;
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "checkpoint: cannot open '" + path + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    check(f.good(), "checkpoint: write to '" + path + "' failed");
  }

  static Checkpoint load(const std::string& path) {
    std::string bytes = detail::read_file_bytes(path, "checkpoint");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    size_t n = bytes.size(), off = 0;
    auto need = [&](size_t k, const char* what) {
      check(off + k <= n, "checkpoint: '" + path + "' truncated at byte " +
                              std::to_string(off) + " reading " + what);
    };
    need(12, "header");
    check(std::memcmp(p, "VMCK", 4) == 0,
          "checkpoint: bad magic in '" + path + "'");
    uint32_t version = detail::get_u32le(p + 4);
    check(version == 1,
          "checkpoint: unsupported version " + std::to_string(version));
    uint32_t count = detail::get_u32le(p + 8);
    off = 12;
    Checkpoint ck;
    for (uint32_t e = 0; e < count; ++e) {
      need(2, "name length");
      size_t name_len = p[off] | (static_cast<size_t>(p[off + 1]) << 8);
      off += 2;
      need(name_len, "name");
      Entry entry;
      entry.name.assign(bytes.data() + off, name_len);
      off += name_len;
      need(1, "rank");
      int rank = p[off++];
      int64_t numel_ = 1;
      for (int d = 0; d < rank; ++d) {
        need(8, "dim");
        uint64_t dim = detail::get_u64le(p + off);
        off += 8;
        check(dim > 0 && dim <= (1ull << 32), "checkpoint: bad dim");
        entry.shape.push_back(static_cast<int>(dim));
        numel_ *= static_cast<int64_t>(dim);
      }
      need(static_cast<size_t>(numel_) * 4, "tensor data");
      entry.data.resize(numel_);
      for (int64_t i = 0; i < numel_; ++i) {
        uint32_t u = detail::get_u32le(p + off + i * 4);
        std::memcpy(&entry.data[i], &u, 4);
      }
      off += static_cast<size_t>(numel_) * 4;
      ck.entries.push_back(std::move(entry));
    }
    need(8, "metadata length");
    uint64_t meta_len = detail::get_u64le(p + off);
    off += 8;
    need(meta_len, "metadata");
    nlohmann::json meta =
        nlohmann::json::parse(bytes.substr(off, meta_len));
    off += meta_len;
    check(off == n, "checkpoint: trailing bytes after metadata");
    ck.config = config_from_json(meta.at("config"));
    ck.vocab = Vocab(
        [&meta]() {
          std::vector<std::string> toks =
              meta.at("vocab").get<std::vector<std::string>>();
          check(toks.size() >= reserved_tokens().size(),
                "checkpoint: vocab too short");
          return std::vector<std::string>(
              toks.begin() + reserved_tokens().size(), toks.end());
        }());
    for (const auto& m : meta.at("bpe_merges"))
      ck.bpe.merges.emplace_back(m.at(0).get<std::string>(),
                                 m.at(1).get<std::string>());
    ck.epoch = meta.value("epoch", 0);
    ck.best_val_bleu = meta.value("best_val_bleu", -1.0);
    ck.seed = meta.value("seed", 0ull);
    return ck;
  }
};

}  // namespace vmmt
