#pragma once

// Named parameter store. Generative parameters carry the "gen." prefix,
// inference parameters the "inf." prefix; the optimizer and checkpoint code
// address parameters by name. Iteration order is insertion order, which is
// deterministic because model construction is.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "vmmt/rng.hpp"
#include "vmmt/tensor.hpp"

namespace vmmt {

enum class ParamKind { kWeight, kBias };

struct Param {
  std::string name;
  Shape shape;
  std::vector<double> data;
  ParamKind kind = ParamKind::kWeight;
};

class ParamStore {
 public:
  Param& add(const std::string& name, Shape shape, ParamKind kind) {
    check(index_.find(name) == index_.end(),
          "param '" + name + "' already exists");
    index_[name] = params_.size();
    params_.push_back(
        Param{name, shape, std::vector<double>(numel(shape), 0.0), kind});
    return params_.back();
  }

  Param& add_weight(const std::string& name, Shape shape) {
    return add(name, std::move(shape), ParamKind::kWeight);
  }
  Param& add_bias(const std::string& name, Shape shape) {
    return add(name, std::move(shape), ParamKind::kBias);
  }

  bool has(const std::string& name) const {
    return index_.find(name) != index_.end();
  }

  Param& at(const std::string& name) {
    auto it = index_.find(name);
    check(it != index_.end(), "unknown parameter '" + name + "'");
    return params_[it->second];
  }
  const Param& at(const std::string& name) const {
    auto it = index_.find(name);
    check(it != index_.end(), "unknown parameter '" + name + "'");
    return params_[it->second];
  }

  size_t size() const { return params_.size(); }
  const std::vector<Param>& all() const { return params_; }
  std::vector<Param>& all() { return params_; }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& p : params_) n += numel(p.shape);
    return n;
  }

  // Weights ~ U(-0.1, +0.1), biases exactly zero.
  void init_uniform(Rng& rng, double lo = -0.1, double hi = 0.1) {
    for (auto& p : params_) {
      if (p.kind == ParamKind::kBias) {
        std::fill(p.data.begin(), p.data.end(), 0.0);
      } else {
        for (auto& v : p.data) v = rng.uniform(lo, hi);
      }
    }
  }

  // Every entry (biases included) ~ U(lo, hi). Gradient checks use this to
  // land at a point where ReLU pre-activations sit well away from the kink;
  // the training init (zero biases, tiny weights) puts them within the
  // finite-difference step of zero, where a secant is meaningless.
  void randomize_all(Rng& rng, double lo, double hi) {
    for (auto& p : params_)
      for (auto& v : p.data) v = rng.uniform(lo, hi);
  }

 private:
  std::vector<Param> params_;
  std::unordered_map<std::string, size_t> index_;
};

// Gradients keyed by parameter name (only entries that received gradient).
using ParamGrads = std::unordered_map<std::string, std::vector<double>>;

// Binds store parameters to leaves on one tape. Each parameter becomes a
// single node no matter how often it is used, so gradients from repeated
// uses accumulate into one buffer.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const ParamStore& store)
      : tape_(tape), store_(store) {}

  Tensor operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Param& p = store_.at(name);
    Tensor t = tape_.leaf(p.shape, p.data, /*requires_grad=*/true);
    bound_.emplace(name, t);
    return t;
  }

  // Collects gradients accumulated on the tape for every bound parameter.
  ParamGrads grads() const {
    ParamGrads out;
    for (const auto& [name, tensor] : bound_) {
      if (tape_.has_grad(tensor.id())) out[name] = tape_.grad(tensor);
    }
    return out;
  }

  const ParamStore& store() const { return store_; }

 private:
  Tape& tape_;
  const ParamStore& store_;
  std::unordered_map<std::string, Tensor> bound_;
};

}  // namespace vmmt
