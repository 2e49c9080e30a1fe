#pragma once

// Recurrent cells, the stacked bidirectional source encoder, bilinear
// attention and one-hidden-layer MLPs. Everything is batched: activations
// are [B, dim] tensors, sequences are per-position vectors of them, and
// padding is handled with {0,1} mask columns that gate state updates.

#include <string>
#include <vector>

#include "vmmt/params.hpp"
#include "vmmt/tensor.hpp"

namespace vmmt {

enum class CellType { kLstm, kGru };

inline CellType cell_type_from_string(const std::string& s) {
  if (s == "lstm") return CellType::kLstm;
  if (s == "gru") return CellType::kGru;
  throw TensorError("unknown cell type '" + s + "' (expected lstm or gru)");
}

inline std::string to_string(CellType t) {
  return t == CellType::kLstm ? "lstm" : "gru";
}

struct RnnState {
  Tensor h;
  Tensor c;  // undefined for GRU
};

inline RnnState zero_state(Tape& tape, CellType type, int batch, int hidden) {
  RnnState s;
  s.h = tape.zeros({batch, hidden});
  if (type == CellType::kLstm) s.c = tape.zeros({batch, hidden});
  return s;
}

// --------------------------- parameter shapes ---------------------------

inline void add_affine_params(ParamStore& ps, const std::string& prefix,
                              int in_dim, int out_dim) {
  ps.add_weight(prefix + ".W", {in_dim, out_dim});
  ps.add_bias(prefix + ".b", {out_dim});
}

inline void add_cell_params(ParamStore& ps, CellType type,
                            const std::string& prefix, int in_dim,
                            int hidden) {
  if (type == CellType::kLstm) {
    ps.add_weight(prefix + ".W", {in_dim + hidden, 4 * hidden});
    ps.add_bias(prefix + ".b", {4 * hidden});
  } else {
    ps.add_weight(prefix + ".Wru", {in_dim + hidden, 2 * hidden});
    ps.add_bias(prefix + ".bru", {2 * hidden});
    ps.add_weight(prefix + ".Wn", {in_dim + hidden, hidden});
    ps.add_bias(prefix + ".bn", {hidden});
  }
}

inline void add_mlp_params(ParamStore& ps, const std::string& prefix,
                           int in_dim, int hidden, int out_dim) {
  add_affine_params(ps, prefix + ".l1", in_dim, hidden);
  add_affine_params(ps, prefix + ".l2", hidden, out_dim);
}

inline void add_birnn_params(ParamStore& ps, CellType type,
                             const std::string& prefix, int in_dim, int hidden,
                             int layers) {
  int d = in_dim;
  for (int l = 1; l <= layers; ++l) {
    std::string lp = prefix + ".l" + std::to_string(l);
    add_cell_params(ps, type, lp + ".fwd", d, hidden);
    add_cell_params(ps, type, lp + ".bwd", d, hidden);
    d = 2 * hidden;  // next layer consumes the fwd/bwd concatenation
  }
}

// ------------------------------- forward --------------------------------

inline Tensor affine_layer(const Tensor& x, ParamBinder& P,
                           const std::string& prefix) {
  return affine(x, P(prefix + ".W"), P(prefix + ".b"));
}

// Exactly one ReLU hidden layer; linear output.
inline Tensor mlp(const Tensor& x, ParamBinder& P, const std::string& prefix) {
  return affine_layer(relu(affine_layer(x, P, prefix + ".l1")), P,
                      prefix + ".l2");
}

// One gated update. LSTM: i,f,o = sigmoid(affine([x,h])), g = tanh(same
// affine block), c' = f*c + i*g, h' = o*tanh(c'). GRU: r,u = sigmoid,
// candidate tanh(affine([x, r*h])), h' = (1-u)*n + u*h.
inline RnnState rnn_cell_step(CellType type, const Tensor& x,
                              const RnnState& state, ParamBinder& P,
                              const std::string& prefix) {
  int hidden = state.h.shape()[1];
  if (type == CellType::kLstm) {
    Tensor z = affine(concat_cols(x, state.h), P(prefix + ".W"),
                      P(prefix + ".b"));
    Tensor i = sigmoid(slice_cols(z, 0, hidden));
    Tensor f = sigmoid(slice_cols(z, hidden, hidden));
    Tensor o = sigmoid(slice_cols(z, 2 * hidden, hidden));
    Tensor g = vtanh(slice_cols(z, 3 * hidden, hidden));
    RnnState out;
    out.c = add(mul(f, state.c), mul(i, g));
    out.h = mul(o, vtanh(out.c));
    return out;
  }
  Tensor ru = affine(concat_cols(x, state.h), P(prefix + ".Wru"),
                     P(prefix + ".bru"));
  Tensor r = sigmoid(slice_cols(ru, 0, hidden));
  Tensor u = sigmoid(slice_cols(ru, hidden, hidden));
  Tensor n = vtanh(affine(concat_cols(x, mul(r, state.h)), P(prefix + ".Wn"),
                          P(prefix + ".bn")));
  RnnState out;
  out.h = add(mul(u, state.h), sub(n, mul(u, n)));
  return out;
}

namespace detail {

// State gated by a {0,1} mask column: padded rows keep the previous state,
// so trailing pads never contaminate real positions (this matters for the
// backward direction, which starts at the pads).
inline RnnState masked_step(CellType type, const Tensor& x,
                            const RnnState& prev, const Tensor& mask_col,
                            const Tensor& inv_mask_col, ParamBinder& P,
                            const std::string& prefix) {
  RnnState nxt = rnn_cell_step(type, x, prev, P, prefix);
  RnnState out;
  out.h = add(row_scale(nxt.h, mask_col), row_scale(prev.h, inv_mask_col));
  if (type == CellType::kLstm)
    out.c = add(row_scale(nxt.c, mask_col), row_scale(prev.c, inv_mask_col));
  return out;
}

}  // namespace detail

// One bidirectional layer over a masked sequence; outputs the per-position
// forward/backward concatenation [B, 2*hidden].
inline std::vector<Tensor> bidirectional_layer(
    CellType type, const std::vector<Tensor>& xs,
    const std::vector<Tensor>& mask, const std::vector<Tensor>& inv_mask,
    ParamBinder& P, const std::string& prefix, int hidden) {
  int steps = static_cast<int>(xs.size());
  int batch = xs[0].shape()[0];
  Tape& tape = *xs[0].tape();

  std::vector<Tensor> fwd(steps), bwd(steps);
  RnnState s = zero_state(tape, type, batch, hidden);
  for (int i = 0; i < steps; ++i) {
    s = detail::masked_step(type, xs[i], s, mask[i], inv_mask[i], P,
                            prefix + ".fwd");
    fwd[i] = s.h;
  }
  s = zero_state(tape, type, batch, hidden);
  for (int i = steps - 1; i >= 0; --i) {
    s = detail::masked_step(type, xs[i], s, mask[i], inv_mask[i], P,
                            prefix + ".bwd");
    bwd[i] = s.h;
  }
  std::vector<Tensor> out(steps);
  for (int i = 0; i < steps; ++i) out[i] = concat_cols(fwd[i], bwd[i]);
  return out;
}

// Stacked bidirectional encoder over embedded tokens. Dropout is applied to
// the embeddings and between layers at train time. Layer parameter prefixes
// are "<prefix>.l<k>.{fwd,bwd}".
inline std::vector<Tensor> encode_source(
    CellType type, std::vector<Tensor> embeds, const std::vector<Tensor>& mask,
    const std::vector<Tensor>& inv_mask, ParamBinder& P,
    const std::string& prefix, int hidden, int layers, double dropout_rate,
    bool train, Rng* rng) {
  check(!embeds.empty(), "empty source");
  if (train && dropout_rate > 0.0)
    for (auto& e : embeds) e = dropout(e, dropout_rate, *rng);
  std::vector<Tensor> states = std::move(embeds);
  for (int l = 1; l <= layers; ++l) {
    if (l > 1 && train && dropout_rate > 0.0)
      for (auto& s : states) s = dropout(s, dropout_rate, *rng);
    states = bidirectional_layer(type, states, mask, inv_mask, P,
                                 prefix + ".l" + std::to_string(l), hidden);
  }
  return states;
}

// Masked mean over positions: sum_i mask_i * h_i, scaled per row by 1/len.
inline Tensor masked_average(const std::vector<Tensor>& states,
                             const std::vector<Tensor>& mask,
                             const Tensor& inv_len) {
  Tensor acc = row_scale(states[0], mask[0]);
  for (size_t i = 1; i < states.size(); ++i)
    acc = add(acc, row_scale(states[i], mask[i]));
  return row_scale(acc, inv_len);
}

struct AttentionOut {
  Tensor context;  // [B, key_dim]
  Tensor weights;  // [B, T]
};

// Bilinear attention: score_i = s_j^T W h_i with masked positions pushed to
// -1e9 before the softmax (a hard -inf would produce NaNs in exp).
inline AttentionOut bilinear_attention(const Tensor& query,
                                       const std::vector<Tensor>& keys,
                                       const std::vector<Tensor>& mask,
                                       ParamBinder& P,
                                       const std::string& prefix) {
  check(!keys.empty(), "attention: no keys");
  int batch = query.shape()[0];
  for (int r = 0; r < batch; ++r) {
    double any = 0;
    for (const auto& m : mask) any += m.value()[r];
    check(any > 0.0, "attention: all positions masked for row " +
                         std::to_string(r));
  }
  Tensor qw = matmul(query, P(prefix + ".W"));  // [B, key_dim]
  std::vector<Tensor> score_cols;
  score_cols.reserve(keys.size());
  for (size_t i = 0; i < keys.size(); ++i) {
    Tensor s = row_sum(mul(qw, keys[i]));  // [B,1]
    // (mask-1)*1e9 is 0 on real positions, -1e9 on pads; masks are
    // constants so this adds no gradient paths.
    Tensor bias = scalar_mul(add_scalar(mask[i], -1.0), 1e9);
    score_cols.push_back(add(s, bias));
  }
  AttentionOut out;
  out.weights = softmax_rows(concat_cols(score_cols));  // [B, T]
  Tensor ctx = row_scale(keys[0], slice_cols(out.weights, 0, 1));
  for (size_t i = 1; i < keys.size(); ++i)
    ctx = add(ctx, row_scale(keys[i], slice_cols(out.weights,
                                                 static_cast<int>(i), 1)));
  out.context = ctx;
  return out;
}

}  // namespace vmmt
