#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "xsmoe/model.hpp"
#include "xsmoe/ops.hpp"

namespace xsmoe {

struct SeqEncoderConfig {
  std::size_t dim = 32;
  std::size_t max_len = 10;
  std::size_t blocks = 2;
  std::size_t heads = 2;
  std::size_t ffn = 64;
  double dropout = 0.1;
};

template <typename T>
struct TransformerBlock {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> w1, b1, w2, b2;
  Tensor<T> ln2_g, ln2_b;

  static TransformerBlock init(std::size_t d, std::size_t ffn, Rng& rng) {
    const double s = 1.0 / std::sqrt(double(d));
    TransformerBlock b;
    b.wq = random_matrix<T>(d, d, s, rng);
    b.wk = random_matrix<T>(d, d, s, rng);
    b.wv = random_matrix<T>(d, d, s, rng);
    b.wo = random_matrix<T>(d, d, s, rng);
    b.bq = Tensor<T>::zeros({d}, true);
    b.bk = Tensor<T>::zeros({d}, true);
    b.bv = Tensor<T>::zeros({d}, true);
    b.bo = Tensor<T>::zeros({d}, true);
    b.w1 = random_matrix<T>(ffn, d, s, rng);
    b.b1 = Tensor<T>::zeros({ffn}, true);
    b.w2 = random_matrix<T>(d, ffn, 1.0 / std::sqrt(double(ffn)), rng);
    b.b2 = Tensor<T>::zeros({d}, true);
    b.ln1_g = Tensor<T>::from({d}, std::vector<T>(d, T(1)), true);
    b.ln1_b = Tensor<T>::zeros({d}, true);
    b.ln2_g = Tensor<T>::from({d}, std::vector<T>(d, T(1)), true);
    b.ln2_b = Tensor<T>::zeros({d}, true);
    return b;
  }

  std::vector<Tensor<T>> parameters() const {
    return {wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b};
  }
};

/// Transformer encoder over left-padded item-embedding prefixes. Sequence b
/// occupies rows [b*L, (b+1)*L); its real items sit in the last len_b slots.
template <typename T>
class SeqEncoder {
 public:
  SeqEncoderConfig config;
  Tensor<T> positions;  // [L, d]
  Tensor<T> ln_g, ln_b;
  std::vector<TransformerBlock<T>> blocks;

  static SeqEncoder init(const SeqEncoderConfig& cfg, Rng& rng) {
    if (cfg.dim == 0 || cfg.max_len == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0)
      throw ConfigError("sequence encoder: dim must be a positive multiple of heads");
    SeqEncoder enc;
    enc.config = cfg;
    enc.positions = random_matrix<T>(cfg.max_len, cfg.dim, 0.02, rng);
    enc.ln_g = Tensor<T>::from({cfg.dim}, std::vector<T>(cfg.dim, T(1)), true);
    enc.ln_b = Tensor<T>::zeros({cfg.dim}, true);
    for (std::size_t i = 0; i < cfg.blocks; ++i) enc.blocks.push_back(TransformerBlock<T>::init(cfg.dim, cfg.ffn, rng));
    return enc;
  }

  /// Per-position outputs, [batch*L, d].
  Tensor<T> encode_all(const Tensor<T>& seq, std::size_t batch, const std::vector<std::size_t>& lengths,
                       bool training, Rng& rng) const {
    const std::size_t L = config.max_len, d = config.dim;
    if (seq.rank() != 2 || seq.dim(0) != batch * L || seq.dim(1) != d)
      throw ShapeError("encode_sequence: input " + shape_str(seq.shape()) + " for batch " +
                       std::to_string(batch) + " x L " + std::to_string(L) + " x d " + std::to_string(d));
    if (lengths.size() != batch) throw ContractError("encode_sequence: one length per sequence");
    std::vector<std::size_t> first_valid(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      if (lengths[b] == 0) throw ContractError("encode_sequence: empty prefix");
      if (lengths[b] > L) throw ContractError("encode_sequence: prefix longer than max_len");
      first_valid[b] = L - lengths[b];
    }
    std::vector<std::size_t> pos_index(batch * L);
    for (std::size_t i = 0; i < pos_index.size(); ++i) pos_index[i] = i % L;

    Tensor<T> x = add(seq, gather_rows(positions, std::move(pos_index)));
    x = dropout(layer_norm_rows(x, ln_g, ln_b), config.dropout, rng, training);
    for (const auto& blk : blocks) {
      Tensor<T> q = add_bias(matmul_nt(x, blk.wq), blk.bq);
      Tensor<T> k = add_bias(matmul_nt(x, blk.wk), blk.bk);
      Tensor<T> v = add_bias(matmul_nt(x, blk.wv), blk.bv);
      Tensor<T> a = causal_attention(q, k, v, batch, L, config.heads, first_valid);
      a = add_bias(matmul_nt(a, blk.wo), blk.bo);
      x = layer_norm_rows(add(x, dropout(a, config.dropout, rng, training)), blk.ln1_g, blk.ln1_b);
      Tensor<T> f = add_bias(matmul_nt(gelu(add_bias(matmul_nt(x, blk.w1), blk.b1)), blk.w2), blk.b2);
      x = layer_norm_rows(add(x, dropout(f, config.dropout, rng, training)), blk.ln2_g, blk.ln2_b);
    }
    return x;
  }

  /// User representations: the last slot of each sequence, [batch, d].
  Tensor<T> encode(const Tensor<T>& seq, std::size_t batch, const std::vector<std::size_t>& lengths,
                   bool training, Rng& rng) const {
    const std::size_t L = config.max_len;
    std::vector<std::size_t> last(batch);
    for (std::size_t b = 0; b < batch; ++b) last[b] = b * L + L - 1;
    return gather_rows(encode_all(seq, batch, lengths, training, rng), std::move(last));
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out{positions, ln_g, ln_b};
    for (const auto& b : blocks)
      for (auto& p : b.parameters()) out.push_back(p);
    return out;
  }
};

/// Single prefix of item embeddings ([len, d], oldest first) -> e_u ([1, d]).
template <typename T>
Tensor<T> encode_sequence(const SeqEncoder<T>& enc, const Tensor<T>& prefix, bool training, Rng& rng) {
  const std::size_t L = enc.config.max_len;
  if (prefix.rank() != 2 || prefix.dim(0) == 0) throw ContractError("encode_sequence: empty prefix");
  const std::size_t len = prefix.dim(0);
  if (len > L) throw ContractError("encode_sequence: prefix longer than max_len");
  std::vector<std::size_t> idx(L, kPadRow);
  for (std::size_t i = 0; i < len; ++i) idx[L - len + i] = i;
  return enc.encode(gather_rows(prefix, std::move(idx)), 1, {len}, training, rng);
}

/// y_ui = e_i . e_u
template <typename T>
T score(std::span<const T> e_u, std::span<const T> e_i) {
  if (e_u.size() != e_i.size()) throw ShapeError("score: dimension mismatch");
  T s = T(0);
  for (std::size_t c = 0; c < e_u.size(); ++c) s += e_u[c] * e_i[c];
  return s;
}

/// Item probabilities over the current training chunk, add-one smoothed over
/// the catalog. Indexed by dense item id; items outside the catalog hold 0.
struct PopularityTable {
  std::vector<double> prob;

  double operator[](std::size_t item) const { return prob.at(item); }
};

inline PopularityTable build_popularity(std::span<const std::size_t> chunk_items,
                                        std::span<const std::size_t> catalog, std::size_t universe) {
  if (chunk_items.empty()) throw ContractError("build_popularity: empty chunk");
  std::vector<std::size_t> counts(universe, 0);
  for (std::size_t i : chunk_items) {
    if (i >= universe) throw ContractError("build_popularity: item outside universe");
    ++counts[i];
  }
  PopularityTable t;
  t.prob.assign(universe, 0.0);
  const double denom = double(chunk_items.size() + catalog.size());
  for (std::size_t i : catalog) t.prob.at(i) = double(counts[i] + 1) / denom;
  return t;
}

/// Admissible columns of the in-batch softmax: row u keeps its own target and
/// each other row's target j unless j is in u's history, equals u's target,
/// or already appeared earlier in the row. histories[u] must be sorted.
inline std::vector<std::uint8_t> negative_mask(const std::vector<std::size_t>& targets,
                                               const std::vector<const std::vector<std::size_t>*>& histories) {
  const std::size_t n = targets.size();
  if (histories.size() != n) throw ContractError("negative_mask: one history per row");
  std::vector<std::uint8_t> mask(n * n, 0);
  std::vector<std::size_t> seen;
  for (std::size_t u = 0; u < n; ++u) {
    mask[u * n + u] = 1;
    seen.assign(1, targets[u]);
    const auto* hist = histories[u];
    for (std::size_t j = 0; j < n; ++j) {
      if (j == u) continue;
      const std::size_t item = targets[j];
      if (std::find(seen.begin(), seen.end(), item) != seen.end()) continue;
      if (hist && std::binary_search(hist->begin(), hist->end(), item)) continue;
      seen.push_back(item);
      mask[u * n + j] = 1;
    }
  }
  return mask;
}

/// In-batch debiased cross-entropy, averaged over rows. scores[u, j] is
/// y_{u, target_j}; every logit is shifted by -log p of its column's item.
template <typename T>
Tensor<T> batch_loss(const Tensor<T>& scores, const std::vector<std::size_t>& targets,
                     const std::vector<const std::vector<std::size_t>*>& histories,
                     const PopularityTable& pop) {
  const std::size_t n = targets.size();
  if (scores.rank() != 2 || scores.dim(0) != n || scores.dim(1) != n)
    throw ShapeError("batch_loss: scores " + shape_str(scores.shape()) + " for batch of " + std::to_string(n));
  std::vector<T> shift(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double p = pop[targets[j]];
    if (!(p > 0.0)) throw ContractError("batch_loss: non-positive popularity for item " + std::to_string(targets[j]));
    shift[j] = static_cast<T>(-std::log(p));
  }
  std::vector<std::size_t> diag(n);
  for (std::size_t u = 0; u < n; ++u) diag[u] = u;
  Tensor<T> adjusted = add_bias(scores, Tensor<T>::from({n}, std::move(shift)));
  return masked_cross_entropy(adjusted, negative_mask(targets, histories), std::move(diag));
}

}  // namespace xsmoe
