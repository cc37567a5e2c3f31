#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tailorkv/kv_model.hpp"

namespace tailorkv {

struct RetrievalConfig {
  std::size_t n_local = 64;   // most recent tokens, always resident
  std::size_t n_topk = 128;   // tokens fetched per step
  std::size_t d_s = 8;        // critical channels

  void validate(std::size_t head_dim) const;
  friend bool operator==(const RetrievalConfig&, const RetrievalConfig&) = default;
};

struct CriticalChannelSet {
  std::vector<float> channel_scores;
  std::vector<std::size_t> selected;  // ascending
};

struct QueryEstimate {
  Matrix q_hat;  // [num_query_heads x head_dim]
  std::size_t source_layer = 0;
};

// Running per-channel max |K| for one KV head, updated on append.
class ChannelMax {
 public:
  ChannelMax() = default;
  explicit ChannelMax(std::size_t head_dim) : max_abs_(head_dim, 0.0f) {}
  explicit ChannelMax(const Matrix& keys);

  void update(std::span<const float> key_row);
  std::span<const float> values() const { return max_abs_; }
  std::size_t tokens() const { return tokens_; }

 private:
  std::vector<float> max_abs_;
  std::size_t tokens_ = 0;
};

// hidden [1 x d] times w_q [d x num_query_heads*head_dim], split per head.
QueryEstimate estimate_query(const Matrix& w_q, std::span<const float> hidden,
                             std::size_t num_query_heads, std::size_t source_layer);

// s_i = |q_i| * max_t |K[t, i]|
std::vector<float> channel_scores(std::span<const float> q_hat, const Matrix& keys);
std::vector<float> channel_scores(std::span<const float> q_hat, const ChannelMax& maxima);

// GQA form: s_i = (sum over the group's query heads of |q_hat[j, i]|) * max|K_i|.
// Rows [first_head, first_head + group) of q_hat share the KV head.
std::vector<float> group_channel_scores(const Matrix& q_hat, std::size_t first_head,
                                        std::size_t group, const ChannelMax& maxima);

// Top-d_s channels by score, ties to the lower index, returned ascending.
CriticalChannelSet select_critical_channels(std::vector<float> scores, std::size_t d_s);

// Columns `channels` of a [n x d_h] matrix (the critical key slice).
Matrix gather_channels(const Matrix& keys, std::span<const std::size_t> channels);
std::vector<float> gather_channels(std::span<const float> row,
                                   std::span<const std::size_t> channels);

// Unscaled partial dot products: logit_t = sum_i query_slice[i] * critical_keys[t, i].
std::vector<float> approx_scores(std::span<const float> query_slice,
                                 const Matrix& critical_keys);

// Local window of the n_local newest tokens plus the n_topk best-scoring
// tokens before it. Ties go to the more recent token. Ascending order.
std::vector<std::size_t> select_topk_tokens(std::span<const float> scores,
                                            const RetrievalConfig& config);

// The k highest-weight tokens, ties to the more recent token. Ascending order.
std::vector<std::size_t> exact_topk_tokens(std::span<const float> weights, std::size_t k);

// Exact softmax attention restricted to already-gathered rows.
std::vector<float> sparse_attention(std::span<const float> query, const Matrix& selected_keys,
                                    const Matrix& selected_values);
std::vector<float> sparse_attention(std::span<const float> query, const Matrix& keys,
                                    const Matrix& values,
                                    std::span<const std::size_t> indices);

// |selected ∩ exact| / |exact|
double recall_at_k(std::span<const std::size_t> selected,
                   std::span<const std::size_t> exact_topk);

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices);

}  // namespace tailorkv
