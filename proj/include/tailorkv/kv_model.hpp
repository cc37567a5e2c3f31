#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tailorkv/matrix.hpp"

namespace tailorkv {

struct ModelConfig {
  std::size_t num_layers = 1;
  std::size_t num_query_heads = 1;
  std::size_t num_kv_heads = 1;
  std::size_t head_dim = 1;

  // Stored elements are 16-bit floats; all footprint accounting uses this.
  static constexpr std::size_t element_bytes = 2;

  std::size_t hidden_dim() const { return num_query_heads * head_dim; }
  // Query heads sharing one KV head.
  std::size_t gqa_group() const { return num_query_heads / num_kv_heads; }
  std::size_t kv_head_of(std::size_t query_head) const {
    return query_head / gqa_group();
  }

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Per-layer key/value cache: one [n x head_dim] matrix per KV head.
class LayerKV {
 public:
  LayerKV() = default;
  LayerKV(std::size_t num_kv_heads, std::size_t head_dim);
  LayerKV(std::vector<Matrix> keys, std::vector<Matrix> values);

  std::size_t num_heads() const { return keys_.size(); }
  std::size_t head_dim() const { return head_dim_; }
  std::size_t seq_len() const { return seq_len_; }
  bool empty() const { return seq_len_ == 0; }

  const Matrix& keys(std::size_t head) const { return keys_.at(head); }
  const Matrix& values(std::size_t head) const { return values_.at(head); }

  // Appends one token. Both arguments are [num_kv_heads x head_dim].
  void append(const Matrix& new_keys, const Matrix& new_values);

  friend bool operator==(const LayerKV&, const LayerKV&) = default;

 private:
  std::size_t head_dim_ = 0;
  std::size_t seq_len_ = 0;
  std::vector<Matrix> keys_;
  std::vector<Matrix> values_;
};

// Value-returning form of LayerKV::append; the argument cache is untouched.
LayerKV append_kv(LayerKV cache, const Matrix& new_keys, const Matrix& new_values);

// Max-subtracted softmax, accumulated in double.
std::vector<float> softmax(std::span<const float> logits);

// q K^T / sqrt(d_h) for one head.
std::vector<float> attention_logits(std::span<const float> query, const Matrix& keys);

// softmax(q K^T / sqrt(d_h)).
std::vector<float> attention_weights(std::span<const float> query, const Matrix& keys);

// weights . V
std::vector<float> weighted_sum(std::span<const float> weights, const Matrix& values);

// softmax(q K^T / sqrt(d_h)) V for a single head.
std::vector<float> exact_attention(std::span<const float> query, const Matrix& keys,
                                   const Matrix& values);

// Grouped-query attention over a whole layer. queries is
// [num_query_heads x head_dim]; query head j reads KV head j / group.
Matrix exact_attention(const Matrix& queries, const LayerKV& cache);

void require_finite(std::span<const float> values, const char* what);

double cosine_similarity(std::span<const float> a, std::span<const float> b);
double max_abs_diff(std::span<const float> a, std::span<const float> b);

}  // namespace tailorkv
