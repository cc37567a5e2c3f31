#include "tailorkv/kv_model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace tailorkv {

void ModelConfig::validate() const {
  if (num_layers < 1) throw ParameterError("num_layers must be >= 1");
  if (head_dim < 1) throw ParameterError("head_dim must be >= 1");
  if (num_kv_heads < 1 || num_query_heads < 1) {
    throw ParameterError("head counts must be >= 1");
  }
  if (num_query_heads % num_kv_heads != 0) {
    throw ParameterError("num_query_heads must be divisible by num_kv_heads");
  }
}

LayerKV::LayerKV(std::size_t num_kv_heads, std::size_t head_dim)
    : head_dim_(head_dim),
      keys_(num_kv_heads, Matrix(0, head_dim)),
      values_(num_kv_heads, Matrix(0, head_dim)) {}

LayerKV::LayerKV(std::vector<Matrix> keys, std::vector<Matrix> values)
    : keys_(std::move(keys)), values_(std::move(values)) {
  if (keys_.size() != values_.size() || keys_.empty()) {
    throw DimensionError("key and value head counts differ or are zero");
  }
  head_dim_ = keys_.front().cols();
  seq_len_ = keys_.front().rows();
  for (std::size_t h = 0; h < keys_.size(); ++h) {
    if (keys_[h].rows() != seq_len_ || values_[h].rows() != seq_len_ ||
        keys_[h].cols() != head_dim_ || values_[h].cols() != head_dim_) {
      throw DimensionError("inconsistent per-head cache shapes");
    }
  }
}

void LayerKV::append(const Matrix& new_keys, const Matrix& new_values) {
  if (new_keys.rows() != keys_.size() || new_values.rows() != keys_.size() ||
      new_keys.cols() != head_dim_ || new_values.cols() != head_dim_) {
    throw DimensionError("append expects [" + std::to_string(keys_.size()) + " x " +
                         std::to_string(head_dim_) + "] key and value blocks");
  }
  for (std::size_t h = 0; h < keys_.size(); ++h) {
    keys_[h].append_row(new_keys.row(h));
    values_[h].append_row(new_values.row(h));
  }
  ++seq_len_;
}

LayerKV append_kv(LayerKV cache, const Matrix& new_keys, const Matrix& new_values) {
  cache.append(new_keys, new_values);
  return cache;
}

void require_finite(std::span<const float> values, const char* what) {
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

std::vector<float> softmax(std::span<const float> logits) {
  if (logits.empty()) throw EmptyCacheError("softmax over zero logits");
  const float peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> e(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(static_cast<double>(logits[i]) - peak);
    total += e[i];
  }
  std::vector<float> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = static_cast<float>(e[i] / total);
  }
  return out;
}

std::vector<float> attention_logits(std::span<const float> query, const Matrix& keys) {
  if (keys.empty()) throw EmptyCacheError("attention over an empty cache");
  if (query.size() != keys.cols()) {
    throw DimensionError("query width does not match key head_dim");
  }
  require_finite(query, "query");
  const double scale = 1.0 / std::sqrt(static_cast<double>(keys.cols()));
  std::vector<float> logits(keys.rows());
  for (std::size_t t = 0; t < keys.rows(); ++t) {
    const auto k = keys.row(t);
    double acc = 0.0;
    for (std::size_t c = 0; c < query.size(); ++c) acc += double(query[c]) * k[c];
    logits[t] = static_cast<float>(acc * scale);
  }
  return logits;
}

std::vector<float> attention_weights(std::span<const float> query, const Matrix& keys) {
  return softmax(attention_logits(query, keys));
}

std::vector<float> weighted_sum(std::span<const float> weights, const Matrix& values) {
  if (weights.size() != values.rows()) {
    throw DimensionError("weight count does not match value rows");
  }
  std::vector<double> acc(values.cols(), 0.0);
  for (std::size_t t = 0; t < values.rows(); ++t) {
    const auto v = values.row(t);
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += double(weights[t]) * v[c];
  }
  return {acc.begin(), acc.end()};
}

std::vector<float> exact_attention(std::span<const float> query, const Matrix& keys,
                                   const Matrix& values) {
  if (keys.rows() != values.rows()) throw DimensionError("key/value row mismatch");
  return weighted_sum(attention_weights(query, keys), values);
}

Matrix exact_attention(const Matrix& queries, const LayerKV& cache) {
  if (cache.num_heads() == 0 || queries.rows() % cache.num_heads() != 0) {
    throw DimensionError("query heads not divisible by KV heads");
  }
  const std::size_t group = queries.rows() / cache.num_heads();
  Matrix out(queries.rows(), cache.head_dim());
  for (std::size_t j = 0; j < queries.rows(); ++j) {
    const std::size_t kv = j / group;
    const auto o = exact_attention(queries.row(j), cache.keys(kv), cache.values(kv));
    std::copy(o.begin(), o.end(), out.row(j).begin());
  }
  return out;
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("cosine over different lengths");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("diff over different lengths");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(double(a[i]) - b[i]));
  }
  return m;
}

}  // namespace tailorkv
