#include "tailorkv/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace tailorkv {

void RetrievalConfig::validate(std::size_t head_dim) const {
  if (d_s < 1 || d_s > head_dim) {
    throw ParameterError("critical channels d_s=" + std::to_string(d_s) +
                         " outside [1, " + std::to_string(head_dim) + "]");
  }
  if (n_topk < 1) throw ParameterError("n_topk must be >= 1");
}

ChannelMax::ChannelMax(const Matrix& keys) : max_abs_(keys.cols(), 0.0f) {
  for (std::size_t t = 0; t < keys.rows(); ++t) update(keys.row(t));
}

void ChannelMax::update(std::span<const float> key_row) {
  if (key_row.size() != max_abs_.size()) throw DimensionError("key row width mismatch");
  for (std::size_t i = 0; i < key_row.size(); ++i) {
    max_abs_[i] = std::max(max_abs_[i], std::abs(key_row[i]));
  }
  ++tokens_;
}

QueryEstimate estimate_query(const Matrix& w_q, std::span<const float> hidden,
                             std::size_t num_query_heads, std::size_t source_layer) {
  if (hidden.size() != w_q.rows()) {
    throw DimensionError("hidden state width " + std::to_string(hidden.size()) +
                         " does not match W_q rows " + std::to_string(w_q.rows()));
  }
  if (num_query_heads == 0 || w_q.cols() % num_query_heads != 0) {
    throw DimensionError("W_q columns not divisible by query heads");
  }
  require_finite(hidden, "hidden state");
  std::vector<double> acc(w_q.cols(), 0.0);
  for (std::size_t r = 0; r < w_q.rows(); ++r) {
    const double h = hidden[r];
    if (h == 0.0) continue;
    const auto w = w_q.row(r);
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += h * w[c];
  }
  QueryEstimate est;
  est.source_layer = source_layer;
  const std::size_t head_dim = w_q.cols() / num_query_heads;
  est.q_hat = Matrix(num_query_heads, head_dim);
  for (std::size_t c = 0; c < acc.size(); ++c) {
    est.q_hat(c / head_dim, c % head_dim) = static_cast<float>(acc[c]);
  }
  return est;
}

std::vector<float> channel_scores(std::span<const float> q_hat, const ChannelMax& maxima) {
  if (maxima.tokens() == 0) throw EmptyCacheError("channel scores over an empty cache");
  const auto m = maxima.values();
  if (q_hat.size() != m.size()) throw DimensionError("query width mismatch");
  std::vector<float> s(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) s[i] = std::abs(q_hat[i]) * m[i];
  return s;
}

std::vector<float> channel_scores(std::span<const float> q_hat, const Matrix& keys) {
  return channel_scores(q_hat, ChannelMax(keys));
}

std::vector<float> group_channel_scores(const Matrix& q_hat, std::size_t first_head,
                                        std::size_t group, const ChannelMax& maxima) {
  if (maxima.tokens() == 0) throw EmptyCacheError("channel scores over an empty cache");
  if (first_head + group > q_hat.rows()) throw DimensionError("query head range");
  const auto m = maxima.values();
  if (q_hat.cols() != m.size()) throw DimensionError("query width mismatch");
  std::vector<float> s(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    double mag = 0.0;
    for (std::size_t j = first_head; j < first_head + group; ++j) mag += std::abs(q_hat(j, i));
    s[i] = static_cast<float>(mag * m[i]);
  }
  return s;
}

CriticalChannelSet select_critical_channels(std::vector<float> scores, std::size_t d_s) {
  if (d_s < 1 || d_s > scores.size()) {
    throw ParameterError("d_s outside [1, head_dim]");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + d_s, order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
                    });
  order.resize(d_s);
  std::sort(order.begin(), order.end());
  return {std::move(scores), std::move(order)};
}

Matrix gather_channels(const Matrix& keys, std::span<const std::size_t> channels) {
  Matrix out(keys.rows(), channels.size());
  for (std::size_t t = 0; t < keys.rows(); ++t) {
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (channels[i] >= keys.cols()) throw DimensionError("channel index out of range");
      out(t, i) = keys(t, channels[i]);
    }
  }
  return out;
}

std::vector<float> gather_channels(std::span<const float> row,
                                   std::span<const std::size_t> channels) {
  std::vector<float> out(channels.size());
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] >= row.size()) throw DimensionError("channel index out of range");
    out[i] = row[channels[i]];
  }
  return out;
}

std::vector<float> approx_scores(std::span<const float> query_slice,
                                 const Matrix& critical_keys) {
  if (query_slice.size() != critical_keys.cols()) {
    throw DimensionError("query slice and critical keys disagree on d_s");
  }
  std::vector<float> out(critical_keys.rows());
  for (std::size_t t = 0; t < critical_keys.rows(); ++t) {
    const auto k = critical_keys.row(t);
    double acc = 0.0;
    for (std::size_t i = 0; i < k.size(); ++i) acc += double(query_slice[i]) * k[i];
    out[t] = static_cast<float>(acc);
  }
  return out;
}

namespace {

// Indices of the k largest entries in [0, limit), ties to the larger index.
std::vector<std::size_t> top_indices(std::span<const float> scores, std::size_t limit,
                                     std::size_t k) {
  std::vector<std::size_t> order(limit);
  std::iota(order.begin(), order.end(), 0);
  k = std::min(k, limit);
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] != scores[b] ? scores[a] > scores[b] : a > b;
                    });
  order.resize(k);
  return order;
}

}  // namespace

std::vector<std::size_t> select_topk_tokens(std::span<const float> scores,
                                            const RetrievalConfig& config) {
  const std::size_t n = scores.size();
  if (n == 0) throw EmptyCacheError("token selection over an empty cache");
  const std::size_t local = std::min(n, config.n_local);
  const std::size_t older = n - local;
  std::vector<std::size_t> picked = top_indices(scores, older, config.n_topk);
  std::sort(picked.begin(), picked.end());
  for (std::size_t t = older; t < n; ++t) picked.push_back(t);
  return picked;
}

std::vector<std::size_t> exact_topk_tokens(std::span<const float> weights, std::size_t k) {
  if (weights.empty()) throw EmptyCacheError("top-k over an empty cache");
  auto picked = top_indices(weights, weights.size(), k);
  std::sort(picked.begin(), picked.end());
  return picked;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), m.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= m.rows()) {
      throw DimensionError("row index " + std::to_string(indices[i]) + " out of range");
    }
    std::copy_n(m.row(indices[i]).begin(), m.cols(), out.row(i).begin());
  }
  return out;
}

std::vector<float> sparse_attention(std::span<const float> query, const Matrix& selected_keys,
                                    const Matrix& selected_values) {
  if (selected_keys.empty()) throw EmptyCacheError("sparse attention over no tokens");
  return exact_attention(query, selected_keys, selected_values);
}

std::vector<float> sparse_attention(std::span<const float> query, const Matrix& keys,
                                    const Matrix& values,
                                    std::span<const std::size_t> indices) {
  if (indices.empty()) throw EmptyCacheError("sparse attention over no tokens");
  return sparse_attention(query, gather_rows(keys, indices), gather_rows(values, indices));
}

double recall_at_k(std::span<const std::size_t> selected,
                   std::span<const std::size_t> exact_topk) {
  if (selected.empty() || exact_topk.empty()) {
    throw ParameterError("recall needs non-empty sets");
  }
  std::vector<std::size_t> a(selected.begin(), selected.end());
  std::vector<std::size_t> b(exact_topk.begin(), exact_topk.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<std::size_t> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  return static_cast<double>(common.size()) / static_cast<double>(b.size());
}

}  // namespace tailorkv
