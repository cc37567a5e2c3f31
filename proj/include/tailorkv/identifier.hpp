#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tailorkv/kv_model.hpp"

namespace tailorkv {

enum class LayerLabel { QuantizationFriendly, SparsityFriendly };

const char* to_string(LayerLabel label);
// Accepts "Q"/"S" and the long names.
LayerLabel parse_layer_label(const std::string& text);

struct SparsityProbe {
  std::size_t k = 0;     // 0 selects max(1, ceil(0.05 * n)) per layer
  std::size_t n_q = 32;  // most recent prefill queries per head
  double tau = 0.2;

  std::size_t k_for(std::size_t seq_len) const;
};

struct LayerProfile {
  std::size_t layer_index = 0;
  std::vector<double> per_head_scores;  // normalized P per query head
  double score = 0.0;                   // P_l, mean over heads
  LayerLabel label = LayerLabel::SparsityFriendly;
  // Sparse error of the most recent query per head at the probe's k.
  std::vector<double> per_head_sparse_error;
  double sparse_error = 0.0;

  friend bool operator==(const LayerProfile&, const LayerProfile&) = default;
};

// 1 - (sum of the k largest weights).
double sparse_error(std::span<const float> weights, std::size_t k);

// Residual attention mass outside each query's top-k, averaged over the
// n_q queries (raw score / n_q). Range [0, 1).
double dense_preference_score(const Matrix& recent_queries, const Matrix& keys,
                              std::size_t k);

// Mean over heads; quantization-friendly iff mean > tau.
LayerProfile classify_layer(std::size_t layer_index, std::vector<double> head_scores,
                            double tau);

// Prefill state of one layer: its cache and the most recent prefill
// queries of every query head ([n_available x head_dim] each).
struct CalibrationLayer {
  const LayerKV* cache = nullptr;
  std::vector<Matrix> recent_queries;
};

std::vector<LayerProfile> calibrate(std::span<const CalibrationLayer> layers,
                                    const SparsityProbe& probe);

}  // namespace tailorkv
