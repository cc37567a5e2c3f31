#include "tailorkv/identifier.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace tailorkv {
namespace {

double topk_mass(std::vector<float> weights, std::size_t k) {
  std::nth_element(weights.begin(), weights.begin() + (k - 1), weights.end(),
                   std::greater<>());
  std::sort(weights.begin(), weights.begin() + k, std::greater<>());
  // Sum largest-first in double so k = n gives 1 - 1 = 0 to rounding.
  return std::accumulate(weights.begin(), weights.begin() + k, 0.0);
}

}  // namespace

const char* to_string(LayerLabel label) {
  return label == LayerLabel::QuantizationFriendly ? "Q" : "S";
}

LayerLabel parse_layer_label(const std::string& text) {
  if (text == "Q" || text == "QuantizationFriendly") return LayerLabel::QuantizationFriendly;
  if (text == "S" || text == "SparsityFriendly") return LayerLabel::SparsityFriendly;
  throw ParameterError("unknown layer label '" + text + "'");
}

std::size_t SparsityProbe::k_for(std::size_t seq_len) const {
  if (k != 0) return k;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.05 * seq_len)));
}

double sparse_error(std::span<const float> weights, std::size_t k) {
  if (k < 1 || k > weights.size()) {
    throw ParameterError("sparse_error: k=" + std::to_string(k) + " outside [1, " +
                         std::to_string(weights.size()) + "]");
  }
  const double e = 1.0 - topk_mass({weights.begin(), weights.end()}, k);
  return std::clamp(e, 0.0, 1.0);
}

double dense_preference_score(const Matrix& recent_queries, const Matrix& keys,
                              std::size_t k) {
  if (recent_queries.cols() != keys.cols()) {
    throw DimensionError("query and key widths differ");
  }
  if (recent_queries.empty()) throw ParameterError("dense_preference_score needs n_q >= 1");
  if (recent_queries.rows() > keys.rows()) {
    throw ParameterError("n_q exceeds the number of keys");
  }
  if (k < 1 || k > keys.rows()) throw ParameterError("k outside [1, n]");
  double retained = 0.0;
  for (std::size_t i = 0; i < recent_queries.rows(); ++i) {
    retained += topk_mass(attention_weights(recent_queries.row(i), keys), k);
  }
  const double n_q = static_cast<double>(recent_queries.rows());
  return std::clamp((n_q - retained) / n_q, 0.0, 1.0);
}

LayerProfile classify_layer(std::size_t layer_index, std::vector<double> head_scores,
                            double tau) {
  if (head_scores.empty()) throw ParameterError("classify_layer needs head scores");
  LayerProfile p;
  p.layer_index = layer_index;
  p.score = std::accumulate(head_scores.begin(), head_scores.end(), 0.0) /
            static_cast<double>(head_scores.size());
  p.per_head_scores = std::move(head_scores);
  p.label = p.score > tau ? LayerLabel::QuantizationFriendly : LayerLabel::SparsityFriendly;
  return p;
}

std::vector<LayerProfile> calibrate(std::span<const CalibrationLayer> layers,
                                    const SparsityProbe& probe) {
  if (probe.tau < 0.0 || probe.tau > 1.0) throw ParameterError("tau must lie in [0, 1]");
  if (probe.n_q < 1) throw ParameterError("n_q must be >= 1");
  std::vector<LayerProfile> out;
  out.reserve(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const CalibrationLayer& layer = layers[l];
    if (layer.cache == nullptr || layer.recent_queries.empty()) {
      throw ParameterError("calibration layer " + std::to_string(l) + " is incomplete");
    }
    const LayerKV& cache = *layer.cache;
    const std::size_t n = cache.seq_len();
    const std::size_t group = layer.recent_queries.size() / cache.num_heads();
    if (group == 0 || layer.recent_queries.size() % cache.num_heads() != 0) {
      throw DimensionError("query heads not divisible by KV heads");
    }
    const std::size_t k = probe.k_for(n);
    if (k > n) throw ParameterError("probe k exceeds prefill length");

    std::vector<double> scores;
    std::vector<double> errors;
    for (std::size_t j = 0; j < layer.recent_queries.size(); ++j) {
      const Matrix& q = layer.recent_queries[j];
      if (q.rows() < probe.n_q || n < probe.n_q) {
        throw ParameterError("trace too short: layer " + std::to_string(l) + " has " +
                             std::to_string(std::min(q.rows(), n)) +
                             " prefill queries, probe needs n_q=" +
                             std::to_string(probe.n_q));
      }
      const Matrix& keys = cache.keys(j / group);
      scores.push_back(dense_preference_score(q.slice_rows(q.rows() - probe.n_q, q.rows()),
                                              keys, k));
      errors.push_back(sparse_error(attention_weights(q.row(q.rows() - 1), keys), k));
    }
    LayerProfile p = classify_layer(l, std::move(scores), probe.tau);
    p.sparse_error = std::accumulate(errors.begin(), errors.end(), 0.0) /
                     static_cast<double>(errors.size());
    p.per_head_sparse_error = std::move(errors);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace tailorkv
