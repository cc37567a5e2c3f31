#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tailorkv/trace.hpp"

namespace tailorkv {

enum class AttentionMode { Dense, Sparse };

struct LayerPattern {
  AttentionMode mode = AttentionMode::Sparse;
  std::size_t num_dominant = 4;  // Sparse only
  double mass = 0.99;            // minimum attention mass on the dominant tokens

  static LayerPattern dense() { return {AttentionMode::Dense, 0, 0.0}; }
  static LayerPattern sparse(std::size_t dominant, double mass) {
    return {AttentionMode::Sparse, dominant, mass};
  }
};

struct OutlierSpec {
  std::size_t num_channels = 8;   // key/query outlier channels per KV head
  double magnitude_ratio = 0.95;  // minimum share of key energy in those channels
  bool drift = false;             // active outlier channels change per step
};

struct SyntheticSpec {
  ModelConfig model;
  std::vector<LayerPattern> layers;  // one per model layer
  OutlierSpec outliers;
  std::size_t prefill_len = 256;
  std::size_t steps = 4;
  std::size_t calibration_queries = 32;
  // Std-dev of the per-layer residual update of the hidden state.
  double residual_noise = 0.05;
  std::uint64_t seed = 0;
  bool embed_labels = false;  // store Dense->Q / Sparse->S labels in the header

  void validate() const;  // throws ConfigError
};

// Parses "D,S,S,S"-style layer patterns (D = dense, S = sparse).
std::vector<LayerPattern> parse_layer_patterns(const std::string& text,
                                               std::size_t num_dominant, double mass);

// Deterministic synthetic trace. Every stored value is binary16-exact, so
// the in-memory trace equals what read_trace() returns for its file.
//
// Hidden states carry a few large "outlier" coordinates. In sparse layers
// W_q routes each of them into one outlier channel of every query head, and
// keys are large in those channels, so the dot products are dominated by a
// handful of channels. Dominant tokens align with the query signs there;
// their magnitude is raised until together they hold the requested mass
// for every decode query and every calibration query.
Trace gen_trace(const SyntheticSpec& spec);

}  // namespace tailorkv
