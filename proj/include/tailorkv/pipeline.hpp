#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "tailorkv/identifier.hpp"
#include "tailorkv/memsim.hpp"
#include "tailorkv/report.hpp"
#include "tailorkv/retriever.hpp"
#include "tailorkv/trace.hpp"

namespace tailorkv {

// Passthrough width: quantization-friendly layers keep 16-bit keys/values.
inline constexpr unsigned kPassthroughBits = 16;

// Defaults reproduce the TailorKV-1 setting: tau 0.2, 1-bit codes, group
// size 64, 64 local tokens, 128 fetched tokens, 8 critical channels.
struct RunConfig {
  SparsityProbe probe;
  unsigned bits = 1;  // 1, 2 or kPassthroughBits
  std::size_t group_size = 64;
  RetrievalConfig retrieval;
  // Explicit Q set; overrides trace labels and calibration.
  std::optional<std::vector<std::size_t>> q_layers;

  LinkModel link = LinkModel::pcie4();
  double layer_compute_seconds = 1e-3;
  double estimate_seconds = 2e-5;
  double scoring_seconds = 1e-4;

  std::optional<double> snapkv_budget;  // default: (n_local + n_topk) / n
  std::size_t quest_page_size = 16;

  void validate(const ModelConfig& model) const;  // throws ConfigError
  nlohmann::json to_json() const;
};

struct PipelineResult {
  RunReport report;
  TransferTimeline timeline;  // scheduled, all decode steps
};

// Calibration over the trace's stored prefill queries.
std::vector<LayerProfile> calibrate_trace(const Trace& trace, const SparsityProbe& probe);

// calibrate -> quantize Q layers / offload S layers -> replay every decode
// step through the compressed path and the exact oracle side by side.
PipelineResult run_pipeline(const Trace& trace, const RunConfig& config);

}  // namespace tailorkv
