#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tailorkv/identifier.hpp"
#include "tailorkv/memsim.hpp"

namespace tailorkv {

inline constexpr const char* kReportSchema = "tailorkv.run_report/1";

// One (step, layer) record.
struct StepLayerMetrics {
  std::size_t step = 0;
  std::size_t layer = 0;
  LayerLabel label = LayerLabel::SparsityFriendly;
  // Mean over query heads of |selected ∩ exact top-n_topk| / n_topk. For
  // quantized layers "selected" is the top-n_topk under quantized logits.
  double recall = 0.0;
  double min_cosine = 0.0;       // worst query head vs exact attention
  double max_abs_error = 0.0;    // worst element over query heads
  // Smallest exact attention mass captured by the attended set over query
  // heads (1 for layers that attend to every token).
  double selected_mass = 0.0;
  std::vector<std::vector<std::size_t>> selected;  // per KV head, S layers
  std::vector<std::vector<std::size_t>> channels;  // per KV head, S layers

  friend bool operator==(const StepLayerMetrics&, const StepLayerMetrics&) = default;
};

struct QuantizationStats {
  std::size_t layer = 0;
  unsigned bits = 1;
  std::size_t group_size = 0;
  std::size_t key_groups = 0;
  std::size_t value_groups = 0;
  std::size_t residual_tokens = 0;
  double max_abs_error = 0.0;
  double mean_abs_error = 0.0;
  // max |x - x_hat| / (s / 2) over all grouped elements; <= 1 within rounding
  double max_error_ratio = 0.0;
  std::size_t device_bytes = 0;

  friend bool operator==(const QuantizationStats&, const QuantizationStats&) = default;
};

struct FootprintRow {
  std::string method;
  std::string layer;  // layer index or "all"
  double bytes = 0.0;

  friend bool operator==(const FootprintRow&, const FootprintRow&) = default;
};

struct TimelineSummary {
  double total_seconds = 0.0;
  double compute_seconds = 0.0;
  double transfer_seconds = 0.0;
  double critical_path_seconds = 0.0;
  double overlap_fraction = 1.0;
  std::size_t prefetch_stalls = 0;
  std::size_t events = 0;
  std::vector<LayerBreakdown> per_layer;

  friend bool operator==(const TimelineSummary&, const TimelineSummary&) = default;
};

struct RunReport {
  std::string schema_version = kReportSchema;
  nlohmann::json config = nlohmann::json::object();  // effective settings
  nlohmann::json trace = nlohmann::json::object();   // dims, digest, generator seed
  std::string label_source;  // "calibration", "trace" or "config"
  std::vector<LayerProfile> profiles;
  std::vector<LayerLabel> labels;
  std::vector<StepLayerMetrics> steps;
  std::vector<QuantizationStats> quantization;
  std::vector<FootprintRow> footprint;
  TimelineSummary timeline;

  friend bool operator==(const RunReport&, const RunReport&) = default;
};

nlohmann::json to_json(const RunReport& report);
RunReport report_from_json(const nlohmann::json& j);

nlohmann::json profiles_to_json(const std::vector<LayerProfile>& profiles);
std::vector<LayerProfile> profiles_from_json(const nlohmann::json& j);

nlohmann::json timeline_to_json(const TransferTimeline& timeline);

std::string footprint_csv(const std::vector<FootprintRow>& rows);

enum class ReportFormat { Json, Csv };

// Json: writes `path` as a single document. Csv: writes one table per file
// into the directory `path` and returns the file list.
std::vector<std::filesystem::path> emit_report(const RunReport& report, ReportFormat format,
                                               const std::filesystem::path& path);

// Shortest round-trip text for a double.
std::string format_number(double v);

}  // namespace tailorkv
