#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tailorkv/identifier.hpp"
#include "tailorkv/kv_model.hpp"
#include "tailorkv/retriever.hpp"

namespace tailorkv {

// First-order host/device link: duration = base_latency + bytes / bandwidth.
struct LinkModel {
  double bandwidth = 32e9;  // bytes per second
  double base_latency = 0.0;

  static LinkModel pcie1() { return {4e9, 0.0}; }
  static LinkModel pcie4() { return {32e9, 0.0}; }

  void validate() const;
  double transfer_seconds(std::uint64_t bytes) const;
};

// Offloaded caches of sparsity-friendly layers, with per-head running
// channel maxima kept next to them.
class HostPool {
 public:
  void offload_layer(std::size_t layer, const LayerKV& cache);
  void append(std::size_t layer, const Matrix& new_keys, const Matrix& new_values);

  bool holds(std::size_t layer) const { return layers_.count(layer) != 0; }
  const LayerKV& cache(std::size_t layer) const;
  const ChannelMax& channel_max(std::size_t layer, std::size_t head) const;
  std::size_t seq_len(std::size_t layer) const { return cache(layer).seq_len(); }

  // Rows in the requested order.
  std::pair<Matrix, Matrix> gather(std::size_t layer, std::size_t head,
                                   std::span<const std::size_t> indices) const;
  Matrix gather_critical_keys(std::size_t layer, std::size_t head,
                              std::span<const std::size_t> channels) const;

 private:
  struct Entry {
    LayerKV cache;
    std::vector<ChannelMax> maxima;
  };
  std::map<std::size_t, Entry> layers_;
};

struct TransferRecord {
  std::size_t layer = 0;
  std::string label;
  std::uint64_t bytes = 0;
  int slot = -1;
};

// Device-side critical-key double buffer. Prefetches alternate slots; a
// slot must be read and released before it can be written again.
class DeviceBuffers {
 public:
  int next_write_slot() const { return static_cast<int>(writes_ % 2); }
  std::uint64_t writes() const { return writes_; }

  // Fills the next write slot. Throws SchedulingError if the slot still
  // holds an unreleased prefetch.
  int write(std::size_t layer, std::vector<Matrix> critical_keys,
            std::vector<CriticalChannelSet> channels);

  // Sealed slot holding `layer`'s prefetch.
  int slot_of(std::size_t layer) const;
  const std::vector<Matrix>& critical_keys(int slot) const;
  const std::vector<CriticalChannelSet>& channels(int slot) const;
  void release(int slot);
  bool busy(int slot) const { return slots_.at(static_cast<std::size_t>(slot)).sealed; }

 private:
  struct Slot {
    bool sealed = false;
    std::size_t layer = 0;
    std::vector<Matrix> keys;
    std::vector<CriticalChannelSet> channels;
  };
  std::array<Slot, 2> slots_{};
  std::uint64_t writes_ = 0;
};

// Copies K[:, selected] of every KV head into the next write slot.
// Size: n * d_s * element_bytes per head.
TransferRecord prefetch_critical_keys(const HostPool& pool, std::size_t layer,
                                      std::span<const CriticalChannelSet> channels,
                                      DeviceBuffers& buffers);

struct FetchedRows {
  Matrix keys;
  Matrix values;
  TransferRecord transfer;
};

// Top-K rows of one KV head. Size: 2 * |indices| * d_h * element_bytes.
FetchedRows fetch_topk(const HostPool& pool, std::size_t layer, std::size_t head,
                       std::span<const std::size_t> indices);

// ---------------------------------------------------------------------------
// Timeline

enum class EventKind { Compute, Transfer };
enum class BufferAccess { None, Read, Write };

const char* to_string(EventKind kind);

struct TimelineEvent {
  EventKind kind = EventKind::Compute;
  std::size_t layer = 0;
  std::string label;
  double start = 0.0;
  double duration = 0.0;
  std::vector<std::size_t> depends_on;  // indices into TransferTimeline::events
  // Critical-key double-buffer slot touched by this event, if any.
  int slot = -1;
  BufferAccess access = BufferAccess::None;

  double end() const { return start + duration; }
};

struct TransferTimeline {
  std::vector<TimelineEvent> events;

  std::size_t add(TimelineEvent e) {
    events.push_back(std::move(e));
    return events.size() - 1;
  }
};

struct LayerCost {
  LayerLabel label = LayerLabel::QuantizationFriendly;
  double compute_seconds = 0.0;   // attention + rest of the block
  double estimate_seconds = 0.0;  // query estimate + channel selection (S only)
  double scoring_seconds = 0.0;   // approximate scores + top-k select (S only)
  std::uint64_t prefetch_bytes = 0;
  std::uint64_t topk_bytes = 0;
};

// Event names used by build_timeline.
namespace event_label {
inline constexpr const char* kLayer = "layer_compute";
inline constexpr const char* kEstimate = "estimate_channels";
inline constexpr const char* kPrefetch = "prefetch_critical_keys";
inline constexpr const char* kScoring = "approx_scoring";
inline constexpr const char* kFetch = "fetch_topk";
inline constexpr const char* kSparse = "sparse_attention";
}  // namespace event_label

// One decode step per repetition, layers in order. For a sparsity-friendly
// layer l the channel estimate for l runs once layer l-2 has finished (the
// hidden state entering l-1 is known), the critical-key prefetch follows it
// on the link, and the top-k fetch sits between l's scoring and l's sparse
// attention. Start times are left at zero; simulate() assigns them.
TransferTimeline build_timeline(std::span<const LayerCost> layers, const LinkModel& link,
                                std::size_t steps = 1);
// Same, with costs that change per decode step: per_step[t][layer].
TransferTimeline build_timeline(std::span<const std::vector<LayerCost>> per_step,
                                const LinkModel& link);

struct LayerBreakdown {
  std::size_t layer = 0;
  double compute_seconds = 0.0;
  double transfer_seconds = 0.0;
  double span_seconds = 0.0;     // end of previous layer to end of this layer
  double stall_seconds = 0.0;    // waiting on the link inside the span
  std::size_t prefetch_stalls = 0;

  friend bool operator==(const LayerBreakdown&, const LayerBreakdown&) = default;
};

struct SimulationResult {
  TransferTimeline timeline;  // with start times
  std::vector<LayerBreakdown> per_layer;  // summed over steps
  double total_seconds = 0.0;
  double compute_seconds = 0.0;
  double transfer_seconds = 0.0;
  double overlap_fraction = 1.0;  // share of link time hidden under compute
  std::size_t prefetch_stalls = 0;
};

// Earliest-start list scheduling on two resources (compute, link). Each
// resource runs one event at a time; among events that could start at the
// same instant on one resource the lowest index wins. Throws
// SchedulingError on a dependency cycle or a double-buffer violation.
SimulationResult simulate(TransferTimeline timeline);

// Longest dependency chain, ignoring resource contention.
double critical_path(const TransferTimeline& timeline);

// Throws SchedulingError if a read and a write of the same slot overlap.
void check_buffer_exclusion(const TransferTimeline& timeline);

// ---------------------------------------------------------------------------
// Memory footprint

enum class FootprintMethod { Original, SnapKV, Quest, TailorQ, TailorS };

const char* to_string(FootprintMethod method);

struct FootprintParams {
  std::optional<std::uint64_t> num_layers;      // L
  std::optional<std::uint64_t> seq_len;         // n
  std::optional<std::uint64_t> num_kv_heads;    // h
  std::optional<std::uint64_t> head_dim;        // d_h
  std::optional<double> budget;                 // SnapKV alpha
  std::optional<std::uint64_t> page_size;       // Quest beta
  std::optional<std::uint64_t> q_layers;        // l_q
  std::optional<std::uint64_t> group_size;      // g
  std::optional<unsigned> bits;                 // TailorQ code width, default 1
  std::optional<std::uint64_t> critical_channels;  // d_s
  std::uint64_t element_bytes = ModelConfig::element_bytes;
};

// Closed-form device bytes per method (element count x element bytes).
double memory_footprint(FootprintMethod method, const FootprintParams& params);

struct TailorFootprint {
  double quantized_bytes = 0.0;     // sum of TailorQ over Q layers
  double critical_key_bytes = 0.0;  // sum of TailorS over S layers
  double local_window_bytes = 0.0;  // n_local resident rows per S layer
  double total() const { return quantized_bytes + critical_key_bytes + local_window_bytes; }
};

TailorFootprint tailor_footprint(std::span<const LayerLabel> labels,
                                 const FootprintParams& params, std::uint64_t n_local);

}  // namespace tailorkv
