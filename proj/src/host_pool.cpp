#include "tailorkv/memsim.hpp"

#include <cmath>
#include <string>

namespace tailorkv {

void LinkModel::validate() const {
  if (!(bandwidth > 0.0)) throw ParameterError("link bandwidth must be positive");
  if (!(base_latency >= 0.0)) throw ParameterError("link base latency must be >= 0");
}

double LinkModel::transfer_seconds(std::uint64_t bytes) const {
  if (std::isinf(bandwidth)) return base_latency;
  return base_latency + static_cast<double>(bytes) / bandwidth;
}

void HostPool::offload_layer(std::size_t layer, const LayerKV& cache) {
  if (holds(layer)) {
    throw SchedulingError("layer " + std::to_string(layer) + " is already offloaded");
  }
  Entry e{cache, {}};
  for (std::size_t h = 0; h < cache.num_heads(); ++h) e.maxima.emplace_back(cache.keys(h));
  layers_.emplace(layer, std::move(e));
}

void HostPool::append(std::size_t layer, const Matrix& new_keys, const Matrix& new_values) {
  auto it = layers_.find(layer);
  if (it == layers_.end()) {
    throw SchedulingError("layer " + std::to_string(layer) + " is not offloaded");
  }
  it->second.cache.append(new_keys, new_values);
  for (std::size_t h = 0; h < new_keys.rows(); ++h) {
    it->second.maxima[h].update(new_keys.row(h));
  }
}

const LayerKV& HostPool::cache(std::size_t layer) const {
  auto it = layers_.find(layer);
  if (it == layers_.end()) {
    throw SchedulingError("layer " + std::to_string(layer) + " is not offloaded");
  }
  return it->second.cache;
}

const ChannelMax& HostPool::channel_max(std::size_t layer, std::size_t head) const {
  cache(layer);
  return layers_.at(layer).maxima.at(head);
}

std::pair<Matrix, Matrix> HostPool::gather(std::size_t layer, std::size_t head,
                                           std::span<const std::size_t> indices) const {
  const LayerKV& c = cache(layer);
  return {gather_rows(c.keys(head), indices), gather_rows(c.values(head), indices)};
}

Matrix HostPool::gather_critical_keys(std::size_t layer, std::size_t head,
                                      std::span<const std::size_t> channels) const {
  return gather_channels(cache(layer).keys(head), channels);
}

int DeviceBuffers::write(std::size_t layer, std::vector<Matrix> critical_keys,
                         std::vector<CriticalChannelSet> channels) {
  const int slot = next_write_slot();
  Slot& s = slots_[static_cast<std::size_t>(slot)];
  if (s.sealed) {
    throw SchedulingError("critical-key slot " + std::to_string(slot) +
                          " still holds layer " + std::to_string(s.layer));
  }
  s.sealed = true;
  s.layer = layer;
  s.keys = std::move(critical_keys);
  s.channels = std::move(channels);
  ++writes_;
  return slot;
}

int DeviceBuffers::slot_of(std::size_t layer) const {
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i].sealed && slots_[i].layer == layer) return static_cast<int>(i);
  }
  throw SchedulingError("no prefetched critical keys for layer " + std::to_string(layer));
}

const std::vector<Matrix>& DeviceBuffers::critical_keys(int slot) const {
  const Slot& s = slots_.at(static_cast<std::size_t>(slot));
  if (!s.sealed) throw SchedulingError("reading an empty critical-key slot");
  return s.keys;
}

const std::vector<CriticalChannelSet>& DeviceBuffers::channels(int slot) const {
  const Slot& s = slots_.at(static_cast<std::size_t>(slot));
  if (!s.sealed) throw SchedulingError("reading an empty critical-key slot");
  return s.channels;
}

void DeviceBuffers::release(int slot) {
  Slot& s = slots_.at(static_cast<std::size_t>(slot));
  s = Slot{};
}

TransferRecord prefetch_critical_keys(const HostPool& pool, std::size_t layer,
                                      std::span<const CriticalChannelSet> channels,
                                      DeviceBuffers& buffers) {
  const LayerKV& cache = pool.cache(layer);
  if (channels.size() != cache.num_heads()) {
    throw DimensionError("one channel set per KV head required");
  }
  if (buffers.busy(buffers.next_write_slot())) {
    throw SchedulingError("critical-key write slot " +
                          std::to_string(buffers.next_write_slot()) + " is busy");
  }
  std::vector<Matrix> slices;
  std::uint64_t bytes = 0;
  for (std::size_t h = 0; h < channels.size(); ++h) {
    slices.push_back(pool.gather_critical_keys(layer, h, channels[h].selected));
    bytes += std::uint64_t(cache.seq_len()) * channels[h].selected.size() *
             ModelConfig::element_bytes;
  }
  TransferRecord rec{layer, "prefetch_critical_keys", bytes, -1};
  rec.slot = buffers.write(layer, std::move(slices), {channels.begin(), channels.end()});
  return rec;
}

FetchedRows fetch_topk(const HostPool& pool, std::size_t layer, std::size_t head,
                       std::span<const std::size_t> indices) {
  auto [k, v] = pool.gather(layer, head, indices);
  const std::uint64_t bytes =
      2ull * indices.size() * pool.cache(layer).head_dim() * ModelConfig::element_bytes;
  return {std::move(k), std::move(v), {layer, "fetch_topk", bytes, -1}};
}

}  // namespace tailorkv
