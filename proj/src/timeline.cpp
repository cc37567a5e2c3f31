#include "tailorkv/memsim.hpp"

#include <algorithm>
#include <limits>
#include <optional>
#include <string>

namespace tailorkv {

const char* to_string(EventKind kind) {
  return kind == EventKind::Compute ? "compute" : "transfer";
}

namespace {

struct Builder {
  std::vector<LayerCost> costs;  // indexed by position
  std::size_t num_layers;
  const LinkModel& link;
  TransferTimeline timeline;
  // Last compute event of each global position (step * L + layer).
  std::vector<std::optional<std::size_t>> last_compute;
  std::vector<std::optional<std::size_t>> prefetch_of;
  std::array<std::optional<std::size_t>, 2> last_reader{};
  std::size_t prefetches = 0;

  std::size_t positions() const { return costs.size(); }
  std::size_t layer_of(std::size_t p) const { return p % num_layers; }
  bool sparse(std::size_t p) const { return costs[p].label == LayerLabel::SparsityFriendly; }

  std::vector<std::size_t> after(std::optional<std::size_t> e) const {
    return e ? std::vector<std::size_t>{*e} : std::vector<std::size_t>{};
  }

  // Stage 1 for position p: channel estimate, then the critical-key prefetch.
  // Layer 0 estimates from its own input, later layers from the input of
  // the layer before them (ready once position p - 2 has finished).
  void stage_one(std::size_t p) {
    const LayerCost& c = costs[p];
    const std::size_t back = layer_of(p) == 0 ? 1 : 2;
    std::optional<std::size_t> ready;
    if (p >= back) ready = last_compute[p - back];

    std::vector<std::size_t> deps = after(ready);
    if (c.estimate_seconds > 0.0) {
      TimelineEvent e{EventKind::Compute, layer_of(p), event_label::kEstimate, 0.0,
                      c.estimate_seconds, deps};
      deps = {timeline.add(std::move(e))};
    }
    const int slot = static_cast<int>(prefetches++ % 2);
    if (last_reader[slot]) deps.push_back(*last_reader[slot]);
    TimelineEvent pf{EventKind::Transfer, layer_of(p), event_label::kPrefetch, 0.0,
                     link.transfer_seconds(c.prefetch_bytes), deps, slot,
                     BufferAccess::Write};
    prefetch_of[p] = timeline.add(std::move(pf));
  }

  void stage_two(std::size_t p) {
    const LayerCost& c = costs[p];
    const std::optional<std::size_t> prev = p > 0 ? last_compute[p - 1] : std::nullopt;
    if (!sparse(p)) {
      last_compute[p] = timeline.add({EventKind::Compute, layer_of(p), event_label::kLayer,
                                      0.0, c.compute_seconds, after(prev)});
      return;
    }
    const std::size_t pf = *prefetch_of[p];
    const int slot = timeline.events[pf].slot;
    std::vector<std::size_t> deps = after(prev);
    deps.push_back(pf);
    const std::size_t score =
        timeline.add({EventKind::Compute, layer_of(p), event_label::kScoring, 0.0,
                      c.scoring_seconds, deps, slot, BufferAccess::Read});
    last_reader[slot] = score;
    const std::size_t fetch =
        timeline.add({EventKind::Transfer, layer_of(p), event_label::kFetch, 0.0,
                      link.transfer_seconds(c.topk_bytes), {score}});
    last_compute[p] = timeline.add({EventKind::Compute, layer_of(p), event_label::kSparse,
                                    0.0, c.compute_seconds, {fetch}});
  }

  void run() {
    last_compute.assign(positions(), std::nullopt);
    prefetch_of.assign(positions(), std::nullopt);
    if (positions() == 0) return;
    if (sparse(0)) stage_one(0);
    for (std::size_t p = 0; p < positions(); ++p) {
      const bool next_sparse = p + 1 < positions() && sparse(p + 1);
      if (next_sparse && layer_of(p + 1) != 0) stage_one(p + 1);
      stage_two(p);
      if (next_sparse && layer_of(p + 1) == 0) stage_one(p + 1);
    }
  }
};

}  // namespace

TransferTimeline build_timeline(std::span<const LayerCost> layers, const LinkModel& link,
                                std::size_t steps) {
  link.validate();
  Builder b{{}, layers.size(), link, {}, {}, {}, {}, 0};
  for (std::size_t s = 0; s < steps; ++s) b.costs.insert(b.costs.end(), layers.begin(), layers.end());
  b.run();
  return std::move(b.timeline);
}

TransferTimeline build_timeline(std::span<const std::vector<LayerCost>> per_step,
                                const LinkModel& link) {
  link.validate();
  const std::size_t num_layers = per_step.empty() ? 0 : per_step.front().size();
  Builder b{{}, num_layers, link, {}, {}, {}, {}, 0};
  for (const auto& step : per_step) {
    if (step.size() != num_layers) throw SchedulingError("ragged per-step layer costs");
    b.costs.insert(b.costs.end(), step.begin(), step.end());
  }
  b.run();
  return std::move(b.timeline);
}

double critical_path(const TransferTimeline& timeline) {
  const auto& ev = timeline.events;
  const std::size_t n = ev.size();
  // 0 = unvisited, 1 = on stack, 2 = done
  std::vector<int> state(n, 0);
  std::vector<double> finish(n, 0.0);
  std::vector<std::pair<std::size_t, std::size_t>> stack;
  for (std::size_t root = 0; root < n; ++root) {
    if (state[root] == 2) continue;
    stack.push_back({root, 0});
    state[root] = 1;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < ev[node].depends_on.size()) {
        const std::size_t d = ev[node].depends_on[next++];
        if (d >= n) throw SchedulingError("dependency index out of range");
        if (state[d] == 1) throw SchedulingError("cyclic dependency in timeline");
        if (state[d] == 0) {
          state[d] = 1;
          stack.push_back({d, 0});
        }
        continue;
      }
      double ready = 0.0;
      for (std::size_t d : ev[node].depends_on) ready = std::max(ready, finish[d]);
      finish[node] = ready + ev[node].duration;
      state[node] = 2;
      stack.pop_back();
    }
  }
  return n == 0 ? 0.0 : *std::max_element(finish.begin(), finish.end());
}

void check_buffer_exclusion(const TransferTimeline& timeline) {
  const auto& ev = timeline.events;
  for (std::size_t w = 0; w < ev.size(); ++w) {
    if (ev[w].access != BufferAccess::Write) continue;
    for (std::size_t r = 0; r < ev.size(); ++r) {
      if (ev[r].access != BufferAccess::Read || ev[r].slot != ev[w].slot) continue;
      if (ev[w].start < ev[r].end() && ev[r].start < ev[w].end()) {
        throw SchedulingError("slot " + std::to_string(ev[w].slot) + " written by event " +
                              std::to_string(w) + " while event " + std::to_string(r) +
                              " reads it");
      }
    }
  }
}

SimulationResult simulate(TransferTimeline timeline) {
  auto& ev = timeline.events;
  const std::size_t n = ev.size();
  for (const auto& e : ev) {
    if (!(e.duration >= 0.0)) throw SchedulingError("negative event duration");
    for (std::size_t d : e.depends_on) {
      if (d >= n) throw SchedulingError("dependency index out of range");
    }
  }

  std::vector<bool> done(n, false);
  double resource_free[2] = {0.0, 0.0};
  for (std::size_t scheduled = 0; scheduled < n; ++scheduled) {
    std::size_t best = n;
    double best_start = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (done[i]) continue;
      double ready = resource_free[static_cast<int>(ev[i].kind)];
      bool blocked = false;
      for (std::size_t d : ev[i].depends_on) {
        if (!done[d]) {
          blocked = true;
          break;
        }
        ready = std::max(ready, ev[d].end());
      }
      if (!blocked && ready < best_start) {
        best = i;
        best_start = ready;
      }
    }
    if (best == n) throw SchedulingError("cyclic dependency in timeline");
    ev[best].start = best_start;
    done[best] = true;
    resource_free[static_cast<int>(ev[best].kind)] = ev[best].end();
  }
  check_buffer_exclusion(timeline);

  SimulationResult out;
  std::size_t num_layers = 0;
  for (const auto& e : ev) {
    num_layers = std::max(num_layers, e.layer + 1);
    out.total_seconds = std::max(out.total_seconds, e.end());
    (e.kind == EventKind::Compute ? out.compute_seconds : out.transfer_seconds) +=
        e.duration;
  }
  out.per_layer.resize(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) out.per_layer[l].layer = l;
  for (const auto& e : ev) {
    auto& b = out.per_layer[e.layer];
    (e.kind == EventKind::Compute ? b.compute_seconds : b.transfer_seconds) += e.duration;
  }

  // Layer spans: the last compute event of each layer closes it. Events are
  // emitted in position order, so closing events appear in that order too.
  std::vector<std::size_t> closers;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = ev[i].label;
    if (l == event_label::kLayer || l == event_label::kSparse) closers.push_back(i);
  }
  double span_begin = 0.0;
  for (std::size_t c : closers) {
    const double span_end = ev[c].end();
    double busy = 0.0;
    for (const auto& e : ev) {
      if (e.kind != EventKind::Compute) continue;
      busy += std::max(0.0, std::min(e.end(), span_end) - std::max(e.start, span_begin));
    }
    auto& b = out.per_layer[ev[c].layer];
    b.span_seconds += span_end - span_begin;
    b.stall_seconds += std::max(0.0, (span_end - span_begin) - busy);
    span_begin = span_end;
  }

  // A prefetch stalls its layer when scoring had to wait for it rather than
  // for the previous layer.
  for (const auto& e : ev) {
    if (e.label != event_label::kScoring) continue;
    double prev_end = 0.0;
    double prefetch_end = 0.0;
    for (std::size_t d : e.depends_on) {
      if (ev[d].label == event_label::kPrefetch) {
        prefetch_end = ev[d].end();
      } else {
        prev_end = std::max(prev_end, ev[d].end());
      }
    }
    if (prefetch_end > prev_end) {
      ++out.per_layer[e.layer].prefetch_stalls;
      ++out.prefetch_stalls;
    }
  }

  double exposed = 0.0;
  for (const auto& b : out.per_layer) exposed += b.stall_seconds;
  out.overlap_fraction =
      out.transfer_seconds > 0.0
          ? std::clamp(1.0 - exposed / out.transfer_seconds, 0.0, 1.0)
          : 1.0;
  out.timeline = std::move(timeline);
  return out;
}

}  // namespace tailorkv
