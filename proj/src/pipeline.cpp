#include "tailorkv/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "tailorkv/quantizer.hpp"

namespace tailorkv {
namespace {

using nlohmann::json;

// Per-element reconstruction error of one quantized tensor against its source.
void accumulate_error(const GroupQuantizedTensor& q, const Matrix& source,
                      QuantizationStats& stats, double& error_sum, std::size_t& count) {
  const Matrix rec = q.dequantize();
  const std::size_t g = q.group_size();
  const std::size_t per_row = (q.cols() + g - 1) / g;
  for (std::size_t t = 0; t < q.quantized_rows(); ++t) {
    for (std::size_t c = 0; c < q.cols(); ++c) {
      const std::size_t grp = q.axis() == QuantAxis::PerChannel ? (t / g) * q.cols() + c
                                                                 : t * per_row + c / g;
      const double err = std::abs(double(rec(t, c)) - source(t, c));
      const double half = q.group_params()[grp].scale / 2.0;
      stats.max_abs_error = std::max(stats.max_abs_error, err);
      stats.max_error_ratio = std::max(stats.max_error_ratio, half > 0.0 ? err / half : 0.0);
      error_sum += err;
      ++count;
    }
  }
}

QuantizationStats quantization_stats(std::size_t layer, const LayerKV& cache,
                                     const std::vector<QuantizedHead>& heads, unsigned bits,
                                     std::size_t group_size) {
  QuantizationStats s;
  s.layer = layer;
  s.bits = bits;
  s.group_size = group_size;
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    s.key_groups += heads[h].keys.num_groups();
    s.value_groups += heads[h].values.num_groups();
    s.residual_tokens = heads[h].keys.residual().rows();
    s.device_bytes += heads[h].keys.storage_bytes() + heads[h].values.storage_bytes();
    accumulate_error(heads[h].keys, cache.keys(h), s, sum, count);
    accumulate_error(heads[h].values, cache.values(h), s, sum, count);
  }
  s.mean_abs_error = count ? sum / static_cast<double>(count) : 0.0;
  return s;
}

std::vector<LayerLabel> resolve_labels(const Trace& trace, const RunConfig& config,
                                       const std::vector<LayerProfile>& profiles,
                                       std::string& source) {
  const std::size_t L = trace.model.num_layers;
  if (config.q_layers) {
    source = "config";
    std::vector<LayerLabel> labels(L, LayerLabel::SparsityFriendly);
    for (std::size_t l : *config.q_layers) labels[l] = LayerLabel::QuantizationFriendly;
    return labels;
  }
  if (trace.labels) {
    source = "trace";
    return *trace.labels;
  }
  source = "calibration";
  std::vector<LayerLabel> labels;
  for (const auto& p : profiles) labels.push_back(p.label);
  return labels;
}

struct HeadOutcome {
  std::vector<float> output;
  double recall = 0.0;
  double mass = 1.0;
};

class Replay {
 public:
  Replay(const Trace& trace, const RunConfig& config, std::vector<LayerLabel> labels)
      : trace_(trace), cfg_(config), labels_(std::move(labels)), exact_(trace.prefill) {
    const auto& m = trace.model;
    quantized_.resize(m.num_layers);
    for (std::size_t l = 0; l < m.num_layers; ++l) {
      if (labels_[l] == LayerLabel::SparsityFriendly) {
        pool_.offload_layer(l, trace.prefill[l]);
      } else if (cfg_.bits != kPassthroughBits) {
        quantized_[l] = quantize_layer_kv(trace.prefill[l], cfg_.bits, cfg_.group_size);
        stats_.push_back(quantization_stats(l, trace.prefill[l], quantized_[l], cfg_.bits,
                                            cfg_.group_size));
      }
    }
  }

  void run(RunReport& report, std::vector<std::vector<LayerCost>>& costs) {
    const std::size_t L = trace_.model.num_layers;
    const std::size_t positions = L * trace_.num_steps();
    costs.assign(trace_.num_steps(), std::vector<LayerCost>(L));
    const auto sparse = [&](std::size_t p) {
      return labels_[p % L] == LayerLabel::SparsityFriendly;
    };
    if (positions > 0 && sparse(0)) stage_one(0, 0, costs);
    for (std::size_t p = 0; p < positions; ++p) {
      const std::size_t t = p / L, l = p % L;
      const bool next = p + 1 < positions && sparse(p + 1);
      if (next && (p + 1) % L != 0) stage_one(t, l + 1, costs);
      report.steps.push_back(stage_two(t, l, costs[t][l]));
      if (next && (p + 1) % L == 0) stage_one(t + 1, 0, costs);
    }
    report.quantization = stats_;
  }

 private:
  // Query estimate from the previous layer's input, channel selection, and
  // the critical-key prefetch for (step, layer).
  void stage_one(std::size_t t, std::size_t l,
                 std::vector<std::vector<LayerCost>>& costs) {
    const auto& m = trace_.model;
    const DecodeStep& step = trace_.steps[t];
    const std::size_t source = l == 0 ? 0 : l - 1;
    const QueryEstimate est =
        estimate_query(trace_.w_q[l], step.hidden[source], m.num_query_heads, source);
    std::vector<CriticalChannelSet> sets;
    for (std::size_t kv = 0; kv < m.num_kv_heads; ++kv) {
      sets.push_back(select_critical_channels(
          group_channel_scores(est.q_hat, kv * m.gqa_group(), m.gqa_group(),
                               pool_.channel_max(l, kv)),
          cfg_.retrieval.d_s));
    }
    costs[t][l].prefetch_bytes = prefetch_critical_keys(pool_, l, sets, buffers_).bytes;
  }

  StepLayerMetrics stage_two(std::size_t t, std::size_t l, LayerCost& cost) {
    const auto& m = trace_.model;
    const DecodeStep& step = trace_.steps[t];
    exact_[l].append(step.new_keys[l], step.new_values[l]);

    StepLayerMetrics rec;
    rec.step = t;
    rec.layer = l;
    rec.label = labels_[l];
    cost.label = labels_[l];
    cost.compute_seconds = cfg_.layer_compute_seconds;

    std::vector<HeadOutcome> heads(m.num_query_heads);
    if (labels_[l] == LayerLabel::QuantizationFriendly) {
      attend_quantized(step, l, heads);
    } else {
      cost.estimate_seconds = cfg_.estimate_seconds;
      cost.scoring_seconds = cfg_.scoring_seconds;
      attend_sparse(step, l, heads, rec, cost);
    }

    const Matrix exact = exact_attention(step.queries[l], exact_[l]);
    rec.min_cosine = 1.0;
    rec.selected_mass = 1.0;
    double recall = 0.0;
    for (std::size_t j = 0; j < heads.size(); ++j) {
      rec.min_cosine = std::min(rec.min_cosine, cosine_similarity(heads[j].output, exact.row(j)));
      rec.max_abs_error = std::max(rec.max_abs_error, max_abs_diff(heads[j].output, exact.row(j)));
      rec.selected_mass = std::min(rec.selected_mass, heads[j].mass);
      recall += heads[j].recall;
    }
    rec.recall = recall / static_cast<double>(heads.size());
    return rec;
  }

  // Exact top-n_topk, ranked by the full unscaled dot products.
  std::vector<std::size_t> exact_topk(std::span<const float> query, const Matrix& keys) const {
    return exact_topk_tokens(approx_scores(query, keys), cfg_.retrieval.n_topk);
  }

  void attend_quantized(const DecodeStep& step, std::size_t l, std::vector<HeadOutcome>& heads) {
    const auto& m = trace_.model;
    const double scale = 1.0 / std::sqrt(static_cast<double>(m.head_dim));
    for (std::size_t kv = 0; kv < m.num_kv_heads; ++kv) {
      if (cfg_.bits != kPassthroughBits) {
        quantized_[l][kv].keys.append_row(step.new_keys[l].row(kv));
        quantized_[l][kv].values.append_row(step.new_values[l].row(kv));
      }
      for (std::size_t j = kv * m.gqa_group(); j < (kv + 1) * m.gqa_group(); ++j) {
        const auto q = step.queries[l].row(j);
        const auto truth = exact_topk(q, exact_[l].keys(kv));
        if (cfg_.bits == kPassthroughBits) {
          heads[j].output = exact_attention(q, exact_[l].keys(kv), exact_[l].values(kv));
          heads[j].recall = 1.0;
          continue;
        }
        const auto raw = qgemv_scores(q, quantized_[l][kv].keys);
        std::vector<float> logits(raw.size());
        for (std::size_t i = 0; i < raw.size(); ++i) logits[i] = static_cast<float>(raw[i] * scale);
        heads[j].output = qgemv_output(softmax(logits), quantized_[l][kv].values);
        heads[j].recall = recall_at_k(exact_topk_tokens(raw, cfg_.retrieval.n_topk), truth);
      }
    }
  }

  void attend_sparse(const DecodeStep& step, std::size_t l, std::vector<HeadOutcome>& heads,
                     StepLayerMetrics& rec, LayerCost& cost) {
    const auto& m = trace_.model;
    pool_.append(l, step.new_keys[l], step.new_values[l]);
    const int slot = buffers_.slot_of(l);
    const auto& critical = buffers_.critical_keys(slot);
    const auto& sets = buffers_.channels(slot);
    const std::size_t n = pool_.seq_len(l);

    for (std::size_t kv = 0; kv < m.num_kv_heads; ++kv) {
      const auto& channels = sets[kv].selected;
      // The prefetched slice predates this step's token, which is produced
      // on the device and scored directly.
      Matrix crit = critical[kv];
      crit.append_row(gather_channels(step.new_keys[l].row(kv), channels));

      std::vector<double> summed(n, 0.0);
      for (std::size_t j = kv * m.gqa_group(); j < (kv + 1) * m.gqa_group(); ++j) {
        const auto part = approx_scores(gather_channels(step.queries[l].row(j), channels), crit);
        for (std::size_t i = 0; i < n; ++i) summed[i] += part[i];
      }
      const std::vector<float> scores(summed.begin(), summed.end());
      const auto selected = select_topk_tokens(scores, cfg_.retrieval);

      const std::size_t local_begin = n - std::min(n, cfg_.retrieval.n_local);
      const auto split = std::lower_bound(selected.begin(), selected.end(), local_begin);
      const std::vector<std::size_t> remote(selected.begin(), split);
      const std::vector<std::size_t> local(split, selected.end());
      FetchedRows fetched = fetch_topk(pool_, l, kv, remote);
      cost.topk_bytes += fetched.transfer.bytes;
      auto [local_k, local_v] = pool_.gather(l, kv, local);
      Matrix keys = std::move(fetched.keys), values = std::move(fetched.values);
      for (std::size_t r = 0; r < local_k.rows(); ++r) {
        keys.append_row(local_k.row(r));
        values.append_row(local_v.row(r));
      }

      for (std::size_t j = kv * m.gqa_group(); j < (kv + 1) * m.gqa_group(); ++j) {
        const auto q = step.queries[l].row(j);
        heads[j].output = sparse_attention(q, keys, values);
        const auto w = attention_weights(q, exact_[l].keys(kv));
        double mass = 0.0;
        for (std::size_t i : selected) mass += w[i];
        heads[j].mass = mass;
        heads[j].recall = recall_at_k(selected, exact_topk(q, exact_[l].keys(kv)));
      }
      rec.selected.push_back(selected);
      rec.channels.push_back(channels);
    }
    buffers_.release(slot);
  }

  const Trace& trace_;
  const RunConfig& cfg_;
  std::vector<LayerLabel> labels_;
  std::vector<LayerKV> exact_;
  std::vector<std::vector<QuantizedHead>> quantized_;
  std::vector<QuantizationStats> stats_;
  HostPool pool_;
  DeviceBuffers buffers_;
};

std::vector<FootprintRow> footprint_rows(const Trace& trace, const RunConfig& cfg,
                                         const std::vector<LayerLabel>& labels) {
  const auto& m = trace.model;
  const std::uint64_t n = trace.prefill_len + trace.num_steps();
  FootprintParams p;
  p.num_layers = m.num_layers;
  p.seq_len = n;
  p.num_kv_heads = m.num_kv_heads;
  p.head_dim = m.head_dim;
  p.budget = std::min(1.0, cfg.snapkv_budget.value_or(
                               double(cfg.retrieval.n_local + cfg.retrieval.n_topk) / double(n)));
  p.page_size = cfg.quest_page_size;
  p.group_size = cfg.group_size;
  p.critical_channels = cfg.retrieval.d_s;
  if (cfg.bits != kPassthroughBits) p.bits = cfg.bits;

  std::vector<FootprintRow> rows;
  for (auto method : {FootprintMethod::Original, FootprintMethod::SnapKV, FootprintMethod::Quest}) {
    rows.push_back({to_string(method), "all", memory_footprint(method, p)});
  }
  FootprintParams one = p;
  one.num_layers = 1;
  one.q_layers = 1;
  for (std::size_t l = 0; l < labels.size(); ++l) {
    if (labels[l] != LayerLabel::QuantizationFriendly) continue;
    // 16-bit passthrough layers keep the full cache.
    const double bytes = cfg.bits == kPassthroughBits
                             ? memory_footprint(FootprintMethod::Original, one)
                             : memory_footprint(FootprintMethod::TailorQ, one);
    rows.push_back({"TailorQ", std::to_string(l), bytes});
  }
  TailorFootprint tf{};
  if (cfg.bits != kPassthroughBits) {
    tf = tailor_footprint(labels, p, cfg.retrieval.n_local);
  } else {
    std::vector<LayerLabel> s_only;
    for (auto lab : labels) {
      if (lab == LayerLabel::SparsityFriendly) s_only.push_back(lab);
    }
    tf = tailor_footprint(s_only, p, cfg.retrieval.n_local);
    for (const auto& r : rows) {
      if (r.method == "TailorQ") tf.quantized_bytes += r.bytes;
    }
  }
  if (tf.critical_key_bytes > 0.0) rows.push_back({"TailorS", "all", tf.critical_key_bytes});
  if (tf.local_window_bytes > 0.0) rows.push_back({"LocalWindow", "all", tf.local_window_bytes});
  rows.push_back({"TailorKV", "all", tf.total()});
  return rows;
}

}  // namespace

void RunConfig::validate(const ModelConfig& model) const {
  const auto fail = [](const std::string& what) { throw ConfigError(what); };
  if (bits != 1 && bits != 2 && bits != kPassthroughBits) fail("--bits must be 1, 2 or 16");
  if (group_size < 1) fail("--group-size must be >= 1");
  if (probe.tau < 0.0 || probe.tau > 1.0) fail("--tau must lie in [0, 1]");
  if (probe.n_q < 1) fail("--n-q must be >= 1");
  try {
    retrieval.validate(model.head_dim);
    link.validate();
  } catch (const Error& e) {
    fail(e.what());
  }
  if (layer_compute_seconds < 0.0 || estimate_seconds < 0.0 || scoring_seconds < 0.0) {
    fail("compute costs must be >= 0");
  }
  if (snapkv_budget && !(*snapkv_budget > 0.0 && *snapkv_budget <= 1.0)) {
    fail("SnapKV budget must lie in (0, 1]");
  }
  if (quest_page_size < 1) fail("Quest page size must be >= 1");
  if (q_layers) {
    for (std::size_t l : *q_layers) {
      if (l >= model.num_layers) {
        fail("--q-layers names layer " + std::to_string(l) + " but the trace has " +
             std::to_string(model.num_layers));
      }
    }
  }
}

json RunConfig::to_json() const {
  json j;
  j["tau"] = probe.tau;
  j["n_q"] = probe.n_q;
  j["probe_k"] = probe.k == 0 ? json("auto(ceil(0.05n))") : json(probe.k);
  j["bits"] = bits;
  j["group_size"] = group_size;
  j["n_local"] = retrieval.n_local;
  j["n_topk"] = retrieval.n_topk;
  j["critical_channels"] = retrieval.d_s;
  j["q_layers"] = q_layers ? json(*q_layers) : json(nullptr);
  j["link_bandwidth"] = link.bandwidth;
  j["link_base_latency"] = link.base_latency;
  j["layer_compute_seconds"] = layer_compute_seconds;
  j["estimate_seconds"] = estimate_seconds;
  j["scoring_seconds"] = scoring_seconds;
  j["snapkv_budget"] = snapkv_budget ? json(*snapkv_budget) : json("auto");
  j["quest_page_size"] = quest_page_size;
  return j;
}

std::vector<LayerProfile> calibrate_trace(const Trace& trace, const SparsityProbe& probe) {
  if (trace.calibration_queries < probe.n_q) {
    throw ConfigError("trace holds " + std::to_string(trace.calibration_queries) +
                      " calibration queries, fewer than n_q=" + std::to_string(probe.n_q));
  }
  std::vector<CalibrationLayer> layers;
  for (std::size_t l = 0; l < trace.model.num_layers; ++l) {
    layers.push_back({&trace.prefill[l], trace.prefill_queries[l]});
  }
  try {
    return calibrate(layers, probe);
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
}

PipelineResult run_pipeline(const Trace& trace, const RunConfig& config) {
  trace.validate();
  config.validate(trace.model);

  PipelineResult result;
  RunReport& report = result.report;
  report.config = config.to_json();
  report.trace = {{"num_layers", trace.model.num_layers},
                  {"num_query_heads", trace.model.num_query_heads},
                  {"num_kv_heads", trace.model.num_kv_heads},
                  {"head_dim", trace.model.head_dim},
                  {"prefill_len", trace.prefill_len},
                  {"steps", trace.num_steps()},
                  {"calibration_queries", trace.calibration_queries},
                  {"seed", trace.generator.value("seed", json(nullptr))}};

  report.profiles = calibrate_trace(trace, config.probe);
  report.labels = resolve_labels(trace, config, report.profiles, report.label_source);

  std::vector<std::vector<LayerCost>> costs;
  Replay(trace, config, report.labels).run(report, costs);

  report.footprint = footprint_rows(trace, config, report.labels);

  SimulationResult sim = simulate(build_timeline(costs, config.link));
  report.timeline.total_seconds = sim.total_seconds;
  report.timeline.compute_seconds = sim.compute_seconds;
  report.timeline.transfer_seconds = sim.transfer_seconds;
  report.timeline.critical_path_seconds = critical_path(sim.timeline);
  report.timeline.overlap_fraction = sim.overlap_fraction;
  report.timeline.prefetch_stalls = sim.prefetch_stalls;
  report.timeline.events = sim.timeline.events.size();
  report.timeline.per_layer = sim.per_layer;
  result.timeline = std::move(sim.timeline);
  return result;
}

}  // namespace tailorkv
