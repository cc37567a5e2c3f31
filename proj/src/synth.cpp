#include "tailorkv/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "tailorkv/retriever.hpp"

namespace tailorkv {
namespace {

using nlohmann::json;

// Amplitude of an active outlier coordinate in the hidden state.
constexpr double kHiddenOutlier = 4.0;
// Planted query outlier. The rest of a query coordinate is roughly unit
// normal, so this keeps the planted sign reliable.
constexpr double kQueryOutlier = 8.0;
// Non-dominant key outliers have magnitude key_outlier * U(0.75, 1.25).
constexpr double kOutlierSpreadLo = 0.75;
constexpr double kOutlierSpreadHi = 1.25;
constexpr double kDominantGrowth = 1.25;
constexpr int kMaxGrowthSteps = 60;

struct HeadPlan {
  std::vector<std::size_t> channels;  // outlier channels in the head
  std::vector<float> signs;           // query sign per outlier channel
  std::vector<std::size_t> dominant;  // dominant token positions
};

struct LayerDraft {
  Matrix w_q;
  std::vector<HeadPlan> heads;
  std::vector<Matrix> keys, values;  // prefill, per KV head
  double dominant_scale = 1.0;
};

class Generator {
 public:
  explicit Generator(const SyntheticSpec& spec) : spec_(spec), rng_(spec.seed) {
    const auto& m = spec.model;
    const std::size_t oc = spec.outliers.num_channels;
    const double rest = static_cast<double>(m.head_dim - oc);
    if (rest == 0.0) {
      key_outlier_ = 4.0;
    } else {
      // Expected energy share with 1.5x headroom over the requested ratio.
      const double spread = 1.0 + std::pow(kOutlierSpreadHi - kOutlierSpreadLo, 2) / 12.0;
      const double r = spec.outliers.magnitude_ratio;
      key_outlier_ = std::sqrt(1.5 * r / (1.0 - r) * rest / (static_cast<double>(oc) * spread));
    }
    query_outlier_ = kQueryOutlier;
  }

  Trace run();

 private:
  double normal() { return normal_(rng_); }
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
  }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_);
  }
  // k distinct values from [0, n), ascending.
  std::vector<std::size_t> distinct(std::size_t n, std::size_t k) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + index(n - i)]);
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    return pool;
  }

  std::vector<float> hidden_base();
  std::vector<float> key_row(AttentionMode mode, const HeadPlan& plan);
  LayerDraft draft_layer(const LayerPattern& pattern);
  void set_dominant(LayerDraft& layer, const Matrix& draws) const;
  bool mass_reached(const LayerDraft& layer, const LayerPattern& pattern,
                    const std::vector<std::vector<Matrix>>& step_queries,
                    const std::vector<Matrix>& step_keys,
                    const std::vector<Matrix>& calib_queries) const;

  const SyntheticSpec& spec_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  double key_outlier_ = 1.0;
  double query_outlier_ = 1.0;
};

std::vector<float> Generator::hidden_base() {
  const std::size_t d = spec_.model.hidden_dim();
  std::vector<float> h(d);
  for (auto& v : h) v = static_cast<float>(normal());
  const std::size_t oc = std::min(spec_.outliers.num_channels, d);
  std::vector<bool> active(oc, true);
  if (spec_.outliers.drift && oc > 0) {
    for (std::size_t i = 0; i < oc; ++i) active[i] = uniform(0.0, 1.0) < 0.5;
    active[index(oc)] = true;
  }
  for (std::size_t i = 0; i < oc; ++i) {
    h[i] = active[i] ? static_cast<float>(kHiddenOutlier) : 0.0f;
  }
  return h;
}

std::vector<float> Generator::key_row(AttentionMode mode, const HeadPlan& plan) {
  std::vector<float> k(spec_.model.head_dim);
  for (auto& v : k) v = static_cast<float>(normal());
  if (mode == AttentionMode::Sparse) {
    for (std::size_t c : plan.channels) {
      const double sign = uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0;
      k[c] = static_cast<float>(sign * key_outlier_ * uniform(kOutlierSpreadLo, kOutlierSpreadHi));
    }
  }
  return k;
}

LayerDraft Generator::draft_layer(const LayerPattern& pattern) {
  const auto& m = spec_.model;
  const std::size_t d = m.hidden_dim();
  LayerDraft layer;
  layer.w_q = Matrix(d, d);
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& v : layer.w_q.flat()) v = static_cast<float>(w_std * normal());

  layer.heads.resize(m.num_kv_heads);
  if (pattern.mode == AttentionMode::Sparse) {
    const std::size_t oc = spec_.outliers.num_channels;
    const std::size_t window = std::max(pattern.num_dominant, spec_.prefill_len * 3 / 4);
    for (std::size_t kv = 0; kv < m.num_kv_heads; ++kv) {
      HeadPlan& plan = layer.heads[kv];
      plan.channels = distinct(m.head_dim, oc);
      for (std::size_t i = 0; i < oc; ++i) plan.signs.push_back(uniform(0.0, 1.0) < 0.5 ? -1.0f : 1.0f);
      plan.dominant = distinct(window, pattern.num_dominant);
      for (std::size_t j = kv * m.gqa_group(); j < (kv + 1) * m.gqa_group(); ++j) {
        for (std::size_t i = 0; i < oc; ++i) {
          layer.w_q(i, j * m.head_dim + plan.channels[i]) =
              static_cast<float>(plan.signs[i] * query_outlier_ / kHiddenOutlier);
        }
      }
    }
  }
  round_to_half(layer.w_q);

  for (std::size_t kv = 0; kv < m.num_kv_heads; ++kv) {
    Matrix keys(0, m.head_dim), values(0, m.head_dim);
    for (std::size_t t = 0; t < spec_.prefill_len; ++t) {
      keys.append_row(key_row(pattern.mode, layer.heads[kv]));
      std::vector<float> v(m.head_dim);
      for (auto& x : v) x = static_cast<float>(normal());
      values.append_row(v);
    }
    round_to_half(keys);
    round_to_half(values);
    layer.keys.push_back(std::move(keys));
    layer.values.push_back(std::move(values));
  }
  return layer;
}

// Overwrites the outlier channels of the dominant rows with sign-aligned
// values scaled by dominant_scale.
void Generator::set_dominant(LayerDraft& layer, const Matrix& draws) const {
  for (std::size_t kv = 0; kv < layer.heads.size(); ++kv) {
    const HeadPlan& plan = layer.heads[kv];
    for (std::size_t r = 0; r < plan.dominant.size(); ++r) {
      const std::size_t t = plan.dominant[r];
      for (std::size_t c = 0; c < layer.keys[kv].cols(); ++c) {
        layer.keys[kv](t, c) = draws(kv * plan.dominant.size() + r, c);
      }
      for (std::size_t i = 0; i < plan.channels.size(); ++i) {
        layer.keys[kv](t, plan.channels[i]) = round_to_half(
            static_cast<float>(plan.signs[i] * key_outlier_ * layer.dominant_scale));
      }
    }
  }
}

bool Generator::mass_reached(const LayerDraft& layer, const LayerPattern& pattern,
                             const std::vector<std::vector<Matrix>>& step_queries,
                             const std::vector<Matrix>& step_keys,
                             const std::vector<Matrix>& calib_queries) const {
  const auto& m = spec_.model;
  const double target = std::min(pattern.mass, 1.0 - 1e-6);
  const auto held = [&](std::span<const float> q, const Matrix& keys, const HeadPlan& plan) {
    const auto w = attention_weights(q, keys);
    double mass = 0.0;
    for (std::size_t t : plan.dominant) mass += w[t];
    return mass >= target;
  };
  for (std::size_t kv = 0; kv < m.num_kv_heads; ++kv) {
    const HeadPlan& plan = layer.heads[kv];
    for (std::size_t j = kv * m.gqa_group(); j < (kv + 1) * m.gqa_group(); ++j) {
      for (std::size_t r = 0; r < calib_queries[j].rows(); ++r) {
        if (!held(calib_queries[j].row(r), layer.keys[kv], plan)) return false;
      }
    }
    Matrix keys = layer.keys[kv];
    for (std::size_t t = 0; t < step_queries.size(); ++t) {
      keys.append_row(step_keys[t].row(kv));
      for (std::size_t j = kv * m.gqa_group(); j < (kv + 1) * m.gqa_group(); ++j) {
        if (!held(step_queries[t][j].row(0), keys, plan)) return false;
      }
    }
  }
  return true;
}

Matrix project(const Matrix& w_q, std::span<const float> hidden, std::size_t heads) {
  Matrix q = estimate_query(w_q, hidden, heads, 0).q_hat;
  round_to_half(q);
  return q;
}

Trace Generator::run() {
  const auto& m = spec_.model;
  const std::size_t L = m.num_layers, T = spec_.steps, C = spec_.calibration_queries;
  std::vector<LayerDraft> layers;
  std::vector<Matrix> dominant_draws;
  for (const auto& pattern : spec_.layers) {
    layers.push_back(draft_layer(pattern));
    const std::size_t rows = pattern.mode == AttentionMode::Sparse
                                 ? m.num_kv_heads * pattern.num_dominant
                                 : 0;
    Matrix draws(rows, m.head_dim);
    for (auto& v : draws.flat()) v = round_to_half(static_cast<float>(normal()));
    dominant_draws.push_back(std::move(draws));
  }

  // Hidden states: [position][layer], residual drift between layers.
  const auto hidden_stack = [&]() {
    std::vector<std::vector<float>> stack(L);
    stack[0] = hidden_base();
    for (std::size_t l = 1; l < L; ++l) {
      stack[l] = stack[l - 1];
      for (auto& v : stack[l]) v += static_cast<float>(spec_.residual_noise * normal());
    }
    for (auto& h : stack)
      for (auto& v : h) v = round_to_half(v);
    return stack;
  };
  std::vector<std::vector<std::vector<float>>> calib_hidden(C), step_hidden(T);
  for (auto& s : calib_hidden) s = hidden_stack();
  for (auto& s : step_hidden) s = hidden_stack();

  Trace trace;
  trace.model = m;
  trace.prefill_len = spec_.prefill_len;
  trace.calibration_queries = C;
  trace.steps.resize(T);
  for (auto& s : trace.steps) {
    s.hidden.resize(L);
    s.queries.resize(L);
    s.new_keys.resize(L);
    s.new_values.resize(L);
  }

  json layer_meta = json::array();
  for (std::size_t l = 0; l < L; ++l) {
    const LayerPattern& pattern = spec_.layers[l];
    LayerDraft& layer = layers[l];

    std::vector<Matrix> calib(m.num_query_heads, Matrix(0, m.head_dim));
    for (std::size_t p = 0; p < C; ++p) {
      const Matrix q = project(layer.w_q, calib_hidden[p][l], m.num_query_heads);
      for (std::size_t j = 0; j < m.num_query_heads; ++j) calib[j].append_row(q.row(j));
    }
    std::vector<std::vector<Matrix>> step_queries(T);
    std::vector<Matrix> step_keys(T), step_values(T);
    for (std::size_t t = 0; t < T; ++t) {
      const Matrix q = project(layer.w_q, step_hidden[t][l], m.num_query_heads);
      for (std::size_t j = 0; j < m.num_query_heads; ++j) {
        step_queries[t].push_back(q.slice_rows(j, j + 1));
      }
      trace.steps[t].hidden[l] = step_hidden[t][l];
      trace.steps[t].queries[l] = q;
      step_keys[t] = Matrix(0, m.head_dim);
      step_values[t] = Matrix(0, m.head_dim);
      for (std::size_t kv = 0; kv < m.num_kv_heads; ++kv) {
        step_keys[t].append_row(key_row(pattern.mode, layer.heads[kv]));
        std::vector<float> v(m.head_dim);
        for (auto& x : v) x = static_cast<float>(normal());
        step_values[t].append_row(v);
      }
      round_to_half(step_keys[t]);
      round_to_half(step_values[t]);
      trace.steps[t].new_keys[l] = step_keys[t];
      trace.steps[t].new_values[l] = step_values[t];
    }

    if (pattern.mode == AttentionMode::Sparse) {
      int grown = 0;
      set_dominant(layer, dominant_draws[l]);
      while (!mass_reached(layer, pattern, step_queries, step_keys, calib)) {
        if (++grown > kMaxGrowthSteps) {
          throw ConfigError("layer " + std::to_string(l) + ": cannot reach attention mass " +
                            std::to_string(pattern.mass) + " on " +
                            std::to_string(pattern.num_dominant) + " dominant tokens");
        }
        layer.dominant_scale *= kDominantGrowth;
        set_dominant(layer, dominant_draws[l]);
      }
    }

    trace.prefill.emplace_back(layer.keys, layer.values);
    trace.prefill_queries.push_back(std::move(calib));
    trace.w_q.push_back(layer.w_q);

    json meta{{"mode", pattern.mode == AttentionMode::Dense ? "dense" : "sparse"}};
    if (pattern.mode == AttentionMode::Sparse) {
      meta["num_dominant"] = pattern.num_dominant;
      meta["mass"] = pattern.mass;
      meta["dominant_scale"] = layer.dominant_scale;
      json heads = json::array();
      for (const auto& plan : layer.heads) {
        heads.push_back({{"outlier_channels", plan.channels}, {"dominant_tokens", plan.dominant}});
      }
      meta["heads"] = heads;
    }
    layer_meta.push_back(meta);
  }

  trace.generator = {
      {"seed", spec_.seed},
      {"prefill_len", spec_.prefill_len},
      {"steps", spec_.steps},
      {"calibration_queries", C},
      {"residual_noise", spec_.residual_noise},
      {"outliers",
       {{"num_channels", spec_.outliers.num_channels},
        {"magnitude_ratio", spec_.outliers.magnitude_ratio},
        {"drift", spec_.outliers.drift}}},
      {"key_outlier_magnitude", key_outlier_},
      {"query_outlier_magnitude", query_outlier_},
      {"layers", layer_meta},
  };
  if (spec_.embed_labels) {
    std::vector<LayerLabel> labels;
    for (const auto& p : spec_.layers) {
      labels.push_back(p.mode == AttentionMode::Dense ? LayerLabel::QuantizationFriendly
                                                      : LayerLabel::SparsityFriendly);
    }
    trace.labels = std::move(labels);
  }
  trace.validate();
  return trace;
}

}  // namespace

void SyntheticSpec::validate() const {
  const auto fail = [](const std::string& what) { throw ConfigError(what); };
  try {
    model.validate();
  } catch (const Error& e) {
    fail(e.what());
  }
  if (layers.size() != model.num_layers) fail("one layer pattern per model layer required");
  if (prefill_len < 1) fail("prefill_len must be >= 1");
  if (calibration_queries > prefill_len) fail("calibration_queries exceeds prefill_len");
  if (!(residual_noise >= 0.0)) fail("residual_noise must be >= 0");
  bool any_sparse = false;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& p = layers[l];
    if (p.mode != AttentionMode::Sparse) continue;
    any_sparse = true;
    const std::string where = "layer " + std::to_string(l) + ": ";
    if (p.num_dominant < 1) fail(where + "sparse layers need num_dominant >= 1");
    if (p.num_dominant > prefill_len) fail(where + "num_dominant exceeds prefill_len");
    if (!(p.mass > 0.0 && p.mass <= 1.0)) fail(where + "mass must lie in (0, 1]");
  }
  if (any_sparse) {
    if (outliers.num_channels < 1 || outliers.num_channels > model.head_dim ||
        outliers.num_channels > model.hidden_dim()) {
      fail("num_outlier_channels must lie in [1, head_dim]");
    }
    if (!(outliers.magnitude_ratio > 0.0 && outliers.magnitude_ratio < 1.0)) {
      fail("magnitude_ratio must lie in (0, 1)");
    }
  }
}

std::vector<LayerPattern> parse_layer_patterns(const std::string& text,
                                               std::size_t num_dominant, double mass) {
  std::vector<LayerPattern> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "D" || item == "d" || item == "dense") {
      out.push_back(LayerPattern::dense());
    } else if (item == "S" || item == "s" || item == "sparse") {
      out.push_back(LayerPattern::sparse(num_dominant, mass));
    } else {
      throw ConfigError("unknown layer pattern '" + item + "' (expected D or S)");
    }
  }
  if (out.empty()) throw ConfigError("empty layer pattern list");
  return out;
}

Trace gen_trace(const SyntheticSpec& spec) {
  spec.validate();
  return Generator(spec).run();
}

}  // namespace tailorkv
