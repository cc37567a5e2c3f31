#include "tailorkv/memsim.hpp"

#include <algorithm>
#include <string>

namespace tailorkv {
namespace {

template <typename T>
T need(const std::optional<T>& v, const char* name, FootprintMethod m) {
  if (!v) {
    throw ParameterError(std::string(to_string(m)) + " footprint needs parameter " + name);
  }
  return *v;
}

}  // namespace

const char* to_string(FootprintMethod method) {
  switch (method) {
    case FootprintMethod::Original: return "Original";
    case FootprintMethod::SnapKV: return "SnapKV";
    case FootprintMethod::Quest: return "Quest";
    case FootprintMethod::TailorQ: return "TailorQ";
    case FootprintMethod::TailorS: return "TailorS";
  }
  return "?";
}

double memory_footprint(FootprintMethod m, const FootprintParams& p) {
  const double n = static_cast<double>(need(p.seq_len, "seq_len", m));
  const double h = static_cast<double>(need(p.num_kv_heads, "num_kv_heads", m));
  const double eb = static_cast<double>(p.element_bytes);
  switch (m) {
    case FootprintMethod::Original:
    case FootprintMethod::SnapKV:
    case FootprintMethod::Quest: {
      const double full = 2.0 * static_cast<double>(need(p.num_layers, "num_layers", m)) * n *
                          h * static_cast<double>(need(p.head_dim, "head_dim", m)) * eb;
      if (m == FootprintMethod::Original) return full;
      if (m == FootprintMethod::SnapKV) {
        const double alpha = need(p.budget, "budget", m);
        if (!(alpha > 0.0 && alpha <= 1.0)) throw ParameterError("budget must be in (0, 1]");
        return alpha * full;
      }
      const auto beta = need(p.page_size, "page_size", m);
      if (beta == 0) throw ParameterError("page_size must be >= 1");
      return full * (1.0 + 1.0 / static_cast<double>(beta));
    }
    case FootprintMethod::TailorQ: {
      const auto g = need(p.group_size, "group_size", m);
      const auto lq = need(p.q_layers, "q_layers", m);
      const unsigned b = p.bits.value_or(1);
      if (g == 0) throw ParameterError("group_size must be >= 1");
      if (b != 1 && b != 2) throw ParameterError("TailorQ bits must be 1 or 2");
      // 2 l_q n h d_h (b/16 + 2/g) == 2 l_q n h d_h (b g + 32) / (16 g)
      const double elems = 2.0 * static_cast<double>(lq) * n * h *
                           static_cast<double>(need(p.head_dim, "head_dim", m)) *
                           static_cast<double>(b * g + 32);
      return elems * eb / (16.0 * static_cast<double>(g));
    }
    case FootprintMethod::TailorS:
      return 2.0 * n * h *
             static_cast<double>(need(p.critical_channels, "critical_channels", m)) * eb;
  }
  throw ParameterError("unknown footprint method");
}

TailorFootprint tailor_footprint(std::span<const LayerLabel> labels,
                                 const FootprintParams& params, std::uint64_t n_local) {
  std::uint64_t q_layers = 0;
  std::uint64_t s_layers = 0;
  for (LayerLabel l : labels) {
    (l == LayerLabel::QuantizationFriendly ? q_layers : s_layers)++;
  }
  TailorFootprint out;
  if (q_layers > 0) {
    FootprintParams p = params;
    p.q_layers = q_layers;
    out.quantized_bytes = memory_footprint(FootprintMethod::TailorQ, p);
  }
  if (s_layers > 0) {
    // One double buffer serves every sparsity-friendly layer in turn.
    out.critical_key_bytes = memory_footprint(FootprintMethod::TailorS, params);
    const auto h = params.num_kv_heads.value_or(0);
    const auto d_h = params.head_dim.value_or(0);
    if (h == 0 || d_h == 0) {
      throw ParameterError("local window accounting needs num_kv_heads and head_dim");
    }
    const std::uint64_t window =
        std::min<std::uint64_t>(n_local, params.seq_len.value_or(n_local));
    out.local_window_bytes = static_cast<double>(s_layers * window * 2 * h * d_h *
                                                 params.element_bytes);
  }
  return out;
}

}  // namespace tailorkv
