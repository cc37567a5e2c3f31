#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tailorkv/identifier.hpp"
#include "tailorkv/kv_model.hpp"

namespace tailorkv {

// Binary trace container.
//
//   bytes 0..7    magic "TKVTRACE"
//   bytes 8..15   header length H, unsigned little-endian
//   next H bytes  header JSON (UTF-8)
//   remainder     tensor sections, IEEE-754 binary16 little-endian,
//                 row-major, in the order listed in header["sections"]
//
// Sections (T = steps, L = layers, h = KV heads, hq = query heads,
// n = prefill length, c = calibration queries, d = hq * d_h):
//   prefill_keys     [L, h, n, d_h]
//   prefill_values   [L, h, n, d_h]
//   prefill_queries  [L, hq, c, d_h]   last c prefill queries
//   w_q              [L, d, d]         query projection, hidden x (hq*d_h)
//   hidden_states    [T, L, d]         input of layer l at step t
//   queries          [T, L, hq, d_h]
//   new_keys         [T, L, h, d_h]
//   new_values       [T, L, h, d_h]
//
// header["tensor_sha256"] is the SHA-256 of the tensor bytes.
inline constexpr char kTraceMagic[8] = {'T', 'K', 'V', 'T', 'R', 'A', 'C', 'E'};
inline constexpr int kTraceVersion = 1;

struct DecodeStep {
  std::vector<std::vector<float>> hidden;  // [layer] -> [d]
  std::vector<Matrix> queries;             // [layer] -> [hq x d_h]
  std::vector<Matrix> new_keys;            // [layer] -> [h x d_h]
  std::vector<Matrix> new_values;          // [layer] -> [h x d_h]

  friend bool operator==(const DecodeStep&, const DecodeStep&) = default;
};

struct Trace {
  ModelConfig model;
  std::size_t prefill_len = 0;
  std::size_t calibration_queries = 0;
  nlohmann::json generator = nlohmann::json::object();
  std::optional<std::vector<LayerLabel>> labels;  // pre-calibrated, if any

  std::vector<LayerKV> prefill;                      // [layer]
  std::vector<std::vector<Matrix>> prefill_queries;  // [layer][query head]
  std::vector<Matrix> w_q;                           // [layer]
  std::vector<DecodeStep> steps;

  std::size_t num_steps() const { return steps.size(); }
  // Shape and finiteness checks; throws TraceFormatError.
  void validate() const;

  friend bool operator==(const Trace&, const Trace&) = default;
};

// Round-to-nearest-even binary16 conversion.
std::uint16_t float_to_half_bits(float v);
float half_bits_to_float(std::uint16_t bits);
float round_to_half(float v);
void round_to_half(Matrix& m);

std::string sha256_hex(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> encode_trace(const Trace& trace);
Trace decode_trace(const std::vector<std::uint8_t>& bytes);

void write_trace(const Trace& trace, const std::filesystem::path& path);
Trace read_trace(const std::filesystem::path& path);

}  // namespace tailorkv
