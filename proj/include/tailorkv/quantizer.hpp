#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tailorkv/kv_model.hpp"
#include "tailorkv/matrix.hpp"

namespace tailorkv {

// Zero-point / scaler of one quantization group. Kept in double at runtime;
// footprint accounting treats both as 16-bit values.
struct QuantParams {
  double zero_point = 0.0;
  double scale = 1.0;
  unsigned bits = 1;
  std::size_t group_size = 1;

  std::uint32_t max_code() const { return (1u << bits) - 1u; }
  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

// z = min, s = (max - min) / (2^b - 1). A constant group gets s = 1.
QuantParams quant_params(std::span<const float> values, unsigned bits);

// clamp(round((x - z) / s), 0, 2^b - 1), ties away from zero.
std::vector<std::uint8_t> quantize_group(std::span<const float> values,
                                         const QuantParams& params);

// code * s + z
std::vector<float> dequantize_group(std::span<const std::uint8_t> codes,
                                    const QuantParams& params);

// Packs b-bit codes into bytes. Code 0 sits in the least-significant bits
// of byte 0; output length is ceil(count * b / 8).
std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> codes, unsigned bits);
std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> bytes, unsigned bits,
                                      std::size_t count);

enum class QuantAxis {
  PerChannel,  // groups of g consecutive tokens within one channel (keys)
  PerToken,    // groups of g consecutive channels within one token (values)
};

const char* to_string(QuantAxis axis);

// A [n x d_h] matrix stored as bit-packed group codes.
//
// Group order (which is also code order in the packed stream):
//   PerChannel: block-major, then channel. Group (blk, c) covers tokens
//               [blk*g, blk*g + g) of channel c. Tokens that do not fill a
//               block stay unquantized in residual().
//   PerToken:   token-major, then channel group. Group (t, j) covers
//               channels [j*g, min(d_h, j*g + g)) of token t; the last
//               group of a row may be short.
class GroupQuantizedTensor {
 public:
  GroupQuantizedTensor() = default;
  GroupQuantizedTensor(QuantAxis axis, unsigned bits, std::size_t group_size,
                       std::size_t cols);

  static GroupQuantizedTensor quantize(const Matrix& x, QuantAxis axis, unsigned bits,
                                       std::size_t group_size);

  // Adds one token row. PerToken rows are quantized immediately; PerChannel
  // rows go to the residual and are quantized once g of them accumulate.
  void append_row(std::span<const float> row);

  QuantAxis axis() const { return axis_; }
  unsigned bits() const { return bits_; }
  std::size_t group_size() const { return group_size_; }
  std::size_t rows() const { return quantized_rows_ + residual_.rows(); }
  std::size_t cols() const { return cols_; }
  std::size_t quantized_rows() const { return quantized_rows_; }
  std::size_t num_groups() const { return params_.size(); }
  std::size_t num_codes() const { return num_codes_; }

  const std::vector<std::uint8_t>& packed_codes() const { return packed_; }
  const std::vector<QuantParams>& group_params() const { return params_; }
  const Matrix& residual() const { return residual_; }

  std::uint8_t code(std::size_t index) const;

  // Reconstruction of the full [rows x cols] matrix, residual included.
  Matrix dequantize() const;

  // Bytes held on the device: packed codes + 16-bit z/s per group +
  // 16-bit residual elements.
  std::size_t storage_bytes() const;

 private:
  void push_group(std::span<const float> values);
  void seal_key_block();

  QuantAxis axis_ = QuantAxis::PerChannel;
  unsigned bits_ = 1;
  std::size_t group_size_ = 1;
  std::size_t cols_ = 0;
  std::size_t quantized_rows_ = 0;
  std::size_t num_codes_ = 0;
  std::vector<std::uint8_t> packed_;
  std::vector<QuantParams> params_;
  Matrix residual_;
};

struct QuantizedHead {
  GroupQuantizedTensor keys;    // PerChannel
  GroupQuantizedTensor values;  // PerToken
};

// Keys per-channel, values per-token, one entry per KV head.
std::vector<QuantizedHead> quantize_layer_kv(const LayerKV& cache, unsigned bits,
                                             std::size_t group_size);

// q . K^T over quantized keys (unscaled), residual rows at full precision.
std::vector<float> qgemv_scores(std::span<const float> query,
                                const GroupQuantizedTensor& qkeys);

// weights . V over quantized values.
std::vector<float> qgemv_output(std::span<const float> weights,
                                const GroupQuantizedTensor& qvalues);

}  // namespace tailorkv
