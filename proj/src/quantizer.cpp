#include "tailorkv/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace tailorkv {
namespace {

void check_bits(unsigned bits) {
  if (bits != 1 && bits != 2) {
    throw ParameterError("quantization supports 1 or 2 bits, got " + std::to_string(bits));
  }
}

std::size_t packed_size(std::size_t count, unsigned bits) {
  return (count * bits + 7) / 8;
}

// b divides 8, so a code never straddles a byte boundary.
void put_code(std::vector<std::uint8_t>& bytes, std::size_t index, unsigned bits,
              std::uint8_t code) {
  const std::size_t bit = index * bits;
  if (bit / 8 >= bytes.size()) bytes.resize(bit / 8 + 1, 0);
  bytes[bit / 8] |= static_cast<std::uint8_t>(code << (bit % 8));
}

std::uint8_t get_code(std::span<const std::uint8_t> bytes, std::size_t index,
                      unsigned bits) {
  const std::size_t bit = index * bits;
  return static_cast<std::uint8_t>((bytes[bit / 8] >> (bit % 8)) & ((1u << bits) - 1u));
}

}  // namespace

QuantParams quant_params(std::span<const float> values, unsigned bits) {
  check_bits(bits);
  if (values.empty()) throw ParameterError("quant_params of an empty group");
  require_finite(values, "quantization group");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  QuantParams p;
  p.bits = bits;
  p.group_size = values.size();
  p.zero_point = *lo;
  const double range = double(*hi) - double(*lo);
  p.scale = range > 0.0 ? range / double(p.max_code()) : 1.0;
  return p;
}

std::vector<std::uint8_t> quantize_group(std::span<const float> values,
                                         const QuantParams& params) {
  check_bits(params.bits);
  require_finite(values, "quantization group");
  if (!(params.scale > 0.0)) throw NumericError("quantization scale must be positive");
  const double top = params.max_code();
  std::vector<std::uint8_t> codes(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double r = std::round((double(values[i]) - params.zero_point) / params.scale);
    codes[i] = static_cast<std::uint8_t>(std::clamp(r, 0.0, top));
  }
  return codes;
}

std::vector<float> dequantize_group(std::span<const std::uint8_t> codes,
                                    const QuantParams& params) {
  std::vector<float> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] > params.max_code()) {
      throw EncodingError("code " + std::to_string(codes[i]) + " exceeds " +
                          std::to_string(params.bits) + "-bit range");
    }
    out[i] = static_cast<float>(codes[i] * params.scale + params.zero_point);
  }
  return out;
}

std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> codes, unsigned bits) {
  check_bits(bits);
  std::vector<std::uint8_t> bytes(packed_size(codes.size(), bits), 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] >= (1u << bits)) {
      throw EncodingError("code " + std::to_string(codes[i]) + " does not fit in " +
                          std::to_string(bits) + " bits");
    }
    put_code(bytes, i, bits, codes[i]);
  }
  return bytes;
}

std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> bytes, unsigned bits,
                                      std::size_t count) {
  check_bits(bits);
  if (bytes.size() != packed_size(count, bits)) {
    throw EncodingError("packed length " + std::to_string(bytes.size()) +
                        " does not match " + std::to_string(count) + " codes");
  }
  std::vector<std::uint8_t> codes(count);
  for (std::size_t i = 0; i < count; ++i) codes[i] = get_code(bytes, i, bits);
  return codes;
}

const char* to_string(QuantAxis axis) {
  return axis == QuantAxis::PerChannel ? "per_channel" : "per_token";
}

GroupQuantizedTensor::GroupQuantizedTensor(QuantAxis axis, unsigned bits,
                                           std::size_t group_size, std::size_t cols)
    : axis_(axis), bits_(bits), group_size_(group_size), cols_(cols), residual_(0, cols) {
  check_bits(bits);
  if (group_size < 1) throw ParameterError("group size must be >= 1");
  if (cols < 1) throw DimensionError("quantized tensor needs at least one column");
}

GroupQuantizedTensor GroupQuantizedTensor::quantize(const Matrix& x, QuantAxis axis,
                                                    unsigned bits,
                                                    std::size_t group_size) {
  GroupQuantizedTensor t(axis, bits, group_size, x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) t.append_row(x.row(r));
  return t;
}

void GroupQuantizedTensor::push_group(std::span<const float> values) {
  const QuantParams p = quant_params(values, bits_);
  const auto codes = quantize_group(values, p);
  for (std::uint8_t c : codes) put_code(packed_, num_codes_++, bits_, c);
  params_.push_back(p);
}

void GroupQuantizedTensor::seal_key_block() {
  std::vector<float> column(group_size_);
  for (std::size_t c = 0; c < cols_; ++c) {
    for (std::size_t t = 0; t < group_size_; ++t) column[t] = residual_(t, c);
    push_group(column);
  }
  quantized_rows_ += group_size_;
  residual_ = Matrix(0, cols_);
}

void GroupQuantizedTensor::append_row(std::span<const float> row) {
  if (row.size() != cols_) throw DimensionError("row width does not match tensor");
  require_finite(row, "quantized row");
  if (axis_ == QuantAxis::PerChannel) {
    residual_.append_row(row);
    if (residual_.rows() == group_size_) seal_key_block();
    return;
  }
  for (std::size_t begin = 0; begin < cols_; begin += group_size_) {
    const std::size_t end = std::min(cols_, begin + group_size_);
    push_group(row.subspan(begin, end - begin));
  }
  ++quantized_rows_;
}

std::uint8_t GroupQuantizedTensor::code(std::size_t index) const {
  if (index >= num_codes_) throw EncodingError("code index out of range");
  return get_code(packed_, index, bits_);
}

Matrix GroupQuantizedTensor::dequantize() const {
  Matrix out(rows(), cols_);
  if (axis_ == QuantAxis::PerChannel) {
    for (std::size_t g = 0; g < params_.size(); ++g) {
      const std::size_t block = g / cols_;
      const std::size_t c = g % cols_;
      const QuantParams& p = params_[g];
      for (std::size_t i = 0; i < group_size_; ++i) {
        out(block * group_size_ + i, c) =
            static_cast<float>(code(g * group_size_ + i) * p.scale + p.zero_point);
      }
    }
    for (std::size_t r = 0; r < residual_.rows(); ++r) {
      std::copy_n(residual_.row(r).begin(), cols_, out.row(quantized_rows_ + r).begin());
    }
    return out;
  }
  const std::size_t per_row = (cols_ + group_size_ - 1) / group_size_;
  for (std::size_t t = 0; t < quantized_rows_; ++t) {
    for (std::size_t c = 0; c < cols_; ++c) {
      const QuantParams& p = params_[t * per_row + c / group_size_];
      out(t, c) = static_cast<float>(code(t * cols_ + c) * p.scale + p.zero_point);
    }
  }
  return out;
}

std::size_t GroupQuantizedTensor::storage_bytes() const {
  return packed_size(num_codes_, bits_) + params_.size() * 2 * ModelConfig::element_bytes +
         residual_.rows() * residual_.cols() * ModelConfig::element_bytes;
}

std::vector<QuantizedHead> quantize_layer_kv(const LayerKV& cache, unsigned bits,
                                             std::size_t group_size) {
  if (cache.empty()) throw EmptyCacheError("quantize_layer_kv on an empty cache");
  std::vector<QuantizedHead> heads;
  heads.reserve(cache.num_heads());
  for (std::size_t h = 0; h < cache.num_heads(); ++h) {
    heads.push_back({GroupQuantizedTensor::quantize(cache.keys(h), QuantAxis::PerChannel,
                                                    bits, group_size),
                     GroupQuantizedTensor::quantize(cache.values(h), QuantAxis::PerToken,
                                                    bits, group_size)});
  }
  return heads;
}

std::vector<float> qgemv_scores(std::span<const float> query,
                                const GroupQuantizedTensor& qkeys) {
  if (qkeys.axis() != QuantAxis::PerChannel) {
    throw DimensionError("qgemv_scores expects per-channel quantized keys");
  }
  if (query.size() != qkeys.cols()) throw DimensionError("query width mismatch");
  const std::size_t g = qkeys.group_size();
  const std::size_t cols = qkeys.cols();
  const auto bytes = std::span<const std::uint8_t>(qkeys.packed_codes());
  const unsigned bits = qkeys.bits();
  std::vector<double> acc(qkeys.rows(), 0.0);

  const auto& params = qkeys.group_params();
  for (std::size_t grp = 0; grp < params.size(); ++grp) {
    const std::size_t block = grp / cols;
    const double qc = query[grp % cols];
    const double qs = qc * params[grp].scale;
    const double qz = qc * params[grp].zero_point;
    double* out = acc.data() + block * g;
    const std::size_t first = grp * g;
    for (std::size_t i = 0; i < g; ++i) out[i] += qs * get_code(bytes, first + i, bits) + qz;
  }
  const Matrix& res = qkeys.residual();
  for (std::size_t r = 0; r < res.rows(); ++r) {
    double dot = 0.0;
    for (std::size_t c = 0; c < cols; ++c) dot += double(query[c]) * res(r, c);
    acc[qkeys.quantized_rows() + r] = dot;
  }
  return {acc.begin(), acc.end()};
}

std::vector<float> qgemv_output(std::span<const float> weights,
                                const GroupQuantizedTensor& qvalues) {
  if (qvalues.axis() != QuantAxis::PerToken) {
    throw DimensionError("qgemv_output expects per-token quantized values");
  }
  if (weights.size() != qvalues.rows()) throw DimensionError("weight count mismatch");
  const std::size_t g = qvalues.group_size();
  const std::size_t cols = qvalues.cols();
  const std::size_t per_row = (cols + g - 1) / g;
  const auto bytes = std::span<const std::uint8_t>(qvalues.packed_codes());
  const unsigned bits = qvalues.bits();
  const auto& params = qvalues.group_params();
  std::vector<double> acc(cols, 0.0);
  for (std::size_t t = 0; t < qvalues.quantized_rows(); ++t) {
    const double w = weights[t];
    for (std::size_t j = 0; j < per_row; ++j) {
      const QuantParams& p = params[t * per_row + j];
      const double ws = w * p.scale;
      const double wz = w * p.zero_point;
      const std::size_t end = std::min(cols, (j + 1) * g);
      for (std::size_t c = j * g; c < end; ++c) {
        acc[c] += ws * get_code(bytes, t * cols + c, bits) + wz;
      }
    }
  }
  return {acc.begin(), acc.end()};
}

}  // namespace tailorkv
