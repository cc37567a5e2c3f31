#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "tailorkv/quantizer.hpp"

using namespace tailorkv;

namespace {

std::vector<float> random_group(std::mt19937_64& rng, std::size_t g) {
  std::normal_distribution<double> nd(0.0, 3.0);
  std::vector<float> x(g);
  for (auto& v : x) v = static_cast<float>(nd(rng));
  return x;
}

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(r, c);
  for (auto& v : m.flat()) v = static_cast<float>(nd(rng));
  return m;
}

}  // namespace

TEST(QuantGroup, MatchesScalarReference) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 2000; ++trial) {
    const unsigned bits = 1 + trial % 2;
    const auto x = random_group(rng, 1 + rng() % 128);
    const auto want = oracle::quantize(x, bits);
    const QuantParams p = quant_params(x, bits);
    EXPECT_EQ(p.zero_point, want.z);
    EXPECT_EQ(p.scale, want.s);
    const auto codes = quantize_group(x, p);
    ASSERT_EQ(codes.size(), want.codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i) EXPECT_EQ(codes[i], want.codes[i]);
    const auto back = dequantize_group(codes, p);
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_LE(std::abs(double(back[i]) - x[i]), p.scale / 2 + 1e-6);
    }
  }
}

TEST(QuantGroup, EndpointsAndTwoPointGroupsAreExact) {
  for (unsigned bits : {1u, 2u}) {
    std::vector<float> two = {-1.5f, 2.25f, -1.5f, 2.25f};
    const QuantParams p = quant_params(two, bits);
    EXPECT_EQ(dequantize_group(quantize_group(two, p), p), two);

    std::vector<float> x = {0.3f, -7.0f, 4.0f, 1.0f};
    const QuantParams q = quant_params(x, bits);
    const auto back = dequantize_group(quantize_group(x, q), q);
    EXPECT_EQ(back[1], -7.0f);
    EXPECT_EQ(back[2], 4.0f);
  }
}

TEST(QuantGroup, ConstantGroupUsesUnitScale) {
  std::vector<float> x(9, 3.5f);
  const QuantParams p = quant_params(x, 2);
  EXPECT_EQ(p.scale, 1.0);
  EXPECT_EQ(dequantize_group(quantize_group(x, p), p), x);
}

TEST(QuantGroup, HalfwayRoundsAwayFromZero) {
  // z = 0, s = 1 for 2-bit over [0, 3]; 1.5 rounds up to code 2.
  std::vector<float> x = {0.0f, 1.5f, 3.0f};
  const auto codes = quantize_group(x, quant_params(x, 2));
  EXPECT_EQ(codes[1], 2);
}

TEST(QuantGroup, Errors) {
  std::vector<float> x = {1.0f, 2.0f};
  EXPECT_THROW(quant_params(x, 3), ParameterError);
  EXPECT_THROW(quant_params(std::vector<float>{}, 1), ParameterError);
  std::vector<std::uint8_t> bad = {4};
  EXPECT_THROW(dequantize_group(bad, quant_params(x, 2)), EncodingError);
  EXPECT_THROW(GroupQuantizedTensor(QuantAxis::PerToken, 1, 0, 4), ParameterError);
}

TEST(BitPacking, LsbFirstLayoutAndRoundTrip) {
  std::vector<std::uint8_t> codes = {1, 0, 1, 1, 0, 0, 0, 1, 1};
  const auto packed = pack_bits(codes, 1);
  ASSERT_EQ(packed.size(), 2u);
  EXPECT_EQ(packed[0], 0b10001101);
  EXPECT_EQ(packed[1], 0b00000001);
  EXPECT_EQ(unpack_bits(packed, 1, codes.size()), codes);

  std::vector<std::uint8_t> two = {3, 0, 2, 1, 1};
  const auto p2 = pack_bits(two, 2);
  ASSERT_EQ(p2.size(), 2u);
  EXPECT_EQ(p2[0], 0b01100011);
  EXPECT_EQ(p2[1], 0b00000001);
  EXPECT_EQ(unpack_bits(p2, 2, two.size()), two);

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const unsigned bits = 1 + trial % 2;
    std::vector<std::uint8_t> c(rng() % 100);
    for (auto& v : c) v = static_cast<std::uint8_t>(rng() % (1u << bits));
    const auto p = pack_bits(c, bits);
    EXPECT_EQ(p.size(), (c.size() * bits + 7) / 8);
    EXPECT_EQ(unpack_bits(p, bits, c.size()), c);
  }
}

TEST(BitPacking, Errors) {
  std::vector<std::uint8_t> c = {2};
  EXPECT_THROW(pack_bits(c, 1), EncodingError);
  std::vector<std::uint8_t> bytes = {0, 0};
  EXPECT_THROW(unpack_bits(bytes, 1, 3), EncodingError);
}

TEST(GroupQuantizedTensor, PerChannelGroupsTokensAndKeepsResidual) {
  std::mt19937_64 rng(7);
  const std::size_t g = 4, d = 3, n = 10;
  const Matrix x = random_matrix(rng, n, d);
  const auto t = GroupQuantizedTensor::quantize(x, QuantAxis::PerChannel, 2, g);
  EXPECT_EQ(t.quantized_rows(), 8u);
  EXPECT_EQ(t.residual().rows(), 2u);
  EXPECT_EQ(t.num_groups(), 2 * d);
  const Matrix rec = t.dequantize();
  for (std::size_t blk = 0; blk < 2; ++blk) {
    for (std::size_t c = 0; c < d; ++c) {
      std::vector<float> grp;
      for (std::size_t r = 0; r < g; ++r) grp.push_back(x(blk * g + r, c));
      const auto want = oracle::quantize(grp, 2);
      const QuantParams& p = t.group_params()[blk * d + c];
      EXPECT_EQ(p.zero_point, want.z);
      for (std::size_t r = 0; r < g; ++r) {
        EXPECT_EQ(t.code((blk * d + c) * g + r), want.codes[r]);
        EXPECT_FLOAT_EQ(rec(blk * g + r, c), float(want.codes[r] * want.s + want.z));
      }
    }
  }
  for (std::size_t r = 8; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(rec(r, c), x(r, c));
  // Packed codes + 4 bytes per group + 2 bytes per residual element.
  EXPECT_EQ(t.storage_bytes(), (24 * 2 + 7) / 8 + 4 * 6 + 2 * 2 * d);
}

TEST(GroupQuantizedTensor, AppendMatchesBatchQuantization) {
  std::mt19937_64 rng(8);
  for (auto axis : {QuantAxis::PerChannel, QuantAxis::PerToken}) {
    const Matrix x = random_matrix(rng, 37, 10);
    const auto batch = GroupQuantizedTensor::quantize(x, axis, 1, 8);
    GroupQuantizedTensor inc(axis, 1, 8, 10);
    for (std::size_t r = 0; r < x.rows(); ++r) inc.append_row(x.row(r));
    EXPECT_EQ(inc.packed_codes(), batch.packed_codes());
    EXPECT_EQ(inc.group_params(), batch.group_params());
    EXPECT_EQ(inc.dequantize(), batch.dequantize());
  }
}

TEST(GroupQuantizedTensor, PerTokenShortLastGroup) {
  std::mt19937_64 rng(9);
  const Matrix x = random_matrix(rng, 3, 10);
  const auto t = GroupQuantizedTensor::quantize(x, QuantAxis::PerToken, 2, 4);
  EXPECT_EQ(t.num_groups(), 3u * 3u);
  EXPECT_EQ(t.residual().rows(), 0u);
  const Matrix rec = t.dequantize();
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<float> tail = {x(r, 8), x(r, 9)};
    const auto want = oracle::quantize(tail, 2);
    EXPECT_EQ(t.group_params()[r * 3 + 2].group_size, 2u);
    EXPECT_FLOAT_EQ(rec(r, 9), float(want.codes[1] * want.s + want.z));
  }
}

TEST(QuantizeLayer, KeysPerChannelValuesPerToken) {
  std::mt19937_64 rng(10);
  LayerKV cache({random_matrix(rng, 16, 8), random_matrix(rng, 16, 8)},
                {random_matrix(rng, 16, 8), random_matrix(rng, 16, 8)});
  const auto q = quantize_layer_kv(cache, 1, 8);
  ASSERT_EQ(q.size(), 2u);
  EXPECT_EQ(q[0].keys.axis(), QuantAxis::PerChannel);
  EXPECT_EQ(q[0].values.axis(), QuantAxis::PerToken);
  EXPECT_EQ(q[1].keys.dequantize(),
            GroupQuantizedTensor::quantize(cache.keys(1), QuantAxis::PerChannel, 1, 8)
                .dequantize());
}

TEST(Qgemv, MatchesDequantizeThenMultiply) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const unsigned bits = 1 + trial % 2;
    const std::size_t n = 1 + rng() % 80, d = 1 + rng() % 40, g = 1 + rng() % 20;
    const Matrix K = random_matrix(rng, n, d), V = random_matrix(rng, n, d);
    const auto qk = GroupQuantizedTensor::quantize(K, QuantAxis::PerChannel, bits, g);
    const auto qv = GroupQuantizedTensor::quantize(V, QuantAxis::PerToken, bits, g);
    const Matrix Kh = qk.dequantize(), Vh = qv.dequantize();
    const Matrix q = random_matrix(rng, 1, d);
    const auto s = qgemv_scores(q.row(0), qk);
    ASSERT_EQ(s.size(), n);
    for (std::size_t t = 0; t < n; ++t) {
      double want = 0.0, mag = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        want += double(q(0, c)) * Kh(t, c);
        mag += std::abs(double(q(0, c)) * Kh(t, c));
      }
      EXPECT_LE(std::abs(s[t] - want), 1e-3 * std::max(std::abs(want), mag) + 1e-12);
    }
    std::vector<float> w(n);
    for (auto& v : w) v = static_cast<float>((rng() % 1000) / 1000.0);
    const auto o = qgemv_output(w, qv);
    for (std::size_t c = 0; c < d; ++c) {
      double want = 0.0, mag = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        want += double(w[t]) * Vh(t, c);
        mag += std::abs(double(w[t]) * Vh(t, c));
      }
      EXPECT_LE(std::abs(o[c] - want), 1e-3 * std::max(std::abs(want), mag) + 1e-12);
    }
  }
}
