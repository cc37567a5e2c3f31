#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "oracles.hpp"
#include "tailorkv/pipeline.hpp"
#include "tailorkv/report.hpp"
#include "tailorkv/synth.hpp"
#include "tailorkv/trace.hpp"

using namespace tailorkv;
namespace fs = std::filesystem;

namespace {

SyntheticSpec small_spec(const std::string& layers, std::uint64_t seed = 1) {
  SyntheticSpec s;
  s.model = {0, 4, 4, 64};
  s.layers = parse_layer_patterns(layers, 4, 0.99);
  s.model.num_layers = s.layers.size();
  s.seed = seed;
  return s;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "tailorkv_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<double> as_double(std::span<const float> v) { return {v.begin(), v.end()}; }

oracle::Rows rows_of(const Matrix& m) {
  oracle::Rows out;
  for (std::size_t r = 0; r < m.rows(); ++r) out.push_back(as_double(m.row(r)));
  return out;
}

// Exact weights of a decode query over the prefill plus the first t+1 new tokens.
std::vector<double> decode_weights(const Trace& tr, std::size_t t, std::size_t l,
                                   std::size_t qh) {
  const std::size_t kv = tr.model.kv_head_of(qh);
  oracle::Rows K = rows_of(tr.prefill[l].keys(kv));
  for (std::size_t s = 0; s <= t; ++s) K.push_back(as_double(tr.steps[s].new_keys[l].row(kv)));
  return oracle::attention_weights(as_double(tr.steps[t].queries[l].row(qh)), K);
}

}  // namespace

TEST(Trace, EncodeDecodeRoundTrip) {
  const Trace tr = gen_trace(small_spec("D,S"));
  const auto bytes = encode_trace(tr);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "TKVTRACE");
  const Trace back = decode_trace(bytes);
  EXPECT_EQ(back, tr);
  // Section sizes: product of dims x 2 bytes.
  const std::size_t L = 2, h = 4, hq = 4, n = 256, c = 32, dh = 64, d = 256, T = 4;
  const std::size_t tensor = 2 * (2 * L * h * n * dh + L * hq * c * dh + L * d * d +
                                  T * L * d + T * L * hq * dh + 2 * T * L * h * dh);
  std::uint64_t header = 0;
  for (int i = 0; i < 8; ++i) header |= std::uint64_t(bytes[8 + i]) << (8 * i);
  EXPECT_EQ(bytes.size(), 16 + header + tensor);
}

TEST(Trace, CorruptionIsDetected) {
  const Trace tr = gen_trace(small_spec("S"));
  auto bytes = encode_trace(tr);
  auto flipped = bytes;
  flipped.back() ^= 0x01;
  EXPECT_THROW(decode_trace(flipped), TraceFormatError);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 2);
  EXPECT_THROW(decode_trace(truncated), TraceFormatError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_trace(magic), TraceFormatError);
  EXPECT_THROW(decode_trace({}), TraceFormatError);
  EXPECT_THROW(read_trace(temp_path("does_not_exist.tkv")), TraceFormatError);
}

TEST(Trace, HalfConversion) {
  EXPECT_EQ(float_to_half_bits(1.0f), 0x3C00);
  EXPECT_EQ(float_to_half_bits(-2.0f), 0xC000);
  EXPECT_EQ(half_bits_to_float(0x7BFF), 65504.0f);
  EXPECT_EQ(round_to_half(1.0f + 1.0f / 4096.0f), 1.0f);
  EXPECT_EQ(sha256_hex({}),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(GenTrace, DenseLayersAreSpread) {
  const Trace tr = gen_trace(small_spec("D,D"));
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t j = 0; j < 4; ++j) {
      const auto w = decode_weights(tr, 0, l, j);
      EXPECT_GE(1.0 - oracle::top_mass(w, 13), 0.5);
    }
}

TEST(GenTrace, SparseLayersConcentrateOnDominantTokens) {
  const Trace tr = gen_trace(small_spec("S,S"));
  for (std::size_t t = 0; t < tr.num_steps(); ++t)
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_LE(1.0 - oracle::top_mass(decode_weights(tr, t, l, j), 4), 0.01);
      }
}

TEST(GenTrace, OutlierChannelsCarryKeyEnergy) {
  const SyntheticSpec spec = small_spec("S,S,S");
  const Trace tr = gen_trace(spec);
  const auto& meta = tr.generator.at("layers");
  for (std::size_t l = 0; l < 3; ++l) {
    for (std::size_t kv = 0; kv < 4; ++kv) {
      const auto ch = meta[l]["heads"][kv]["outlier_channels"].get<std::vector<std::size_t>>();
      ASSERT_EQ(ch.size(), spec.outliers.num_channels);
      const Matrix& K = tr.prefill[l].keys(kv);
      double total = 0.0, planted = 0.0;
      for (std::size_t t = 0; t < K.rows(); ++t)
        for (std::size_t c = 0; c < K.cols(); ++c) {
          const double e = double(K(t, c)) * K(t, c);
          total += e;
          if (std::find(ch.begin(), ch.end(), c) != ch.end()) planted += e;
        }
      EXPECT_GE(planted / total, spec.outliers.magnitude_ratio);
    }
  }
}

TEST(GenTrace, DeterministicAndSeedSensitive) {
  const auto a = encode_trace(gen_trace(small_spec("D,S", 5)));
  const auto b = encode_trace(gen_trace(small_spec("D,S", 5)));
  const auto c = encode_trace(gen_trace(small_spec("D,S", 6)));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(GenTrace, RejectsInfeasibleSpecs) {
  SyntheticSpec s = small_spec("S");
  s.layers[0].num_dominant = 0;
  s.layers[0].mass = 1.0;
  EXPECT_THROW(gen_trace(s), ConfigError);
  s = small_spec("S");
  s.layers[0].mass = 1.5;
  EXPECT_THROW(gen_trace(s), ConfigError);
  s = small_spec("S");
  s.layers.push_back(LayerPattern::dense());
  EXPECT_THROW(gen_trace(s), ConfigError);
  EXPECT_THROW(parse_layer_patterns("D,X", 4, 0.99), ConfigError);
}

TEST(Pipeline, CalibrationClassifiesDenseAsQuantizationFriendly) {
  const Trace tr = gen_trace(small_spec("D,S,S,S"));
  const auto prof = calibrate_trace(tr, SparsityProbe{});
  ASSERT_EQ(prof.size(), 4u);
  EXPECT_EQ(prof[0].label, LayerLabel::QuantizationFriendly);
  for (std::size_t l = 1; l < 4; ++l) EXPECT_EQ(prof[l].label, LayerLabel::SparsityFriendly);
  const auto r = run_pipeline(tr, RunConfig{});
  EXPECT_EQ(r.report.label_source, "calibration");
  EXPECT_EQ(r.report.quantization.size(), 1u);
  EXPECT_LE(r.report.quantization[0].max_error_ratio, 1.0 + 1e-6);
}

TEST(Pipeline, LabelSources) {
  SyntheticSpec spec = small_spec("D,S,S");
  spec.embed_labels = true;
  const Trace tr = gen_trace(spec);
  RunConfig cfg;
  EXPECT_EQ(run_pipeline(tr, cfg).report.label_source, "trace");
  cfg.q_layers = std::vector<std::size_t>{0, 1};
  const auto r = run_pipeline(tr, cfg);
  EXPECT_EQ(r.report.label_source, "config");
  EXPECT_EQ(r.report.labels[1], LayerLabel::QuantizationFriendly);
  cfg.q_layers = std::vector<std::size_t>{7};
  EXPECT_THROW(run_pipeline(tr, cfg), ConfigError);
}

TEST(Pipeline, FullChannelsWithoutLocalWindowGiveFullRecall) {
  const Trace tr = gen_trace(small_spec("D,S,S"));
  RunConfig cfg;
  cfg.q_layers = std::vector<std::size_t>{};
  cfg.retrieval = {0, 128, 64};
  const auto r = run_pipeline(tr, cfg);
  for (const auto& s : r.report.steps) EXPECT_DOUBLE_EQ(s.recall, 1.0);
}

TEST(Pipeline, SelectAllPassthroughIsExact) {
  const Trace tr = gen_trace(small_spec("D,S"));
  RunConfig cfg;
  cfg.q_layers = std::vector<std::size_t>{};
  cfg.bits = kPassthroughBits;
  cfg.retrieval = {64, 1024, 8};
  const auto r = run_pipeline(tr, cfg);
  for (const auto& s : r.report.steps) {
    EXPECT_GE(s.min_cosine, 1.0 - 1e-6);
    EXPECT_NEAR(s.selected_mass, 1.0, 1e-6);
  }
}

TEST(Pipeline, TraceShorterThanProbe) {
  const Trace tr = gen_trace(small_spec("D,S"));
  RunConfig cfg;
  cfg.probe.n_q = 64;
  EXPECT_THROW(run_pipeline(tr, cfg), ConfigError);
}

TEST(Report, JsonRoundTripAndSchema) {
  const Trace tr = gen_trace(small_spec("D,S,S"));
  const auto r = run_pipeline(tr, RunConfig{}).report;
  const nlohmann::json j = to_json(r);
  EXPECT_EQ(j.at("schema_version"), kReportSchema);
  EXPECT_EQ(report_from_json(nlohmann::json::parse(j.dump())), r);
  const fs::path p = temp_path("report.json");
  emit_report(r, ReportFormat::Json, p);
  std::ifstream in(p);
  EXPECT_EQ(report_from_json(nlohmann::json::parse(in)), r);
  EXPECT_EQ(j.at("config").at("n_topk"), 128);
  EXPECT_EQ(j.at("config").at("tau"), 0.2);
}

TEST(Report, CsvTables) {
  const Trace tr = gen_trace(small_spec("D,S,S"));
  const auto r = run_pipeline(tr, RunConfig{}).report;
  const fs::path dir = temp_path("csv");
  fs::remove_all(dir);
  const auto files = emit_report(r, ReportFormat::Csv, dir);
  EXPECT_EQ(files.size(), 6u);
  std::ifstream in(dir / "recall.csv");
  std::size_t lines = 0;
  for (std::string s; std::getline(in, s);) ++lines;
  EXPECT_EQ(lines, 1 + 3 * tr.num_steps());
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(256.0), "256");
}

TEST(Report, DeterministicAcrossRuns) {
  const Trace tr = gen_trace(small_spec("D,S,S"));
  EXPECT_EQ(to_json(run_pipeline(tr, RunConfig{}).report).dump(),
            to_json(run_pipeline(tr, RunConfig{}).report).dump());
}

#ifdef TAILORKV_CLI
TEST(Cli, ExitCodesAndDeterministicFiles) {
  const std::string cli = TAILORKV_CLI;
  const auto run = [&](const std::string& args) {
    const int status = std::system((cli + " " + args + " > /dev/null 2>&1").c_str());
    return WEXITSTATUS(status);
  };
  const fs::path a = temp_path("cli_a.tkv"), b = temp_path("cli_b.tkv");
  ASSERT_EQ(run("gen-trace --layers D,S --seed 3 -o " + a.string()), 0);
  ASSERT_EQ(run("gen-trace --layers D,S --seed 3 -o " + b.string()), 0);
  EXPECT_EQ(slurp(a), slurp(b));
  const fs::path ra = temp_path("cli_a.json"), rb = temp_path("cli_b.json");
  EXPECT_EQ(run("run " + a.string() + " -o " + ra.string()), 0);
  EXPECT_EQ(run("run " + b.string() + " -o " + rb.string()), 0);
  EXPECT_EQ(slurp(ra), slurp(rb));
  EXPECT_EQ(run("run " + a.string() + " --bits 3"), 2);
  EXPECT_EQ(run("run " + a.string() + " --q-layers 9"), 2);
  EXPECT_EQ(run("gen-trace --layers D,S --mass 0 -o " + temp_path("x.tkv").string()), 2);
  EXPECT_EQ(run("run " + a.string() + " --no-such-flag"), 2);
  const fs::path junk = temp_path("junk.tkv");
  std::ofstream(junk) << "not a trace";
  EXPECT_EQ(run("run " + junk.string()), 3);
  EXPECT_EQ(run("calibrate " + a.string()), 0);
  EXPECT_EQ(run("timeline " + a.string()), 0);
  EXPECT_EQ(run("footprint --num-layers 32 --seq-len 524288 --kv-heads 32 --head-dim 128"), 0);
}
#endif
