#include "tailorkv/trace.hpp"

#include <Eigen/Core>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace tailorkv {
namespace {

using nlohmann::json;

struct SectionShape {
  std::string name;
  std::vector<std::size_t> dims;

  std::size_t elements() const {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return n;
  }
};

std::vector<SectionShape> expected_sections(const Trace& t) {
  const auto& m = t.model;
  const std::size_t L = m.num_layers, h = m.num_kv_heads, hq = m.num_query_heads;
  const std::size_t dh = m.head_dim, d = m.hidden_dim(), T = t.steps.size();
  return {
      {"prefill_keys", {L, h, t.prefill_len, dh}},
      {"prefill_values", {L, h, t.prefill_len, dh}},
      {"prefill_queries", {L, hq, t.calibration_queries, dh}},
      {"w_q", {L, d, d}},
      {"hidden_states", {T, L, d}},
      {"queries", {T, L, hq, dh}},
      {"new_keys", {T, L, h, dh}},
      {"new_values", {T, L, h, dh}},
  };
}

class HalfWriter {
 public:
  void put(float v) {
    const std::uint16_t b = float_to_half_bits(v);
    out.push_back(static_cast<std::uint8_t>(b & 0xff));
    out.push_back(static_cast<std::uint8_t>(b >> 8));
  }
  void put(std::span<const float> vs) {
    for (float v : vs) put(v);
  }
  std::vector<std::uint8_t> out;
};

class HalfReader {
 public:
  HalfReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  float next() {
    if (pos_ + 2 > size_) throw TraceFormatError("tensor section truncated");
    const std::uint16_t b = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return half_bits_to_float(b);
  }
  void fill(std::span<float> out) {
    for (float& v : out) v = next();
  }
  Matrix matrix(std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    fill(m.flat());
    return m;
  }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

json model_json(const ModelConfig& m) {
  return {{"num_layers", m.num_layers},
          {"num_query_heads", m.num_query_heads},
          {"num_kv_heads", m.num_kv_heads},
          {"head_dim", m.head_dim},
          {"hidden_dim", m.hidden_dim()},
          {"element_bytes", ModelConfig::element_bytes}};
}

template <typename T>
T field(const json& j, const char* key) {
  if (!j.contains(key)) throw TraceFormatError(std::string("trace header lacks '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw TraceFormatError(std::string("trace header field '") + key + "': " + e.what());
  }
}

}  // namespace

std::uint16_t float_to_half_bits(float v) {
  return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(v));
}

float half_bits_to_float(std::uint16_t bits) {
  return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

float round_to_half(float v) { return half_bits_to_float(float_to_half_bits(v)); }

void round_to_half(Matrix& m) {
  for (float& v : m.flat()) v = round_to_half(v);
}

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

void Trace::validate() const {
  try {
    model.validate();
  } catch (const Error& e) {
    throw TraceFormatError(std::string("trace model: ") + e.what());
  }
  const std::size_t L = model.num_layers;
  const auto bad = [](const std::string& what) { throw TraceFormatError(what); };
  if (prefill_len == 0) bad("trace has an empty prefill");
  if (prefill.size() != L || prefill_queries.size() != L || w_q.size() != L) {
    bad("per-layer section count differs from num_layers");
  }
  if (labels && labels->size() != L) bad("label count differs from num_layers");
  if (calibration_queries > prefill_len) bad("more calibration queries than prefill tokens");
  for (std::size_t l = 0; l < L; ++l) {
    if (prefill[l].num_heads() != model.num_kv_heads || prefill[l].seq_len() != prefill_len ||
        prefill[l].head_dim() != model.head_dim) {
      bad("prefill cache of layer " + std::to_string(l) + " has the wrong shape");
    }
    if (prefill_queries[l].size() != model.num_query_heads) bad("prefill query head count");
    for (const Matrix& q : prefill_queries[l]) {
      if (q.rows() != calibration_queries || q.cols() != model.head_dim) {
        bad("prefill query shape");
      }
    }
    if (w_q[l].rows() != model.hidden_dim() || w_q[l].cols() != model.hidden_dim()) {
      bad("W_q shape of layer " + std::to_string(l));
    }
  }
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const DecodeStep& s = steps[t];
    if (s.hidden.size() != L || s.queries.size() != L || s.new_keys.size() != L ||
        s.new_values.size() != L) {
      bad("decode step " + std::to_string(t) + " does not cover every layer");
    }
    for (std::size_t l = 0; l < L; ++l) {
      if (s.hidden[l].size() != model.hidden_dim()) bad("hidden state width");
      if (s.queries[l].rows() != model.num_query_heads || s.queries[l].cols() != model.head_dim)
        bad("decode query shape");
      if (s.new_keys[l].rows() != model.num_kv_heads || s.new_keys[l].cols() != model.head_dim ||
          s.new_values[l].rows() != model.num_kv_heads ||
          s.new_values[l].cols() != model.head_dim)
        bad("decode key/value shape");
      const auto finite = [](std::span<const float> vs) {
        return std::all_of(vs.begin(), vs.end(), [](float v) { return std::isfinite(v); });
      };
      if (!finite(s.hidden[l]) || !finite(s.queries[l].flat()) ||
          !finite(s.new_keys[l].flat()) || !finite(s.new_values[l].flat())) {
        bad("non-finite value in decode step " + std::to_string(t));
      }
    }
  }
}

std::vector<std::uint8_t> encode_trace(const Trace& trace) {
  trace.validate();
  HalfWriter w;
  const std::size_t L = trace.model.num_layers;
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t h = 0; h < trace.model.num_kv_heads; ++h) w.put(trace.prefill[l].keys(h).flat());
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t h = 0; h < trace.model.num_kv_heads; ++h)
      w.put(trace.prefill[l].values(h).flat());
  for (std::size_t l = 0; l < L; ++l)
    for (const Matrix& q : trace.prefill_queries[l]) w.put(q.flat());
  for (std::size_t l = 0; l < L; ++l) w.put(trace.w_q[l].flat());
  for (const auto& s : trace.steps)
    for (std::size_t l = 0; l < L; ++l) w.put(s.hidden[l]);
  for (const auto& s : trace.steps)
    for (std::size_t l = 0; l < L; ++l) w.put(s.queries[l].flat());
  for (const auto& s : trace.steps)
    for (std::size_t l = 0; l < L; ++l) w.put(s.new_keys[l].flat());
  for (const auto& s : trace.steps)
    for (std::size_t l = 0; l < L; ++l) w.put(s.new_values[l].flat());

  json header;
  header["format"] = "tailorkv-trace";
  header["version"] = kTraceVersion;
  header["model"] = model_json(trace.model);
  header["prefill_len"] = trace.prefill_len;
  header["steps"] = trace.steps.size();
  header["calibration_queries"] = trace.calibration_queries;
  header["generator"] = trace.generator;
  if (trace.labels) {
    json labels = json::array();
    for (LayerLabel l : *trace.labels) labels.push_back(to_string(l));
    header["labels"] = labels;
  } else {
    header["labels"] = nullptr;
  }
  json sections = json::array();
  for (const auto& s : expected_sections(trace)) {
    sections.push_back({{"name", s.name}, {"dims", s.dims}});
  }
  header["sections"] = sections;
  header["tensor_sha256"] = sha256_hex(w.out);

  const std::string text = header.dump();
  std::vector<std::uint8_t> out(std::begin(kTraceMagic), std::end(kTraceMagic));
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), w.out.begin(), w.out.end());
  return out;
}

Trace decode_trace(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || !std::equal(std::begin(kTraceMagic), std::end(kTraceMagic),
                                       bytes.begin())) {
    throw TraceFormatError("not a trace file (bad magic)");
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(bytes[8 + i]) << (8 * i);
  if (len > bytes.size() - 16) throw TraceFormatError("header length exceeds file size");

  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::exception& e) {
    throw TraceFormatError(std::string("trace header is not valid JSON: ") + e.what());
  }
  if (field<std::string>(header, "format") != "tailorkv-trace" ||
      field<int>(header, "version") != kTraceVersion) {
    throw TraceFormatError("unsupported trace format or version");
  }

  Trace t;
  const json& m = header.at("model");
  t.model.num_layers = field<std::size_t>(m, "num_layers");
  t.model.num_query_heads = field<std::size_t>(m, "num_query_heads");
  t.model.num_kv_heads = field<std::size_t>(m, "num_kv_heads");
  t.model.head_dim = field<std::size_t>(m, "head_dim");
  try {
    t.model.validate();
  } catch (const Error& e) {
    throw TraceFormatError(std::string("trace model: ") + e.what());
  }
  if (field<std::size_t>(m, "element_bytes") != ModelConfig::element_bytes) {
    throw TraceFormatError("only 2-byte elements are supported");
  }
  t.prefill_len = field<std::size_t>(header, "prefill_len");
  t.calibration_queries = field<std::size_t>(header, "calibration_queries");
  const auto steps = field<std::size_t>(header, "steps");
  t.generator = header.value("generator", json::object());
  if (header.contains("labels") && !header["labels"].is_null()) {
    std::vector<LayerLabel> labels;
    try {
      for (const auto& l : header["labels"]) labels.push_back(parse_layer_label(l.get<std::string>()));
    } catch (const std::exception& e) {
      throw TraceFormatError(std::string("trace labels: ") + e.what());
    }
    t.labels = std::move(labels);
  }
  t.steps.resize(steps);

  const auto expected = expected_sections(t);
  const json& sections = header.at("sections");
  if (!sections.is_array() || sections.size() != expected.size()) {
    throw TraceFormatError("trace declares an unexpected section list");
  }
  std::size_t total = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto name = field<std::string>(sections[i], "name");
    const auto dims = field<std::vector<std::size_t>>(sections[i], "dims");
    if (name != expected[i].name || dims != expected[i].dims) {
      throw TraceFormatError("section " + std::to_string(i) + " ('" + name +
                             "') does not match the model dimensions");
    }
    total += expected[i].elements() * 2;
  }
  const std::size_t body = 16 + len;
  if (bytes.size() - body != total) {
    throw TraceFormatError("tensor bytes (" + std::to_string(bytes.size() - body) +
                           ") differ from declared sections (" + std::to_string(total) + ")");
  }
  const std::vector<std::uint8_t> tensors(bytes.begin() + static_cast<std::ptrdiff_t>(body),
                                          bytes.end());
  if (sha256_hex(tensors) != field<std::string>(header, "tensor_sha256")) {
    throw TraceFormatError("tensor digest mismatch");
  }

  const std::size_t L = t.model.num_layers, h = t.model.num_kv_heads;
  const std::size_t hq = t.model.num_query_heads, dh = t.model.head_dim;
  const std::size_t d = t.model.hidden_dim();
  HalfReader r(tensors.data(), tensors.size());
  std::vector<std::vector<Matrix>> keys(L), values(L);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t k = 0; k < h; ++k) keys[l].push_back(r.matrix(t.prefill_len, dh));
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t k = 0; k < h; ++k) values[l].push_back(r.matrix(t.prefill_len, dh));
  for (std::size_t l = 0; l < L; ++l) t.prefill.emplace_back(std::move(keys[l]), std::move(values[l]));
  t.prefill_queries.resize(L);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t q = 0; q < hq; ++q)
      t.prefill_queries[l].push_back(r.matrix(t.calibration_queries, dh));
  for (std::size_t l = 0; l < L; ++l) t.w_q.push_back(r.matrix(d, d));
  for (auto& s : t.steps) {
    s.hidden.assign(L, std::vector<float>(d));
    for (auto& hv : s.hidden) r.fill(hv);
  }
  for (auto& s : t.steps)
    for (std::size_t l = 0; l < L; ++l) s.queries.push_back(r.matrix(hq, dh));
  for (auto& s : t.steps)
    for (std::size_t l = 0; l < L; ++l) s.new_keys.push_back(r.matrix(h, dh));
  for (auto& s : t.steps)
    for (std::size_t l = 0; l < L; ++l) s.new_values.push_back(r.matrix(h, dh));
  t.validate();
  return t;
}

void write_trace(const Trace& trace, const std::filesystem::path& path) {
  const auto bytes = encode_trace(trace);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

Trace read_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TraceFormatError("cannot open trace " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_trace(bytes);
}

}  // namespace tailorkv
