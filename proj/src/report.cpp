#include "tailorkv/report.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace tailorkv {
namespace {

using nlohmann::json;

template <typename T>
T get(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(std::string("report field '") + key + "': " + e.what());
  }
}

json profile_json(const LayerProfile& p) {
  return {{"layer", p.layer_index},
          {"per_head_scores", p.per_head_scores},
          {"score", p.score},
          {"label", to_string(p.label)},
          {"per_head_sparse_error", p.per_head_sparse_error},
          {"sparse_error", p.sparse_error}};
}

LayerProfile profile_from(const json& j) {
  LayerProfile p;
  p.layer_index = get<std::size_t>(j, "layer");
  p.per_head_scores = get<std::vector<double>>(j, "per_head_scores");
  p.score = get<double>(j, "score");
  p.label = parse_layer_label(get<std::string>(j, "label"));
  p.per_head_sparse_error = get<std::vector<double>>(j, "per_head_sparse_error");
  p.sparse_error = get<double>(j, "sparse_error");
  return p;
}

json breakdown_json(const LayerBreakdown& b) {
  return {{"layer", b.layer},
          {"compute_seconds", b.compute_seconds},
          {"transfer_seconds", b.transfer_seconds},
          {"span_seconds", b.span_seconds},
          {"stall_seconds", b.stall_seconds},
          {"prefetch_stalls", b.prefetch_stalls}};
}

LayerBreakdown breakdown_from(const json& j) {
  LayerBreakdown b;
  b.layer = get<std::size_t>(j, "layer");
  b.compute_seconds = get<double>(j, "compute_seconds");
  b.transfer_seconds = get<double>(j, "transfer_seconds");
  b.span_seconds = get<double>(j, "span_seconds");
  b.stall_seconds = get<double>(j, "stall_seconds");
  b.prefetch_stalls = get<std::size_t>(j, "prefetch_stalls");
  return b;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, res.ptr};
}

json profiles_to_json(const std::vector<LayerProfile>& profiles) {
  json arr = json::array();
  for (const auto& p : profiles) arr.push_back(profile_json(p));
  return arr;
}

std::vector<LayerProfile> profiles_from_json(const json& j) {
  std::vector<LayerProfile> out;
  for (const auto& p : j) out.push_back(profile_from(p));
  return out;
}

json to_json(const RunReport& r) {
  json j;
  j["schema_version"] = r.schema_version;
  j["config"] = r.config;
  j["trace"] = r.trace;
  j["label_source"] = r.label_source;
  j["profiles"] = profiles_to_json(r.profiles);
  json labels = json::array();
  for (auto l : r.labels) labels.push_back(to_string(l));
  j["labels"] = labels;

  json steps = json::array();
  for (const auto& s : r.steps) {
    steps.push_back({{"step", s.step},
                     {"layer", s.layer},
                     {"label", to_string(s.label)},
                     {"recall", s.recall},
                     {"min_cosine", s.min_cosine},
                     {"max_abs_error", s.max_abs_error},
                     {"selected_mass", s.selected_mass},
                     {"selected", s.selected},
                     {"channels", s.channels}});
  }
  j["steps"] = steps;

  json quant = json::array();
  for (const auto& q : r.quantization) {
    quant.push_back({{"layer", q.layer},
                     {"bits", q.bits},
                     {"group_size", q.group_size},
                     {"key_groups", q.key_groups},
                     {"value_groups", q.value_groups},
                     {"residual_tokens", q.residual_tokens},
                     {"max_abs_error", q.max_abs_error},
                     {"mean_abs_error", q.mean_abs_error},
                     {"max_error_ratio", q.max_error_ratio},
                     {"device_bytes", q.device_bytes}});
  }
  j["quantization"] = quant;

  json fp = json::array();
  for (const auto& f : r.footprint) {
    fp.push_back({{"method", f.method}, {"layer", f.layer}, {"bytes", f.bytes}});
  }
  j["footprint"] = fp;

  json layers = json::array();
  for (const auto& b : r.timeline.per_layer) layers.push_back(breakdown_json(b));
  j["timeline"] = {{"total_seconds", r.timeline.total_seconds},
                   {"compute_seconds", r.timeline.compute_seconds},
                   {"transfer_seconds", r.timeline.transfer_seconds},
                   {"critical_path_seconds", r.timeline.critical_path_seconds},
                   {"overlap_fraction", r.timeline.overlap_fraction},
                   {"prefetch_stalls", r.timeline.prefetch_stalls},
                   {"events", r.timeline.events},
                   {"per_layer", layers}};
  return j;
}

RunReport report_from_json(const json& j) {
  RunReport r;
  r.schema_version = get<std::string>(j, "schema_version");
  if (r.schema_version != kReportSchema) {
    throw Error("unsupported report schema '" + r.schema_version + "'");
  }
  r.config = j.at("config");
  r.trace = j.at("trace");
  r.label_source = get<std::string>(j, "label_source");
  r.profiles = profiles_from_json(j.at("profiles"));
  for (const auto& l : j.at("labels")) r.labels.push_back(parse_layer_label(l.get<std::string>()));
  for (const auto& s : j.at("steps")) {
    StepLayerMetrics m;
    m.step = get<std::size_t>(s, "step");
    m.layer = get<std::size_t>(s, "layer");
    m.label = parse_layer_label(get<std::string>(s, "label"));
    m.recall = get<double>(s, "recall");
    m.min_cosine = get<double>(s, "min_cosine");
    m.max_abs_error = get<double>(s, "max_abs_error");
    m.selected_mass = get<double>(s, "selected_mass");
    m.selected = get<std::vector<std::vector<std::size_t>>>(s, "selected");
    m.channels = get<std::vector<std::vector<std::size_t>>>(s, "channels");
    r.steps.push_back(std::move(m));
  }
  for (const auto& q : j.at("quantization")) {
    QuantizationStats s;
    s.layer = get<std::size_t>(q, "layer");
    s.bits = get<unsigned>(q, "bits");
    s.group_size = get<std::size_t>(q, "group_size");
    s.key_groups = get<std::size_t>(q, "key_groups");
    s.value_groups = get<std::size_t>(q, "value_groups");
    s.residual_tokens = get<std::size_t>(q, "residual_tokens");
    s.max_abs_error = get<double>(q, "max_abs_error");
    s.mean_abs_error = get<double>(q, "mean_abs_error");
    s.max_error_ratio = get<double>(q, "max_error_ratio");
    s.device_bytes = get<std::size_t>(q, "device_bytes");
    r.quantization.push_back(s);
  }
  for (const auto& f : j.at("footprint")) {
    r.footprint.push_back({get<std::string>(f, "method"), get<std::string>(f, "layer"),
                           get<double>(f, "bytes")});
  }
  const json& t = j.at("timeline");
  r.timeline.total_seconds = get<double>(t, "total_seconds");
  r.timeline.compute_seconds = get<double>(t, "compute_seconds");
  r.timeline.transfer_seconds = get<double>(t, "transfer_seconds");
  r.timeline.critical_path_seconds = get<double>(t, "critical_path_seconds");
  r.timeline.overlap_fraction = get<double>(t, "overlap_fraction");
  r.timeline.prefetch_stalls = get<std::size_t>(t, "prefetch_stalls");
  r.timeline.events = get<std::size_t>(t, "events");
  for (const auto& b : t.at("per_layer")) r.timeline.per_layer.push_back(breakdown_from(b));
  return r;
}

json timeline_to_json(const TransferTimeline& timeline) {
  json events = json::array();
  for (const auto& e : timeline.events) {
    events.push_back({{"kind", to_string(e.kind)},
                      {"layer", e.layer},
                      {"label", e.label},
                      {"start", e.start},
                      {"duration", e.duration},
                      {"depends_on", e.depends_on}});
  }
  return events;
}

std::string footprint_csv(const std::vector<FootprintRow>& rows) {
  std::ostringstream out;
  out << "method,layer,bytes\n";
  for (const auto& r : rows) out << r.method << ',' << r.layer << ',' << format_number(r.bytes) << '\n';
  return out.str();
}

std::vector<std::filesystem::path> emit_report(const RunReport& report, ReportFormat format,
                                               const std::filesystem::path& path) {
  if (format == ReportFormat::Json) {
    write_text(path, to_json(report).dump(2) + "\n");
    return {path};
  }
  std::filesystem::create_directories(path);
  std::vector<std::filesystem::path> files;
  const auto emit = [&](const char* name, const std::string& text) {
    files.push_back(path / name);
    write_text(files.back(), text);
  };

  std::ostringstream profiles;
  profiles << "layer,score,label,sparse_error\n";
  for (const auto& p : report.profiles) {
    profiles << p.layer_index << ',' << format_number(p.score) << ',' << to_string(p.label) << ','
             << format_number(p.sparse_error) << '\n';
  }
  emit("profiles.csv", profiles.str());

  std::ostringstream recall;
  recall << "step,layer,label,recall\n";
  for (const auto& s : report.steps) {
    recall << s.step << ',' << s.layer << ',' << to_string(s.label) << ','
           << format_number(s.recall) << '\n';
  }
  emit("recall.csv", recall.str());

  std::ostringstream fidelity;
  fidelity << "step,layer,label,min_cosine,max_abs_error,selected_mass\n";
  for (const auto& s : report.steps) {
    fidelity << s.step << ',' << s.layer << ',' << to_string(s.label) << ','
             << format_number(s.min_cosine) << ',' << format_number(s.max_abs_error) << ','
             << format_number(s.selected_mass) << '\n';
  }
  emit("fidelity.csv", fidelity.str());

  std::ostringstream quant;
  quant << "layer,bits,group_size,key_groups,value_groups,residual_tokens,max_abs_error,"
           "mean_abs_error,max_error_ratio,device_bytes\n";
  for (const auto& q : report.quantization) {
    quant << q.layer << ',' << q.bits << ',' << q.group_size << ',' << q.key_groups << ','
          << q.value_groups << ',' << q.residual_tokens << ',' << format_number(q.max_abs_error)
          << ',' << format_number(q.mean_abs_error) << ',' << format_number(q.max_error_ratio)
          << ',' << q.device_bytes << '\n';
  }
  emit("quantization.csv", quant.str());

  emit("footprint.csv", footprint_csv(report.footprint));

  std::ostringstream tl;
  tl << "layer,compute_seconds,transfer_seconds,span_seconds,stall_seconds,prefetch_stalls\n";
  for (const auto& b : report.timeline.per_layer) {
    tl << b.layer << ',' << format_number(b.compute_seconds) << ','
       << format_number(b.transfer_seconds) << ',' << format_number(b.span_seconds) << ','
       << format_number(b.stall_seconds) << ',' << b.prefetch_stalls << '\n';
  }
  emit("timeline.csv", tl.str());
  return files;
}

}  // namespace tailorkv
