// tailorkv: synthetic traces, calibration, end-to-end runs, footprint and
// timeline reports.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tailorkv/memsim.hpp"
#include "tailorkv/pipeline.hpp"
#include "tailorkv/report.hpp"
#include "tailorkv/synth.hpp"
#include "tailorkv/trace.hpp"

using namespace tailorkv;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitTrace = 3;

// "0,1" -> {0, 1}; "none" or "" -> {}
std::vector<std::size_t> parse_index_list(const std::string& text) {
  std::vector<std::size_t> out;
  if (text.empty() || text == "none") return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(item, &pos);
      if (pos != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("bad layer index '" + item + "' in --q-layers");
    }
  }
  return out;
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << text;
}

struct RunOptions {
  RunConfig config;
  std::string q_layers;
  std::string link = "pcie4";
  double bandwidth = 0.0;

  void add(CLI::App* app) {
    app->add_option("--tau", config.probe.tau, "Quantization-friendly threshold on P_l")
        ->capture_default_str();
    app->add_option("--n-q", config.probe.n_q, "Recent prefill queries per head")
        ->capture_default_str();
    app->add_option("--probe-k", config.probe.k, "Top-k of the sparsity probe (0 = 5% of n)")
        ->capture_default_str();
    app->add_option("--bits", config.bits, "Code width for Q layers: 1, 2 or 16 (passthrough)")
        ->capture_default_str();
    app->add_option("--group-size", config.group_size)->capture_default_str();
    app->add_option("--n-local", config.retrieval.n_local)->capture_default_str();
    app->add_option("--n-topk", config.retrieval.n_topk)->capture_default_str();
    app->add_option("--critical-channels", config.retrieval.d_s)->capture_default_str();
    app->add_option("--q-layers", q_layers,
                    "Explicit quantization-friendly layers, e.g. 0,1 ('none' for an empty set)");
    app->add_option("--link", link, "Link preset")
        ->check(CLI::IsMember({"pcie1", "pcie4"}))
        ->capture_default_str();
    app->add_option("--bandwidth", bandwidth, "Link bandwidth in bytes/s (overrides --link)");
    app->add_option("--layer-compute-seconds", config.layer_compute_seconds)
        ->capture_default_str();
    app->add_option("--estimate-seconds", config.estimate_seconds)->capture_default_str();
    app->add_option("--scoring-seconds", config.scoring_seconds)->capture_default_str();
    app->add_option("--snapkv-budget", config.snapkv_budget, "SnapKV alpha");
    app->add_option("--quest-page-size", config.quest_page_size)->capture_default_str();
  }

  RunConfig resolve(CLI::App* app) const {
    RunConfig c = config;
    if (app->count("--q-layers")) c.q_layers = parse_index_list(q_layers);
    c.link = link == "pcie1" ? LinkModel::pcie1() : LinkModel::pcie4();
    if (app->count("--bandwidth")) c.link.bandwidth = bandwidth;
    return c;
  }
};

int cmd_gen_trace(const SyntheticSpec& base, const std::string& layers, std::size_t dominant,
                  double mass, const std::string& out) {
  SyntheticSpec spec = base;
  spec.layers = parse_layer_patterns(layers, dominant, mass);
  spec.model.num_layers = spec.layers.size();
  const Trace trace = gen_trace(spec);
  write_trace(trace, out);
  std::cout << "wrote " << out << " (" << trace.model.num_layers << " layers, "
            << trace.prefill_len << " prefill tokens, " << trace.num_steps() << " steps)\n";
  return kExitOk;
}

int cmd_calibrate(const std::string& trace_path, const SparsityProbe& probe,
                  const std::string& out) {
  const Trace trace = read_trace(trace_path);
  const auto profiles = calibrate_trace(trace, probe);
  json j = {{"tau", probe.tau}, {"n_q", probe.n_q}, {"profiles", profiles_to_json(profiles)}};
  write_output(out, j.dump(2) + "\n");
  return kExitOk;
}

int cmd_run(const std::string& trace_path, const RunConfig& config, const std::string& format,
            const std::string& out) {
  const Trace trace = read_trace(trace_path);
  const PipelineResult result = run_pipeline(trace, config);
  if (format == "csv") {
    if (out.empty() || out == "-") throw ConfigError("--format csv needs an output directory");
    for (const auto& p : emit_report(result.report, ReportFormat::Csv, out)) {
      std::cout << p.string() << "\n";
    }
    return kExitOk;
  }
  if (out.empty() || out == "-") {
    std::cout << to_json(result.report).dump(2) << "\n";
  } else {
    emit_report(result.report, ReportFormat::Json, out);
  }
  return kExitOk;
}

int cmd_timeline(const std::string& trace_path, const RunConfig& config,
                 const std::string& out) {
  const Trace trace = read_trace(trace_path);
  const PipelineResult result = run_pipeline(trace, config);
  const TimelineSummary& s = result.report.timeline;
  json j = {{"total_seconds", s.total_seconds},
            {"compute_seconds", s.compute_seconds},
            {"transfer_seconds", s.transfer_seconds},
            {"critical_path_seconds", s.critical_path_seconds},
            {"overlap_fraction", s.overlap_fraction},
            {"prefetch_stalls", s.prefetch_stalls},
            {"events", timeline_to_json(result.timeline)}};
  write_output(out, j.dump(2) + "\n");
  return kExitOk;
}

int cmd_footprint(const FootprintParams& p, std::uint64_t n_local, const std::string& labels,
                  const std::string& out) {
  std::ostringstream csv;
  csv << "method,bytes\n";
  const auto row = [&](FootprintMethod m) {
    csv << to_string(m) << ',' << format_number(memory_footprint(m, p)) << '\n';
  };
  row(FootprintMethod::Original);
  if (p.budget) row(FootprintMethod::SnapKV);
  if (p.page_size) row(FootprintMethod::Quest);
  if (p.q_layers && p.group_size) row(FootprintMethod::TailorQ);
  if (p.critical_channels) row(FootprintMethod::TailorS);
  if (!labels.empty()) {
    std::vector<LayerLabel> parsed;
    std::stringstream ss(labels);
    std::string item;
    while (std::getline(ss, item, ',')) parsed.push_back(parse_layer_label(item));
    const TailorFootprint t = tailor_footprint(parsed, p, n_local);
    csv << "TailorKV," << format_number(t.total()) << '\n';
  }
  write_output(out, csv.str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TailorKV KV-cache compression toolkit"};
  app.require_subcommand(1);

  // gen-trace
  SyntheticSpec spec;
  spec.model.num_query_heads = 4;
  spec.model.num_kv_heads = 4;
  spec.model.head_dim = 64;
  std::string layers = "D,S,S,S";
  std::size_t dominant = 4;
  double mass = 0.99;
  std::string trace_out = "trace.tkv";
  auto* gen = app.add_subcommand("gen-trace", "Write a deterministic synthetic trace");
  gen->add_option("--layers", layers, "Per-layer mode, D (dense) or S (sparse)")
      ->capture_default_str();
  gen->add_option("--query-heads", spec.model.num_query_heads)->capture_default_str();
  gen->add_option("--kv-heads", spec.model.num_kv_heads)->capture_default_str();
  gen->add_option("--head-dim", spec.model.head_dim)->capture_default_str();
  gen->add_option("--prefill-len", spec.prefill_len)->capture_default_str();
  gen->add_option("--steps", spec.steps)->capture_default_str();
  gen->add_option("--calibration-queries", spec.calibration_queries)->capture_default_str();
  gen->add_option("--num-dominant", dominant)->capture_default_str();
  gen->add_option("--mass", mass)->capture_default_str();
  gen->add_option("--outlier-channels", spec.outliers.num_channels)->capture_default_str();
  gen->add_option("--magnitude-ratio", spec.outliers.magnitude_ratio)->capture_default_str();
  gen->add_flag("--drift", spec.outliers.drift, "Move active outlier channels every step");
  gen->add_option("--residual-noise", spec.residual_noise)->capture_default_str();
  gen->add_option("--seed", spec.seed)->capture_default_str();
  gen->add_flag("--embed-labels", spec.embed_labels, "Store D->Q / S->S labels in the header");
  gen->add_option("-o,--output", trace_out)->capture_default_str();

  // calibrate
  std::string trace_path;
  std::string out;
  SparsityProbe probe;
  auto* cal = app.add_subcommand("calibrate", "Classify layers from a trace's prefill queries");
  cal->add_option("trace", trace_path)->required();
  cal->add_option("--tau", probe.tau)->capture_default_str();
  cal->add_option("--n-q", probe.n_q)->capture_default_str();
  cal->add_option("--probe-k", probe.k)->capture_default_str();
  cal->add_option("-o,--output", out, "Output file (default stdout)");

  // run
  RunOptions run_opts;
  std::string format = "json";
  auto* run = app.add_subcommand("run", "Replay a trace through the full pipeline");
  run->add_option("trace", trace_path)->required();
  run_opts.add(run);
  run->add_option("--format", format)->check(CLI::IsMember({"json", "csv"}))
      ->capture_default_str();
  run->add_option("-o,--output", out, "Report file (json) or directory (csv)");

  // timeline
  RunOptions tl_opts;
  auto* tl = app.add_subcommand("timeline", "Scheduled transfer timeline of a trace replay");
  tl->add_option("trace", trace_path)->required();
  tl_opts.add(tl);
  tl->add_option("-o,--output", out, "Output file (default stdout)");

  // footprint
  FootprintParams fp;
  fp.bits = 1;
  std::uint64_t n_local = 64;
  std::string labels;
  auto* foot = app.add_subcommand("footprint", "Closed-form device KV bytes per method");
  foot->add_option("--num-layers", fp.num_layers)->required();
  foot->add_option("--seq-len", fp.seq_len)->required();
  foot->add_option("--kv-heads", fp.num_kv_heads)->required();
  foot->add_option("--head-dim", fp.head_dim)->required();
  foot->add_option("--budget", fp.budget, "SnapKV alpha");
  foot->add_option("--page-size", fp.page_size, "Quest beta");
  foot->add_option("--num-q-layers", fp.q_layers);
  foot->add_option("--group-size", fp.group_size);
  foot->add_option("--bits", fp.bits)->capture_default_str();
  foot->add_option("--critical-channels", fp.critical_channels);
  foot->add_option("--labels", labels, "Per-layer labels, e.g. Q,S,S,S");
  foot->add_option("--n-local", n_local)->capture_default_str();
  foot->add_option("-o,--output", out, "Output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_trace(spec, layers, dominant, mass, trace_out);
    if (*cal) return cmd_calibrate(trace_path, probe, out);
    if (*run) return cmd_run(trace_path, run_opts.resolve(run), format, out);
    if (*tl) return cmd_timeline(trace_path, tl_opts.resolve(tl), out);
    if (*foot) return cmd_footprint(fp, n_local, labels, out);
  } catch (const TraceFormatError& e) {
    std::cerr << "error: malformed trace: " << e.what() << "\n";
    return kExitTrace;
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid config: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParameterError& e) {
    std::cerr << "error: invalid config: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
