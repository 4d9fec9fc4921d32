#include "saq/report.hpp"

#include "saq/errors.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace saq {

using nlohmann::ordered_json;

ReportFormat report_format_from_string(const std::string& s) {
  if (s == "json") return ReportFormat::Json;
  if (s == "csv") return ReportFormat::Csv;
  throw ConfigError("unknown report format '" + s + "'");
}

namespace {

ordered_json unit_json(const UnitReport& u) {
  return {{"name", u.name},
          {"objective", to_string(u.objective)},
          {"iterations", u.iterations},
          {"initial_loss", u.initial_loss},
          {"final_loss", u.final_loss},
          {"best_iteration", u.best_iteration},
          {"bound_excursions", u.bound_excursions}};
}

UnitReport unit_from(const ordered_json& j) {
  UnitReport u;
  u.name = j.at("name").get<std::string>();
  u.objective = j.at("objective").get<std::string>() == "par" ? ReconObjective::Par : ReconObjective::Local;
  u.iterations = j.at("iterations").get<long>();
  u.initial_loss = j.at("initial_loss").get<double>();
  u.final_loss = j.at("final_loss").get<double>();
  u.best_iteration = j.at("best_iteration").get<long>();
  u.bound_excursions = j.at("bound_excursions").get<int>();
  return u;
}

ordered_json record_json(const RunRecord& r, bool include_runtime) {
  ordered_json j;
  j["seed"] = r.seed;
  j["variant"] = r.variant;
  j["method"] = r.method;
  j["recon"] = r.recon;
  j["granularity"] = r.granularity;
  j["bits"] = r.bits.label();
  j["theta"] = r.theta;
  j["clip_ranges"] = ordered_json::array();
  for (const ClipRange& c : r.clip_ranges) {
    j["clip_ranges"].push_back({{"name", c.name}, {"metric", c.metric}, {"x_low", c.x_low}, {"x_up", c.x_up}});
  }
  j["dist_pcc"] = r.dist_pcc;
  j["hybrid_mse"] = r.hybrid_mse;
  j["mask_iou"] = r.mask_iou;
  if (include_runtime) j["runtime_s"] = r.runtime_s;
  j["units"] = ordered_json::array();
  for (const UnitReport& u : r.units) j["units"].push_back(unit_json(u));
  j["outliers"] = ordered_json::array();
  for (const OutlierEntry& o : r.outliers) {
    j["outliers"].push_back({{"target", o.target},
                             {"columns", o.columns},
                             {"bulk_sigma", o.bulk_sigma},
                             {"max_abs", o.max_abs},
                             {"ratio", o.ratio}});
  }
  j["quant_params"] = ordered_json::array();
  for (const QuantParamRecord& q : r.quant_params) {
    j["quant_params"].push_back({{"tensor_name", q.tensor_name},
                                 {"bits", q.bits},
                                 {"granularity", q.granularity},
                                 {"x_low", q.x_low},
                                 {"x_up", q.x_up},
                                 {"scale", q.scale},
                                 {"zero_point", q.zero_point}});
  }
  j["warnings"] = r.warnings;
  return j;
}

RunRecord record_from(const ordered_json& j) {
  RunRecord r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.variant = j.at("variant").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.recon = j.at("recon").get<std::string>();
  r.granularity = j.at("granularity").get<std::string>();
  r.bits = BitPair::parse(j.at("bits").get<std::string>());
  r.theta = j.at("theta").get<double>();
  for (const auto& c : j.at("clip_ranges")) {
    r.clip_ranges.push_back({c.at("name").get<std::string>(), c.at("metric").get<std::string>(),
                             c.at("x_low").get<double>(), c.at("x_up").get<double>()});
  }
  r.dist_pcc = j.at("dist_pcc").get<double>();
  r.hybrid_mse = j.at("hybrid_mse").get<std::vector<double>>();
  r.mask_iou = j.at("mask_iou").get<double>();
  r.runtime_s = j.value("runtime_s", 0.0);
  for (const auto& u : j.at("units")) r.units.push_back(unit_from(u));
  for (const auto& o : j.at("outliers")) {
    r.outliers.push_back({o.at("target").get<std::string>(), o.at("columns").get<std::vector<int>>(),
                          o.at("bulk_sigma").get<double>(), o.at("max_abs").get<double>(),
                          o.at("ratio").get<double>()});
  }
  for (const auto& q : j.at("quant_params")) {
    r.quant_params.push_back({q.at("tensor_name").get<std::string>(), q.at("bits").get<int>(),
                              q.at("granularity").get<std::string>(), q.at("x_low").get<std::vector<double>>(),
                              q.at("x_up").get<std::vector<double>>(), q.at("scale").get<std::vector<double>>(),
                              q.at("zero_point").get<std::vector<std::int64_t>>()});
  }
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  return r;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string render_report(const Report& report, ReportFormat format, bool include_runtime) {
  if (format == ReportFormat::Csv) {
    std::string out = kCsvColumns;
    out += "\n";
    for (const RunRecord& r : report.records()) {
      std::string mse;
      for (std::size_t i = 0; i < r.hybrid_mse.size(); ++i) mse += (i ? ";" : "") + fmt(r.hybrid_mse[i]);
      out += std::to_string(r.seed) + "," + csv_field(r.variant) + "," + r.method + "," + r.recon + "," +
             r.granularity + "," + r.bits.label() + "," + fmt(r.theta) + "," + fmt(r.dist_pcc) + "," +
             fmt(r.mask_iou) + "," + mse + "," + (include_runtime ? fmt(r.runtime_s) : "") + "\n";
    }
    return out;
  }
  ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["kind"] = report.kind;
  j["settings"] = ordered_json::object();
  for (const auto& [k, v] : report.settings) j["settings"][k] = v;
  j["records"] = ordered_json::array();
  for (const RunRecord& r : report.records()) j["records"].push_back(record_json(r, include_runtime));
  return j.dump(2) + "\n";
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << text;
  if (!out) throw FormatError("write failed for '" + path + "'");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void emit_report(const Report& report, ReportFormat format, const std::string& path) {
  write_text(path, render_report(report, format));
}

Report parse_report(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kReportSchemaVersion) {
      throw FormatError("unsupported report schema version " + std::to_string(version));
    }
    Report rep;
    rep.kind = j.at("kind").get<std::string>();
    for (const auto& [k, v] : j.at("settings").items()) rep.settings.emplace_back(k, v.get<std::string>());
    for (const auto& r : j.at("records")) rep.append(record_from(r));
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
}

Report load_report(const std::string& path) { return parse_report(read_text(path)); }

std::string render_calibration(const CalibrationResult& result) {
  ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["tensors"] = ordered_json::array();
  for (const CalibRecord& r : result.records) {
    j["tensors"].push_back({{"name", r.name},
                            {"metric", to_string(r.metric)},
                            {"bits", r.bits},
                            {"per_channel", r.per_channel},
                            {"x_low", r.x_low},
                            {"x_up", r.x_up},
                            {"objective_value", r.objective},
                            {"candidates_evaluated", r.candidates_evaluated},
                            {"zero_point_clamped", r.zero_point_clamped}});
  }
  j["warnings"] = result.warnings;
  return j.dump(2) + "\n";
}

std::string render_agreement(const AgreementReport& report) {
  ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["items"] = report.items;
  j["mask_iou"] = report.mean_mask_iou;
  j["dist_pcc"] = report.mean_dist_pcc;
  j["hybrid_mse"] = report.stage_hybrid_mse;
  return j.dump(2) + "\n";
}

std::string render_recon(const ReconReport& report) {
  ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["teacher_fake_quant_ops"] = report.teacher_fake_quant_ops;
  j["units"] = ordered_json::array();
  for (const UnitReport& u : report.units) j["units"].push_back(unit_json(u));
  return j.dump(2) + "\n";
}

}  // namespace saq
