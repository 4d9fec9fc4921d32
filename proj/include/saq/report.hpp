#pragma once

#include "saq/calibration.hpp"
#include "saq/harness.hpp"
#include "saq/reconstruction.hpp"

#include <string>

namespace saq {

enum class ReportFormat { Json, Csv };
ReportFormat report_format_from_string(const std::string& s);

/// Fixed CSV header. hybrid_mse holds one value per encoder stage joined by ';'.
inline constexpr const char* kCsvColumns =
    "seed,variant,method,recon,granularity,bits,theta,dist_pcc,mask_iou,hybrid_mse,runtime_s";

/// Serialized report. Identical content yields identical bytes; doubles are
/// printed with round-trip precision. include_runtime=false drops runtime_s
/// (used to compare reruns).
std::string render_report(const Report& report, ReportFormat format, bool include_runtime = true);
void emit_report(const Report& report, ReportFormat format, const std::string& path);
Report parse_report(const std::string& json_text);
Report load_report(const std::string& path);

std::string render_calibration(const CalibrationResult& result);
std::string render_agreement(const AgreementReport& report);
std::string render_recon(const ReconReport& report);

void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

}  // namespace saq
