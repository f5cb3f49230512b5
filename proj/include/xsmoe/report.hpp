#pragma once

// Reading back JSON-lines run reports and rendering comparison tables and
// plot data.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xsmoe/error.hpp"
#include "xsmoe/config.hpp"
#include "xsmoe/stream.hpp"

namespace xsmoe {

struct RunReport {
  std::string label;
  std::vector<nlohmann::json> windows;
  nlohmann::json avg;
};

inline RunReport parse_report(std::istream& in, const std::string& name) {
  RunReport r;
  r.label = name;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = name + ":" + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + "not JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("schema") || j["schema"] != kReportSchema)
      throw DataError(where + "schema mismatch, expected " + std::string(kReportSchema));
    if (!r.avg.is_null()) throw DataError(where + "record after the avg line");
    for (const char* key : {"window", "hr_at_10", "ndcg_at_10"})
      if (!j.contains(key)) throw DataError(where + "missing field '" + key + "'");
    if (j["window"].is_string()) {
      if (j["window"] != "avg") throw DataError(where + "window must be a number or \"avg\"");
      r.avg = std::move(j);
    } else {
      r.windows.push_back(std::move(j));
    }
  }
  if (r.windows.empty() && r.avg.is_null())
    throw DataError(name + ": schema mismatch, no " + std::string(kReportSchema) + " records (empty report)");
  if (r.avg.is_null()) throw DataError(name + ": report has no avg line (run incomplete?)");
  return r;
}

inline RunReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report " + path.string());
  return parse_report(in, path.string());
}

namespace detail {

inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline std::string pad(const std::string& s, std::size_t w, bool left = false) {
  if (s.size() >= w) return s;
  return left ? s + std::string(w - s.size(), ' ') : std::string(w - s.size(), ' ') + s;
}

}  // namespace detail

/// Windows down, one HR/NDCG column pair per run, AVG last.
inline std::string report_table(const std::vector<RunReport>& runs) {
  std::set<long long> ids;
  for (const auto& r : runs)
    for (const auto& w : r.windows) ids.insert(w["window"].get<long long>());

  std::vector<std::size_t> width;
  for (const auto& r : runs) width.push_back(std::max<std::size_t>(r.label.size(), 14));
  std::string out = detail::pad("window", 6, true);
  for (std::size_t k = 0; k < runs.size(); ++k) out += " | " + detail::pad(runs[k].label, width[k], true);
  out += "\n" + std::string(6, ' ');
  for (std::size_t k = 0; k < runs.size(); ++k) out += " | " + detail::pad("HR@10  NDCG@10", width[k], true);
  out += "\n";
  const std::size_t rule = out.find('\n');
  out += std::string(rule, '-') + "\n";

  auto cell = [&](const nlohmann::json* j, std::size_t w) {
    if (!j) return detail::pad("-", w, true);
    return detail::pad(detail::fixed4((*j)["hr_at_10"].get<double>()) + "  " +
                           detail::fixed4((*j)["ndcg_at_10"].get<double>()),
                       w, true);
  };
  for (long long id : ids) {
    out += detail::pad(std::to_string(id), 6, true);
    for (std::size_t k = 0; k < runs.size(); ++k) {
      const nlohmann::json* hit = nullptr;
      for (const auto& w : runs[k].windows)
        if (w["window"].get<long long>() == id) hit = &w;
      out += " | " + cell(hit, width[k]);
    }
    out += "\n";
  }
  out += detail::pad("AVG", 6, true);
  for (std::size_t k = 0; k < runs.size(); ++k) out += " | " + cell(&runs[k].avg, width[k]);
  out += "\n";
  // no trailing blanks from left-justified last column
  std::string trimmed;
  std::size_t start = 0;
  while (start < out.size()) {
    const std::size_t end = out.find('\n', start);
    std::string line = out.substr(start, end - start);
    line.erase(line.find_last_not_of(' ') + 1);
    trimmed += line + "\n";
    start = end + 1;
  }
  return trimmed;
}

/// One row per run, sorted by tau, for metric-vs-tau plots.
inline std::string tau_curve_csv(const std::vector<RunReport>& runs) {
  std::vector<const RunReport*> order;
  for (const auto& r : runs) order.push_back(&r);
  auto tau = [](const RunReport* r) { return r->avg.value("tau", 0.0); };
  std::stable_sort(order.begin(), order.end(), [&](auto* a, auto* b) { return tau(a) < tau(b); });
  std::string out = "run,variant,tau,avg_hr_at_10,avg_ndcg_at_10,total_params\n";
  for (const auto* r : order) {
    out += r->label + "," + r->avg.value("variant", std::string("?")) + "," + cfg::fmt(tau(r)) + "," +
           cfg::fmt(r->avg["hr_at_10"].get<double>()) + "," + cfg::fmt(r->avg["ndcg_at_10"].get<double>()) + "," +
           std::to_string(r->avg.value("total_params", std::size_t{0})) + "\n";
  }
  return out;
}

/// Per-window metrics of every run in long format.
inline std::string window_csv(const std::vector<RunReport>& runs) {
  std::string out = "run,window,hr_at_10,ndcg_at_10,total_params_after_prune\n";
  for (const auto& r : runs)
    for (const auto& w : r.windows)
      out += r.label + "," + std::to_string(w["window"].get<long long>()) + "," +
             cfg::fmt(w["hr_at_10"].get<double>()) + "," + cfg::fmt(w["ndcg_at_10"].get<double>()) + "," +
             std::to_string(w.value("total_params_after_prune", std::size_t{0})) + "\n";
  return out;
}

}  // namespace xsmoe
