#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pt/eval/eval.hpp"

namespace pt::eval {

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);  // shortest text that reads back exactly
  return std::string(buf, r.ptr);
}

double parse_num(const std::string& s) {
  if (s == "nan") return kUndefined;
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("bad number '" + s + "'");
  return v;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string format_metrics_row(const std::string& name, const MetricsReport& r) {
  return name + '\t' + std::to_string(r.episodes) + '\t' + fmt(r.ne) + '\t' + fmt(r.sr) + '\t' + fmt(r.osr) + '\t' +
         fmt(r.spl) + '\t' + fmt(r.spearman) + '\t' + fmt(r.violation_rate) + '\n';
}

std::string metrics_table(const std::vector<std::pair<std::string, MetricsReport>>& rows, const std::string& config_hash) {
  std::string out = "# config " + config_hash + "\nname\tepisodes\tNE\tSR\tOSR\tSPL\tspearman\tviolation_rate\n";
  for (const auto& [name, r] : rows) out += format_metrics_row(name, r);
  return out;
}

std::vector<MetricsRow> parse_metrics_table(const std::string& text, std::string* hash) {
  std::istringstream in(text);
  std::string line;
  std::vector<MetricsRow> rows;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.rfind("# config ", 0) == 0) {
      if (hash) *hash = line.substr(9);
      continue;
    }
    if (!header) {
      if (line.rfind("name\t", 0) != 0) throw std::invalid_argument("metrics table: missing header");
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::size_t b = 0;
    while (true) {
      const auto tab = line.find('\t', b);
      f.push_back(line.substr(b, tab == std::string::npos ? std::string::npos : tab - b));
      if (tab == std::string::npos) break;
      b = tab + 1;
    }
    if (f.size() != 8) throw std::invalid_argument("metrics table: expected 8 fields, got " + std::to_string(f.size()));
    MetricsRow r;
    r.name = f[0];
    r.episodes = std::stoi(f[1]);
    r.ne = parse_num(f[2]);
    r.sr = parse_num(f[3]);
    r.osr = parse_num(f[4]);
    r.spl = parse_num(f[5]);
    r.spearman = parse_num(f[6]);
    r.violation_rate = parse_num(f[7]);
    rows.push_back(r);
  }
  return rows;
}

std::string traces_csv(const std::vector<TraceRecord>& traces, const std::string& config_hash) {
  std::string out = "# config " + config_hash + "\nepisode,t,khat,kstar,decoded\n";
  for (const auto& r : traces) {
    out += std::to_string(r.episode) + ',' + std::to_string(r.t) + ',' + fmt(r.khat) + ',' + std::to_string(r.kstar) + ",\"" +
           r.decoded + "\"\n";
  }
  return out;
}

std::string line_chart_svg(const std::string& title, const std::vector<Series>& series, const std::string& config_hash) {
  constexpr double kW = 640, kH = 360, kL = 56, kR = 16, kT = 32, kB = 40;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool any = false;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (!any) {
        x0 = x1 = s.x[i];
        y0 = y1 = s.y[i];
        any = true;
      }
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return kL + (x - x0) / (x1 - x0) * (kW - kL - kR); };
  auto py = [&](double y) { return kH - kB - (y - y0) / (y1 - y0) * (kH - kT - kB); };
  char buf[256];
  std::string out = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<!-- config " + config_hash + " -->\n";
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n", kW, kH,
                kW, kH);
  out += buf;
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%.0f\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">", kL);
  out += buf + escape_xml(title) + "</text>\n";
  std::snprintf(buf, sizeof buf, "<path d=\"M%.1f %.1f L%.1f %.1f L%.1f %.1f\" fill=\"none\" stroke=\"black\"/>\n", kL, kT, kL,
                kH - kB, kW - kR, kH - kB);
  out += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" font-size=\"10\">%.3g</text>\n"
                "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" font-size=\"10\">%.3g</text>\n",
                4.0, py(y1) + 4, y1, 4.0, py(y0) + 4, y0);
  out += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" font-size=\"10\">%.3g</text>\n"
                "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">%.3g</text>\n",
                kL, kH - kB + 14, x0, kW - kR, kH - kB + 14, x1);
  out += buf;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kColors[k % std::size(kColors)];
    std::string d;
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      std::snprintf(buf, sizeof buf, "%s%.2f %.2f", d.empty() ? "M" : " L", px(s.x[i]), py(s.y[i]));
      d += buf;
    }
    if (!d.empty()) out += "<path d=\"" + d + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\"/>\n";
    std::snprintf(buf, sizeof buf, "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" font-size=\"11\" fill=\"%s\">",
                  kW - kR - 150, kT + 14.0 * static_cast<double>(k + 1), color);
    out += buf + escape_xml(s.label) + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path);
}

void emit_report(const ReportBundle& bundle, const std::string& dir, const std::string& config_hash) {
  const std::filesystem::path d(dir);
  write_text((d / "metrics.tsv").string(), metrics_table(bundle.rows, config_hash));
  if (!bundle.traces.empty()) {
    write_text((d / "traces.csv").string(), traces_csv(bundle.traces, config_hash));
    // Progress chart of the first traced episode.
    Series kh{"k-hat", {}, {}};
    Series ks{"k*", {}, {}};
    const int first = bundle.traces.front().episode;
    for (const auto& r : bundle.traces) {
      if (r.episode != first) continue;
      kh.x.push_back(r.t);
      kh.y.push_back(r.khat);
      ks.x.push_back(r.t);
      ks.y.push_back(r.kstar);
    }
    write_text((d / "progress.svg").string(),
               line_chart_svg("progress trace, episode " + std::to_string(first), {kh, ks}, config_hash));
  }
  if (!bundle.reward_curves.empty()) {
    write_text((d / "reward.svg").string(), line_chart_svg("stage 3 mean group reward", bundle.reward_curves, config_hash));
  }
}

}  // namespace pt::eval
