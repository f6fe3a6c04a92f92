#include "detra/harness.hpp"

#include "detra/json_util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace detra {

namespace fs = std::filesystem;

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  }
  std::optional<double> number(std::size_t row, const std::string& name) const {
    const int c = column(name);
    if (c < 0 || static_cast<std::size_t>(c) >= rows[row].size() || rows[row][c].empty()) return std::nullopt;
    try {
      return std::stod(rows[row][c]);
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }
};

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<CsvTable> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) return std::nullopt;
  t.header = split(line);
  while (std::getline(in, line))
    if (!line.empty()) t.rows.push_back(split(line));
  return t;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

/// Minimal SVG canvas with a plot area and linear axes.
class Svg {
 public:
  Svg(std::string title, double x0, double x1, double y0, double y1)
      : title_(std::move(title)), x0_(x0), x1_(x1 > x0 ? x1 : x0 + 1), y0_(y0), y1_(y1 > y0 ? y1 : y0 + 1) {}

  double px(double x) const { return kLeft + (x - x0_) / (x1_ - x0_) * kPlotW; }
  double py(double y) const { return kTop + kPlotH - (y - y0_) / (y1_ - y0_) * kPlotH; }

  void polyline(const std::vector<std::pair<double, double>>& pts, const char* color) {
    body_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) body_ << fmt(px(x), 6) << ',' << fmt(py(y), 6) << ' ';
    body_ << "\"/>\n";
  }
  void rect(double x, double w, double y, const char* color) {
    const double top = py(std::max(y, 0.0)), bottom = py(std::min(y, 0.0));
    body_ << "<rect x=\"" << fmt(x, 6) << "\" y=\"" << fmt(top, 6) << "\" width=\"" << fmt(w, 6) << "\" height=\""
          << fmt(bottom - top, 6) << "\" fill=\"" << color << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, const char* anchor = "middle") {
    body_ << "<text x=\"" << fmt(x, 6) << "\" y=\"" << fmt(y, 6) << "\" font-size=\"11\" text-anchor=\"" << anchor
          << "\">" << s << "</text>\n";
  }
  void legend(int i, const std::string& label) {
    const double y = kTop + 14.0 * i;
    body_ << "<rect x=\"" << kLeft + kPlotW + 10 << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\""
          << kPalette[i % 8] << "\"/>\n";
    text(kLeft + kPlotW + 24, y + 9, label, "start");
  }

  std::string str(const std::string& xlabel, const std::string& ylabel) const {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << kWidth / 2 << "\" y=\"18\" font-size=\"14\" text-anchor=\"middle\">" << title_ << "</text>\n"
       << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << kPlotW << "\" height=\"" << kPlotH
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double fy = y0_ + (y1_ - y0_) * i / 4.0, fx = x0_ + (x1_ - x0_) * i / 4.0;
      os << "<text x=\"" << kLeft - 4 << "\" y=\"" << fmt(py(fy) + 4, 6)
         << "\" font-size=\"10\" text-anchor=\"end\">" << fmt(fy, 3) << "</text>\n";
      if (!categorical_)
        os << "<text x=\"" << fmt(px(fx), 6) << "\" y=\"" << kTop + kPlotH + 14
           << "\" font-size=\"10\" text-anchor=\"middle\">" << fmt(fx, 3) << "</text>\n";
    }
    os << "<text x=\"" << kLeft + kPlotW / 2 << "\" y=\"" << kHeight - 6
       << "\" font-size=\"11\" text-anchor=\"middle\">" << xlabel << "</text>\n"
       << "<text x=\"14\" y=\"" << kTop + kPlotH / 2 << "\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
       << kTop + kPlotH / 2 << ")\">" << ylabel << "</text>\n"
       << body_.str() << "</svg>\n";
    return os.str();
  }

  void set_categorical() { categorical_ = true; }

  static constexpr double kWidth = 640, kHeight = 360, kLeft = 60, kTop = 30, kPlotW = 440, kPlotH = 280;

 private:
  std::string title_;
  double x0_, x1_, y0_, y1_;
  bool categorical_ = false;
  std::ostringstream body_;
};

void write_file(const fs::path& path, const std::string& text, ReportResult& result) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) {
    result.warnings.push_back("failed writing " + path.string());
    return;
  }
  result.written.push_back(path);
}

void loss_curve(const CsvTable& log, const fs::path& out, ReportResult& result) {
  std::vector<std::string> series{"total", "l_init"};
  double ymin = 0.0, ymax = 0.0, xmax = 1.0;
  std::vector<std::vector<std::pair<double, double>>> lines(series.size());
  for (std::size_t r = 0; r < log.rows.size(); ++r) {
    const auto step = log.number(r, "step");
    if (!step) continue;
    xmax = std::max(xmax, *step);
    for (std::size_t s = 0; s < series.size(); ++s) {
      const auto v = log.number(r, series[s]);
      if (!v || !std::isfinite(*v)) continue;
      lines[s].emplace_back(*step, *v);
      ymin = std::min(ymin, *v);
      ymax = std::max(ymax, *v);
    }
  }
  Svg svg("Training loss", 0.0, xmax, ymin, ymax);
  for (std::size_t s = 0; s < series.size(); ++s) {
    svg.polyline(lines[s], kPalette[s]);
    svg.legend(static_cast<int>(s), series[s]);
  }
  write_file(out, svg.str("step", "loss"), result);
}

/// One bar chart with a group per category and a bar per series.
std::string grouped_bars(const std::string& title, const std::vector<std::string>& groups,
                         const std::vector<std::string>& series, const std::vector<std::vector<std::optional<double>>>& v) {
  double ymin = 0.0, ymax = 0.0;
  for (const auto& row : v)
    for (const auto& x : row)
      if (x) {
        ymin = std::min(ymin, *x);
        ymax = std::max(ymax, *x);
      }
  Svg svg(title, 0.0, 1.0, ymin, ymax > ymin ? ymax * 1.05 : ymin + 1.0);
  svg.set_categorical();
  const double group_w = Svg::kPlotW / std::max<std::size_t>(1, groups.size());
  const double bar_w = 0.8 * group_w / std::max<std::size_t>(1, series.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double left = Svg::kLeft + g * group_w + 0.1 * group_w;
    for (std::size_t s = 0; s < series.size(); ++s)
      if (v[g][s]) svg.rect(left + s * bar_w, bar_w, *v[g][s], kPalette[s % 8]);
    svg.text(Svg::kLeft + (g + 0.5) * group_w, Svg::kTop + Svg::kPlotH + 14, groups[g]);
  }
  if (series.size() > 1)
    for (std::size_t s = 0; s < series.size(); ++s) svg.legend(static_cast<int>(s), series[s]);
  return svg.str("", "");
}

const std::vector<std::string> kSummaryMetrics{"ap_0.5", "ade_k1", "fde_k1", "ade_kK", "occ_ap", "traj_ap"};

void run_report(const fs::path& dir, const fs::path& out, ReportResult& result) {
  if (auto log = read_csv(dir / "train_log.csv")) {
    if (log->rows.empty()) {
      result.warnings.push_back("training log has no rows");
    } else {
      loss_curve(*log, out / "loss_curve.svg", result);
    }
  }
  const fs::path eval = dir / "eval";
  auto metrics = read_csv(eval / "metrics.csv");
  if (!metrics) return;
  std::vector<std::string> blocks;
  for (const auto& row : metrics->rows) blocks.push_back("block " + row.front());
  for (const auto& m : kSummaryMetrics) {
    std::vector<std::vector<std::optional<double>>> v;
    for (std::size_t r = 0; r < metrics->rows.size(); ++r) v.push_back({metrics->number(r, m)});
    write_file(out / ("blocks_" + m + ".svg"), grouped_bars(m + " per block", blocks, {m}, v), result);
  }
  Svg pr("Precision-recall at IoU 0.5", 0.0, 1.0, 0.0, 1.0);
  int drawn = 0;
  for (std::size_t b = 0; b < metrics->rows.size(); ++b) {
    auto curve = read_csv(eval / ("pr_block" + std::to_string(b) + ".csv"));
    if (!curve) {
      result.warnings.push_back("missing pr_block" + std::to_string(b) + ".csv");
      continue;
    }
    std::vector<std::pair<double, double>> pts;
    for (std::size_t r = 0; r < curve->rows.size(); ++r) {
      const auto rec = curve->number(r, "recall"), prec = curve->number(r, "precision");
      if (rec && prec) pts.emplace_back(*rec, *prec);
    }
    pr.polyline(pts, kPalette[b % 8]);
    pr.legend(static_cast<int>(b), "block " + std::to_string(b));
    ++drawn;
  }
  if (drawn > 0) write_file(out / "pr_curves.svg", pr.str("recall", "precision"), result);

  std::ostringstream csv, txt;
  csv << "block";
  txt << std::left << std::setw(8) << "block";
  for (const auto& m : kSummaryMetrics) {
    csv << ',' << m;
    txt << std::setw(12) << m;
  }
  csv << '\n';
  txt << '\n';
  for (std::size_t r = 0; r < metrics->rows.size(); ++r) {
    csv << metrics->rows[r].front();
    txt << std::setw(8) << metrics->rows[r].front();
    for (const auto& m : kSummaryMetrics) {
      const auto v = metrics->number(r, m);
      csv << ',' << (v ? format_double(*v) : "");
      txt << std::setw(12) << (v ? fmt(*v) : "-");
    }
    csv << '\n';
    txt << '\n';
  }
  write_file(out / "summary.csv", csv.str(), result);
  write_file(out / "summary.txt", txt.str(), result);
}

void ablation_report(const CsvTable& table, const fs::path& out, ReportResult& result) {
  std::vector<std::string> variants;
  std::vector<std::size_t> ok_rows;
  std::ostringstream txt, csv;
  txt << std::left << std::setw(20) << "variant";
  csv << "variant,status";
  for (const auto& m : kSummaryMetrics) {
    txt << std::setw(12) << m;
    csv << ',' << m;
  }
  txt << '\n';
  csv << '\n';
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const std::string status = row.size() > 1 ? row[1] : "";
    txt << std::setw(20) << row.front();
    csv << row.front() << ',' << status;
    if (status == "ok") {
      variants.push_back(row.front());
      ok_rows.push_back(r);
    } else {
      result.warnings.push_back("variant " + row.front() + " failed: " + (row.size() > 2 ? row[2] : ""));
    }
    for (const auto& m : kSummaryMetrics) {
      const auto v = status == "ok" ? table.number(r, m) : std::nullopt;
      txt << std::setw(12) << (v ? fmt(*v) : "-");
      csv << ',' << (v ? format_double(*v) : "");
    }
    txt << '\n';
    csv << '\n';
  }
  for (const auto& m : kSummaryMetrics) {
    std::vector<std::vector<std::optional<double>>> v;
    for (std::size_t r : ok_rows) v.push_back({table.number(r, m)});
    write_file(out / ("ablation_" + m + ".svg"), grouped_bars(m + " by variant (final block)", variants, {m}, v),
               result);
  }
  write_file(out / "summary.csv", csv.str(), result);
  write_file(out / "summary.txt", txt.str(), result);
}

}  // namespace

ReportResult report(const fs::path& dir) {
  ReportResult result;
  if (!fs::is_directory(dir)) {
    result.warnings.push_back("not a directory: " + dir.string());
    return result;
  }
  const bool has_log = fs::exists(dir / "train_log.csv");
  const bool has_eval = fs::exists(dir / "eval" / "metrics.csv");
  const auto ablation = read_csv(dir / "ablation.csv");
  if (!has_log && !has_eval && !ablation) {
    result.warnings.push_back("nothing to report");
    return result;
  }
  const fs::path out = dir / "report";
  fs::create_directories(out);
  if (ablation) {
    ablation_report(*ablation, out, result);
  } else {
    run_report(dir, out, result);
    if (!has_eval) result.warnings.push_back("no evaluation found; only the loss curve was written");
  }
  return result;
}

}  // namespace detra
