#include "dsbel/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "dsbel/checkpoint.hpp"

namespace dsbel {

namespace {


const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

std::string fmt(const char* pattern, double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string svg_open() {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
         "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"640\" height=\"480\" "
         "viewBox=\"0 0 640 480\">\n"
         "<rect x=\"0\" y=\"0\" width=\"640\" height=\"480\" fill=\"white\"/>\n";
}

// Plot frame in pixel space plus the data ranges it maps.
struct Frame {
  double left, top, width, height;
  double x0, x1, y0, y1;

  double px(double x) const { return left + (x - x0) / (x1 - x0) * width; }
  double py(double y) const { return top + height - (y - y0) / (y1 - y0) * height; }
};

void draw_axes(std::ostringstream& os, const Frame& f, const std::string& x_label, const std::string& y_label) {
  os << "<g class=\"grid\" stroke=\"#dddddd\" stroke-width=\"1\">\n";
  for (int i = 1; i <= 5; ++i) {
    const double tx = f.x0 + (f.x1 - f.x0) * i / 5.0;
    const double ty = f.y0 + (f.y1 - f.y0) * i / 5.0;
    os << "<line x1=\"" << fmt("%.2f", f.px(tx)) << "\" y1=\"" << fmt("%.2f", f.top) << "\" x2=\""
       << fmt("%.2f", f.px(tx)) << "\" y2=\"" << fmt("%.2f", f.top + f.height) << "\"/>\n";
    os << "<line x1=\"" << fmt("%.2f", f.left) << "\" y1=\"" << fmt("%.2f", f.py(ty)) << "\" x2=\""
       << fmt("%.2f", f.left + f.width) << "\" y2=\"" << fmt("%.2f", f.py(ty)) << "\"/>\n";
  }
  os << "</g>\n";
  os << "<rect x=\"" << fmt("%.2f", f.left) << "\" y=\"" << fmt("%.2f", f.top) << "\" width=\""
     << fmt("%.2f", f.width) << "\" height=\"" << fmt("%.2f", f.height)
     << "\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>\n";
  os << "<g font-family=\"sans-serif\" font-size=\"11\" fill=\"black\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double tx = f.x0 + (f.x1 - f.x0) * i / 5.0;
    const double ty = f.y0 + (f.y1 - f.y0) * i / 5.0;
    os << "<text x=\"" << fmt("%.2f", f.px(tx)) << "\" y=\"" << fmt("%.2f", f.top + f.height + 14)
       << "\" text-anchor=\"middle\">" << fmt("%.1f", tx) << "</text>\n";
    os << "<text x=\"" << fmt("%.2f", f.left - 6) << "\" y=\"" << fmt("%.2f", f.py(ty) + 4)
       << "\" text-anchor=\"end\">" << fmt("%.1f", ty) << "</text>\n";
  }
  os << "<text x=\"" << fmt("%.2f", f.left + f.width / 2) << "\" y=\"" << fmt("%.2f", f.top + f.height + 32)
     << "\" text-anchor=\"middle\">" << escape_xml(x_label) << "</text>\n";
  os << "<text transform=\"translate(" << fmt("%.2f", f.left - 36) << "," << fmt("%.2f", f.top + f.height / 2)
     << ") rotate(-90)\" text-anchor=\"middle\">" << escape_xml(y_label) << "</text>\n";
  os << "</g>\n";
}

}  // namespace

std::string metrics_csv(std::span<const ReportRow> rows) {
  std::string out = "model,accuracy,f1,mcc,recall,precision,auc\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    out += r.model + fmt(",%.4f", m.accuracy) + fmt(",%.4f", m.f1) + fmt(",%.4f", m.mcc) + fmt(",%.4f", m.recall) +
           fmt(",%.4f", m.precision) + fmt(",%.4f", m.auc) + "\n";
  }
  return out;
}

std::vector<ReportRow> parse_metrics_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "model,accuracy,f1,mcc,recall,precision,auc")
    throw FormatError("report CSV: unexpected header");
  std::vector<ReportRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw FormatError("report CSV: expected 7 columns in '" + line + "'");
    ReportRow r;
    r.model = cells[0];
    try {
      r.metrics.accuracy = std::stod(cells[1]);
      r.metrics.f1 = std::stod(cells[2]);
      r.metrics.mcc = std::stod(cells[3]);
      r.metrics.recall = std::stod(cells[4]);
      r.metrics.precision = std::stod(cells[5]);
      r.metrics.auc = std::stod(cells[6]);
    } catch (const std::logic_error&) {
      throw FormatError("report CSV: bad number in '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           std::span<const NamedCurve> curves) {
  std::ostringstream os;
  os << svg_open();
  os << "<text x=\"320\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">"
     << escape_xml(title) << "</text>\n";
  const Frame f{70, 40, 400, 380, 0.0, 1.0, 0.0, 1.0};
  draw_axes(os, f, x_label, y_label);
  for (std::size_t c = 0; c < curves.size(); ++c) {
    os << "<polyline fill=\"none\" stroke=\"" << kPalette[c % 7] << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < curves[c].points.size(); ++i) {
      const auto& p = curves[c].points[i];
      os << (i ? " " : "") << fmt("%.2f", f.px(std::clamp(p.x, 0.0, 1.0))) << ","
         << fmt("%.2f", f.py(std::clamp(p.y, 0.0, 1.0)));
    }
    os << "\"/>\n";
  }
  os << "<g class=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n";
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const double y = 60 + 20.0 * c;
    os << "<rect x=\"486\" y=\"" << fmt("%.0f", y - 9) << "\" width=\"12\" height=\"12\" fill=\"" << kPalette[c % 7]
       << "\"/>\n";
    std::string label = curves[c].name;
    if (curves[c].show_auc) label += fmt(" (AUC %.4f)", curves[c].auc);
    os << "<text x=\"504\" y=\"" << fmt("%.0f", y + 1) << "\">" << escape_xml(label) << "</text>\n";
  }
  os << "</g>\n</svg>\n";
  return os.str();
}

std::string pca_scatter_svg(std::span<const double> projection, int rows, int k, std::span<const int> labels) {
  if (k < 2) throw ConfigError("pca_scatter_svg: need at least two components");
  if (projection.size() != static_cast<std::size_t>(rows) * k || labels.size() != static_cast<std::size_t>(rows))
    throw ConfigError("pca_scatter_svg: size mismatch");
  std::ostringstream os;
  os << svg_open();
  os << "<text x=\"320\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">"
     << "Deep feature principal components</text>\n";
  const int panels = k >= 3 ? 2 : 1;
  auto range = [&](int comp) {
    double lo = 0.0, hi = 0.0;
    for (int r = 0; r < rows; ++r) {
      const double v = projection[static_cast<std::size_t>(r) * k + comp];
      lo = r ? std::min(lo, v) : v;
      hi = r ? std::max(hi, v) : v;
    }
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    return std::pair{lo - pad, hi + pad};
  };
  for (int p = 0; p < panels; ++p) {
    const int cy = p + 1;
    const auto [x0, x1] = range(0);
    const auto [y0, y1] = range(cy);
    const double w = panels == 2 ? 230 : 480;
    const Frame f{70.0 + p * 300.0, 50, w, 360, x0, x1, y0, y1};
    draw_axes(os, f, "PC1", "PC" + std::to_string(cy + 1));
    os << "<g class=\"points\">\n";
    for (int r = 0; r < rows; ++r) {
      const double x = projection[static_cast<std::size_t>(r) * k];
      const double y = projection[static_cast<std::size_t>(r) * k + cy];
      os << "<circle cx=\"" << fmt("%.2f", f.px(x)) << "\" cy=\"" << fmt("%.2f", f.py(y)) << "\" r=\"3\" fill=\""
         << (labels[r] ? kPalette[1] : kPalette[0]) << "\" fill-opacity=\"0.7\"/>\n";
    }
    os << "</g>\n";
  }
  os << "<g class=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<circle cx=\"80\" cy=\"460\" r=\"4\" fill=\"" << kPalette[0] << "\"/><text x=\"90\" y=\"464\">benign</text>\n"
     << "<circle cx=\"160\" cy=\"460\" r=\"4\" fill=\"" << kPalette[1]
     << "\"/><text x=\"170\" y=\"464\">malware</text>\n"
     << "</g>\n</svg>\n";
  return os.str();
}

ReportFiles emit_report(const std::string& dir, std::span<const ReportRow> rows, std::span<const NamedCurve> roc,
                        std::span<const NamedCurve> pr, std::span<const double> pca, int pca_rows, int pca_k,
                        std::span<const int> pca_labels) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  ReportFiles files;
  files.csv = (fs::path(dir) / "report.csv").string();
  files.roc_svg = (fs::path(dir) / "roc.svg").string();
  files.pr_svg = (fs::path(dir) / "pr.svg").string();
  auto write_text = [](const std::string& path, const std::string& text) {
    write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  };
  write_text(files.csv, metrics_csv(rows));
  write_text(files.roc_svg, line_chart_svg("ROC curve", "False positive rate", "True positive rate", roc));
  write_text(files.pr_svg, line_chart_svg("Precision-recall curve", "Recall", "Precision", pr));
  if (!pca.empty()) {
    files.pca_svg = (fs::path(dir) / "pca.svg").string();
    write_text(files.pca_svg, pca_scatter_svg(pca, pca_rows, pca_k, pca_labels));
  }
  return files;
}

}  // namespace dsbel
