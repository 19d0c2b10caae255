#pragma once

#include <span>
#include <string>
#include <vector>

#include "dsbel/metrics.hpp"

namespace dsbel {

struct ReportRow {
  std::string model;
  MetricsRecord metrics;
};

// Header model,accuracy,f1,mcc,recall,precision,auc; values to 4 decimals.
std::string metrics_csv(std::span<const ReportRow> rows);
std::vector<ReportRow> parse_metrics_csv(const std::string& text);

struct NamedCurve {
  std::string name;
  std::vector<CurvePoint> points;
  bool show_auc = false;
  double auc = 0.0;
};

// 640x480 SVG line chart over [0,1]^2 with gridlines every 0.2, one
// polyline per curve and a legend.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           std::span<const NamedCurve> curves);

// PC1-PC2 and PC1-PC3 panels (PC1-PC2 only when k == 2); points coloured by
// label. projection is row-major rows x k.
std::string pca_scatter_svg(std::span<const double> projection, int rows, int k, std::span<const int> labels);

struct ReportFiles {
  std::string csv;
  std::string roc_svg;
  std::string pr_svg;
  std::string pca_svg;
};

// Writes report.csv, roc.svg, pr.svg and (when pca is non-empty) pca.svg
// into dir.
ReportFiles emit_report(const std::string& dir, std::span<const ReportRow> rows, std::span<const NamedCurve> roc,
                        std::span<const NamedCurve> pr, std::span<const double> pca = {}, int pca_rows = 0,
                        int pca_k = 0, std::span<const int> pca_labels = {});

}  // namespace dsbel
