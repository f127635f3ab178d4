#include "headlens/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "headlens/error.hpp"

namespace headlens {

namespace fs = std::filesystem;

void write_file_atomic(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

namespace {

std::string xml_escape(std::string_view s) {
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

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string colour(double v, double lo, double hi) {
  if (!std::isfinite(v)) return "#bbbbbb";
  const double t = hi > lo ? std::clamp((v - lo) / (hi - lo), 0.0, 1.0) : 0.5;
  // Linear blue (lo) -> white (mid) -> red (hi).
  int r, g, b;
  if (t < 0.5) {
    const double u = t / 0.5;
    r = static_cast<int>(std::lround(59 + u * (255 - 59)));
    g = static_cast<int>(std::lround(76 + u * (255 - 76)));
    b = static_cast<int>(std::lround(192 + u * (255 - 192)));
  } else {
    const double u = (t - 0.5) / 0.5;
    r = static_cast<int>(std::lround(255 + u * (180 - 255)));
    g = static_cast<int>(std::lround(255 + u * (4 - 255)));
    b = static_cast<int>(std::lround(255 + u * (38 - 255)));
  }
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace

std::string svg_heatmap(const Heatmap& m) {
  const std::size_t rows = m.row_labels.size(), cols = m.col_labels.size();
  if (m.values.size() != rows * cols) throw Error("heatmap: value count does not match labels");
  const int cell = 14, left = 170, top = 170;
  const int width = left + static_cast<int>(cols) * cell + 20;
  const int height = top + static_cast<int>(rows) * cell + 40;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"monospace\" font-size=\"9\">\n";
  os << "<text x=\"4\" y=\"14\" font-size=\"12\">" << xml_escape(m.title) << " [" << num(m.lo) << ", "
     << num(m.hi) << "]</text>\n";
  for (std::size_t c = 0; c < cols; ++c) {
    const int x = left + static_cast<int>(c) * cell + cell / 2;
    os << "<text transform=\"translate(" << x << "," << top - 4 << ") rotate(-90)\">"
       << xml_escape(m.col_labels[c]) << "</text>\n";
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = top + static_cast<int>(r) * cell;
    os << "<text x=\"" << left - 4 << "\" y=\"" << y + cell - 3 << "\" text-anchor=\"end\">"
       << xml_escape(m.row_labels[r]) << "</text>\n";
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = m.values[r * cols + c];
      os << "<rect x=\"" << left + static_cast<int>(c) * cell << "\" y=\"" << y << "\" width=\"" << cell
         << "\" height=\"" << cell << "\" fill=\"" << colour(v, m.lo, m.hi) << "\"><title>"
         << xml_escape(m.row_labels[r]) << " / " << xml_escape(m.col_labels[c]) << ": "
         << (std::isfinite(v) ? num(v) : "undefined") << "</title></rect>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

std::string svg_line_chart(const LineChart& chart) {
  const int width = 560, height = 340, left = 60, right = 160, top = 30, bottom = 40;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : chart.series) {
    if (s.x.size() != s.y.size()) throw Error("line chart: series '" + s.name + "' has mismatched x/y");
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y)
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1;
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  y0 = std::min(y0, 0.0);
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pw = width - left - right, ph = height - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"monospace\" font-size=\"10\">\n";
  os << "<text x=\"4\" y=\"16\" font-size=\"12\">" << xml_escape(chart.title) << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << num(py(0)) << "\" x2=\"" << left + pw << "\" y2=\"" << num(py(0))
     << "\" stroke=\"#999\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
     << "\" stroke=\"#000\"/>\n";
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 8 << "\" text-anchor=\"middle\">"
     << xml_escape(chart.x_label) << " [" << num(x0) << ", " << num(x1) << "]</text>\n";
  os << "<text transform=\"translate(14," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << xml_escape(chart.y_label) << " [" << num(y0) << ", " << num(y1) << "]</text>\n";
  for (std::size_t i = 0; i < chart.series.size(); ++i) {
    const auto& s = chart.series[i];
    const char* col = palette[i % 6];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (!std::isfinite(s.y[k])) continue;
      os << (first ? "" : " ") << num(px(s.x[k])) << ',' << num(py(s.y[k]));
      first = false;
    }
    os << "\"/>\n";
    const int ly = top + 14 * static_cast<int>(i) + 10;
    os << "<rect x=\"" << width - right + 10 << "\" y=\"" << ly - 8 << "\" width=\"10\" height=\"10\" fill=\"" << col
       << "\"/><text x=\"" << width - right + 24 << "\" y=\"" << ly << "\">" << xml_escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace headlens
