// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <map>

#include "sgr/pipeline.hpp"

namespace sgr {

// ---------------------------------------------------------------------------
// Input-shift probe: ΔL_k = L_k(θ_k, x_{k−1}^{new}) − L_k(θ_k, x_{k−1}^{old}),
// θ_k at its post-update value and x^{new} recomputed through the updated
// modules 1..k−1 on the same batch.

inline double module_loss(const LocalModule& m, const Tensor& input, std::span<const std::size_t> labels) {
  return softmax_cross_entropy(head_logits(m.head, forward_module(m, input)), labels);
}

// Entry k (0-based) is ΔL for module k; entry 0 is NaN (no upstream).
inline std::vector<double> delta_loss(const Network& net, const Tensor& batch, std::span<const std::size_t> labels,
                                      std::span<const Tensor> inputs_seen) {
  const std::size_t K = net.modules.size();
  if (inputs_seen.size() != K) throw DimensionError("delta_loss: one recorded input per module is required");
  std::vector<double> out(K, std::numeric_limits<double>::quiet_NaN());
  Tensor x = batch;
  for (std::size_t k = 1; k < K; ++k) {
    x = forward_module(net.modules[k - 1], x);
    out[k] = module_loss(net.modules[k], x, labels) - module_loss(net.modules[k], inputs_seen[k], labels);
  }
  return out;
}

struct DeltaProbe {
  std::vector<std::vector<double>> series;  // series[k][t], k ≥ 1 populated

  explicit DeltaProbe(std::size_t K = 0) : series(K) {}

  BatchObserver observer() {
    return [this](const Network& net, const BatchTrace& t) {
      const auto d = delta_loss(net, *t.batch, t.labels, t.module_inputs);
      for (std::size_t k = 1; k < d.size(); ++k) series[k].push_back(d[k]);
    };
  }

  double mean(std::size_t k) const {
    const auto& s = series.at(k);
    if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
    double m = 0.0;
    for (double v : s) m += v;
    return m / static_cast<double>(s.size());
  }
};

struct ProbeRun {
  TrainReport report;
  DeltaProbe probe;
};

inline ProbeRun delta_loss_probe(Network& net, const Dataset& train_set, const Dataset& test_set,
                                 const TrainConfig& cfg) {
  if (cfg.mode == TrainMode::GlobalBp) throw ConfigError("the delta-loss probe needs a local training mode");
  ProbeRun run{{}, DeltaProbe(net.modules.size())};
  run.report = train(net, train_set, test_set, cfg, run.probe.observer());
  return run;
}

// ---------------------------------------------------------------------------
// Activation-count memory model, in stored scalars.

struct MemoryModel {
  std::size_t global_units = 0;
  std::vector<std::size_t> module_units;
  std::size_t local_units = 0;
  double ratio = 1.0;
};

// widths = [d_0, ..., d_L]; layers_per_module partitions the L layers;
// head_widths[k] is the per-sample activation count of module k's head.
inline MemoryModel memory_model(const std::vector<std::size_t>& widths, std::size_t batch,
                                const std::vector<std::size_t>& layers_per_module,
                                const std::vector<std::size_t>& head_widths, TrainMode mode) {
  if (widths.size() < 2) throw std::invalid_argument("memory_model needs at least one layer");
  if (layers_per_module.empty() || head_widths.size() != layers_per_module.size())
    throw std::invalid_argument("memory_model: one head width per module is required");
  std::size_t total_layers = 0;
  for (std::size_t n : layers_per_module) {
    if (n == 0) throw std::invalid_argument("memory_model: empty module in partition");
    total_layers += n;
  }
  if (total_layers != widths.size() - 1) throw std::invalid_argument("memory_model: partition does not cover all layers");

  MemoryModel mm;
  for (std::size_t l = 1; l < widths.size(); ++l) mm.global_units += batch * widths[l];
  mm.global_units += batch * head_widths.back();
  std::size_t l = 1;
  for (std::size_t k = 0; k < layers_per_module.size(); ++k) {
    std::size_t units = batch * head_widths[k];
    for (std::size_t i = 0; i < layers_per_module[k]; ++i) units += batch * widths[l++];
    mm.module_units.push_back(units);
  }
  mm.local_units = mode == TrainMode::GlobalBp ? mm.global_units
                                               : *std::max_element(mm.module_units.begin(), mm.module_units.end());
  mm.ratio = static_cast<double>(mm.local_units) / static_cast<double>(mm.global_units);
  return mm;
}

// ---------------------------------------------------------------------------
// CSV

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw std::out_of_range("no column named '" + name + "'");
  }
};

inline std::string csv_number(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }

inline std::string csv_escape(const std::string& f) {
  if (f.find_first_of(",\"\n\r") == std::string::npos) return f;
  std::string out = "\"";
  for (char c : f) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string to_csv(const CsvTable& t) {
  std::string out;
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + csv_escape(r[i]);
    out += '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  return out;
}

inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::vector<std::vector<std::string>> recs;
  std::vector<std::string> rec;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      rec.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      rec.push_back(std::move(field));
      field.clear();
      recs.push_back(std::move(rec));
      rec.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (any || !field.empty()) {
    rec.push_back(std::move(field));
    recs.push_back(std::move(rec));
  }
  if (recs.empty()) throw std::runtime_error("CSV has no header row");
  t.header = std::move(recs.front());
  t.rows.assign(std::make_move_iterator(recs.begin() + 1), std::make_move_iterator(recs.end()));
  return t;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_csv(ss.str());
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << text;
  if (!f) throw std::runtime_error("error writing " + path);
}

// Columns: epoch, split, loss, acc, sgr_loss_mean, sgr_2..sgr_K. SGR fields
// are filled on train rows only.
inline CsvTable report_table(const TrainReport& r, std::size_t modules) {
  CsvTable t;
  t.header = {"epoch", "split", "loss", "acc", "sgr_loss_mean"};
  for (std::size_t k = 2; k <= modules; ++k) t.header.push_back("sgr_" + std::to_string(k));
  for (const EpochRecord& e : r.epochs) {
    std::vector<std::string> tr = {std::to_string(e.epoch), "train", csv_number(e.train_loss), csv_number(e.train_acc),
                                   csv_number(e.sgr_mean)};
    std::vector<std::string> te = {std::to_string(e.epoch), "test", csv_number(e.test_loss), csv_number(e.test_acc), ""};
    for (std::size_t k = 0; k + 1 < modules; ++k) {
      tr.push_back(k < e.sgr.size() ? csv_number(e.sgr[k]) : "");
      te.push_back("");
    }
    t.rows.push_back(std::move(tr));
    t.rows.push_back(std::move(te));
  }
  return t;
}

inline void write_csv(const TrainReport& r, std::size_t modules, const std::string& path) {
  write_text(path, to_csv(report_table(r, modules)));
}

// ---------------------------------------------------------------------------
// SVG line plots

struct PlotOptions {
  std::string x_column;  // empty: row index
  std::string filter_column;
  std::string filter_value;
  std::string title;
  std::string y_label = "value";
};

inline std::string render_line_plot_svg(const CsvTable& t, const std::vector<std::string>& columns,
                                        const PlotOptions& opt = {}) {
  if (columns.empty()) throw std::invalid_argument("render_line_plot needs at least one column");
  std::vector<std::size_t> cols;
  for (const auto& c : columns) cols.push_back(t.column(c));
  const std::size_t xcol = opt.x_column.empty() ? SIZE_MAX : t.column(opt.x_column);
  const std::size_t fcol = opt.filter_column.empty() ? SIZE_MAX : t.column(opt.filter_column);

  std::vector<std::vector<std::pair<double, double>>> series(cols.size());
  std::size_t index = 0;
  for (const auto& row : t.rows) {
    if (fcol != SIZE_MAX && (fcol >= row.size() || row[fcol] != opt.filter_value)) continue;
    const double x = xcol == SIZE_MAX ? static_cast<double>(index) : std::stod(row.at(xcol));
    ++index;
    for (std::size_t s = 0; s < cols.size(); ++s)
      if (cols[s] < row.size() && !row[cols[s]].empty()) series[s].emplace_back(x, std::stod(row[cols[s]]));
  }
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto& s : series)
    for (const auto& [x, y] : s) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) {
    const double pad = ymin == 0.0 ? 1.0 : std::abs(ymin) * 0.1;
    ymin -= pad;
    ymax += pad;
  }

  const double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return T + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };
  auto num = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.4g", v);
    return std::string(b);
  };
  auto coord = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", v);
    return std::string(b);
  };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!opt.title.empty())
    os << "<text x=\"" << coord(L + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << opt.title
       << "</text>\n";
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = xmin + (xmax - xmin) * i / 4.0, yv = ymin + (ymax - ymin) * i / 4.0;
    os << "<text x=\"" << coord(px(xv)) << "\" y=\"" << coord(T + ph + 18)
       << "\" text-anchor=\"middle\" font-size=\"11\">" << num(xv) << "</text>\n";
    os << "<text x=\"" << coord(L - 6) << "\" y=\"" << coord(py(yv) + 4) << "\" text-anchor=\"end\" font-size=\"11\">"
       << num(yv) << "</text>\n";
  }
  os << "<text x=\"" << coord(L + pw / 2) << "\" y=\"" << coord(H - 10) << "\" text-anchor=\"middle\" font-size=\"12\">"
     << (opt.x_column.empty() ? std::string("index") : opt.x_column) << "</text>\n";
  os << "<text x=\"16\" y=\"" << coord(T + ph / 2) << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << coord(T + ph / 2) << ")\">" << opt.y_label << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = palette[s % (sizeof palette / sizeof *palette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    // A single point is drawn as a segment across the plot.
    if (series[s].size() == 1) {
      os << coord(px(xmin)) << ',' << coord(py(series[s][0].second)) << ' ' << coord(px(xmax)) << ','
         << coord(py(series[s][0].second));
    } else {
      for (std::size_t i = 0; i < series[s].size(); ++i)
        os << (i ? " " : "") << coord(px(series[s][i].first)) << ',' << coord(py(series[s][i].second));
    }
    os << "\"/>\n";
    const double ly = T + 14 + 18.0 * static_cast<double>(s);
    os << "<line x1=\"" << coord(L + pw + 10) << "\" y1=\"" << coord(ly) << "\" x2=\"" << coord(L + pw + 30)
       << "\" y2=\"" << coord(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << coord(L + pw + 34) << "\" y=\"" << coord(ly + 4) << "\" font-size=\"11\">" << columns[s]
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline void render_line_plot(const CsvTable& t, const std::vector<std::string>& columns, const std::string& path,
                             const PlotOptions& opt = {}) {
  write_text(path, render_line_plot_svg(t, columns, opt));
}

}  // namespace sgr
