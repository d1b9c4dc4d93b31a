#pragma once

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "adl/artifacts.hpp"
#include "adl/errors.hpp"
#include "adl/io.hpp"

namespace adl {

// ============================================================================
// Report emitter: turns whatever analysis artifacts exist in the store into a
// markdown summary, an HTML page and one SVG figure per panel. Every panel is
// optional; a missing artifact is reported, not fatal. Formatting is pinned
// (%.6g numbers, fixed ordering) so a rerun over identical artifacts writes
// byte-identical files.
// ============================================================================

struct ReportResult {
  std::vector<fs::path> written;
  std::vector<std::string> missing_panels;
};

namespace detail {

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string fmt_2f(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
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

struct Bar {
  std::string label;
  double value = 0.0;
  std::string color;   // fill
  double whisker = 0.0;  // half-length of the error bar; 0 draws none
};

struct RefLine {
  std::string label;
  double value = 0.0;
  std::string color;
};

/// Vertical bar chart with optional error whiskers and horizontal reference
/// lines. Fixed canvas, value axis padded past the extremes and always
/// including zero.
inline std::string bar_chart_svg(const std::string& title, const std::vector<Bar>& bars,
                                 const std::vector<RefLine>& refs = {}) {
  const double width = 640.0;
  const double height = 340.0;
  const double left = 70.0;
  const double right = 20.0;
  const double top = 44.0;
  const double bottom = 58.0;
  const double plot_w = width - left - right;
  const double plot_h = height - top - bottom;

  double lo = 0.0;
  double hi = 0.0;
  for (const auto& b : bars) {
    lo = std::min(lo, b.value - b.whisker);
    hi = std::max(hi, b.value + b.whisker);
  }
  for (const auto& r : refs) {
    lo = std::min(lo, r.value);
    hi = std::max(hi, r.value);
  }
  if (hi == lo) hi = lo + 1.0;
  const double pad = 0.08 * (hi - lo);
  hi += pad;
  if (lo < 0.0) lo -= pad;
  auto ycoord = [&](double v) { return top + plot_h * (hi - v) / (hi - lo); };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt_2f(width) + "\" height=\"" +
         fmt_2f(height) + "\" viewBox=\"0 0 " + fmt_2f(width) + " " + fmt_2f(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
  svg += "<text x=\"" + fmt_2f(width / 2) +
         "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\" "
         "fill=\"#222222\">" +
         xml_escape(title) + "</text>\n";

  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * double(t) / 4.0;
    const double y = ycoord(v);
    svg += "<line x1=\"" + fmt_2f(left) + "\" y1=\"" + fmt_2f(y) + "\" x2=\"" +
           fmt_2f(width - right) + "\" y2=\"" + fmt_2f(y) +
           "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + fmt_2f(left - 6) + "\" y=\"" + fmt_2f(y + 4) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#555555\">" +
           fmt_g(v) + "</text>\n";
  }

  const double n = double(bars.size());
  const double slot = plot_w / std::max(1.0, n);
  const double bar_w = slot * 0.6;
  const double y0 = ycoord(std::max(lo, std::min(hi, 0.0)));
  for (size_t i = 0; i < bars.size(); ++i) {
    const auto& b = bars[i];
    const double cx = left + slot * (double(i) + 0.5);
    const double yv = ycoord(b.value);
    const double by = std::min(yv, y0);
    const double bh = std::max(1.0, std::fabs(yv - y0));
    svg += "<rect x=\"" + fmt_2f(cx - bar_w / 2) + "\" y=\"" + fmt_2f(by) + "\" width=\"" +
           fmt_2f(bar_w) + "\" height=\"" + fmt_2f(bh) + "\" fill=\"" + b.color + "\"/>\n";
    if (b.whisker > 0.0) {
      const double wy1 = ycoord(b.value - b.whisker);
      const double wy2 = ycoord(b.value + b.whisker);
      svg += "<line x1=\"" + fmt_2f(cx) + "\" y1=\"" + fmt_2f(wy1) + "\" x2=\"" + fmt_2f(cx) +
             "\" y2=\"" + fmt_2f(wy2) + "\" stroke=\"#333333\" stroke-width=\"1.5\"/>\n";
      svg += "<line x1=\"" + fmt_2f(cx - 5) + "\" y1=\"" + fmt_2f(wy1) + "\" x2=\"" +
             fmt_2f(cx + 5) + "\" y2=\"" + fmt_2f(wy1) +
             "\" stroke=\"#333333\" stroke-width=\"1.5\"/>\n";
      svg += "<line x1=\"" + fmt_2f(cx - 5) + "\" y1=\"" + fmt_2f(wy2) + "\" x2=\"" +
             fmt_2f(cx + 5) + "\" y2=\"" + fmt_2f(wy2) +
             "\" stroke=\"#333333\" stroke-width=\"1.5\"/>\n";
    }
    svg += "<text x=\"" + fmt_2f(cx) + "\" y=\"" + fmt_2f(height - bottom + 16) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" "
           "fill=\"#333333\">" +
           xml_escape(b.label) + "</text>\n";
    svg += "<text x=\"" + fmt_2f(cx) + "\" y=\"" + fmt_2f(std::min(yv, y0) - 4) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\" "
           "fill=\"#555555\">" +
           fmt_g(b.value) + "</text>\n";
  }

  for (const auto& r : refs) {
    const double y = ycoord(r.value);
    svg += "<line x1=\"" + fmt_2f(left) + "\" y1=\"" + fmt_2f(y) + "\" x2=\"" +
           fmt_2f(width - right) + "\" y2=\"" + fmt_2f(y) + "\" stroke=\"" + r.color +
           "\" stroke-width=\"1.5\" stroke-dasharray=\"6 3\"/>\n";
    svg += "<text x=\"" + fmt_2f(width - right) + "\" y=\"" + fmt_2f(y - 4) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\" fill=\"" + r.color +
           "\">" + xml_escape(r.label) + "</text>\n";
  }

  svg += "</svg>\n";
  return svg;
}

inline std::optional<nlohmann::json> read_panel(const ArtifactStore& store,
                                                const std::string& name) {
  if (!store.contains(name)) return std::nullopt;
  try {
    return nlohmann::json::parse(store.read_text(name));
  } catch (const nlohmann::json::exception& e) {
    throw UpstreamArtifactError("artifact '" + name + "' is not valid JSON: " + e.what());
  }
}

inline std::string md_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '|') out += "\\|";
    else out += c;
  }
  return out;
}

}  // namespace detail

inline ReportResult emit_report(const ArtifactStore& store, const fs::path& report_dir) {
  fs::create_directories(report_dir);
  ReportResult result;

  std::string md = "# Activation difference report\n\n";
  std::string html_body;
  auto section = [&](const std::string& heading) {
    md += "## " + heading + "\n\n";
    html_body += "<h2>" + detail::xml_escape(heading) + "</h2>\n";
  };
  auto absent = [&](const std::string& panel, const std::string& artifact) {
    result.missing_panels.push_back(panel);
    md += "_panel absent: " + artifact + " not found in the artifact store_\n\n";
    html_body += "<p class=\"absent\">panel absent: " + detail::xml_escape(artifact) +
                 " not found in the artifact store</p>\n";
  };
  auto figure = [&](const std::string& filename, const std::string& svg) {
    write_file_atomic(report_dir / filename, svg);
    result.written.push_back(report_dir / filename);
    md += "![" + filename + "](" + filename + ")\n\n";
    html_body += "<figure>" + svg + "</figure>\n";
  };
  auto table = [&](const std::vector<std::string>& header,
                   const std::vector<std::vector<std::string>>& rows) {
    md += "|";
    for (const auto& h : header) md += " " + h + " |";
    md += "\n|";
    for (size_t i = 0; i < header.size(); ++i) md += " --- |";
    md += "\n";
    html_body += "<table><tr>";
    for (const auto& h : header) html_body += "<th>" + detail::xml_escape(h) + "</th>";
    html_body += "</tr>\n";
    for (const auto& row : rows) {
      md += "|";
      html_body += "<tr>";
      for (const auto& cell : row) {
        md += " " + detail::md_escape(cell) + " |";
        html_body += "<td>" + detail::xml_escape(cell) + "</td>";
      }
      md += "\n";
      html_body += "</tr>\n";
    }
    md += "\n";
    html_body += "</table>\n";
  };

  // --- token relevance ---
  section("Token relevance");
  if (auto j = detail::read_panel(store, "relevance.json")) {
    const std::string objective = j->value("objective", "");
    md += "Finetuning objective: " + objective + "\n\n";
    html_body += "<p>Finetuning objective: " + detail::xml_escape(objective) + "</p>\n";
    std::vector<std::vector<std::string>> rows;
    std::vector<detail::Bar> bars;
    const std::vector<std::pair<std::string, std::string>> sources = {
        {"logitlens", "#4878cf"}, {"patchscope", "#6acc65"}};
    for (const auto& [src, color] : sources) {
      if (!j->contains(src)) continue;
      const auto& panel = (*j)[src];
      const double maxf = panel.value("max_fraction", 0.0);
      std::string positions;
      if (panel.contains("per_position"))
        for (const auto& [pos, frac] : panel["per_position"].items()) {
          if (!positions.empty()) positions += ", ";
          positions += pos + ": " + detail::fmt_g(frac.get<double>());
        }
      rows.push_back({src, detail::fmt_g(maxf), positions});
      bars.push_back({src + " max", maxf, color, 0.0});
      if (panel.contains("per_position"))
        for (const auto& [pos, frac] : panel["per_position"].items())
          bars.push_back({src.substr(0, 2) + " j=" + pos, frac.get<double>(), color, 0.0});
    }
    table({"source", "max fraction", "per-position fractions"}, rows);
    figure("fig_relevance.svg",
           detail::bar_chart_svg("Relevant-token fraction of the top-20 readout", bars));
  } else {
    absent("relevance", "relevance.json");
  }

  // --- similarity ---
  section("Steered-text similarity");
  if (auto j = detail::read_panel(store, "similarity.json")) {
    auto stat = [&](const char* key) {
      return std::tuple<double, double, long>((*j)[key].value("mean", 0.0),
                                              (*j)[key].value("stddev", 0.0),
                                              (*j)[key].value("pairs", 0L));
    };
    const std::vector<std::pair<std::string, std::string>> pairs = {
        {"steered_finetune", "#4878cf"},
        {"unsteered_finetune", "#b0b0b0"},
        {"steered_chat", "#6acc65"},
        {"unsteered_chat", "#d5d5d5"},
    };
    std::vector<std::vector<std::string>> rows;
    std::vector<detail::Bar> bars;
    for (const auto& [key, color] : pairs) {
      auto [mean, sd, np] = stat(key.c_str());
      rows.push_back({key, detail::fmt_g(mean), detail::fmt_g(sd), std::to_string(np)});
      bars.push_back({key, mean, color, sd});
    }
    auto [self_mean, self_sd, self_pairs] = stat("finetune_finetune");
    rows.push_back({"finetune_finetune", detail::fmt_g(self_mean), detail::fmt_g(self_sd),
                    std::to_string(self_pairs)});
    table({"pair", "mean cosine", "stddev", "pairs"}, rows);
    figure("fig_similarity.svg",
           detail::bar_chart_svg("Mean pairwise cosine similarity", bars,
                                 {{"finetune self-similarity", self_mean, "#c44e52"}}));
  } else {
    absent("similarity", "similarity.json");
  }

  // --- causal effects ---
  section("Causal effects");
  if (auto j = detail::read_panel(store, "causal.json")) {
    std::vector<std::vector<std::string>> rows;
    std::vector<detail::Bar> bars;
    std::vector<detail::RefLine> refs;
    for (const auto& r : *j) {
      const std::string pos = std::to_string(r.value("position", 0));
      const double ft = r.value("delta_ce_ft", 0.0);
      const double pt = r.value("delta_ce_pt", 0.0);
      const double bm = r.value("baseline_mean", 0.0);
      const double bs = r.value("baseline_sigma", 0.0);
      rows.push_back({pos, detail::fmt_g(ft), detail::fmt_g(pt), detail::fmt_g(bm),
                      detail::fmt_g(bs), std::to_string(r.value("num_random_vectors", 0)),
                      std::to_string(r.value("num_eval_samples", 0))});
      bars.push_back({"ft j=" + pos, ft, "#4878cf", 0.0});
      bars.push_back({"pt j=" + pos, pt, "#6acc65", 0.0});
      if (refs.empty()) {
        refs.push_back({"random mean", bm, "#c44e52"});
        refs.push_back({"random +2 sigma", bm + 2.0 * bs, "#c44e52"});
      }
    }
    table({"position", "delta CE (finetune)", "delta CE (pretrain)", "baseline mean",
           "baseline sigma", "random vectors", "eval samples"},
          rows);
    figure("fig_causal.svg",
           detail::bar_chart_svg("Projection-replacement effect on cross entropy", bars, refs));
  } else {
    absent("causal", "causal.json");
  }

  // --- position sweep ---
  section("Position sweep");
  if (auto j = detail::read_panel(store, "sweep_positions.json")) {
    std::vector<std::vector<std::string>> rows;
    std::vector<detail::Bar> norm_bars;
    std::vector<detail::Bar> frac_bars;
    for (const auto& r : (*j)["positions"]) {
      const std::string pos = std::to_string(r.value("position", 0));
      const double norm = r.value("delta_norm", 0.0);
      const double frac = r.value("keyword_fraction", 0.0);
      rows.push_back({pos, detail::fmt_g(norm), detail::fmt_g(frac)});
      norm_bars.push_back({"j=" + pos, norm, "#4878cf", 0.0});
      frac_bars.push_back({"j=" + pos, frac, "#6acc65", 0.0});
    }
    table({"position", "difference norm", "keyword fraction"}, rows);
    figure("fig_positions.svg",
           detail::bar_chart_svg("Difference norm per position", norm_bars));
    figure("fig_positions_keywords.svg",
           detail::bar_chart_svg("Keyword fraction of the top-20 readout per position",
                                 frac_bars));
  } else {
    absent("positions", "sweep_positions.json");
  }

  // --- mixing sweep ---
  section("Mixing sweep");
  if (auto j = detail::read_panel(store, "sweep_mix.json")) {
    std::vector<std::vector<std::string>> rows;
    std::vector<detail::Bar> bars;
    for (const auto& r : (*j)["ratios"]) {
      const double ratio = r.value("mix_ratio", 0.0);
      const double frac = r.value("keyword_fraction", 0.0);
      rows.push_back({detail::fmt_g(ratio), std::to_string(r.value("best_position", 0)),
                      detail::fmt_g(r.value("delta_norm", 0.0)), detail::fmt_g(frac)});
      bars.push_back({"r=" + detail::fmt_g(ratio), frac, "#4878cf", 0.0});
    }
    table({"mix ratio", "best position", "difference norm", "keyword fraction"}, rows);
    figure("fig_mixing.svg",
           detail::bar_chart_svg("Keyword fraction vs. pretraining-data mix ratio", bars));
  } else {
    absent("mixing", "sweep_mix.json");
  }

  std::string html;
  html += "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n";
  html += "<title>Activation difference report</title>\n<style>\n";
  html += "body { font-family: sans-serif; max-width: 880px; margin: 2em auto; color: #222; }\n";
  html += "table { border-collapse: collapse; margin: 1em 0; }\n";
  html += "th, td { border: 1px solid #ccc; padding: 4px 10px; font-size: 14px; }\n";
  html += "th { background: #f2f2f2; }\n";
  html += "figure { margin: 1em 0; }\n";
  html += ".absent { color: #a33; font-style: italic; }\n";
  html += "</style>\n</head>\n<body>\n<h1>Activation difference report</h1>\n";
  html += html_body;
  html += "</body>\n</html>\n";

  write_file_atomic(report_dir / "index.md", md);
  result.written.insert(result.written.begin(), report_dir / "index.md");
  write_file_atomic(report_dir / "index.html", html);
  result.written.insert(result.written.begin() + 1, report_dir / "index.html");
  return result;
}

}  // namespace adl
