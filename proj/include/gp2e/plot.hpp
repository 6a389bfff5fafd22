// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gp2e/config.hpp"
#include "gp2e/training.hpp"

namespace gp2e {

struct MetricsFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::vector<MetricsRow> parse_metrics(std::string_view text, const std::string& origin = "metrics") {
  std::vector<MetricsRow> rows;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    return MetricsFormatError(origin + ":" + std::to_string(lineno) + ": " + what);
  };
  while (!text.empty()) {
    ++lineno;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (lineno == 1) {
      if (line != kMetricsHeader) throw fail("expected header '" + std::string(kMetricsHeader) + "'");
      continue;
    }
    if (line.empty()) throw fail("empty row");
    std::vector<std::string_view> f;
    for (std::size_t start = 0;;) {
      const auto comma = line.find(',', start);
      f.push_back(line.substr(start, comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (f.size() != 8) throw fail("expected 8 fields, got " + std::to_string(f.size()));
    MetricsRow r;
    try {
      r.stage = static_cast<int>(detail::parse_integer<unsigned>(f[0]));
      r.step = detail::parse_integer<std::size_t>(f[1]);
      r.loss = detail::parse_real(f[2]);
      r.success_rate = detail::parse_real(f[3]);
      r.wall_seconds = detail::parse_real(f[4]);
      r.batch_size = detail::parse_integer<std::size_t>(f[5]);
      r.sim_steps = detail::parse_integer<std::size_t>(f[6]);
      r.grad_norm = detail::parse_real(f[7]);
    } catch (const std::exception& e) {
      throw fail(e.what());
    }
    if (r.stage < 1 || r.stage > 2) throw fail("stage must be 1 or 2");
    if (r.success_rate < 0.0 || r.success_rate > 1.0) throw fail("success_rate outside [0, 1]");
    if (!rows.empty() && (r.stage < rows.back().stage || (r.stage == rows.back().stage && r.step < rows.back().step)))
      throw fail("rows out of (stage, step) order");
    rows.push_back(r);
  }
  if (lineno == 0) throw MetricsFormatError(origin + ": empty file");
  if (rows.empty()) throw MetricsFormatError(origin + ": no rows");
  return rows;
}

struct CurvePlot {
  std::string svg;
  std::string summary;
};

/// Success rate against train step. Stage-2 points are drawn in a second
/// colour and a dashed vertical line marks where stage 2 begins.
inline CurvePlot plot_curve(const std::vector<MetricsRow>& rows) {
  if (rows.empty()) throw MetricsFormatError("nothing to plot");
  constexpr double W = 640, H = 400, L = 60, R = 20, T = 30, B = 50;
  const double x_max = static_cast<double>(std::max<std::size_t>(rows.back().step, 1));
  auto px = [&](double step) { return L + (W - L - R) * step / x_max; };
  auto py = [&](double rate) { return H - B - (H - T - B) * rate; };

  std::string s;
  char buf[256];
  auto add = [&](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof buf, fmt, args...);
    s += buf;
  };
  add("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n", W, H, W, H);
  add("<rect width=\"%.0f\" height=\"%.0f\" fill=\"white\"/>\n", W, H);
  add("<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n", L, py(0), W - R, py(0));
  add("<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n", L, py(0), L, py(1));
  for (int k = 0; k <= 4; ++k) {
    const double r = 0.25 * k;
    add("<text x=\"%.2f\" y=\"%.2f\" font-size=\"11\" text-anchor=\"end\">%.2f</text>\n", L - 6, py(r) + 4, r);
  }
  add("<text x=\"%.2f\" y=\"%.2f\" font-size=\"11\" text-anchor=\"middle\">0</text>\n", px(0), py(0) + 16);
  add("<text x=\"%.2f\" y=\"%.2f\" font-size=\"11\" text-anchor=\"middle\">%zu</text>\n", px(x_max), py(0) + 16,
      rows.back().step);
  add("<text x=\"%.2f\" y=\"%.2f\" font-size=\"12\" text-anchor=\"middle\">train step</text>\n", (L + W - R) / 2, H - 12);
  add("<text x=\"14\" y=\"%.2f\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 %.2f)\">success rate</text>\n",
      (T + H - B) / 2, (T + H - B) / 2);

  const auto first2 = std::find_if(rows.begin(), rows.end(), [](const MetricsRow& r) { return r.stage == 2; });
  if (first2 != rows.end() && first2 != rows.begin()) {
    const double bx = px(static_cast<double>(std::prev(first2)->step));
    add("<line class=\"stage-boundary\" x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"gray\" stroke-dasharray=\"6 4\"/>\n",
        bx, py(0), bx, py(1));
    add("<text x=\"%.2f\" y=\"%.2f\" font-size=\"11\">stage 2</text>\n", bx + 4, py(1) + 12);
  }

  const char* colour[] = {"", "#1f77b4", "#d62728"};
  std::string pts;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", pts.empty() ? "" : " ", px(static_cast<double>(r.step)),
                  py(r.success_rate));
    pts += buf;
  }
  s += "<polyline fill=\"none\" stroke=\"#555\" points=\"" + pts + "\"/>\n";
  for (const auto& r : rows)
    add("<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\"/>\n", px(static_cast<double>(r.step)), py(r.success_rate),
        colour[r.stage]);

  // Ties go to the earliest row, matching checkpoint selection.
  const MetricsRow* best = &rows.front();
  for (const auto& r : rows)
    if (r.success_rate > best->success_rate) best = &r;
  std::snprintf(buf, sizeof buf, "best success_rate %.4f at step %zu (stage %d)", best->success_rate, best->step,
                best->stage);
  CurvePlot out;
  out.summary = buf;
  add("<text x=\"%.2f\" y=\"18\" font-size=\"12\">", L);
  s += out.summary + "</text>\n</svg>\n";
  out.svg = std::move(s);
  return out;
}

}  // namespace gp2e
