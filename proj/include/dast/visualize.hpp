// Token-weight heatmaps. Color intensity is relative to the largest weight in
// the same sentence, so it compares tokens within a sentence only.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dast::visualize {

struct WeightedSentence {
  std::string label;
  std::vector<std::string> tokens;
  std::vector<double> weights;
};

// Per-token intensity in [0, 1]; the maximum-weight token gets 1.
inline std::vector<double> intensities(const std::vector<double>& weights) {
  if (weights.empty()) return {};
  const double mx = *std::max_element(weights.begin(), weights.end());
  std::vector<double> out(weights.size(), 1.0);
  if (mx > 0)
    for (std::size_t i = 0; i < weights.size(); ++i) out[i] = std::clamp(weights[i] / mx, 0.0, 1.0);
  return out;
}

inline std::string html_escape(const std::string& s) {
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

namespace detail {
inline void check(const WeightedSentence& s) {
  if (s.tokens.size() != s.weights.size())
    throw std::invalid_argument("sentence '" + s.label + "' has " + std::to_string(s.tokens.size()) +
                                " tokens but " + std::to_string(s.weights.size()) + " weights");
}
}  // namespace detail

// Self-contained page with inline styles only.
inline std::string render_html(const std::vector<WeightedSentence>& sentences,
                               const std::string& title = "Token weights") {
  std::ostringstream os;
  os << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" << html_escape(title)
     << "</title></head>\n<body style=\"font-family:sans-serif;margin:1.5em\">\n<h1 style=\"font-size:1.2em\">"
     << html_escape(title) << "</h1>\n";
  for (const auto& s : sentences) {
    detail::check(s);
    const auto in = intensities(s.weights);
    os << "<div style=\"margin:0.6em 0\"><div style=\"color:#555;font-size:0.8em\">"
       << html_escape(s.label) << "</div><div>";
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      char alpha[16];
      std::snprintf(alpha, sizeof(alpha), "%.3f", in[i]);
      os << "<span class=\"tok\" data-weight=\"" << s.weights[i] << "\" title=\"" << s.weights[i]
         << "\" style=\"background-color:rgba(200,30,30," << alpha
         << ");padding:2px 3px;margin:1px;border-radius:3px\">" << html_escape(s.tokens[i]) << "</span>";
    }
    os << "</div></div>\n";
  }
  os << "</body></html>\n";
  return os.str();
}

// 24-bit ANSI background shading, white to red.
inline std::string render_ansi(const std::vector<WeightedSentence>& sentences) {
  std::ostringstream os;
  for (const auto& s : sentences) {
    detail::check(s);
    const auto in = intensities(s.weights);
    if (!s.label.empty()) os << s.label << '\n';
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      const int gb = static_cast<int>(std::lround(255.0 * (1.0 - 0.85 * in[i])));
      os << "\x1b[48;2;255;" << gb << ';' << gb << "m\x1b[30m " << s.tokens[i] << " \x1b[0m";
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace dast::visualize
