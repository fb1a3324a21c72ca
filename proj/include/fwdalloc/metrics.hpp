#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fwdalloc/trainer.hpp"

namespace fwdalloc {

/// Shortest text that round-trips a double; empty for NaN.
inline std::string format_number(double v) {
  if (std::isnan(v)) return {};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> metrics_columns(const std::vector<std::string>& cosine_scopes) {
  std::vector<std::string> cols{"step", "epoch", "clean_loss", "J", "gap"};
  for (const auto& s : cosine_scopes) cols.push_back("cosine_" + s);
  for (const char* c : {"accuracy", "counts_min", "counts_max", "forward_passes", "counts_sum", "budget"})
    cols.emplace_back(c);
  return cols;
}

/// Single-writer CSV of StepMetrics, flushed after every row.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, std::vector<std::string> cosine_scopes)
      : out_(path, std::ios::out | std::ios::trunc), scopes_(std::move(cosine_scopes)) {
    if (!out_) throw std::runtime_error("cannot write metrics file '" + path + "'");
    const auto cols = metrics_columns(scopes_);
    for (std::size_t i = 0; i < cols.size(); ++i) out_ << (i ? "," : "") << cols[i];
    out_ << '\n';
    out_.flush();
  }

  void write(const StepMetrics& m) {
    if (last_step_ && m.step <= *last_step_) throw std::logic_error("metrics rows must increase in step");
    last_step_ = m.step;
    const auto [lo, hi] = m.counts.empty() ? std::pair<std::size_t, std::size_t>{0, 0}
                                           : std::pair{*std::min_element(m.counts.begin(), m.counts.end()),
                                                       *std::max_element(m.counts.begin(), m.counts.end())};
    const std::size_t sum = std::accumulate(m.counts.begin(), m.counts.end(), std::size_t{0});
    out_ << m.step << ',' << m.epoch << ',' << format_number(m.clean_loss) << ',' << format_number(m.J) << ','
         << format_number(m.gap);
    for (std::size_t s = 0; s < scopes_.size(); ++s)
      out_ << ',' << format_number(s < m.cosine.size() ? m.cosine[s] : std::nan(""));
    out_ << ',' << (m.accuracy ? format_number(*m.accuracy) : std::string{}) << ',' << lo << ',' << hi << ','
         << m.forward_passes << ',' << sum << ',' << m.budget << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
  std::vector<std::string> scopes_;
  std::optional<std::size_t> last_step_;
};

}  // namespace fwdalloc
