#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace relkd {

// One line of the metrics stream. Rendered as space-separated key=value
// pairs in a fixed key order:
//   step=12 lr=7.2e-05 loss=0.41 min_loss=0.39 grad_norm=0.8 loss.qq=0.1 ...
// Wall-clock time is kept out of this line (it would make reruns differ) and
// goes to a separate timing stream: "step=12 wall_ms=431.5".
struct MetricRecord {
    std::int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double min_loss = 0.0;
    double grad_norm = 0.0;
    std::vector<std::pair<std::string, double>> extra; // per-pair losses, held-out values
    double wall_ms = 0.0;

    std::optional<double> get(const std::string& key) const;
};

std::string format_metric(const MetricRecord& r);
// Inverse of format_metric; throws FormatError on a malformed line.
MetricRecord parse_metric(const std::string& line);

class MetricsLog {
public:
    // Fills in min_loss as the running minimum of loss.
    void add(MetricRecord r);

    const std::vector<MetricRecord>& records() const { return records_; }
    bool empty() const { return records_.empty(); }
    double min_loss() const { return min_; }

    // Mean loss over the first / last `n` records.
    double head_mean(std::size_t n) const;
    double tail_mean(std::size_t n) const;

    std::string text() const;
    std::string timing_text() const;
    void write(const std::filesystem::path& metrics, const std::filesystem::path& timing) const;

private:
    std::vector<MetricRecord> records_;
    double min_ = std::numeric_limits<double>::infinity();
};

} // namespace relkd
