#include "relkd/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>

#include "relkd/archive.hpp"
#include "relkd/data.hpp"
#include "relkd/error.hpp"

namespace relkd {

std::optional<double> MetricRecord::get(const std::string& key) const {
    if (key == "loss") {
        return loss;
    }
    if (key == "lr") {
        return lr;
    }
    if (key == "min_loss") {
        return min_loss;
    }
    if (key == "grad_norm") {
        return grad_norm;
    }
    for (const auto& [k, v] : extra) {
        if (k == key) {
            return v;
        }
    }
    return std::nullopt;
}

std::string format_metric(const MetricRecord& r) {
    std::string s = "step=" + std::to_string(r.step) + " lr=" + format_double(r.lr) + " loss=" + format_double(r.loss) +
                    " min_loss=" + format_double(r.min_loss) + " grad_norm=" + format_double(r.grad_norm);
    for (const auto& [k, v] : r.extra) {
        s += " " + k + "=" + format_double(v);
    }
    return s;
}

MetricRecord parse_metric(const std::string& line) {
    MetricRecord r;
    bool have_step = false;
    for (const auto& field : split_whitespace(line)) {
        const auto eq = field.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw FormatError("malformed metric field '" + field + "'");
        }
        const auto key = field.substr(0, eq);
        const auto val = field.substr(eq + 1);
        if (key == "step") {
            const auto [p, ec] = std::from_chars(val.data(), val.data() + val.size(), r.step);
            if (ec != std::errc() || p != val.data() + val.size()) {
                throw FormatError("malformed step '" + val + "'");
            }
            have_step = true;
            continue;
        }
        double v = 0;
        const auto [p, ec] = std::from_chars(val.data(), val.data() + val.size(), v);
        if (ec != std::errc() || p != val.data() + val.size()) {
            throw FormatError("malformed metric value '" + field + "'");
        }
        if (key == "lr") {
            r.lr = v;
        } else if (key == "loss") {
            r.loss = v;
        } else if (key == "min_loss") {
            r.min_loss = v;
        } else if (key == "grad_norm") {
            r.grad_norm = v;
        } else if (key == "wall_ms") {
            r.wall_ms = v;
        } else {
            r.extra.emplace_back(key, v);
        }
    }
    if (!have_step) {
        throw FormatError("metric line without a step: '" + line + "'");
    }
    return r;
}

void MetricsLog::add(MetricRecord r) {
    min_ = std::min(min_, r.loss);
    r.min_loss = min_;
    records_.push_back(std::move(r));
}

double MetricsLog::head_mean(std::size_t n) const {
    n = std::min(n, records_.size());
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        s += records_[i].loss;
    }
    return n ? s / static_cast<double>(n) : 0.0;
}

double MetricsLog::tail_mean(std::size_t n) const {
    n = std::min(n, records_.size());
    double s = 0;
    for (std::size_t i = records_.size() - n; i < records_.size(); ++i) {
        s += records_[i].loss;
    }
    return n ? s / static_cast<double>(n) : 0.0;
}

std::string MetricsLog::text() const {
    std::string s;
    for (const auto& r : records_) {
        s += format_metric(r) + "\n";
    }
    return s;
}

std::string MetricsLog::timing_text() const {
    std::string s;
    for (const auto& r : records_) {
        s += "step=" + std::to_string(r.step) + " wall_ms=" + format_double(r.wall_ms) + "\n";
    }
    return s;
}

void MetricsLog::write(const std::filesystem::path& metrics, const std::filesystem::path& timing) const {
    for (const auto& [path, body] : {std::pair{metrics, text()}, std::pair{timing, timing_text()}}) {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw IngestionError("cannot write " + path.string());
        }
        f << body;
    }
}

} // namespace relkd
