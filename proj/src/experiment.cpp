#include "relkd/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>

#include "relkd/archive.hpp"
#include "relkd/error.hpp"

namespace relkd {

namespace {

std::string csv_field(double v) { return std::isfinite(v) ? format_double(v) : "nan"; }

std::string sanitize(std::string s) {
    for (auto& c : s) {
        if (c == ',' || c == '\n' || c == '\r' || c == '"') {
            c = ';';
        }
    }
    return s;
}

template <typename T>
SweepReport run_all(const ExperimentSetup<T>& setup, std::vector<DistillConfig> configs, std::string varied) {
    SweepReport report;
    report.varied = std::move(varied);
    report.rows.resize(configs.size());
    const auto jobs = static_cast<std::size_t>(std::max(1, setup.jobs));
    for (std::size_t begin = 0; begin < configs.size(); begin += jobs) {
        const auto end = std::min(configs.size(), begin + jobs);
        std::vector<std::future<SweepRow>> running;
        for (std::size_t i = begin; i < end; ++i) {
            running.push_back(std::async(jobs > 1 ? std::launch::async : std::launch::deferred,
                                         [&setup, cfg = configs[i]] { return evaluate_run(setup, cfg); }));
        }
        for (std::size_t i = begin; i < end; ++i) {
            report.rows[i] = running[i - begin].get();
        }
    }
    return report;
}

} // namespace

int SweepReport::best_index() const {
    int best = -1;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        if (!r.ok()) {
            continue;
        }
        if (best < 0) {
            best = static_cast<int>(i);
            continue;
        }
        const auto& b = rows[static_cast<std::size_t>(best)];
        if (r.probe_accuracy > b.probe_accuracy ||
            (r.probe_accuracy == b.probe_accuracy && r.heldout_kl < b.heldout_kl)) {
            best = static_cast<int>(i);
        }
    }
    return best;
}

std::string SweepReport::csv() const {
    std::string s = "teacher_layer,relation_heads,final_loss,heldout_kl,probe_accuracy,status,best\n";
    const int best = best_index();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        s += std::to_string(r.teacher_layer) + "," + std::to_string(r.relation_heads) + "," + csv_field(r.final_loss) +
             "," + csv_field(r.heldout_kl) + "," + csv_field(r.probe_accuracy) + "," + sanitize(r.status) + "," +
             (static_cast<int>(i) == best ? "*" : "") + "\n";
    }
    return s;
}

template <typename T>
SweepRow evaluate_run(const ExperimentSetup<T>& setup, const DistillConfig& distill_config) {
    SweepRow row;
    row.relation_heads = distill_config.relation_heads;
    row.teacher_layer = distill_config.teacher_layer;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    try {
        if (!setup.teacher || !setup.train_docs) {
            throw ConfigError("experiment setup lacks a teacher or a corpus");
        }
        row.teacher_layer = distill_config.resolved_teacher_layer(setup.teacher_config);
        auto result = distill<T>(*setup.teacher, setup.teacher_config, setup.student_config, distill_config,
                                 *setup.train_docs, setup.train);
        row.final_loss = result.metrics.tail_mean(10);
        row.heldout_kl = setup.heldout_docs
                             ? heldout_relation_kl(*setup.teacher, setup.teacher_config, result.student,
                                                   setup.student_config, distill_config, *setup.heldout_docs,
                                                   setup.train.seq_len)
                             : nan;
        row.probe_accuracy = setup.probe ? probe_eval(result.student, setup.student_config, *setup.probe,
                                                      setup.probe_options)
                                         : nan;
        if (!std::isfinite(row.final_loss) || (setup.heldout_docs && !std::isfinite(row.heldout_kl))) {
            row.status = "failed: non-finite loss";
        }
    } catch (const std::exception& e) {
        row.final_loss = row.heldout_kl = row.probe_accuracy = nan;
        row.status = std::string("failed: ") + e.what();
    }
    return row;
}

template <typename T>
SweepReport layer_sweep(const ExperimentSetup<T>& setup, std::vector<int> layers) {
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
    std::vector<DistillConfig> configs;
    for (int l : layers) {
        auto c = setup.distill;
        c.teacher_layer = l;
        configs.push_back(c);
    }
    return run_all(setup, std::move(configs), "teacher_layer");
}

template <typename T>
SweepReport relation_head_sweep(const ExperimentSetup<T>& setup, std::vector<int> relation_heads) {
    std::vector<DistillConfig> configs;
    for (int a : relation_heads) {
        auto c = setup.distill;
        c.relation_heads = a;
        configs.push_back(c);
    }
    return run_all(setup, std::move(configs), "relation_heads");
}

template SweepReport layer_sweep<float>(const ExperimentSetup<float>&, std::vector<int>);
template SweepReport layer_sweep<double>(const ExperimentSetup<double>&, std::vector<int>);
template SweepReport relation_head_sweep<float>(const ExperimentSetup<float>&, std::vector<int>);
template SweepReport relation_head_sweep<double>(const ExperimentSetup<double>&, std::vector<int>);
template SweepRow evaluate_run<float>(const ExperimentSetup<float>&, const DistillConfig&);
template SweepRow evaluate_run<double>(const ExperimentSetup<double>&, const DistillConfig&);

} // namespace relkd
