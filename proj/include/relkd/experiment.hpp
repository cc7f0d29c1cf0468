#pragma once

#include <string>
#include <vector>

#include "relkd/probe.hpp"
#include "relkd/trainer.hpp"

namespace relkd {

struct SweepRow {
    int teacher_layer = 0;
    int relation_heads = 0;
    double final_loss = 0.0;  // mean of the last 10 logged losses
    double heldout_kl = 0.0;
    double probe_accuracy = 0.0;
    std::string status = "ok"; // "ok" or "failed: <reason>"

    bool ok() const { return status == "ok"; }
};

struct SweepReport {
    std::string varied; // "teacher_layer" or "relation_heads"
    std::vector<SweepRow> rows;

    // Highest probe accuracy among successful rows, ties to the lower
    // held-out KL, then to the earlier row; -1 when every row failed.
    int best_index() const;
    // Header row, one line per run, "best" column marks best_index().
    std::string csv() const;
};

template <typename T>
struct ExperimentSetup {
    const EncoderParams<T>* teacher = nullptr;
    ModelConfig teacher_config;
    ModelConfig student_config;
    DistillConfig distill;
    TrainConfig train;
    const std::vector<std::vector<int>>* train_docs = nullptr;
    const std::vector<std::vector<int>>* heldout_docs = nullptr;
    const ProbeTask* probe = nullptr;
    ProbeOptions probe_options;
    int jobs = 1;
};

// One distillation per candidate teacher layer, each with the same seed and
// budget. Rows follow ascending layer order. A failing run yields a row with
// a failure status instead of aborting the sweep.
template <typename T>
SweepReport layer_sweep(const ExperimentSetup<T>& setup, std::vector<int> layers);

// Same over relation-head counts, teacher layer fixed by the setup.
template <typename T>
SweepReport relation_head_sweep(const ExperimentSetup<T>& setup, std::vector<int> relation_heads);

// Single run measured the way a sweep row is.
template <typename T>
SweepRow evaluate_run(const ExperimentSetup<T>& setup, const DistillConfig& distill);

} // namespace relkd
