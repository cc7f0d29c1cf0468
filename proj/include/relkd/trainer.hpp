#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "relkd/data.hpp"
#include "relkd/encoder.hpp"
#include "relkd/metrics.hpp"
#include "relkd/optim.hpp"
#include "relkd/relation.hpp"

namespace relkd {

struct TrainConfig {
    std::int64_t steps = 2000;
    std::size_t batch_size = 16;
    std::size_t seq_len = 32;
    std::uint64_t seed = 0;
    std::int64_t log_every = 1;
    // Held-out evaluation cadence for distillation; 0 disables.
    std::int64_t eval_every = 0;
    double mlm_rate = 0.15;
    AdamConfig adam; // total_steps is overwritten with `steps`

    AdamConfig resolved_adam() const;
    void validate(const ModelConfig& model) const;
};

// Flat list of trainable parameters in checkpoint order.
template <typename T>
std::vector<NamedParam<T>> trainable(EncoderParams<T>& params);

template <typename T>
void zero_grads(EncoderParams<T>& params);

// Called after every optimizer step with the step number and its record
// (the record is only appended to the log on logging steps).
using StepHook = std::function<void(std::int64_t, const MetricRecord&)>;

template <typename T>
struct PretrainResult {
    EncoderParams<T> params;
    MetricsLog metrics;
    CorruptionStats corruption;
    std::uint64_t truncated = 0;
    std::string rng_state;
};

// MLM pretraining from a fresh initialisation. Loss per step is the
// token-level mean cross-entropy over every corrupted position in the batch.
// Throws IngestionError for an empty corpus.
template <typename T>
PretrainResult<T> pretrain_teacher(const std::vector<std::vector<int>>& documents, const ModelConfig& config,
                                   const TrainConfig& train, const StepHook& hook = {});

template <typename T>
struct DistillResult {
    EncoderParams<T> student;
    MetricsLog metrics;
    std::uint64_t truncated = 0;
    std::string rng_state;
};

struct DistillOptions {
    // Teacher Q/K/V per document are computed once and reused. Exact: the
    // teacher is frozen and runs without dropout.
    bool cache_teacher = true;
    const std::vector<std::vector<int>>* heldout = nullptr; // for eval_every
};

// Trains a student on the relation loss alone. The teacher is copied into
// constant tensors, runs in eval mode and is never modified. The student
// starts from `student_init` when given, otherwise from a random
// initialisation seeded by the run seed.
template <typename T>
DistillResult<T> distill(const EncoderParams<T>& teacher, const ModelConfig& teacher_config,
                         const ModelConfig& student_config, const DistillConfig& distill_config,
                         const std::vector<std::vector<int>>& documents, const TrainConfig& train,
                         const EncoderParams<T>* student_init = nullptr, const DistillOptions& options = {},
                         const StepHook& hook = {});

// Mean distillation loss over framed documents, student in eval mode.
template <typename T>
double heldout_relation_kl(const EncoderParams<T>& teacher, const ModelConfig& teacher_config,
                           const EncoderParams<T>& student, const ModelConfig& student_config,
                           const DistillConfig& distill_config, const std::vector<std::vector<int>>& documents,
                           std::size_t seq_len);

// Student init seed used by distill() for a run seed.
std::uint64_t student_init_seed(std::uint64_t run_seed);
std::uint64_t teacher_init_seed(std::uint64_t run_seed);

} // namespace relkd
