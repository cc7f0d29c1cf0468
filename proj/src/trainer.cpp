#include "relkd/trainer.hpp"

#include <chrono>
#include <cmath>
#include <optional>

#include "relkd/error.hpp"

namespace relkd {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
    return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

bool should_log(const TrainConfig& t, std::int64_t step) {
    return t.log_every > 0 && (step == 1 || step % t.log_every == 0 || step == t.steps);
}

template <typename T>
LayerCapture<T> qkv_only(const LayerCapture<T>& full) {
    LayerCapture<T> c;
    c.query = full.query;
    c.key = full.key;
    c.value = full.value;
    return c;
}

} // namespace

AdamConfig TrainConfig::resolved_adam() const {
    AdamConfig a = adam;
    a.total_steps = steps;
    return a;
}

void TrainConfig::validate(const ModelConfig& model) const {
    if (steps <= 0) {
        throw ConfigError("run.steps must be positive, got " + std::to_string(steps));
    }
    if (batch_size == 0) {
        throw ConfigError("run.batch_size must be positive");
    }
    if (seq_len < 3) {
        throw ConfigError("run.seq_len must be at least 3, got " + std::to_string(seq_len));
    }
    if (seq_len > static_cast<std::size_t>(model.max_seq_len)) {
        throw ConfigError("run.seq_len " + std::to_string(seq_len) + " exceeds model.max_seq_len " +
                          std::to_string(model.max_seq_len));
    }
    if (!(mlm_rate >= 0.0 && mlm_rate <= 1.0)) {
        throw ConfigError("run.mlm_rate must lie in [0, 1]");
    }
    resolved_adam().validate();
}

std::uint64_t student_init_seed(std::uint64_t run_seed) { return derive_seed(run_seed, 0x73747564ULL); }
std::uint64_t teacher_init_seed(std::uint64_t run_seed) { return derive_seed(run_seed, 0x74656163ULL); }

template <typename T>
std::vector<NamedParam<T>> trainable(EncoderParams<T>& params) {
    std::vector<NamedParam<T>> out;
    for (auto& n : params.named()) {
        out.push_back({n.name, n.tensor});
    }
    return out;
}

template <typename T>
void zero_grads(EncoderParams<T>& params) {
    for (auto& n : params.named()) {
        n.tensor->zero_grad();
    }
}

template <typename T>
PretrainResult<T> pretrain_teacher(const std::vector<std::vector<int>>& documents, const ModelConfig& config,
                                   const TrainConfig& train, const StepHook& hook) {
    config.validate();
    train.validate(config);
    if (documents.empty()) {
        throw IngestionError("pretraining corpus is empty");
    }
    if (!(train.mlm_rate > 0.0)) {
        throw ConfigError("pretraining needs run.mlm_rate > 0");
    }
    BatchOptions bo;
    bo.seq_len = train.seq_len;
    bo.batch_size = train.batch_size;
    bo.seed = train.seed;
    bo.mlm_rate = train.mlm_rate;
    BatchStream stream(documents, config.vocab_size, bo);

    PretrainResult<T> result;
    result.params = init_params<T>(config, teacher_init_seed(train.seed));
    AdamW<T> opt(trainable(result.params), train.resolved_adam());
    const auto start = Clock::now();

    for (std::int64_t step = 1; step <= train.steps; ++step) {
        const auto batch = stream.next();
        const auto total = static_cast<double>(batch.num_mlm_positions());
        zero_grads(result.params);
        double loss_sum = 0.0;
        for (std::size_t r = 0; r < batch.batch_size; ++r) {
            const auto& pos = batch.mlm_positions[r];
            if (pos.empty()) {
                continue;
            }
            ForwardOptions fo;
            fo.train = true;
            fo.dropout_seed = derive_seed(train.seed, static_cast<std::uint64_t>(step), r);
            auto loss = mlm_loss<T>(batch.row(r), pos, batch.mlm_labels[r], result.params, config, fo);
            const double weight = static_cast<double>(pos.size()) / total;
            loss_sum += weight * static_cast<double>(loss.item());
            backward(scale(loss, static_cast<T>(weight)));
        }
        const auto info = opt.step();
        MetricRecord rec;
        rec.step = step;
        rec.lr = info.lr;
        rec.loss = loss_sum;
        rec.grad_norm = info.grad_norm;
        rec.wall_ms = elapsed_ms(start);
        if (should_log(train, step)) {
            result.metrics.add(rec);
        }
        if (hook) {
            hook(step, rec);
        }
    }
    zero_grads(result.params);
    result.corruption = stream.corruption();
    result.truncated = stream.truncated();
    result.rng_state = stream.rng_state();
    return result;
}

template <typename T>
DistillResult<T> distill(const EncoderParams<T>& teacher, const ModelConfig& teacher_config,
                         const ModelConfig& student_config, const DistillConfig& distill_config,
                         const std::vector<std::vector<int>>& documents, const TrainConfig& train,
                         const EncoderParams<T>* student_init, const DistillOptions& options,
                         const StepHook& hook) {
    teacher_config.validate();
    student_config.validate();
    distill_config.validate(teacher_config, student_config);
    train.validate(student_config);
    train.validate(teacher_config);
    if (documents.empty()) {
        throw IngestionError("distillation corpus is empty");
    }
    const int l = distill_config.resolved_teacher_layer(teacher_config);
    const int m = distill_config.resolved_student_layer(student_config);
    // The teacher state handed to distill_loss holds only layer l, the
    // student state holds layers 1..m.
    DistillConfig call_cfg = distill_config;
    call_cfg.teacher_layer = 1;
    call_cfg.student_layer = m;

    const auto frozen = clone_params(teacher, false);
    BatchOptions bo;
    bo.seq_len = train.seq_len;
    bo.batch_size = train.batch_size;
    bo.seed = train.seed;
    BatchStream stream(documents, student_config.vocab_size, bo);

    DistillResult<T> result;
    result.student = student_init ? clone_params(*student_init, true)
                                  : init_params<T>(student_config, student_init_seed(train.seed));
    AdamW<T> opt(trainable(result.student), train.resolved_adam());
    std::vector<std::optional<LayerCapture<T>>> cache(options.cache_teacher ? documents.size() : 0);

    auto teacher_layer = [&](std::span<const int> toks, std::size_t doc) {
        if (options.cache_teacher && cache[doc]) {
            return *cache[doc];
        }
        ForwardOptions fo;
        fo.truncate_at_layer = l;
        auto out = forward<T>(toks, frozen, teacher_config, fo);
        auto cap = qkv_only(out.state->layer(l));
        if (options.cache_teacher) {
            cache[doc] = cap;
        }
        return cap;
    };

    const auto names = relation_names(distill_config.alpha);
    const auto start = Clock::now();
    for (std::int64_t step = 1; step <= train.steps; ++step) {
        const auto batch = stream.next();
        zero_grads(result.student);
        double loss_sum = 0.0;
        std::vector<double> pair_sums(names.size(), 0.0);
        const auto inv_b = 1.0 / static_cast<double>(batch.batch_size);
        for (std::size_t r = 0; r < batch.batch_size; ++r) {
            const auto toks = batch.row(r);
            AttentionState<T> tstate;
            tstate.layers.push_back(teacher_layer(toks, batch.doc_index[r]));
            ForwardOptions fo;
            fo.train = true;
            fo.dropout_seed = derive_seed(train.seed, static_cast<std::uint64_t>(step), r);
            fo.truncate_at_layer = m;
            auto sout = forward<T>(toks, result.student, student_config, fo);
            auto dl = distill_loss(tstate, *sout.state, call_cfg);
            loss_sum += inv_b * static_cast<double>(dl.total.item());
            for (std::size_t k = 0; k < names.size(); ++k) {
                pair_sums[k] += inv_b * dl.pairs[k].second;
            }
            backward(scale(dl.total, static_cast<T>(inv_b)));
        }
        const auto info = opt.step();
        MetricRecord rec;
        rec.step = step;
        rec.lr = info.lr;
        rec.loss = loss_sum;
        rec.grad_norm = info.grad_norm;
        for (std::size_t k = 0; k < names.size(); ++k) {
            rec.extra.emplace_back("loss." + names[k], pair_sums[k]);
        }
        if (train.eval_every > 0 && options.heldout && (step % train.eval_every == 0 || step == train.steps)) {
            rec.extra.emplace_back("heldout_kl",
                                   heldout_relation_kl(teacher, teacher_config, result.student, student_config,
                                                       distill_config, *options.heldout, train.seq_len));
        }
        rec.wall_ms = elapsed_ms(start);
        if (should_log(train, step) || (train.eval_every > 0 && rec.get("heldout_kl"))) {
            result.metrics.add(rec);
        }
        if (hook) {
            hook(step, rec);
        }
    }
    zero_grads(result.student);
    result.truncated = stream.truncated();
    result.rng_state = stream.rng_state();
    return result;
}

template <typename T>
double heldout_relation_kl(const EncoderParams<T>& teacher, const ModelConfig& teacher_config,
                           const EncoderParams<T>& student, const ModelConfig& student_config,
                           const DistillConfig& distill_config, const std::vector<std::vector<int>>& documents,
                           std::size_t seq_len) {
    if (documents.empty()) {
        throw EvaluationError("held-out set is empty");
    }
    distill_config.validate(teacher_config, student_config);
    const auto t = clone_params(teacher, false);
    const auto s = clone_params(student, false);
    ForwardOptions tf, sf;
    tf.truncate_at_layer = distill_config.resolved_teacher_layer(teacher_config);
    sf.truncate_at_layer = distill_config.resolved_student_layer(student_config);
    double total = 0.0;
    for (const auto& doc : documents) {
        const auto toks = frame_document(doc, seq_len);
        auto to = forward<T>(toks, t, teacher_config, tf);
        auto so = forward<T>(toks, s, student_config, sf);
        total += static_cast<double>(distill_loss(*to.state, *so.state, distill_config).total.item());
    }
    return total / static_cast<double>(documents.size());
}

#define RELKD_INSTANTIATE_TRAINER(T)                                                                            \
    template std::vector<NamedParam<T>> trainable<T>(EncoderParams<T>&);                                        \
    template void zero_grads<T>(EncoderParams<T>&);                                                             \
    template PretrainResult<T> pretrain_teacher<T>(const std::vector<std::vector<int>>&, const ModelConfig&,    \
                                                   const TrainConfig&, const StepHook&);                        \
    template DistillResult<T> distill<T>(const EncoderParams<T>&, const ModelConfig&, const ModelConfig&,       \
                                         const DistillConfig&, const std::vector<std::vector<int>>&,            \
                                         const TrainConfig&, const EncoderParams<T>*, const DistillOptions&,    \
                                         const StepHook&);                                                      \
    template double heldout_relation_kl<T>(const EncoderParams<T>&, const ModelConfig&, const EncoderParams<T>&, \
                                           const ModelConfig&, const DistillConfig&,                            \
                                           const std::vector<std::vector<int>>&, std::size_t);

RELKD_INSTANTIATE_TRAINER(float)
RELKD_INSTANTIATE_TRAINER(double)

#undef RELKD_INSTANTIATE_TRAINER

} // namespace relkd
