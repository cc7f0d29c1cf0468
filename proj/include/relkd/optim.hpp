#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "relkd/tensor.hpp"

namespace relkd {

struct AdamConfig {
    double peak_lr = 6e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-6;
    double weight_decay = 0.01;
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 1;
    double clip_norm = 1.0; // global-norm clipping; <= 0 disables

    // Throws ConfigError.
    void validate() const;
};

// Linear warmup to peak_lr at warmup_steps, then linear decay to 0 at
// total_steps. The update numbered t (1-based) uses lr_at(t).
double lr_at(const AdamConfig& config, std::int64_t step);

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T>* tensor;
};

struct StepInfo {
    std::int64_t step = 0;
    double lr = 0.0;
    double grad_norm = 0.0; // before clipping
    bool clipped = false;
};

// Adam with decoupled weight decay (p <- p - lr * wd * p, outside the
// moments) on parameters of rank >= 2; vectors are never decayed.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<NamedParam<T>> params, AdamConfig config);

    // Reads the accumulated gradients (a parameter without one counts as
    // zero). Throws NonFiniteGradientError naming the parameter before
    // touching any state.
    StepInfo step();

    std::int64_t step_count() const { return step_; }
    const AdamConfig& config() const { return config_; }
    const std::vector<T>& first_moment(std::size_t i) const { return m_[i]; }
    const std::vector<T>& second_moment(std::size_t i) const { return v_[i]; }

private:
    std::vector<NamedParam<T>> params_;
    AdamConfig config_;
    std::vector<std::vector<T>> m_, v_;
    std::int64_t step_ = 0;
};

} // namespace relkd
