#include "relkd/optim.hpp"

#include <algorithm>
#include <cmath>

#include "relkd/error.hpp"

namespace relkd {

void AdamConfig::validate() const {
    if (!(peak_lr >= 0.0)) {
        throw ConfigError("learning rate must be non-negative");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) {
        throw ConfigError("Adam epsilon must be positive");
    }
    if (!(weight_decay >= 0.0)) {
        throw ConfigError("weight decay must be non-negative");
    }
    if (total_steps <= 0) {
        throw ConfigError("total steps must be positive, got " + std::to_string(total_steps));
    }
    if (warmup_steps < 0 || warmup_steps > total_steps) {
        throw ConfigError("warmup steps " + std::to_string(warmup_steps) + " outside [0, " +
                          std::to_string(total_steps) + "]");
    }
}

double lr_at(const AdamConfig& c, std::int64_t step) {
    if (step <= 0) {
        return c.warmup_steps == 0 ? c.peak_lr : 0.0;
    }
    if (step >= c.total_steps) {
        return 0.0;
    }
    if (step < c.warmup_steps) {
        return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
    }
    return c.peak_lr * static_cast<double>(c.total_steps - step) /
           static_cast<double>(c.total_steps - c.warmup_steps);
}

template <typename T>
AdamW<T>::AdamW(std::vector<NamedParam<T>> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
    config_.validate();
    for (const auto& p : params_) {
        m_.emplace_back(p.tensor->numel(), T(0));
        v_.emplace_back(p.tensor->numel(), T(0));
    }
}

template <typename T>
StepInfo AdamW<T>::step() {
    double sq = 0.0;
    for (const auto& p : params_) {
        if (!p.tensor->has_grad()) {
            continue;
        }
        for (T g : p.tensor->grad()) {
            if (!std::isfinite(g)) {
                throw NonFiniteGradientError(p.name, "non-finite gradient in parameter " + p.name);
            }
            sq += static_cast<double>(g) * static_cast<double>(g);
        }
    }
    StepInfo info;
    info.step = ++step_;
    info.lr = lr_at(config_, step_);
    info.grad_norm = std::sqrt(sq);
    double gscale = 1.0;
    if (config_.clip_norm > 0.0 && info.grad_norm > config_.clip_norm) {
        gscale = config_.clip_norm / info.grad_norm;
        info.clipped = true;
    }
    const T lr = static_cast<T>(info.lr);
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    const T eps = static_cast<T>(config_.eps);
    const T bc1 = static_cast<T>(1.0 - std::pow(config_.beta1, static_cast<double>(step_)));
    const T bc2 = static_cast<T>(1.0 - std::pow(config_.beta2, static_cast<double>(step_)));
    const T gs = static_cast<T>(gscale);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& t = *params_[i].tensor;
        auto data = t.mutable_data();
        const bool has = t.has_grad();
        const auto grad = has ? t.grad() : std::span<const T>{};
        const T decay = t.rank() >= 2 ? lr * static_cast<T>(config_.weight_decay) : T(0);
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < data.size(); ++k) {
            const T g = has ? grad[k] * gs : T(0);
            m[k] = b1 * m[k] + (T(1) - b1) * g;
            v[k] = b2 * v[k] + (T(1) - b2) * g * g;
            const T mhat = m[k] / bc1;
            const T vhat = v[k] / bc2;
            data[k] -= decay * data[k];
            data[k] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
    return info;
}

template class AdamW<float>;
template class AdamW<double>;

} // namespace relkd
