#include "relkd/probe.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "relkd/data.hpp"
#include "relkd/error.hpp"

namespace relkd {

ProbeTask make_probe_task(std::size_t train_size, std::size_t test_size, const SyntheticOptions& options,
                          const std::vector<int>& symbol_ids, int separator_id) {
    if (static_cast<int>(symbol_ids.size()) < options.num_symbols) {
        throw ConfigError("probe task needs an id for each of " + std::to_string(options.num_symbols) + " symbols");
    }
    const auto docs = synthetic_corpus(train_size + test_size, options);
    std::set<int> kinds;
    for (const auto& d : docs) {
        kinds.insert(d.label);
    }
    const std::vector<int> dense(kinds.begin(), kinds.end());
    ProbeTask task;
    task.num_classes = static_cast<int>(dense.size());
    for (std::size_t i = 0; i < docs.size(); ++i) {
        std::vector<int> ids{kClsId};
        for (const auto& tok : split_whitespace(docs[i].text)) {
            ids.push_back(tok == kSeparator ? separator_id : symbol_ids[std::stoul(tok.substr(1))]);
        }
        ids.push_back(kSepId);
        auto& dst = i < train_size ? task.train_docs : task.test_docs;
        auto& lab = i < train_size ? task.train_labels : task.test_labels;
        dst.push_back(std::move(ids));
        lab.push_back(static_cast<int>(std::lower_bound(dense.begin(), dense.end(), docs[i].label) - dense.begin()));
    }
    return task;
}

template <typename T>
std::vector<std::vector<double>> pooled_features(const EncoderParams<T>& params, const ModelConfig& config,
                                                 const std::vector<std::vector<int>>& docs) {
    const auto frozen = clone_params(params, false);
    std::vector<std::vector<double>> out;
    out.reserve(docs.size());
    for (const auto& doc : docs) {
        const auto h = forward<T>(doc, frozen, config).hidden;
        const auto n = h.rows(), d = h.cols();
        std::vector<double> f(d, 0.0);
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t j = 0; j < d; ++j) {
                f[j] += static_cast<double>(h.at(t, j));
            }
        }
        for (auto& v : f) {
            v /= static_cast<double>(n);
        }
        out.push_back(std::move(f));
    }
    return out;
}

double linear_probe_accuracy(const std::vector<std::vector<double>>& train_x, const std::vector<int>& train_y,
                             const std::vector<std::vector<double>>& test_x, const std::vector<int>& test_y,
                             int num_classes, const ProbeOptions& options) {
    if (train_x.empty() || test_x.empty() || train_x.size() != train_y.size() || test_x.size() != test_y.size()) {
        throw EvaluationError("probe needs non-empty, labelled train and test splits");
    }
    const std::set<int> classes(train_y.begin(), train_y.end());
    if (classes.size() < 2) {
        throw EvaluationError("probe task is degenerate: training labels hold a single class");
    }
    for (int y : train_y) {
        if (y < 0 || y >= num_classes) {
            throw EvaluationError("probe label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) +
                                  ")");
        }
    }
    const auto d = train_x[0].size();
    const auto n = train_x.size();
    std::vector<double> mean(d, 0.0), sd(d, 0.0);
    for (const auto& x : train_x) {
        for (std::size_t j = 0; j < d; ++j) {
            mean[j] += x[j];
        }
    }
    for (auto& v : mean) {
        v /= static_cast<double>(n);
    }
    for (const auto& x : train_x) {
        for (std::size_t j = 0; j < d; ++j) {
            sd[j] += (x[j] - mean[j]) * (x[j] - mean[j]);
        }
    }
    for (auto& v : sd) {
        v = std::sqrt(v / static_cast<double>(n));
        v = v > 1e-12 ? v : 1.0;
    }
    auto standardize = [&](const std::vector<double>& x) {
        std::vector<double> z(d + 1, 1.0);
        for (std::size_t j = 0; j < d; ++j) {
            z[j] = (x[j] - mean[j]) / sd[j];
        }
        return z;
    };
    std::vector<std::vector<double>> zs;
    for (const auto& x : train_x) {
        zs.push_back(standardize(x));
    }
    const auto k = static_cast<std::size_t>(num_classes);
    const auto width = d + 1;
    std::vector<double> w(k * width, 0.0), grad(k * width);
    std::vector<double> logits(k);
    auto scores = [&](const std::vector<double>& z) {
        for (std::size_t c = 0; c < k; ++c) {
            double s = 0;
            for (std::size_t j = 0; j < width; ++j) {
                s += w[c * width + j] * z[j];
            }
            logits[c] = s;
        }
    };
    for (int it = 0; it < options.iterations; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            scores(zs[i]);
            const double mx = *std::max_element(logits.begin(), logits.end());
            double zsum = 0;
            for (auto& v : logits) {
                v = std::exp(v - mx);
                zsum += v;
            }
            for (std::size_t c = 0; c < k; ++c) {
                const double g = logits[c] / zsum - (static_cast<int>(c) == train_y[i] ? 1.0 : 0.0);
                for (std::size_t j = 0; j < width; ++j) {
                    grad[c * width + j] += g * zs[i][j];
                }
            }
        }
        for (std::size_t q = 0; q < w.size(); ++q) {
            const bool bias = q % width == d;
            w[q] -= options.learning_rate * (grad[q] / static_cast<double>(n) + (bias ? 0.0 : options.l2 * w[q]));
        }
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test_x.size(); ++i) {
        scores(standardize(test_x[i]));
        const auto pred = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        correct += pred == test_y[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(test_x.size());
}

template <typename T>
double probe_eval(const EncoderParams<T>& params, const ModelConfig& config, const ProbeTask& task,
                  const ProbeOptions& options) {
    return linear_probe_accuracy(pooled_features(params, config, task.train_docs), task.train_labels,
                                 pooled_features(params, config, task.test_docs), task.test_labels,
                                 task.num_classes, options);
}

template std::vector<std::vector<double>> pooled_features<float>(const EncoderParams<float>&, const ModelConfig&,
                                                                 const std::vector<std::vector<int>>&);
template std::vector<std::vector<double>> pooled_features<double>(const EncoderParams<double>&, const ModelConfig&,
                                                                  const std::vector<std::vector<int>>&);
template double probe_eval<float>(const EncoderParams<float>&, const ModelConfig&, const ProbeTask&,
                                  const ProbeOptions&);
template double probe_eval<double>(const EncoderParams<double>&, const ModelConfig&, const ProbeTask&,
                                   const ProbeOptions&);

} // namespace relkd
