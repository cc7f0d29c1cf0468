#pragma once

#include <cstdint>
#include <vector>

#include "relkd/encoder.hpp"
#include "relkd/synthetic.hpp"

namespace relkd {

// Labelled sequences for a frozen-feature linear probe. Documents are
// already framed ([CLS] ... [SEP]).
struct ProbeTask {
    std::vector<std::vector<int>> train_docs, test_docs;
    std::vector<int> train_labels, test_labels;
    int num_classes = 2;
};

struct ProbeOptions {
    int iterations = 2000;
    double learning_rate = 0.5;
    double l2 = 1e-4;
};

// Classification of generated documents by kind (copy / mirror / shuffled,
// whichever the options produce), labels renumbered densely from 0. Tokens
// are encoded with the given ids (symbol i -> symbol_ids[i], separator ->
// separator_id).
ProbeTask make_probe_task(std::size_t train_size, std::size_t test_size, const SyntheticOptions& options,
                          const std::vector<int>& symbol_ids, int separator_id);

// Mean over positions of the final hidden states, eval mode.
template <typename T>
std::vector<std::vector<double>> pooled_features(const EncoderParams<T>& params, const ModelConfig& config,
                                                 const std::vector<std::vector<int>>& docs);

// Multinomial logistic regression on standardised features, full-batch
// gradient descent for a fixed number of iterations from zero weights.
// Returns accuracy on the test split. Throws EvaluationError when the
// training labels hold fewer than two classes.
double linear_probe_accuracy(const std::vector<std::vector<double>>& train_x, const std::vector<int>& train_y,
                             const std::vector<std::vector<double>>& test_x, const std::vector<int>& test_y,
                             int num_classes, const ProbeOptions& options = {});

template <typename T>
double probe_eval(const EncoderParams<T>& params, const ModelConfig& config, const ProbeTask& task,
                  const ProbeOptions& options = {});

} // namespace relkd
