#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "relkd/ops.hpp"
#include "relkd/tensor.hpp"

namespace relkd {

struct ModelConfig {
    int num_layers = 2;
    int hidden_size = 32;
    int num_heads = 2;
    int ffn_size = 128;
    int vocab_size = 32;
    int max_seq_len = 32;
    double dropout = 0.1;

    int head_size() const { return hidden_size / num_heads; }

    // Throws ConfigError on a non-positive field, hidden_size not divisible
    // by num_heads, or dropout outside [0, 1).
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Human-readable list of differing fields, e.g. "hidden_size: 64 != 32".
std::vector<std::string> config_diff(const ModelConfig& expected, const ModelConfig& actual);

inline constexpr double kLayerNormEps = 1e-12;
inline constexpr double kInitStddev = 0.02;

template <typename T>
struct LayerParams {
    // Per-head projections are column blocks of these d_h x d_h matrices:
    // head a owns columns [a*d_k, (a+1)*d_k).
    Tensor<T> w_query, w_key, w_value;
    Tensor<T> w_out, b_out;
    Tensor<T> ln_attn_gamma, ln_attn_beta;
    Tensor<T> w_ffn_in, b_ffn_in;
    Tensor<T> w_ffn_out, b_ffn_out;
    Tensor<T> ln_ffn_gamma, ln_ffn_beta;
};

template <typename T>
struct EncoderParams {
    Tensor<T> token_embedding;    // [V, d_h]
    Tensor<T> position_embedding; // [max_seq_len, d_h]
    Tensor<T> ln_embed_gamma, ln_embed_beta;
    std::vector<LayerParams<T>> layers;
    // MLM head: dense + GELU + LN, then a vocabulary projection.
    Tensor<T> mlm_dense_w, mlm_dense_b;
    Tensor<T> mlm_ln_gamma, mlm_ln_beta;
    Tensor<T> mlm_out_w, mlm_out_b;

    struct Named {
        std::string name;
        Tensor<T>* tensor;
    };
    // Stable, checkpoint-facing names in a fixed order.
    std::vector<Named> named();
    std::vector<std::pair<std::string, const Tensor<T>*>> named() const;
};

// Weights ~ N(0, 0.02) truncated at 2 sigma, biases 0, LN gains 1.
template <typename T>
EncoderParams<T> init_params(const ModelConfig& config, std::uint64_t seed);

// Deep copy; every tensor in the copy gets the given requires_grad flag.
template <typename T>
EncoderParams<T> clone_params(const EncoderParams<T>& params, bool requires_grad);

// Shape of every parameter as implied by the config, keyed by name.
std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& config);

// Captured tensors of one encoder layer. Q/K/V/probs are per head, each
// [|x|, d_k] (probs [|x|, |x|], pre-dropout).
template <typename T>
struct LayerCapture {
    Tensor<T> input; // H^{l-1}
    std::vector<Tensor<T>> query, key, value, probs;
    Tensor<T> attention; // O_l: concatenated head outputs, [|x|, d_h]; undefined for a truncated layer
    Tensor<T> output;    // H^l; undefined for a truncated layer
};

template <typename T>
struct AttentionState {
    std::uint64_t pass_id = 0;
    std::vector<LayerCapture<T>> layers; // index 0 is layer 1

    // 1-based, as in the layer-selection options.
    const LayerCapture<T>& layer(int index) const;
};

struct ForwardOptions {
    bool capture = false;
    bool train = false; // enables dropout
    std::uint64_t dropout_seed = 0;
    // When > 0, layers before this one run fully and this layer stops after
    // computing its attention probabilities (its Q/K/V are all a relation
    // loss needs). Implies capture.
    int truncate_at_layer = 0;
};

template <typename T>
struct EncoderOutput {
    Tensor<T> hidden; // H^L, or H^{l-1} when truncated at layer l
    std::optional<AttentionState<T>> state;
};

// Token-validity mask: 1 for real tokens, 0 for padding. Must be a true
// prefix; empty means all tokens are real.
using TokenMask = std::span<const std::uint8_t>;

template <typename T>
struct AttentionResult {
    Tensor<T> output;    // projected: concat(heads) * W_out + b_out
    Tensor<T> attention; // concat(heads) before projection
    std::vector<Tensor<T>> query, key, value, probs;
};

// Multi-head scaled dot-product attention over H_prev[|x|, d_h]. With
// `probs_only`, stops after the attention probabilities.
template <typename T>
AttentionResult<T> self_attention_layer(const Tensor<T>& h_prev, const LayerParams<T>& layer,
                                        const ModelConfig& config, TokenMask mask, Rng* dropout_rng = nullptr,
                                        bool probs_only = false);

template <typename T>
EncoderOutput<T> forward(std::span<const int> tokens, const EncoderParams<T>& params, const ModelConfig& config,
                         const ForwardOptions& options = {}, TokenMask mask = {});

// Mean cross-entropy of the MLM head over `masked_positions` (indices into
// `tokens`), predicting `labels`.
template <typename T>
Tensor<T> mlm_loss(std::span<const int> tokens, std::span<const int> masked_positions, std::span<const int> labels,
                   const EncoderParams<T>& params, const ModelConfig& config, const ForwardOptions& options = {},
                   TokenMask mask = {});

} // namespace relkd
