#include "relkd/encoder.hpp"

#include <atomic>
#include <cmath>

namespace relkd {

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0) {
            throw ConfigError(std::string("model.") + name + " must be positive, got " + std::to_string(v));
        }
    };
    positive(num_layers, "num_layers");
    positive(hidden_size, "hidden_size");
    positive(num_heads, "num_heads");
    positive(ffn_size, "ffn_size");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    if (hidden_size % num_heads != 0) {
        throw ConfigError("model.hidden_size " + std::to_string(hidden_size) + " is not divisible by model.num_heads " +
                          std::to_string(num_heads) + " (remainder " + std::to_string(hidden_size % num_heads) + ")");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        throw ConfigError("model.dropout must lie in [0, 1), got " + std::to_string(dropout));
    }
}

std::vector<std::string> config_diff(const ModelConfig& expected, const ModelConfig& actual) {
    std::vector<std::string> diff;
    auto cmp = [&](const char* name, auto a, auto b) {
        if (a != b) {
            diff.push_back(std::string(name) + ": expected " + std::to_string(a) + ", found " + std::to_string(b));
        }
    };
    cmp("num_layers", expected.num_layers, actual.num_layers);
    cmp("hidden_size", expected.hidden_size, actual.hidden_size);
    cmp("num_heads", expected.num_heads, actual.num_heads);
    cmp("ffn_size", expected.ffn_size, actual.ffn_size);
    cmp("vocab_size", expected.vocab_size, actual.vocab_size);
    cmp("max_seq_len", expected.max_seq_len, actual.max_seq_len);
    cmp("dropout", expected.dropout, actual.dropout);
    return diff;
}

std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& c) {
    const std::size_t d = static_cast<std::size_t>(c.hidden_size);
    const std::size_t f = static_cast<std::size_t>(c.ffn_size);
    const std::size_t v = static_cast<std::size_t>(c.vocab_size);
    std::vector<std::pair<std::string, Shape>> s{
        {"embeddings.token", {v, d}},
        {"embeddings.position", {static_cast<std::size_t>(c.max_seq_len), d}},
        {"embeddings.ln.gamma", {d}},
        {"embeddings.ln.beta", {d}},
    };
    for (int l = 1; l <= c.num_layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        s.push_back({p + "attn.w_query", {d, d}});
        s.push_back({p + "attn.w_key", {d, d}});
        s.push_back({p + "attn.w_value", {d, d}});
        s.push_back({p + "attn.w_out", {d, d}});
        s.push_back({p + "attn.b_out", {d}});
        s.push_back({p + "attn.ln.gamma", {d}});
        s.push_back({p + "attn.ln.beta", {d}});
        s.push_back({p + "ffn.w_in", {d, f}});
        s.push_back({p + "ffn.b_in", {f}});
        s.push_back({p + "ffn.w_out", {f, d}});
        s.push_back({p + "ffn.b_out", {d}});
        s.push_back({p + "ffn.ln.gamma", {d}});
        s.push_back({p + "ffn.ln.beta", {d}});
    }
    s.push_back({"mlm.dense.weight", {d, d}});
    s.push_back({"mlm.dense.bias", {d}});
    s.push_back({"mlm.ln.gamma", {d}});
    s.push_back({"mlm.ln.beta", {d}});
    s.push_back({"mlm.out.weight", {d, v}});
    s.push_back({"mlm.out.bias", {v}});
    return s;
}

template <typename T>
std::vector<typename EncoderParams<T>::Named> EncoderParams<T>::named() {
    std::vector<Named> out{
        {"embeddings.token", &token_embedding},
        {"embeddings.position", &position_embedding},
        {"embeddings.ln.gamma", &ln_embed_gamma},
        {"embeddings.ln.beta", &ln_embed_beta},
    };
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto& L = layers[i];
        const std::string p = "layer." + std::to_string(i + 1) + ".";
        out.push_back({p + "attn.w_query", &L.w_query});
        out.push_back({p + "attn.w_key", &L.w_key});
        out.push_back({p + "attn.w_value", &L.w_value});
        out.push_back({p + "attn.w_out", &L.w_out});
        out.push_back({p + "attn.b_out", &L.b_out});
        out.push_back({p + "attn.ln.gamma", &L.ln_attn_gamma});
        out.push_back({p + "attn.ln.beta", &L.ln_attn_beta});
        out.push_back({p + "ffn.w_in", &L.w_ffn_in});
        out.push_back({p + "ffn.b_in", &L.b_ffn_in});
        out.push_back({p + "ffn.w_out", &L.w_ffn_out});
        out.push_back({p + "ffn.b_out", &L.b_ffn_out});
        out.push_back({p + "ffn.ln.gamma", &L.ln_ffn_gamma});
        out.push_back({p + "ffn.ln.beta", &L.ln_ffn_beta});
    }
    out.push_back({"mlm.dense.weight", &mlm_dense_w});
    out.push_back({"mlm.dense.bias", &mlm_dense_b});
    out.push_back({"mlm.ln.gamma", &mlm_ln_gamma});
    out.push_back({"mlm.ln.beta", &mlm_ln_beta});
    out.push_back({"mlm.out.weight", &mlm_out_w});
    out.push_back({"mlm.out.bias", &mlm_out_b});
    return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> EncoderParams<T>::named() const {
    auto mut = const_cast<EncoderParams<T>*>(this)->named();
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    out.reserve(mut.size());
    for (auto& n : mut) {
        out.emplace_back(std::move(n.name), n.tensor);
    }
    return out;
}

template <typename T>
EncoderParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    EncoderParams<T> p;
    p.layers.resize(static_cast<std::size_t>(config.num_layers));
    Rng rng(seed);
    const auto shapes = param_shapes(config);
    auto named = p.named();
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& [name, shape] = shapes[i];
        const bool is_gain = name.ends_with(".gamma");
        const bool is_offset = name.ends_with(".beta") || shape.size() == 1;
        std::vector<T> v(shape_numel(shape));
        if (is_gain) {
            std::fill(v.begin(), v.end(), T(1));
        } else if (!is_offset) {
            for (auto& x : v) {
                x = static_cast<T>(rng.truncated_normal(kInitStddev));
            }
        }
        *named[i].tensor = Tensor<T>(shape, std::move(v), true);
    }
    return p;
}

template <typename T>
EncoderParams<T> clone_params(const EncoderParams<T>& params, bool requires_grad) {
    EncoderParams<T> out;
    out.layers.resize(params.layers.size());
    auto dst = out.named();
    const auto src = params.named();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        *dst[i].tensor = src[i].second->clone(requires_grad);
    }
    return out;
}

template <typename T>
const LayerCapture<T>& AttentionState<T>::layer(int index) const {
    if (index < 1 || static_cast<std::size_t>(index) > layers.size()) {
        throw ConfigError("layer " + std::to_string(index) + " outside captured range [1, " +
                          std::to_string(layers.size()) + "]");
    }
    return layers[static_cast<std::size_t>(index - 1)];
}

namespace {

std::uint64_t next_pass_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

std::vector<std::uint8_t> key_mask(TokenMask mask, std::size_t n) {
    std::vector<std::uint8_t> m;
    if (mask.empty()) {
        return m;
    }
    m.resize(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            m[i * n + j] = mask[j];
        }
    }
    return m;
}

void check_token_mask(TokenMask mask, std::size_t n) {
    if (mask.empty()) {
        return;
    }
    if (mask.size() != n) {
        throw ShapeError("token mask has " + std::to_string(mask.size()) + " entries for " + std::to_string(n) +
                         " tokens");
    }
    if (!mask[0]) {
        throw DegenerateRowError("token mask has no valid position");
    }
    for (std::size_t i = 1; i < n; ++i) {
        if (mask[i] && !mask[i - 1]) {
            throw ShapeError("token mask must be a true prefix (right padding only)");
        }
    }
}

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, double rate, Rng* rng) {
    if (rng == nullptr || rate == 0.0) {
        return x;
    }
    return dropout(x, rate, *rng);
}

} // namespace

template <typename T>
AttentionResult<T> self_attention_layer(const Tensor<T>& h_prev, const LayerParams<T>& layer,
                                        const ModelConfig& config, TokenMask mask, Rng* dropout_rng,
                                        bool probs_only) {
    const std::size_t n = h_prev.rows();
    if (n > static_cast<std::size_t>(config.max_seq_len)) {
        throw ShapeError("sequence of length " + std::to_string(n) + " exceeds max_seq_len " +
                         std::to_string(config.max_seq_len));
    }
    check_token_mask(mask, n);
    const auto dk = static_cast<std::size_t>(config.head_size());
    const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(dk));
    const auto kmask = key_mask(mask, n);

    AttentionResult<T> r;
    const auto q = matmul(h_prev, layer.w_query);
    const auto k = matmul(h_prev, layer.w_key);
    const auto v = matmul(h_prev, layer.w_value);
    std::vector<Tensor<T>> heads;
    for (int a = 0; a < config.num_heads; ++a) {
        const std::size_t begin = static_cast<std::size_t>(a) * dk;
        auto qa = slice_last(q, begin, dk);
        auto ka = slice_last(k, begin, dk);
        auto va = slice_last(v, begin, dk);
        auto scores = scale(matmul(qa, transpose(ka)), inv_sqrt_dk);
        auto probs = softmax_rows(scores, kmask);
        if (!probs_only) {
            heads.push_back(matmul(maybe_dropout(probs, config.dropout, dropout_rng), va));
        }
        r.query.push_back(std::move(qa));
        r.key.push_back(std::move(ka));
        r.value.push_back(std::move(va));
        r.probs.push_back(std::move(probs));
    }
    if (!probs_only) {
        r.attention = concat_last<T>(heads);
        r.output = add_bias(matmul(r.attention, layer.w_out), layer.b_out);
    }
    return r;
}

template <typename T>
EncoderOutput<T> forward(std::span<const int> tokens, const EncoderParams<T>& params, const ModelConfig& config,
                         const ForwardOptions& options, TokenMask mask) {
    const std::size_t n = tokens.size();
    if (n == 0) {
        throw ShapeError("forward: empty token sequence");
    }
    if (n > static_cast<std::size_t>(config.max_seq_len)) {
        throw ShapeError("sequence of length " + std::to_string(n) + " exceeds max_seq_len " +
                         std::to_string(config.max_seq_len));
    }
    for (auto id : tokens) {
        if (id < 0 || id >= config.vocab_size) {
            throw VocabError("token id " + std::to_string(id) + " outside vocabulary of size " +
                             std::to_string(config.vocab_size));
        }
    }
    check_token_mask(mask, n);
    if (options.truncate_at_layer > config.num_layers) {
        throw ConfigError("truncate_at_layer " + std::to_string(options.truncate_at_layer) + " exceeds num_layers " +
                          std::to_string(config.num_layers));
    }

    std::optional<Rng> rng;
    if (options.train && config.dropout > 0.0) {
        rng.emplace(options.dropout_seed);
    }
    Rng* drop = rng ? &*rng : nullptr;

    std::vector<int> positions(n);
    for (std::size_t i = 0; i < n; ++i) {
        positions[i] = static_cast<int>(i);
    }
    auto h = add(embedding(params.token_embedding, tokens), embedding(params.position_embedding, positions));
    h = maybe_dropout(layer_norm(h, params.ln_embed_gamma, params.ln_embed_beta, T(kLayerNormEps)), config.dropout,
                      drop);

    EncoderOutput<T> out;
    const bool capture = options.capture || options.truncate_at_layer > 0;
    if (capture) {
        out.state.emplace();
        out.state->pass_id = next_pass_id();
    }
    const int last = options.truncate_at_layer > 0 ? options.truncate_at_layer : config.num_layers;
    for (int l = 1; l <= last; ++l) {
        const auto& L = params.layers[static_cast<std::size_t>(l - 1)];
        const bool truncated = options.truncate_at_layer == l;
        auto att = self_attention_layer(h, L, config, mask, drop, truncated);
        LayerCapture<T> cap;
        if (capture) {
            cap.input = h;
            cap.query = std::move(att.query);
            cap.key = std::move(att.key);
            cap.value = std::move(att.value);
            cap.probs = std::move(att.probs);
        }
        if (!truncated) {
            auto x = layer_norm(add(h, maybe_dropout(att.output, config.dropout, drop)), L.ln_attn_gamma,
                                L.ln_attn_beta, T(kLayerNormEps));
            auto ff = add_bias(matmul(gelu(add_bias(matmul(x, L.w_ffn_in), L.b_ffn_in)), L.w_ffn_out), L.b_ffn_out);
            h = layer_norm(add(x, maybe_dropout(ff, config.dropout, drop)), L.ln_ffn_gamma, L.ln_ffn_beta,
                           T(kLayerNormEps));
            if (capture) {
                cap.attention = att.attention;
                cap.output = h;
            }
        }
        if (capture) {
            out.state->layers.push_back(std::move(cap));
        }
    }
    out.hidden = h;
    return out;
}

template <typename T>
Tensor<T> mlm_loss(std::span<const int> tokens, std::span<const int> masked_positions, std::span<const int> labels,
                   const EncoderParams<T>& params, const ModelConfig& config, const ForwardOptions& options,
                   TokenMask mask) {
    if (masked_positions.empty()) {
        throw EmptyBatchError("mlm_loss: no masked positions");
    }
    if (labels.size() != masked_positions.size()) {
        throw ShapeError("mlm_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(masked_positions.size()) + " masked positions");
    }
    for (auto pos : masked_positions) {
        if (pos < 0 || static_cast<std::size_t>(pos) >= tokens.size() ||
            (!mask.empty() && !mask[static_cast<std::size_t>(pos)])) {
            throw ShapeError("mlm_loss: masked position " + std::to_string(pos) + " is not a valid token position");
        }
    }
    ForwardOptions fo = options;
    fo.truncate_at_layer = 0;
    const auto enc = forward(tokens, params, config, fo, mask);
    auto picked = embedding(enc.hidden, masked_positions);
    auto t = gelu(add_bias(matmul(picked, params.mlm_dense_w), params.mlm_dense_b));
    t = layer_norm(t, params.mlm_ln_gamma, params.mlm_ln_beta, T(kLayerNormEps));
    auto logits = add_bias(matmul(t, params.mlm_out_w), params.mlm_out_b);
    return cross_entropy(logits, labels);
}

#define RELKD_INSTANTIATE_ENCODER(T)                                                                               \
    template struct EncoderParams<T>;                                                                              \
    template struct AttentionState<T>;                                                                             \
    template EncoderParams<T> init_params<T>(const ModelConfig&, std::uint64_t);                                  \
    template EncoderParams<T> clone_params<T>(const EncoderParams<T>&, bool);                                     \
    template AttentionResult<T> self_attention_layer<T>(const Tensor<T>&, const LayerParams<T>&,                  \
                                                        const ModelConfig&, TokenMask, Rng*, bool);               \
    template EncoderOutput<T> forward<T>(std::span<const int>, const EncoderParams<T>&, const ModelConfig&,      \
                                         const ForwardOptions&, TokenMask);                                      \
    template Tensor<T> mlm_loss<T>(std::span<const int>, std::span<const int>, std::span<const int>,             \
                                   const EncoderParams<T>&, const ModelConfig&, const ForwardOptions&, TokenMask);

RELKD_INSTANTIATE_ENCODER(float)
RELKD_INSTANTIATE_ENCODER(double)

#undef RELKD_INSTANTIATE_ENCODER

} // namespace relkd
