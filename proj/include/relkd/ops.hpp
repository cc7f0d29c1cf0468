#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "relkd/rng.hpp"
#include "relkd/tensor.hpp"

namespace relkd {

// Per-element (softmax) or per-row (KL) admissibility flags; an empty span
// means "everything admissible".
using Mask = std::span<const std::uint8_t>;

// Floor applied to q inside log(p/q).
inline constexpr double kKlFloor = 1e-12;

// All operations check shapes eagerly and never broadcast. Rows of an
// [..., n] tensor are its numel/n contiguous length-n runs.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// x[m, n] + bias[n] added to every row.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <typename T>
Tensor<T> concat_last(std::span<const Tensor<T>> parts);

template <typename T>
Tensor<T> slice_last(const Tensor<T>& a, std::size_t begin, std::size_t width);

template <typename T>
std::vector<Tensor<T>> split_last(const Tensor<T>& a, std::span<const std::size_t> widths);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// Row gather: out[i] = table[ids[i]].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);

// Mean over rows of -log softmax(logits[i])[labels[i]].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// Row softmax with per-row max subtraction. Masked positions are exactly 0.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, Mask mask = {});

// Mean over admissible rows of sum_t p_t ln(p_t / max(q_t, floor)). p is a
// constant; gradient flows to q only.
template <typename T>
Tensor<T> kl_div_rows(const Tensor<T>& p, const Tensor<T>& q, Mask row_mask = {});

// Inverted dropout; identity when rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng);

} // namespace relkd
