#pragma once

#include <array>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "relkd/encoder.hpp"

namespace relkd {

// Which projection a relation reads from.
enum class Role : int { query = 0, key = 1, value = 2 };

char role_letter(Role r);

// alpha[i][j] selects the (i, j) relation, i/j indexing query, key, value.
using AlphaMatrix = std::array<std::array<bool, 3>, 3>;

// Q-Q, K-K and V-V.
AlphaMatrix default_alpha();

// "qq,kk,vv", "all", or any comma-separated subset of the nine two-letter
// names. Throws ConfigError listing the valid names on a bad entry.
AlphaMatrix parse_relations(std::string_view spec);

// Selected pair names in row-major order, e.g. {"qq", "kk", "vv"}.
std::vector<std::string> relation_names(const AlphaMatrix& alpha);

struct DistillConfig {
    int relation_heads = 8;
    int teacher_layer = 0; // 1-based; 0 = teacher's last layer
    int student_layer = 0; // 1-based; 0 = student's last layer
    AlphaMatrix alpha = default_alpha();

    int resolved_teacher_layer(const ModelConfig& teacher) const;
    int resolved_student_layer(const ModelConfig& student) const;

    // Divisibility of both hidden sizes by relation_heads, layer ranges, and
    // at least one selected relation. Throws ConfigError.
    void validate(const ModelConfig& teacher, const ModelConfig& student) const;
};

// Queries, keys or values of one layer regrouped into relation heads, each
// [|x|, d_r].
template <typename T>
struct RelationInputs {
    std::vector<Tensor<T>> heads;

    std::size_t head_size() const { return heads.at(0).cols(); }
    // [A_r, |x|, d_r] constant copy.
    Tensor<T> stacked() const;
};

// Per-head relation matrices R_a, each [|x|, |x|] and row-stochastic.
template <typename T>
struct RelationSet {
    Role first = Role::query;
    Role second = Role::key;
    std::vector<Tensor<T>> heads;

    std::string name() const { return {role_letter(first), role_letter(second)}; }
    // [A_r, |x|, |x|] constant copy.
    Tensor<T> stacked() const;
};

// Concatenates the per-head vectors at every position into one d_h vector and
// splits it contiguously into `relation_heads` chunks. Values are moved, never
// altered.
template <typename T>
RelationInputs<T> regroup_heads(std::span<const Tensor<T>> per_head, int relation_heads);

// Regrouped Q, K or V of a captured layer.
template <typename T>
RelationInputs<T> relation_inputs(const LayerCapture<T>& layer, Role role, int relation_heads);

// R_a = softmax(A_i,a A_j,a^T / sqrt(d)), d the relation-head size of the
// inputs. Padded key positions are masked out.
template <typename T>
RelationSet<T> relation(const RelationInputs<T>& a_i, const RelationInputs<T>& a_j, TokenMask mask = {},
                        Role first = Role::query, Role second = Role::key);

// (1 / (A_r |x|_valid)) sum_a sum_t KL(R^T_{a,t} || R^S_{a,t}) over valid
// rows t. Teacher side is a constant.
template <typename T>
Tensor<T> relation_pair_loss(const RelationSet<T>& teacher, const RelationSet<T>& student, TokenMask mask = {});

template <typename T>
struct DistillLoss {
    Tensor<T> total;
    // Selected pairs in row-major (i, j) order with their values.
    std::vector<std::pair<std::string, double>> pairs;
};

// Sum over selected (i, j) of the pair losses between teacher layer l and
// student layer m. Teacher tensors are detached if they carry a graph.
template <typename T>
DistillLoss<T> distill_loss(const AttentionState<T>& teacher, const AttentionState<T>& student,
                            const DistillConfig& cfg, TokenMask mask = {});

} // namespace relkd
