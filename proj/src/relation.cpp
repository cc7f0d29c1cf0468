#include "relkd/relation.hpp"

#include <cmath>

namespace relkd {

namespace {

constexpr std::array<Role, 3> kRoles{Role::query, Role::key, Role::value};

std::string valid_relation_names() {
    std::string s;
    for (auto a : kRoles) {
        for (auto b : kRoles) {
            if (!s.empty()) {
                s += ", ";
            }
            s += role_letter(a);
            s += role_letter(b);
        }
    }
    return s;
}

int role_index(char c) {
    switch (c) {
    case 'q':
        return 0;
    case 'k':
        return 1;
    case 'v':
        return 2;
    default:
        return -1;
    }
}

template <typename T>
Tensor<T> stack_heads(const std::vector<Tensor<T>>& heads) {
    if (heads.empty()) {
        throw ShapeError("stack of zero heads");
    }
    Shape shape{heads.size()};
    for (auto d : heads[0].shape()) {
        shape.push_back(d);
    }
    std::vector<T> data;
    data.reserve(shape_numel(shape));
    for (const auto& h : heads) {
        data.insert(data.end(), h.data().begin(), h.data().end());
    }
    return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
int resolve_layer(int requested, const AttentionState<T>& state) {
    return requested == 0 ? static_cast<int>(state.layers.size()) : requested;
}

} // namespace

char role_letter(Role r) {
    switch (r) {
    case Role::query:
        return 'q';
    case Role::key:
        return 'k';
    case Role::value:
        return 'v';
    }
    return '?';
}

AlphaMatrix default_alpha() {
    AlphaMatrix a{};
    for (int i = 0; i < 3; ++i) {
        a[i][i] = true;
    }
    return a;
}

AlphaMatrix parse_relations(std::string_view spec) {
    AlphaMatrix a{};
    if (spec == "all") {
        for (auto& row : a) {
            row.fill(true);
        }
        return a;
    }
    std::size_t start = 0;
    bool any = false;
    while (start <= spec.size()) {
        const auto comma = spec.find(',', start);
        const auto item = spec.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
        const int i = item.size() == 2 ? role_index(item[0]) : -1;
        const int j = item.size() == 2 ? role_index(item[1]) : -1;
        if (i < 0 || j < 0) {
            throw ConfigError("unknown relation '" + std::string(item) + "'; valid names are " +
                              valid_relation_names() + " or 'all'");
        }
        a[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = true;
        any = true;
        if (comma == std::string_view::npos) {
            break;
        }
        start = comma + 1;
    }
    if (!any) {
        throw ConfigError("empty relation list");
    }
    return a;
}

std::vector<std::string> relation_names(const AlphaMatrix& alpha) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            if (alpha[i][j]) {
                names.push_back({role_letter(kRoles[i]), role_letter(kRoles[j])});
            }
        }
    }
    return names;
}

int DistillConfig::resolved_teacher_layer(const ModelConfig& teacher) const {
    return teacher_layer == 0 ? teacher.num_layers : teacher_layer;
}

int DistillConfig::resolved_student_layer(const ModelConfig& student) const {
    return student_layer == 0 ? student.num_layers : student_layer;
}

void DistillConfig::validate(const ModelConfig& teacher, const ModelConfig& student) const {
    if (relation_heads <= 0) {
        throw ConfigError("distill.relation_heads must be positive, got " + std::to_string(relation_heads));
    }
    for (const auto& [who, cfg] : {std::pair{"teacher", &teacher}, std::pair{"student", &student}}) {
        if (cfg->hidden_size % relation_heads != 0) {
            throw ConfigError(std::string(who) + " hidden size d_h=" + std::to_string(cfg->hidden_size) +
                              " is not divisible by distill.relation_heads A_r=" + std::to_string(relation_heads) +
                              " (remainder " + std::to_string(cfg->hidden_size % relation_heads) + ")");
        }
    }
    const int l = resolved_teacher_layer(teacher);
    if (l < 1 || l > teacher.num_layers) {
        throw ConfigError("distill.teacher_layer " + std::to_string(teacher_layer) + " outside [1, " +
                          std::to_string(teacher.num_layers) + "]");
    }
    const int m = resolved_student_layer(student);
    if (m < 1 || m > student.num_layers) {
        throw ConfigError("distill.student_layer " + std::to_string(student_layer) + " outside [1, " +
                          std::to_string(student.num_layers) + "]");
    }
    bool any = false;
    for (const auto& row : alpha) {
        for (bool b : row) {
            any = any || b;
        }
    }
    if (!any) {
        throw ConfigError("distill.relations selects no relation pair");
    }
}

template <typename T>
Tensor<T> RelationInputs<T>::stacked() const {
    return stack_heads(heads);
}

template <typename T>
Tensor<T> RelationSet<T>::stacked() const {
    return stack_heads(heads);
}

template <typename T>
RelationInputs<T> regroup_heads(std::span<const Tensor<T>> per_head, int relation_heads) {
    if (per_head.empty()) {
        throw ConfigError("regroup_heads: no attention heads");
    }
    if (relation_heads <= 0) {
        throw ConfigError("regroup_heads: relation head count must be positive, got " +
                          std::to_string(relation_heads));
    }
    std::size_t d_h = 0;
    for (const auto& h : per_head) {
        if (h.rank() != 2 || h.rows() != per_head[0].rows()) {
            throw ShapeError("regroup_heads: head shapes disagree, " + shape_str(per_head[0].shape()) + " vs " +
                             shape_str(h.shape()));
        }
        d_h += h.cols();
    }
    const auto a_r = static_cast<std::size_t>(relation_heads);
    if (d_h % a_r != 0) {
        throw ConfigError("regroup_heads: d_h=" + std::to_string(d_h) + " is not divisible by A_r=" +
                          std::to_string(a_r) + " (remainder " + std::to_string(d_h % a_r) + ")");
    }
    const auto d_r = d_h / a_r;
    const auto concat = per_head.size() == 1 ? per_head[0] : concat_last(per_head);
    RelationInputs<T> out;
    out.heads.reserve(a_r);
    for (std::size_t a = 0; a < a_r; ++a) {
        out.heads.push_back(a_r == 1 ? concat : slice_last(concat, a * d_r, d_r));
    }
    return out;
}

template <typename T>
RelationInputs<T> relation_inputs(const LayerCapture<T>& layer, Role role, int relation_heads) {
    const auto& src = role == Role::query ? layer.query : role == Role::key ? layer.key : layer.value;
    return regroup_heads<T>(src, relation_heads);
}

template <typename T>
RelationSet<T> relation(const RelationInputs<T>& a_i, const RelationInputs<T>& a_j, TokenMask mask, Role first,
                        Role second) {
    if (a_i.heads.size() != a_j.heads.size()) {
        throw ConfigError("relation: relation head counts differ (" + std::to_string(a_i.heads.size()) + " vs " +
                          std::to_string(a_j.heads.size()) + ")");
    }
    if (a_i.heads.empty()) {
        throw ConfigError("relation: no relation heads");
    }
    const auto n = a_i.heads[0].rows();
    if (a_i.heads[0].shape() != a_j.heads[0].shape()) {
        throw ShapeError("relation: head shapes differ, " + shape_str(a_i.heads[0].shape()) + " vs " +
                         shape_str(a_j.heads[0].shape()));
    }
    std::vector<std::uint8_t> kmask;
    if (!mask.empty()) {
        if (mask.size() != n) {
            throw ShapeError("relation: token mask has " + std::to_string(mask.size()) + " entries for " +
                             std::to_string(n) + " positions");
        }
        kmask.resize(n * n);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
                kmask[r * n + c] = mask[c];
            }
        }
    }
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(a_i.head_size()));
    RelationSet<T> out;
    out.first = first;
    out.second = second;
    out.heads.reserve(a_i.heads.size());
    for (std::size_t a = 0; a < a_i.heads.size(); ++a) {
        auto scores = scale(matmul(a_i.heads[a], transpose(a_j.heads[a])), inv_sqrt_d);
        out.heads.push_back(softmax_rows(scores, kmask));
    }
    return out;
}

template <typename T>
Tensor<T> relation_pair_loss(const RelationSet<T>& teacher, const RelationSet<T>& student, TokenMask mask) {
    if (teacher.heads.size() != student.heads.size()) {
        throw ConfigError("relation_pair_loss: teacher has " + std::to_string(teacher.heads.size()) +
                          " relation heads, student has " + std::to_string(student.heads.size()));
    }
    if (teacher.heads.empty()) {
        throw ConfigError("relation_pair_loss: no relation heads");
    }
    Tensor<T> total;
    for (std::size_t a = 0; a < teacher.heads.size(); ++a) {
        const auto& t = teacher.heads[a];
        if (t.shape() != student.heads[a].shape()) {
            throw ShapeError("relation_pair_loss: sequence lengths differ, " + shape_str(t.shape()) + " vs " +
                             shape_str(student.heads[a].shape()));
        }
        auto kl = kl_div_rows(t.requires_grad() ? t.detach() : t, student.heads[a], mask);
        total = a == 0 ? kl : add(total, kl);
    }
    return scale(total, T(1) / static_cast<T>(teacher.heads.size()));
}

template <typename T>
DistillLoss<T> distill_loss(const AttentionState<T>& teacher, const AttentionState<T>& student,
                            const DistillConfig& cfg, TokenMask mask) {
    const auto& tl = teacher.layer(resolve_layer(cfg.teacher_layer, teacher));
    const auto& sl = student.layer(resolve_layer(cfg.student_layer, student));

    std::array<RelationInputs<T>, 3> t_in, s_in;
    std::array<bool, 3> used{};
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            if (cfg.alpha[i][j]) {
                used[i] = used[j] = true;
            }
        }
    }
    for (std::size_t r = 0; r < 3; ++r) {
        if (!used[r]) {
            continue;
        }
        t_in[r] = relation_inputs(tl, kRoles[r], cfg.relation_heads);
        for (auto& h : t_in[r].heads) {
            if (h.requires_grad()) {
                h = h.detach();
            }
        }
        s_in[r] = relation_inputs(sl, kRoles[r], cfg.relation_heads);
    }

    DistillLoss<T> out;
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            if (!cfg.alpha[i][j]) {
                continue;
            }
            const auto rt = relation(t_in[i], t_in[j], mask, kRoles[i], kRoles[j]);
            const auto rs = relation(s_in[i], s_in[j], mask, kRoles[i], kRoles[j]);
            auto pair = relation_pair_loss(rt, rs, mask);
            out.pairs.emplace_back(rt.name(), static_cast<double>(pair.item()));
            out.total = out.total.defined() ? add(out.total, pair) : pair;
        }
    }
    if (!out.total.defined()) {
        throw ConfigError("distill_loss: no relation pair selected");
    }
    return out;
}

#define RELKD_INSTANTIATE_RELATION(T)                                                                          \
    template struct RelationInputs<T>;                                                                         \
    template struct RelationSet<T>;                                                                            \
    template RelationInputs<T> regroup_heads<T>(std::span<const Tensor<T>>, int);                              \
    template RelationInputs<T> relation_inputs<T>(const LayerCapture<T>&, Role, int);                          \
    template RelationSet<T> relation<T>(const RelationInputs<T>&, const RelationInputs<T>&, TokenMask, Role,   \
                                        Role);                                                                 \
    template Tensor<T> relation_pair_loss<T>(const RelationSet<T>&, const RelationSet<T>&, TokenMask);         \
    template DistillLoss<T> distill_loss<T>(const AttentionState<T>&, const AttentionState<T>&,                \
                                            const DistillConfig&, TokenMask);

RELKD_INSTANTIATE_RELATION(float)
RELKD_INSTANTIATE_RELATION(double)

#undef RELKD_INSTANTIATE_RELATION

} // namespace relkd
