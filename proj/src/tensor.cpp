#include "relkd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

namespace relkd {

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            s += ",";
        }
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

namespace detail {

std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

} // namespace detail

namespace {

template <typename T>
std::vector<detail::TensorImpl<T>*> collect_recorded(detail::TensorImpl<T>* root) {
    std::vector<detail::TensorImpl<T>*> recorded;
    std::unordered_set<detail::TensorImpl<T>*> seen;
    std::vector<detail::TensorImpl<T>*> stack{root};
    seen.insert(root);
    while (!stack.empty()) {
        auto* t = stack.back();
        stack.pop_back();
        if (!t->node) {
            continue;
        }
        recorded.push_back(t);
        for (const auto& in : t->node->inputs) {
            if (in->requires_grad && seen.insert(in.get()).second) {
                stack.push_back(in.get());
            }
        }
    }
    std::sort(recorded.begin(), recorded.end(),
              [](const auto* a, const auto* b) { return a->node->id > b->node->id; });
    return recorded;
}

} // namespace

template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.rank() != 0) {
        throw ShapeError("backward() needs a 0-dimensional loss, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    auto* root = &loss.impl();
    if (!root->node) {
        if (root->requires_grad) {
            root->ensure_grad()[0] += T(1);
        }
        return;
    }
    const auto recorded = collect_recorded(root);
    for (auto* t : recorded) {
        t->grad.assign(t->data.size(), T(0));
    }
    root->grad[0] = T(1);
    for (auto* t : recorded) {
        t->node->backward(*t);
    }
}

template <typename T>
std::size_t graph_size(const Tensor<T>& root) {
    return collect_recorded(&root.impl()).size();
}

template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);
template std::size_t graph_size<float>(const Tensor<float>&);
template std::size_t graph_size<double>(const Tensor<double>&);

} // namespace relkd
