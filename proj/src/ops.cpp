#include "relkd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace relkd {

namespace {

template <typename T>
using Impl = detail::TensorImpl<T>;

template <typename T>
using BackwardFn = std::function<void(Impl<T>& out)>;

// Wraps a freshly computed value; records a node only when some input needs
// a gradient.
template <typename T>
Tensor<T> record(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs, const char* op,
                 BackwardFn<T> fn) {
    Tensor<T> out(std::move(shape), std::move(data), false);
    bool needs = false;
    for (const auto* in : inputs) {
        needs = needs || in->requires_grad();
    }
    if (!needs) {
        return out;
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->id = detail::next_node_id();
    node->op = op;
    for (const auto* in : inputs) {
        node->inputs.push_back(in->impl_ptr());
    }
    node->backward = std::move(fn);
    out.impl().requires_grad = true;
    out.impl().node = std::move(node);
    return out;
}

template <typename T>
Tensor<T> record_many(Shape shape, std::vector<T> data, std::span<const Tensor<T>> inputs, const char* op,
                      BackwardFn<T> fn) {
    Tensor<T> out(std::move(shape), std::move(data), false);
    const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const auto& t) { return t.requires_grad(); });
    if (!needs) {
        return out;
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->id = detail::next_node_id();
    node->op = op;
    for (const auto& in : inputs) {
        node->inputs.push_back(in.impl_ptr());
    }
    node->backward = std::move(fn);
    out.impl().requires_grad = true;
    out.impl().node = std::move(node);
    return out;
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
    if (!t.defined() || t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                         (t.defined() ? shape_str(t.shape()) : std::string("<undefined>")));
    }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

// c[m,n] += a[m,k] * b[k,n]; per output element the k-sum runs in ascending
// order, the same as the textbook triple loop.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            const T* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

template <typename T>
void transpose_into(const T* src, T* dst, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            dst[j * m + i] = src[i * n + j];
        }
    }
}

} // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<T> out(m * n, T(0));
    gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto* pa = &a.impl();
    auto* pb = &b.impl();
    return record<T>({m, n}, std::move(out), {&a, &b}, "matmul", [pa, pb, m, k, n](Impl<T>& o) {
        if (pa->requires_grad) {
            // grad_a += grad_out * b^T
            std::vector<T> bt(n * k);
            transpose_into(pb->data.data(), bt.data(), k, n);
            gemm_acc(o.grad.data(), bt.data(), pa->ensure_grad().data(), m, n, k);
        }
        if (pb->requires_grad) {
            // grad_b += a^T * grad_out
            std::vector<T> at(k * m);
            transpose_into(pa->data.data(), at.data(), m, k);
            gemm_acc(at.data(), o.grad.data(), pb->ensure_grad().data(), k, m, n);
        }
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    require_rank(a, 2, "transpose");
    const auto m = a.dim(0), n = a.dim(1);
    std::vector<T> out(m * n);
    transpose_into(a.data().data(), out.data(), m, n);
    auto* pa = &a.impl();
    return record<T>({n, m}, std::move(out), {&a}, "transpose", [pa, m, n](Impl<T>& o) {
        auto& g = pa->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                g[i * n + j] += o.grad[j * m + i];
            }
        }
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    const auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] + bd[i];
    }
    auto* pa = &a.impl();
    auto* pb = &b.impl();
    return record<T>(a.shape(), std::move(out), {&a, &b}, "add", [pa, pb](Impl<T>& o) {
        for (auto* p : {pa, pb}) {
            if (p->requires_grad) {
                auto& g = p->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += o.grad[i];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    const auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] - bd[i];
    }
    auto* pa = &a.impl();
    auto* pb = &b.impl();
    return record<T>(a.shape(), std::move(out), {&a, &b}, "sub", [pa, pb](Impl<T>& o) {
        if (pa->requires_grad) {
            auto& g = pa->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += o.grad[i];
            }
        }
        if (pb->requires_grad) {
            auto& g = pb->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] -= o.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    const auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] * bd[i];
    }
    auto* pa = &a.impl();
    auto* pb = &b.impl();
    return record<T>(a.shape(), std::move(out), {&a, &b}, "mul", [pa, pb](Impl<T>& o) {
        if (pa->requires_grad) {
            auto& g = pa->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += o.grad[i] * pb->data[i];
            }
        }
        if (pb->requires_grad) {
            auto& g = pb->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += o.grad[i] * pa->data[i];
            }
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) {
        v *= factor;
    }
    auto* pa = &a.impl();
    return record<T>(a.shape(), std::move(out), {&a}, "scale", [pa, factor](Impl<T>& o) {
        auto& g = pa->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += o.grad[i] * factor;
        }
    });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    require_rank(x, 2, "add_bias");
    require_rank(bias, 1, "add_bias");
    const auto m = x.dim(0), n = x.dim(1);
    if (bias.dim(0) != n) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    const auto bd = bias.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] += bd[j];
        }
    }
    auto* px = &x.impl();
    auto* pb = &bias.impl();
    return record<T>(x.shape(), std::move(out), {&x, &bias}, "add_bias", [px, pb, m, n](Impl<T>& o) {
        if (px->requires_grad) {
            auto& g = px->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += o.grad[i];
            }
        }
        if (pb->requires_grad) {
            auto& g = pb->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    g[j] += o.grad[i * n + j];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = 0;
    for (auto v : a.data()) {
        total += v;
    }
    auto* pa = &a.impl();
    return record<T>({}, {total}, {&a}, "sum", [pa](Impl<T>& o) {
        auto& g = pa->ensure_grad();
        for (auto& v : g) {
            v += o.grad[0];
        }
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<T> out(a.data().begin(), a.data().end());
    auto* pa = &a.impl();
    return record<T>(std::move(shape), std::move(out), {&a}, "reshape", [pa](Impl<T>& o) {
        auto& g = pa->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += o.grad[i];
        }
    });
}

template <typename T>
Tensor<T> concat_last(std::span<const Tensor<T>> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_last: no inputs");
    }
    Shape lead = parts[0].shape();
    if (lead.empty()) {
        throw ShapeError("concat_last: scalar input");
    }
    lead.pop_back();
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        Shape pl = p.shape();
        if (pl.empty()) {
            throw ShapeError("concat_last: scalar input");
        }
        widths.push_back(pl.back());
        pl.pop_back();
        if (pl != lead) {
            throw ShapeError("concat_last: leading dims differ, " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        total += widths.back();
    }
    const std::size_t rows = shape_numel(lead);
    std::vector<T> out(rows * total);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto src = parts[p].data();
        const auto w = widths[p];
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(src.begin() + r * w, w, out.begin() + r * total + offset);
        }
        offset += w;
    }
    Shape shape = lead;
    shape.push_back(total);
    std::vector<Impl<T>*> impls;
    for (const auto& p : parts) {
        impls.push_back(&p.impl());
    }
    return record_many<T>(std::move(shape), std::move(out), parts, "concat_last",
                          [impls, widths, rows, total](Impl<T>& o) {
                              std::size_t off = 0;
                              for (std::size_t p = 0; p < impls.size(); ++p) {
                                  const auto w = widths[p];
                                  if (impls[p]->requires_grad) {
                                      auto& g = impls[p]->ensure_grad();
                                      for (std::size_t r = 0; r < rows; ++r) {
                                          for (std::size_t j = 0; j < w; ++j) {
                                              g[r * w + j] += o.grad[r * total + off + j];
                                          }
                                      }
                                  }
                                  off += w;
                              }
                          });
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& a, std::size_t begin, std::size_t width) {
    if (a.rank() == 0) {
        throw ShapeError("slice_last: scalar input");
    }
    const auto n = a.cols();
    if (width == 0 || begin + width > n) {
        throw ShapeError("slice_last: range [" + std::to_string(begin) + ", " + std::to_string(begin + width) +
                         ") outside last dim of " + shape_str(a.shape()));
    }
    const auto rows = a.numel() / n;
    std::vector<T> out(rows * width);
    const auto src = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(src.begin() + r * n + begin, width, out.begin() + r * width);
    }
    Shape shape = a.shape();
    shape.back() = width;
    auto* pa = &a.impl();
    return record<T>(std::move(shape), std::move(out), {&a}, "slice_last", [pa, rows, n, begin, width](Impl<T>& o) {
        auto& g = pa->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < width; ++j) {
                g[r * n + begin + j] += o.grad[r * width + j];
            }
        }
    });
}

template <typename T>
std::vector<Tensor<T>> split_last(const Tensor<T>& a, std::span<const std::size_t> widths) {
    const std::size_t total = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
    if (a.rank() == 0 || total != a.cols()) {
        throw ShapeError("split_last: widths sum to " + std::to_string(total) + " but tensor is " +
                         shape_str(a.shape()));
    }
    std::vector<Tensor<T>> parts;
    std::size_t begin = 0;
    for (auto w : widths) {
        parts.push_back(slice_last(a, begin, w));
        begin += w;
    }
    return parts;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    require_rank(x, 2, "layer_norm");
    require_rank(gamma, 1, "layer_norm");
    require_rank(beta, 1, "layer_norm");
    const auto m = x.dim(0), n = x.dim(1);
    if (gamma.dim(0) != n || beta.dim(0) != n) {
        throw ShapeError("layer_norm: gain/offset " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match " + shape_str(x.shape()));
    }
    std::vector<T> out(m * n);
    std::vector<T> xhat(m * n);
    std::vector<T> rstd(m);
    const auto xd = x.data(), gd = gamma.data(), bd = beta.data();
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = xd.data() + i * n;
        T mean = 0;
        for (std::size_t j = 0; j < n; ++j) {
            mean += row[j];
        }
        mean /= static_cast<T>(n);
        T var = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const T d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(n);
        rstd[i] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (row[j] - mean) * rstd[i];
            out[i * n + j] = xhat[i * n + j] * gd[j] + bd[j];
        }
    }
    auto* px = &x.impl();
    auto* pg = &gamma.impl();
    auto* pb = &beta.impl();
    return record<T>(x.shape(), std::move(out), {&x, &gamma, &beta}, "layer_norm",
                     [px, pg, pb, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Impl<T>& o) {
                         if (pg->requires_grad) {
                             auto& g = pg->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t j = 0; j < n; ++j) {
                                     g[j] += o.grad[i * n + j] * xhat[i * n + j];
                                 }
                             }
                         }
                         if (pb->requires_grad) {
                             auto& g = pb->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t j = 0; j < n; ++j) {
                                     g[j] += o.grad[i * n + j];
                                 }
                             }
                         }
                         if (px->requires_grad) {
                             auto& g = px->ensure_grad();
                             const auto& gam = pg->data;
                             std::vector<T> dxhat(n);
                             for (std::size_t i = 0; i < m; ++i) {
                                 T mean_d = 0, mean_dx = 0;
                                 for (std::size_t j = 0; j < n; ++j) {
                                     dxhat[j] = o.grad[i * n + j] * gam[j];
                                     mean_d += dxhat[j];
                                     mean_dx += dxhat[j] * xhat[i * n + j];
                                 }
                                 mean_d /= static_cast<T>(n);
                                 mean_dx /= static_cast<T>(n);
                                 for (std::size_t j = 0; j < n; ++j) {
                                     g[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                                 }
                             }
                         }
                     });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const auto xd = x.data();
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = T(0.5) * xd[i] * (T(1) + std::erf(xd[i] * inv_sqrt2));
    }
    auto* px = &x.impl();
    return record<T>(x.shape(), std::move(out), {&x}, "gelu", [px](Impl<T>& o) {
        constexpr T inv_sqrt2 = T(0.70710678118654752440);
        constexpr T inv_sqrt2pi = T(0.39894228040143267794);
        auto& g = px->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = px->data[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            g[i] += o.grad[i] * (cdf + v * pdf);
        }
    });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
    require_rank(table, 2, "embedding");
    const auto rows = table.dim(0), d = table.dim(1);
    if (ids.empty()) {
        throw ShapeError("embedding: empty index list");
    }
    std::vector<T> out(ids.size() * d);
    const auto td = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
            throw VocabError("index " + std::to_string(ids[i]) + " outside table of " + std::to_string(rows) +
                             " rows");
        }
        std::copy_n(td.begin() + static_cast<std::size_t>(ids[i]) * d, d, out.begin() + i * d);
    }
    auto* pt = &table.impl();
    std::vector<int> idx(ids.begin(), ids.end());
    return record<T>({ids.size(), d}, std::move(out), {&table}, "embedding", [pt, d, idx = std::move(idx)](Impl<T>& o) {
        auto& g = pt->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            T* dst = g.data() + static_cast<std::size_t>(idx[i]) * d;
            for (std::size_t j = 0; j < d; ++j) {
                dst[j] += o.grad[i * d + j];
            }
        }
    });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    require_rank(logits, 2, "cross_entropy");
    const auto m = logits.dim(0), v = logits.dim(1);
    if (labels.size() != m) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
    }
    std::vector<T> probs(m * v);
    T total = 0;
    const auto ld = logits.data();
    for (std::size_t i = 0; i < m; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= v) {
            throw VocabError("cross_entropy: label " + std::to_string(labels[i]) + " outside vocabulary of " +
                             std::to_string(v));
        }
        const T* row = ld.data() + i * v;
        const T mx = *std::max_element(row, row + v);
        T z = 0;
        for (std::size_t j = 0; j < v; ++j) {
            probs[i * v + j] = std::exp(row[j] - mx);
            z += probs[i * v + j];
        }
        for (std::size_t j = 0; j < v; ++j) {
            probs[i * v + j] /= z;
        }
        total += std::log(z) + mx - row[labels[i]];
    }
    total /= static_cast<T>(m);
    auto* pl = &logits.impl();
    std::vector<int> lab(labels.begin(), labels.end());
    return record<T>({}, {total}, {&logits}, "cross_entropy",
                     [pl, m, v, probs = std::move(probs), lab = std::move(lab)](Impl<T>& o) {
                         auto& g = pl->ensure_grad();
                         const T s = o.grad[0] / static_cast<T>(m);
                         for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t j = 0; j < v; ++j) {
                                 g[i * v + j] += s * probs[i * v + j];
                             }
                             g[i * v + static_cast<std::size_t>(lab[i])] -= s;
                         }
                     });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, Mask mask) {
    if (x.rank() == 0) {
        throw ShapeError("softmax_rows: scalar input");
    }
    if (!mask.empty() && mask.size() != x.numel()) {
        throw ShapeError("softmax_rows: mask has " + std::to_string(mask.size()) + " entries for " +
                         shape_str(x.shape()));
    }
    const auto n = x.cols();
    const auto rows = x.numel() / n;
    std::vector<T> out(x.numel(), T(0));
    const auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xd.data() + r * n;
        const std::uint8_t* mrow = mask.empty() ? nullptr : mask.data() + r * n;
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (!mrow || mrow[j]) {
                mx = std::max(mx, row[j]);
                any = true;
            }
        }
        if (!any) {
            throw DegenerateRowError("softmax_rows: row " + std::to_string(r) + " is fully masked");
        }
        T z = 0;
        T* orow = out.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) {
            if (!mrow || mrow[j]) {
                orow[j] = std::exp(row[j] - mx);
                z += orow[j];
            }
        }
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] /= z;
        }
    }
    auto* px = &x.impl();
    // Masked outputs are exact zeros, so the generic y * (g - <y, g>) rule
    // already gives them zero gradient.
    return record<T>(x.shape(), std::move(out), {&x}, "softmax_rows", [px, n, rows](Impl<T>& o) {
        auto& g = px->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = o.data.data() + r * n;
            const T* gy = o.grad.data() + r * n;
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) {
                dot += y[j] * gy[j];
            }
            for (std::size_t j = 0; j < n; ++j) {
                g[r * n + j] += y[j] * (gy[j] - dot);
            }
        }
    });
}

template <typename T>
Tensor<T> kl_div_rows(const Tensor<T>& p, const Tensor<T>& q, Mask row_mask) {
    require_same_shape(p, q, "kl_div_rows");
    if (p.rank() == 0) {
        throw ShapeError("kl_div_rows: scalar input");
    }
    const auto n = p.cols();
    const auto rows = p.numel() / n;
    if (!row_mask.empty() && row_mask.size() != rows) {
        throw ShapeError("kl_div_rows: row mask has " + std::to_string(row_mask.size()) + " entries for " +
                         std::to_string(rows) + " rows");
    }
    std::size_t valid = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        valid += (row_mask.empty() || row_mask[r]) ? 1 : 0;
    }
    if (valid == 0) {
        throw DegenerateRowError("kl_div_rows: every row is masked");
    }
    const T floor = static_cast<T>(kKlFloor);
    const auto pd = p.data(), qd = q.data();
    T total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!row_mask.empty() && !row_mask[r]) {
            continue;
        }
        T row_kl = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const T pt = pd[r * n + j];
            if (pt > T(0)) {
                row_kl += pt * (std::log(pt) - std::log(std::max(qd[r * n + j], floor)));
            }
        }
        // Rounding can leave a near-identical row a few ulps below zero.
        total += std::max(row_kl, T(0));
    }
    total /= static_cast<T>(valid);
    auto pp = p.impl_ptr(); // constant side, kept alive but never differentiated
    auto* pq = &q.impl();
    std::vector<std::uint8_t> rm(row_mask.begin(), row_mask.end());
    return record<T>({}, {total}, {&q}, "kl_div_rows", [pp, pq, n, rows, valid, floor, rm = std::move(rm)](Impl<T>& o) {
        auto& g = pq->ensure_grad();
        const T s = o.grad[0] / static_cast<T>(valid);
        for (std::size_t r = 0; r < rows; ++r) {
            if (!rm.empty() && !rm[r]) {
                continue;
            }
            for (std::size_t j = 0; j < n; ++j) {
                const T pt = pp->data[r * n + j];
                const T qt = pq->data[r * n + j];
                if (pt > T(0) && qt >= floor) {
                    g[r * n + j] -= s * pt / qt;
                }
            }
        }
    });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (rate == 0.0) {
        return x;
    }
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> m(x.numel());
    for (auto& v : m) {
        v = rng.bernoulli(rate) ? T(0) : keep_scale;
    }
    return mul(x, Tensor<T>(x.shape(), std::move(m), false));
}

#define RELKD_INSTANTIATE_OPS(T)                                                                    \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> transpose(const Tensor<T>&);                                                 \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> scale(const Tensor<T>&, T);                                                  \
    template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> sum(const Tensor<T>&);                                                       \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                            \
    template Tensor<T> concat_last(std::span<const Tensor<T>>);                                     \
    template Tensor<T> slice_last(const Tensor<T>&, std::size_t, std::size_t);                      \
    template std::vector<Tensor<T>> split_last(const Tensor<T>&, std::span<const std::size_t>);     \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);         \
    template Tensor<T> gelu(const Tensor<T>&);                                                      \
    template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                           \
    template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                       \
    template Tensor<T> softmax_rows(const Tensor<T>&, Mask);                                        \
    template Tensor<T> kl_div_rows(const Tensor<T>&, const Tensor<T>&, Mask);                       \
    template Tensor<T> dropout(const Tensor<T>&, double, Rng&);

RELKD_INSTANTIATE_OPS(float)
RELKD_INSTANTIATE_OPS(double)

#undef RELKD_INSTANTIATE_OPS

} // namespace relkd
