#include "relkd/synthetic.hpp"

#include <algorithm>

#include "relkd/error.hpp"
#include "relkd/rng.hpp"

namespace relkd {

std::string symbol_name(int i) { return "s" + std::to_string(i); }

std::vector<SyntheticDoc> synthetic_corpus(std::size_t count, const SyntheticOptions& o) {
    if (o.num_symbols < 2 || o.min_len < 2 || o.max_len < o.min_len) {
        throw ConfigError("synthetic corpus needs num_symbols >= 2 and 2 <= min_len <= max_len");
    }
    if (o.mirror_fraction < 0.0 || o.random_fraction < 0.0 || o.mirror_fraction + o.random_fraction > 1.0) {
        throw ConfigError("mirror and random fractions must be non-negative and sum to at most 1");
    }
    Rng rng(derive_seed(o.seed, 0x73796e7468ULL));
    std::vector<SyntheticDoc> docs;
    docs.reserve(count);
    const auto span = static_cast<std::uint64_t>(o.max_len - o.min_len + 1);
    for (std::size_t n = 0; n < count; ++n) {
        const auto len = static_cast<std::size_t>(o.min_len + static_cast<int>(rng.below(span)));
        std::vector<int> xs(len);
        for (auto& x : xs) {
            x = static_cast<int>(rng.below(static_cast<std::uint64_t>(o.num_symbols)));
        }
        const double u = rng.uniform();
        SyntheticDoc d;
        d.label = u < o.mirror_fraction ? kMirrorLabel
                  : u < o.mirror_fraction + o.random_fraction ? kRandomLabel
                                                                : kCopyLabel;
        auto ys = xs;
        if (d.label == kMirrorLabel) {
            std::reverse(ys.begin(), ys.end());
        } else if (d.label == kRandomLabel) {
            while (ys == xs) {
                for (auto& y : ys) {
                    y = static_cast<int>(rng.below(static_cast<std::uint64_t>(o.num_symbols)));
                }
            }
        }
        for (int x : xs) {
            d.text += symbol_name(x) + " ";
        }
        d.text += kSeparator;
        for (int y : ys) {
            d.text += " " + symbol_name(y);
        }
        docs.push_back(std::move(d));
    }
    return docs;
}

std::vector<std::string> doc_texts(const std::vector<SyntheticDoc>& docs) {
    std::vector<std::string> out;
    for (const auto& d : docs) {
        out.push_back(d.text);
    }
    return out;
}

std::vector<int> doc_labels(const std::vector<SyntheticDoc>& docs) {
    std::vector<int> out;
    for (const auto& d : docs) {
        out.push_back(d.label);
    }
    return out;
}

} // namespace relkd
