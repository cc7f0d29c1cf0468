#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace relkd {

// Generated language over symbols s0..s{n-1}: "x1 .. xk | y1 .. yk" where the
// second half is
//   copy     (label 0): y = x
//   mirror   (label 1): y = x reversed
//   random   (label 2): y drawn afresh, y != x
// Copy and mirror keep the multiset of symbols. A random second half keeps
// the expected count of every symbol, so the label is invisible to the mean
// of any per-token feature and has to come from matching tokens.
struct SyntheticOptions {
    int num_symbols = 12;
    int min_len = 6;
    int max_len = 6;
    double mirror_fraction = 0.0;
    double random_fraction = 0.0;
    std::uint64_t seed = 0;
};

enum : int { kCopyLabel = 0, kMirrorLabel = 1, kRandomLabel = 2 };

struct SyntheticDoc {
    std::string text;
    int label = kCopyLabel;
};

std::string symbol_name(int i);
inline constexpr const char* kSeparator = "|";

std::vector<SyntheticDoc> synthetic_corpus(std::size_t count, const SyntheticOptions& options);
std::vector<std::string> doc_texts(const std::vector<SyntheticDoc>& docs);
std::vector<int> doc_labels(const std::vector<SyntheticDoc>& docs);

} // namespace relkd
