#include "relkd/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>

#include "relkd/error.hpp"

namespace relkd {

std::vector<std::string> split_whitespace(std::string_view line) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) {
            ++i;
        }
        const auto start = i;
        while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) {
            ++i;
        }
        if (i > start) {
            out.emplace_back(line.substr(start, i - start));
        }
    }
    return out;
}

const std::vector<std::string>& reserved_tokens() {
    static const std::vector<std::string> r{"[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"};
    return r;
}

Vocab::Vocab() : Vocab(reserved_tokens()) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    const auto& reserved = reserved_tokens();
    if (tokens_.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), tokens_.begin())) {
        throw VocabError("vocabulary must start with [PAD] [UNK] [MASK] [CLS] [SEP]");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i].empty() || split_whitespace(tokens_[i]).size() != 1) {
            throw VocabError("vocabulary entry " + std::to_string(i) + " is not a single token");
        }
        if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
            throw VocabError("duplicate vocabulary token '" + tokens_[i] + "'");
        }
    }
}

int Vocab::id(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size()) {
        throw VocabError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(std::string_view line) const {
    std::vector<int> ids;
    for (const auto& t : split_whitespace(line)) {
        ids.push_back(id(t));
    }
    return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
    std::string out;
    for (auto i : ids) {
        if (!out.empty()) {
            out += ' ';
        }
        out += token(i);
    }
    return out;
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IngestionError("cannot write vocabulary to " + path.string());
    }
    for (const auto& t : tokens_) {
        f << t << '\n';
    }
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IngestionError("cannot read vocabulary " + path.string());
    }
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        tokens.push_back(line);
    }
    return Vocab(std::move(tokens));
}

Vocab build_vocab(const std::vector<std::string>& corpus, int max_size) {
    if (max_size < kNumReserved) {
        throw ConfigError("vocabulary size " + std::to_string(max_size) + " is below the " +
                          std::to_string(kNumReserved) + " reserved tokens");
    }
    std::map<std::string, std::uint64_t> counts;
    bool any = false;
    for (const auto& line : corpus) {
        for (auto& t : split_whitespace(line)) {
            any = true;
            ++counts[std::move(t)];
        }
    }
    if (!any) {
        throw IngestionError("cannot build a vocabulary from an empty corpus");
    }
    const auto& reserved = reserved_tokens();
    std::vector<std::pair<std::string, std::uint64_t>> ranked;
    for (auto& [tok, n] : counts) {
        if (std::find(reserved.begin(), reserved.end(), tok) == reserved.end()) {
            ranked.emplace_back(tok, n);
        }
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens = reserved;
    for (const auto& [tok, n] : ranked) {
        if (static_cast<int>(tokens.size()) >= max_size) {
            break;
        }
        tokens.push_back(tok);
    }
    return Vocab(std::move(tokens));
}

std::vector<std::string> load_corpus(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IngestionError("cannot open corpus " + path.string());
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
        if (!split_whitespace(line).empty()) {
            if (line.back() == '\r') {
                line.pop_back();
            }
            lines.push_back(std::move(line));
        }
    }
    if (lines.empty()) {
        throw IngestionError("corpus " + path.string() + " contains no documents");
    }
    return lines;
}

std::vector<std::vector<int>> encode_corpus(const std::vector<std::string>& corpus, const Vocab& vocab) {
    std::vector<std::vector<int>> out;
    out.reserve(corpus.size());
    for (const auto& line : corpus) {
        out.push_back(vocab.encode(line));
    }
    return out;
}

std::vector<int> frame_document(std::span<const int> ids, std::size_t seq_len, bool* was_truncated) {
    if (seq_len < 2) {
        throw ConfigError("sequence length " + std::to_string(seq_len) + " leaves no room for [CLS] and [SEP]");
    }
    const auto keep = std::min(ids.size(), seq_len - 2);
    if (was_truncated) {
        *was_truncated = keep < ids.size();
    }
    std::vector<int> out;
    out.reserve(keep + 2);
    out.push_back(kClsId);
    out.insert(out.end(), ids.begin(), ids.begin() + static_cast<long>(keep));
    out.push_back(kSepId);
    return out;
}

std::size_t Batch::num_mlm_positions() const {
    std::size_t n = 0;
    for (const auto& p : mlm_positions) {
        n += p.size();
    }
    return n;
}

BatchStream::BatchStream(std::vector<std::vector<int>> documents, int vocab_size, BatchOptions options)
    : vocab_size_(vocab_size), options_(options), mask_rng_(derive_seed(options.seed, 0x6d6c6dULL)) {
    if (documents.empty()) {
        throw IngestionError("no documents to batch");
    }
    if (options_.batch_size == 0) {
        throw ConfigError("batch size must be positive");
    }
    if (options_.mlm_rate && (*options_.mlm_rate < 0.0 || *options_.mlm_rate > 1.0)) {
        throw ConfigError("mlm rate " + std::to_string(*options_.mlm_rate) + " outside [0, 1]");
    }
    if (options_.mlm_rate && *options_.mlm_rate > 0.0 && vocab_size_ <= kNumReserved) {
        throw ConfigError("random-token corruption needs at least one non-reserved token");
    }
    docs_.reserve(documents.size());
    for (const auto& d : documents) {
        bool cut = false;
        docs_.push_back(frame_document(d, options_.seq_len, &cut));
        truncated_ += cut ? 1 : 0;
    }
    order_.resize(docs_.size());
    reshuffle();
}

void BatchStream::reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(options_.seed, 0x7368756666ULL, epoch_));
    rng.shuffle(order_.begin(), order_.end());
    cursor_ = 0;
}

Batch BatchStream::next() {
    Batch b;
    b.batch_size = options_.batch_size;
    std::vector<const std::vector<int>*> rows;
    for (std::size_t i = 0; i < options_.batch_size; ++i) {
        if (cursor_ == order_.size()) {
            ++epoch_;
            reshuffle();
        }
        b.doc_index.push_back(order_[cursor_]);
        rows.push_back(&docs_[order_[cursor_++]]);
    }
    for (const auto* r : rows) {
        b.seq_len = std::max(b.seq_len, r->size());
    }
    b.token_ids.assign(b.batch_size * b.seq_len, kPadId);
    b.attention_mask.assign(b.batch_size * b.seq_len, 0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        b.lengths.push_back(rows[i]->size());
        std::copy(rows[i]->begin(), rows[i]->end(), b.token_ids.begin() + static_cast<long>(i * b.seq_len));
        std::fill_n(b.attention_mask.begin() + static_cast<long>(i * b.seq_len), rows[i]->size(), 1);
    }

    const double rate = options_.mlm_rate.value_or(0.0);
    if (rate > 0.0) {
        b.mlm_positions.resize(b.batch_size);
        b.mlm_labels.resize(b.batch_size);
        std::vector<std::pair<std::size_t, std::size_t>> eligible;
        for (std::size_t i = 0; i < b.batch_size; ++i) {
            for (std::size_t t = 0; t < b.lengths[i]; ++t) {
                const int tok = b.token_ids[i * b.seq_len + t];
                if (tok < kNumReserved && tok != kUnkId) {
                    continue;
                }
                eligible.emplace_back(i, t);
                if (mask_rng_.bernoulli(rate)) {
                    b.mlm_positions[i].push_back(static_cast<int>(t));
                }
            }
        }
        stats_.eligible += eligible.size();
        // A batch that drew nothing still needs a target.
        if (b.num_mlm_positions() == 0 && !eligible.empty()) {
            const auto [i, t] = eligible[mask_rng_.below(eligible.size())];
            b.mlm_positions[i].push_back(static_cast<int>(t));
        }
        for (std::size_t i = 0; i < b.batch_size; ++i) {
            for (int t : b.mlm_positions[i]) {
                int& tok = b.token_ids[i * b.seq_len + static_cast<std::size_t>(t)];
                b.mlm_labels[i].push_back(tok);
                ++stats_.selected;
                const double u = mask_rng_.uniform();
                if (u < options_.mask_fraction) {
                    tok = kMaskId;
                    ++stats_.masked;
                } else if (u < options_.mask_fraction + options_.random_fraction) {
                    tok = kNumReserved +
                          static_cast<int>(mask_rng_.below(static_cast<std::uint64_t>(vocab_size_ - kNumReserved)));
                    ++stats_.randomized;
                } else {
                    ++stats_.kept;
                }
            }
        }
    }
    ++served_;
    return b;
}

} // namespace relkd
