#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "relkd/rng.hpp"

namespace relkd {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kMaskId = 2;
inline constexpr int kClsId = 3;
inline constexpr int kSepId = 4;
inline constexpr int kNumReserved = 5;

std::vector<std::string> split_whitespace(std::string_view line);

class Vocab {
public:
    // Reserved tokens only.
    Vocab();
    // `tokens` must start with the five reserved strings in id order.
    explicit Vocab(std::vector<std::string> tokens);

    int size() const { return static_cast<int>(tokens_.size()); }
    // Unknown strings map to [UNK].
    int id(std::string_view token) const;
    bool contains(std::string_view token) const;
    const std::string& token(int id) const;
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::vector<int> encode(std::string_view line) const;
    std::string decode(std::span<const int> ids) const;

    // One token per line; line number is the id.
    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

    bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

const std::vector<std::string>& reserved_tokens();

// Whitespace tokens by descending frequency, ties lexicographic, capped so the
// vocabulary (reserved included) has at most `max_size` entries.
Vocab build_vocab(const std::vector<std::string>& corpus, int max_size);

// One document per line; blank lines are skipped. Throws IngestionError for a
// missing file or a corpus with no documents.
std::vector<std::string> load_corpus(const std::filesystem::path& path);

struct Batch {
    std::size_t batch_size = 0;
    std::size_t seq_len = 0;            // columns, the longest row
    std::vector<int> token_ids;         // [B, seq_len] row-major, right padded with [PAD]
    std::vector<std::uint8_t> attention_mask; // [B, seq_len]
    std::vector<std::size_t> lengths;   // valid tokens per row
    std::vector<std::size_t> doc_index; // source document of each row
    // Per row: corrupted positions and the original tokens there. Empty when
    // masking is disabled.
    std::vector<std::vector<int>> mlm_positions;
    std::vector<std::vector<int>> mlm_labels;

    std::span<const int> row(std::size_t b) const { return {token_ids.data() + b * seq_len, lengths[b]}; }
    bool has_mlm() const { return !mlm_positions.empty(); }
    std::size_t num_mlm_positions() const;
};

struct CorruptionStats {
    std::uint64_t eligible = 0; // non-special tokens seen
    std::uint64_t selected = 0;
    std::uint64_t masked = 0;
    std::uint64_t randomized = 0;
    std::uint64_t kept = 0;
};

struct BatchOptions {
    std::size_t seq_len = 32;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    // Selection rate for BERT-style corruption; unset or 0 disables masking.
    std::optional<double> mlm_rate;
    double mask_fraction = 0.8;
    double random_fraction = 0.1;
};

// Frames each encoded document as [CLS] ... [SEP], truncated to seq_len.
// Batches walk a seeded permutation of the documents; a new permutation is
// drawn at every epoch boundary.
class BatchStream {
public:
    BatchStream(std::vector<std::vector<int>> documents, int vocab_size, BatchOptions options);

    Batch next();

    std::uint64_t epoch() const { return epoch_; }
    std::uint64_t batches_served() const { return served_; }
    // Documents longer than seq_len (counted once, at construction).
    std::uint64_t truncated() const { return truncated_; }
    const CorruptionStats& corruption() const { return stats_; }
    std::size_t num_documents() const { return docs_.size(); }
    std::string rng_state() const { return mask_rng_.state(); }

private:
    void reshuffle();

    std::vector<std::vector<int>> docs_;
    int vocab_size_;
    BatchOptions options_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::uint64_t epoch_ = 0;
    std::uint64_t served_ = 0;
    std::uint64_t truncated_ = 0;
    CorruptionStats stats_;
    Rng mask_rng_;
};

// Encodes every line with the vocabulary.
std::vector<std::vector<int>> encode_corpus(const std::vector<std::string>& corpus, const Vocab& vocab);

// [CLS] ids [SEP] truncated to at most seq_len tokens.
std::vector<int> frame_document(std::span<const int> ids, std::size_t seq_len, bool* was_truncated = nullptr);

} // namespace relkd
