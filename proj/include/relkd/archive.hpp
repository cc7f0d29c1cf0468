#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "relkd/encoder.hpp"

namespace relkd {

// Binary layout (all integers little-endian):
//   "MRD1"  u32 version
//   u32 metadata length, metadata bytes (UTF-8 "key=value\n" lines)
//   u32 tensor count, then per tensor:
//     u32 name length, name, u32 rank, u64 dims[rank], u8 dtype, values
//   u64 FNV-1a checksum of every preceding byte
inline constexpr std::string_view kArchiveMagic = "MRD1";
inline constexpr std::uint32_t kArchiveVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

std::size_t dtype_size(DType d);
std::string dtype_name(DType d);

struct TensorRecord {
    std::string name;
    Shape shape;
    DType dtype = DType::f64;
    std::vector<std::uint8_t> bytes; // little-endian values

    bool operator==(const TensorRecord&) const = default;
};

template <typename T>
TensorRecord to_record(std::string name, const Tensor<T>& t);

// Converts the stored dtype to T if needed.
template <typename T>
Tensor<T> from_record(const TensorRecord& r, bool requires_grad = false);

struct TensorArchive {
    std::vector<std::pair<std::string, std::string>> metadata;
    std::vector<TensorRecord> tensors;

    std::optional<std::string> get(std::string_view key) const;
    void set(std::string key, std::string value);
    const TensorRecord* find(std::string_view name) const;

    bool operator==(const TensorArchive&) const = default;
};

std::uint64_t fnv1a64(std::string_view bytes);

std::string serialize_archive(const TensorArchive& archive);

// Throws IntegrityError on truncation or checksum mismatch, FormatError on a
// foreign magic or an unsupported version.
TensorArchive parse_archive(std::string_view bytes);

// Written to a sibling temporary file, then renamed into place.
void save_archive(const TensorArchive& archive, const std::filesystem::path& path);
TensorArchive load_archive(const std::filesystem::path& path);

// Exact round-trip text for doubles (shortest representation).
std::string format_double(double v);

void write_model_config(TensorArchive& archive, const ModelConfig& config, const std::string& prefix = "model.");
// Throws FormatError for a missing or malformed field.
ModelConfig read_model_config(const TensorArchive& archive, const std::string& prefix = "model.");

struct Checkpoint {
    ModelConfig config;
    std::uint64_t step = 0;
    std::string rng_state;
    std::string kind = "model"; // teacher, student, ...
    TensorArchive archive;      // parameters under their checkpoint names, plus extra tensors
};

template <typename T>
TensorArchive make_checkpoint(const EncoderParams<T>& params, const ModelConfig& config, std::uint64_t step,
                              const std::string& rng_state, const std::string& kind);

Checkpoint read_checkpoint(TensorArchive archive);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Rebuilds parameters from a checkpoint. With `expected`, a config mismatch
// throws LoadError listing the differing fields. Missing or mis-shaped
// tensors also throw LoadError.
template <typename T>
EncoderParams<T> params_from_checkpoint(const Checkpoint& ckpt, const std::optional<ModelConfig>& expected = {},
                                        bool requires_grad = true);

} // namespace relkd
