#include "relkd/archive.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "relkd/error.hpp"

namespace relkd {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

class Writer {
public:
    void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out_.append(s);
    }
    void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    std::string& bytes() { return out_; }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(std::string_view in) : in_(in) {}

    void need(std::size_t n, const char* what) const {
        if (in_.size() - pos_ < n) {
            throw IntegrityError(std::string("archive truncated while reading ") + what + " at byte " +
                                 std::to_string(pos_));
        }
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(in_[pos_++]);
    }
    std::uint32_t u32(const char* what) {
        std::uint32_t v;
        copy(&v, 4, what);
        return v;
    }
    std::uint64_t u64(const char* what) {
        std::uint64_t v;
        copy(&v, 8, what);
        return v;
    }
    std::string_view take(std::size_t n, const char* what) {
        need(n, what);
        auto s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }

private:
    void copy(void* dst, std::size_t n, const char* what) {
        need(n, what);
        std::memcpy(dst, in_.data() + pos_, n);
        pos_ += n;
    }

    std::string_view in_;
    std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw LoadError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

long long parse_int(const std::string& key, const std::string& value) {
    long long v = 0;
    const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size()) {
        throw FormatError("metadata field " + key + " is not an integer: '" + value + "'");
    }
    return v;
}

double parse_double(const std::string& key, const std::string& value) {
    double v = 0;
    const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size()) {
        throw FormatError("metadata field " + key + " is not a number: '" + value + "'");
    }
    return v;
}

} // namespace

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

std::string dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

template <typename T>
TensorRecord to_record(std::string name, const Tensor<T>& t) {
    TensorRecord r;
    r.name = std::move(name);
    r.shape = t.shape();
    r.dtype = std::is_same_v<T, float> ? DType::f32 : DType::f64;
    const auto data = t.data();
    r.bytes.resize(data.size() * sizeof(T));
    std::memcpy(r.bytes.data(), data.data(), r.bytes.size());
    return r;
}

template <typename T>
Tensor<T> from_record(const TensorRecord& r, bool requires_grad) {
    const auto n = shape_numel(r.shape);
    if (r.bytes.size() != n * dtype_size(r.dtype)) {
        throw IntegrityError("tensor " + r.name + " holds " + std::to_string(r.bytes.size()) + " bytes for shape " +
                             shape_str(r.shape));
    }
    std::vector<T> values(n);
    if (r.dtype == DType::f32) {
        for (std::size_t i = 0; i < n; ++i) {
            float v;
            std::memcpy(&v, r.bytes.data() + 4 * i, 4);
            values[i] = static_cast<T>(v);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            double v;
            std::memcpy(&v, r.bytes.data() + 8 * i, 8);
            values[i] = static_cast<T>(v);
        }
    }
    return Tensor<T>(r.shape, std::move(values), requires_grad);
}

std::optional<std::string> TensorArchive::get(std::string_view key) const {
    for (const auto& [k, v] : metadata) {
        if (k == key) {
            return v;
        }
    }
    return std::nullopt;
}

void TensorArchive::set(std::string key, std::string value) {
    if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
        throw FormatError("metadata key/value may not contain '=' in the key or newlines: " + key);
    }
    for (auto& [k, v] : metadata) {
        if (k == key) {
            v = std::move(value);
            return;
        }
    }
    metadata.emplace_back(std::move(key), std::move(value));
}

const TensorRecord* TensorArchive::find(std::string_view name) const {
    for (const auto& t : tensors) {
        if (t.name == name) {
            return &t;
        }
    }
    return nullptr;
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string serialize_archive(const TensorArchive& archive) {
    Writer w;
    w.raw(kArchiveMagic.data(), kArchiveMagic.size());
    w.u32(kArchiveVersion);
    std::string meta;
    for (const auto& [k, v] : archive.metadata) {
        meta += k + "=" + v + "\n";
    }
    w.str(meta);
    w.u32(static_cast<std::uint32_t>(archive.tensors.size()));
    for (const auto& t : archive.tensors) {
        if (t.bytes.size() != shape_numel(t.shape) * dtype_size(t.dtype)) {
            throw ShapeError("tensor " + t.name + " byte count does not match shape " + shape_str(t.shape));
        }
        w.str(t.name);
        w.u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) {
            w.u64(d);
        }
        w.u8(static_cast<std::uint8_t>(t.dtype));
        w.raw(t.bytes.data(), t.bytes.size());
    }
    const auto sum = fnv1a64(w.bytes());
    w.u64(sum);
    return std::move(w.bytes());
}

TensorArchive parse_archive(std::string_view bytes) {
    Reader r(bytes);
    const auto magic = r.take(kArchiveMagic.size(), "magic");
    if (magic != kArchiveMagic) {
        throw FormatError("not an archive: expected magic '" + std::string(kArchiveMagic) + "'");
    }
    const auto version = r.u32("version");
    if (version != kArchiveVersion) {
        throw FormatError("unsupported archive version " + std::to_string(version) + " (this build reads version " +
                          std::to_string(kArchiveVersion) + ")");
    }
    if (bytes.size() < r.pos() + 8) {
        throw IntegrityError("archive truncated: no room for the checksum");
    }
    const auto body = bytes.substr(0, bytes.size() - 8);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body.size(), 8);
    if (fnv1a64(body) != stored) {
        throw IntegrityError("archive checksum mismatch (file truncated or corrupt)");
    }

    Reader b(body);
    b.take(kArchiveMagic.size() + 4, "header");
    TensorArchive out;
    const auto meta_len = b.u32("metadata length");
    const auto meta = b.take(meta_len, "metadata");
    std::size_t start = 0;
    while (start < meta.size()) {
        const auto nl = meta.find('\n', start);
        const auto line = meta.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw FormatError("malformed metadata line '" + std::string(line) + "'");
        }
        out.metadata.emplace_back(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
        if (nl == std::string_view::npos) {
            break;
        }
        start = nl + 1;
    }
    const auto count = b.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorRecord t;
        t.name = std::string(b.take(b.u32("name length"), "tensor name"));
        const auto rank = b.u32("rank");
        if (rank > 8) {
            throw IntegrityError("tensor " + t.name + " has implausible rank " + std::to_string(rank));
        }
        std::size_t n = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            const auto d = b.u64("dimension");
            if (d == 0 || d > body.size()) {
                throw IntegrityError("tensor " + t.name + " has implausible dimension " + std::to_string(d));
            }
            t.shape.push_back(static_cast<std::size_t>(d));
            n *= static_cast<std::size_t>(d);
            if (n > body.size()) {
                throw IntegrityError("tensor " + t.name + " is larger than the archive");
            }
        }
        const auto tag = b.u8("dtype");
        if (tag != static_cast<std::uint8_t>(DType::f32) && tag != static_cast<std::uint8_t>(DType::f64)) {
            throw FormatError("tensor " + t.name + " has unknown dtype tag " + std::to_string(tag));
        }
        t.dtype = static_cast<DType>(tag);
        const auto raw = b.take(n * dtype_size(t.dtype), "tensor values");
        t.bytes.assign(raw.begin(), raw.end());
        out.tensors.push_back(std::move(t));
    }
    if (b.pos() != body.size()) {
        throw IntegrityError("archive has " + std::to_string(body.size() - b.pos()) + " unexpected trailing bytes");
    }
    return out;
}

void save_archive(const TensorArchive& archive, const std::filesystem::path& path) {
    const auto bytes = serialize_archive(archive);
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw IngestionError("cannot write " + tmp.string());
        }
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) {
            throw IngestionError("write failed for " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

TensorArchive load_archive(const std::filesystem::path& path) { return parse_archive(read_file(path)); }

std::string format_double(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, p);
}

void write_model_config(TensorArchive& a, const ModelConfig& c, const std::string& prefix) {
    a.set(prefix + "num_layers", std::to_string(c.num_layers));
    a.set(prefix + "hidden_size", std::to_string(c.hidden_size));
    a.set(prefix + "num_heads", std::to_string(c.num_heads));
    a.set(prefix + "ffn_size", std::to_string(c.ffn_size));
    a.set(prefix + "vocab_size", std::to_string(c.vocab_size));
    a.set(prefix + "max_seq_len", std::to_string(c.max_seq_len));
    a.set(prefix + "dropout", format_double(c.dropout));
}

ModelConfig read_model_config(const TensorArchive& a, const std::string& prefix) {
    auto field = [&](const char* name) {
        const auto key = prefix + name;
        auto v = a.get(key);
        if (!v) {
            throw FormatError("archive metadata lacks " + key);
        }
        return std::pair{key, *v};
    };
    auto as_int = [&](const char* name) {
        const auto [k, v] = field(name);
        return static_cast<int>(parse_int(k, v));
    };
    ModelConfig c;
    c.num_layers = as_int("num_layers");
    c.hidden_size = as_int("hidden_size");
    c.num_heads = as_int("num_heads");
    c.ffn_size = as_int("ffn_size");
    c.vocab_size = as_int("vocab_size");
    c.max_seq_len = as_int("max_seq_len");
    const auto [k, v] = field("dropout");
    c.dropout = parse_double(k, v);
    return c;
}

template <typename T>
TensorArchive make_checkpoint(const EncoderParams<T>& params, const ModelConfig& config, std::uint64_t step,
                              const std::string& rng_state, const std::string& kind) {
    TensorArchive a;
    a.set("kind", kind);
    write_model_config(a, config);
    a.set("step", std::to_string(step));
    a.set("rng_state", rng_state);
    for (const auto& [name, t] : params.named()) {
        a.tensors.push_back(to_record(name, *t));
    }
    return a;
}

Checkpoint read_checkpoint(TensorArchive archive) {
    Checkpoint c;
    c.config = read_model_config(archive);
    const auto step = archive.get("step");
    c.step = step ? static_cast<std::uint64_t>(parse_int("step", *step)) : 0;
    c.rng_state = archive.get("rng_state").value_or("");
    c.kind = archive.get("kind").value_or("model");
    c.archive = std::move(archive);
    return c;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return read_checkpoint(load_archive(path)); }

template <typename T>
EncoderParams<T> params_from_checkpoint(const Checkpoint& ckpt, const std::optional<ModelConfig>& expected,
                                        bool requires_grad) {
    if (expected && !(*expected == ckpt.config)) {
        std::string msg = "checkpoint config does not match:";
        for (const auto& d : config_diff(*expected, ckpt.config)) {
            msg += " " + d + ";";
        }
        throw LoadError(msg);
    }
    ckpt.config.validate();
    EncoderParams<T> p;
    p.layers.resize(static_cast<std::size_t>(ckpt.config.num_layers));
    const auto shapes = param_shapes(ckpt.config);
    auto named = p.named();
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto* rec = ckpt.archive.find(named[i].name);
        if (!rec) {
            throw LoadError("checkpoint lacks tensor " + named[i].name);
        }
        if (rec->shape != shapes[i].second) {
            throw LoadError("tensor " + named[i].name + " has shape " + shape_str(rec->shape) + ", config implies " +
                            shape_str(shapes[i].second));
        }
        *named[i].tensor = from_record<T>(*rec, requires_grad);
    }
    return p;
}

#define RELKD_INSTANTIATE_ARCHIVE(T)                                                                           \
    template TensorRecord to_record<T>(std::string, const Tensor<T>&);                                         \
    template Tensor<T> from_record<T>(const TensorRecord&, bool);                                              \
    template TensorArchive make_checkpoint<T>(const EncoderParams<T>&, const ModelConfig&, std::uint64_t,      \
                                              const std::string&, const std::string&);                         \
    template EncoderParams<T> params_from_checkpoint<T>(const Checkpoint&, const std::optional<ModelConfig>&,  \
                                                        bool);

RELKD_INSTANTIATE_ARCHIVE(float)
RELKD_INSTANTIATE_ARCHIVE(double)

#undef RELKD_INSTANTIATE_ARCHIVE

} // namespace relkd
