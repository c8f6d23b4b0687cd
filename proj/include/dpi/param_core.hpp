#pragma once

// Flat parameter storage, update magnitudes, top-k core regions, freeze masks,
// masked updates and checkpoint/region persistence.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "dpi/error.hpp"

namespace dpi {

// ---------------------------------------------------------------------------
// Small utilities shared by every module.

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double value) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    if (ec != std::errc{}) return "nan";
    return std::string(buf, end);
}

inline std::optional<double> parse_double(std::string_view text) {
    double value = 0.0;
    auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || end != text.data() + text.size()) return std::nullopt;
    return value;
}

template <typename Int>
std::optional<Int> parse_integer(std::string_view text) {
    Int value{};
    auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || end != text.data() + text.size() || text.empty()) return std::nullopt;
    return value;
}

/// 64-bit FNV-1a.
class Fnv1a {
public:
    void update(std::span<const std::uint8_t> bytes) {
        for (auto b : bytes) {
            hash_ ^= b;
            hash_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view text) {
        update(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    }
    [[nodiscard]] std::uint64_t digest() const { return hash_; }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Bitwise equality of two double sequences (distinguishes -0.0 from 0.0).
inline bool bit_identical(std::span<const double> a, std::span<const double> b) {
    return a.size() == b.size() &&
           (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

// ---------------------------------------------------------------------------
// Domain types.

class ParamVector {
public:
    ParamVector() = default;

    explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {
        check_finite();
    }

    static ParamVector zeros(std::size_t dim) { return ParamVector(std::vector<double>(dim, 0.0)); }

    [[nodiscard]] std::size_t dim() const noexcept { return values_.size(); }
    [[nodiscard]] double operator[](std::size_t j) const { return values_[j]; }
    [[nodiscard]] std::span<const double> values() const noexcept { return values_; }

    /// Raw write access for the trainer. Callers must restore the finiteness
    /// invariant (see check_finite) before handing the vector on.
    [[nodiscard]] std::span<double> mutable_values() noexcept { return values_; }

    void check_finite() const {
        for (std::size_t j = 0; j < values_.size(); ++j) {
            if (!std::isfinite(values_[j])) {
                throw NumericError("non-finite parameter at coordinate " + std::to_string(j),
                                   static_cast<long long>(j));
            }
        }
    }

    friend bool operator==(const ParamVector& a, const ParamVector& b) {
        return bit_identical(a.values_, b.values_);
    }

private:
    std::vector<double> values_;
};

class MagnitudeVector {
public:
    MagnitudeVector() = default;
    explicit MagnitudeVector(std::vector<double> values) : values_(std::move(values)) {
        for (std::size_t j = 0; j < values_.size(); ++j) {
            if (!(values_[j] >= 0.0) || !std::isfinite(values_[j])) {
                throw NumericError("magnitude must be finite and non-negative at coordinate " +
                                       std::to_string(j),
                                   static_cast<long long>(j));
            }
        }
    }

    [[nodiscard]] std::size_t dim() const noexcept { return values_.size(); }
    [[nodiscard]] double operator[](std::size_t j) const { return values_[j]; }
    [[nodiscard]] std::span<const double> values() const noexcept { return values_; }

private:
    std::vector<double> values_;
};

/// Sorted, unique parameter indices selected for one task.
struct CoreRegion {
    std::vector<std::size_t> indices;
    std::size_t dim = 0;
    std::string task_id;
    double percent = 0.0;

    [[nodiscard]] std::size_t size() const noexcept { return indices.size(); }
    friend bool operator==(const CoreRegion&, const CoreRegion&) = default;
};

/// bits[j] == 1 means coordinate j is trainable, 0 means frozen.
struct FreezeMask {
    std::vector<std::uint8_t> bits;

    [[nodiscard]] std::size_t dim() const noexcept { return bits.size(); }
    [[nodiscard]] std::size_t trainable_count() const noexcept {
        return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
    }
    [[nodiscard]] bool trainable(std::size_t j) const { return bits[j] != 0; }

    static FreezeMask all_trainable(std::size_t dim) { return FreezeMask{std::vector<std::uint8_t>(dim, 1)}; }
    friend bool operator==(const FreezeMask&, const FreezeMask&) = default;
};

// ---------------------------------------------------------------------------
// Operations.

inline MagnitudeVector delta_magnitude(const ParamVector& theta_i, const ParamVector& theta_0) {
    if (theta_i.dim() != theta_0.dim()) {
        throw DimensionError("delta_magnitude: dimension mismatch (" + std::to_string(theta_i.dim()) +
                             " vs " + std::to_string(theta_0.dim()) + ")");
    }
    std::vector<double> out(theta_i.dim());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::fabs(theta_i[j] - theta_0[j]);
    return MagnitudeVector(std::move(out));
}

/// Number of indices in a core region: max(1, floor(p * D / 100)).
inline std::size_t core_region_size(double percent, std::size_t dim) {
    if (!(percent > 0.0) || percent > 100.0) {
        throw ConfigError("core percentage p must lie in (0, 100], got " + format_double(percent));
    }
    // The epsilon absorbs representation error such as 0.7 * 1000 / 100 = 6.999...
    const double raw = percent * static_cast<double>(dim) / 100.0;
    const auto k = static_cast<std::size_t>(std::floor(raw + 1e-9));
    return std::clamp<std::size_t>(k, 1, dim);
}

/// Indices of the k largest magnitudes; ties go to the smaller index.
inline CoreRegion top_k_region(const MagnitudeVector& mags, double percent, std::string task_id) {
    if (mags.dim() == 0) throw DimensionError("top_k_region: empty magnitude vector");
    const std::size_t k = core_region_size(percent, mags.dim());

    const auto values = mags.values();
    if (std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0; })) {
        warn("top_k_region: all update magnitudes are zero for task '" + task_id +
             "'; region falls back to the lowest indices");
    }

    std::vector<std::size_t> order(mags.dim());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto larger = [&](std::size_t a, std::size_t b) {
        if (values[a] != values[b]) return values[a] > values[b];
        return a < b;
    };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1), order.end(), larger);
    order.resize(k);
    std::sort(order.begin(), order.end());
    return CoreRegion{std::move(order), mags.dim(), std::move(task_id), percent};
}

inline FreezeMask mask_from_frozen(std::span<const std::size_t> frozen, std::size_t dim) {
    FreezeMask mask = FreezeMask::all_trainable(dim);
    for (auto j : frozen) {
        if (j >= dim) {
            throw DimensionError("mask_from_frozen: index " + std::to_string(j) + " out of range for D=" +
                                 std::to_string(dim));
        }
        mask.bits[j] = 0;
    }
    if (dim > 0 && mask.trainable_count() == 0) warn("mask_from_frozen: every parameter is frozen");
    return mask;
}

/// theta + delta * mask. Frozen coordinates are copied, never recomputed.
inline ParamVector apply_masked_update(const ParamVector& theta, std::span<const double> delta,
                                       const FreezeMask& mask) {
    if (delta.size() != theta.dim() || mask.dim() != theta.dim()) {
        throw DimensionError("apply_masked_update: length mismatch");
    }
    std::vector<double> out(theta.values().begin(), theta.values().end());
    for (std::size_t j = 0; j < out.size(); ++j) {
        if (!std::isfinite(delta[j])) {
            throw NumericError("apply_masked_update: non-finite delta at coordinate " + std::to_string(j),
                               static_cast<long long>(j));
        }
        if (mask.bits[j]) out[j] += delta[j];
    }
    return ParamVector(std::move(out));
}

// ---------------------------------------------------------------------------
// Checkpoints.
//
// Layout, all little-endian:
//   char[8]  magic "DPICKPT1"
//   u32      schema_version
//   u32      stage_index
//   u64      D
//   u64      model_spec_hash
//   u64      seed
//   u64      FNV-1a of the payload bytes
//   f64[D]   parameters

inline constexpr std::uint32_t kCheckpointSchemaVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'D', 'P', 'I', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::size_t kCheckpointHeaderSize = 8 + 4 + 4 + 8 + 8 + 8 + 8;

struct CheckpointMeta {
    std::uint64_t model_spec_hash = 0;
    std::uint64_t seed = 0;
    std::uint32_t stage_index = 0;
    std::uint32_t schema_version = kCheckpointSchemaVersion;
    friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
    ParamVector params;
    CheckpointMeta meta;
    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {
template <typename Int>
void put_le(std::vector<std::uint8_t>& out, Int value) {
    auto v = static_cast<std::uint64_t>(value);
    for (std::size_t i = 0; i < sizeof(Int); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename Int>
Int get_le(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(Int); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return static_cast<Int>(v);
}
}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    std::vector<std::uint8_t> payload;
    payload.reserve(ckpt.params.dim() * 8);
    for (double v : ckpt.params.values()) detail::put_le(payload, std::bit_cast<std::uint64_t>(v));
    Fnv1a fnv;
    fnv.update(payload);

    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    detail::put_le(out, ckpt.meta.schema_version);
    detail::put_le(out, ckpt.meta.stage_index);
    detail::put_le(out, static_cast<std::uint64_t>(ckpt.params.dim()));
    detail::put_le(out, ckpt.meta.model_spec_hash);
    detail::put_le(out, ckpt.meta.seed);
    detail::put_le(out, fnv.digest());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

/// When `expected_spec_hash` is given, a checkpoint written for a different
/// model spec is rejected with ErrorCode::format_hash.
inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes,
                                    std::optional<std::uint64_t> expected_spec_hash = std::nullopt) {
    if (bytes.size() < sizeof(kCheckpointMagic)) {
        throw FormatError(ErrorCode::format_truncated, "checkpoint truncated before magic");
    }
    if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw FormatError(ErrorCode::format_magic, "not a checkpoint file (bad magic)");
    }
    if (bytes.size() < kCheckpointHeaderSize) {
        throw FormatError(ErrorCode::format_truncated, "checkpoint truncated inside header");
    }
    const std::uint8_t* p = bytes.data() + 8;
    CheckpointMeta meta;
    meta.schema_version = detail::get_le<std::uint32_t>(p);
    meta.stage_index = detail::get_le<std::uint32_t>(p + 4);
    const auto dim = detail::get_le<std::uint64_t>(p + 8);
    meta.model_spec_hash = detail::get_le<std::uint64_t>(p + 16);
    meta.seed = detail::get_le<std::uint64_t>(p + 24);
    const auto checksum = detail::get_le<std::uint64_t>(p + 32);

    if (meta.schema_version != kCheckpointSchemaVersion) {
        throw FormatError(ErrorCode::format_version,
                          "unsupported checkpoint schema_version " + std::to_string(meta.schema_version));
    }
    const std::size_t payload_size = bytes.size() - kCheckpointHeaderSize;
    if (dim > payload_size / 8 || payload_size < dim * 8) {
        throw FormatError(ErrorCode::format_truncated, "checkpoint payload truncated: expected " +
                                                           std::to_string(dim) + " parameters");
    }
    if (payload_size != dim * 8) {
        throw FormatError(ErrorCode::format_parse, "checkpoint has trailing bytes after payload");
    }
    const auto payload = bytes.subspan(kCheckpointHeaderSize);
    Fnv1a fnv;
    fnv.update(payload);
    if (fnv.digest() != checksum) {
        throw FormatError(ErrorCode::format_hash, "checkpoint payload checksum mismatch");
    }
    if (expected_spec_hash && *expected_spec_hash != meta.model_spec_hash) {
        throw FormatError(ErrorCode::format_hash, "checkpoint model_spec_hash does not match the model");
    }
    std::vector<double> values(dim);
    for (std::size_t j = 0; j < dim; ++j) {
        values[j] = std::bit_cast<double>(detail::get_le<std::uint64_t>(payload.data() + 8 * j));
    }
    return Checkpoint{ParamVector(std::move(values)), meta};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text_file(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    write_file_bytes(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  std::optional<std::uint64_t> expected_spec_hash = std::nullopt) {
    return decode_checkpoint(read_file_bytes(path), expected_spec_hash);
}

// ---------------------------------------------------------------------------
// Line-oriented region and mask files.
//
//   #dpi-region v1 dim=D task=ID p=P
//   <index>
//   ...
//
//   #dpi-mask v1 dim=D frozen=N
//   <frozen index>
//   ...

namespace detail {
inline std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        lines.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    return lines;
}

inline std::string_view header_value(const std::vector<std::string_view>& fields, std::string_view key) {
    for (auto f : fields) {
        if (f.size() > key.size() && f.substr(0, key.size()) == key && f[key.size()] == '=') {
            return f.substr(key.size() + 1);
        }
    }
    throw FormatError(ErrorCode::format_parse, "header is missing '" + std::string(key) + "'");
}

inline std::vector<std::size_t> parse_index_lines(const std::vector<std::string_view>& lines, std::size_t dim) {
    std::vector<std::size_t> out;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        auto fields = split_ws(lines[i]);
        if (fields.empty()) continue;
        auto idx = parse_integer<std::size_t>(fields[0]);
        if (fields.size() != 1 || !idx) {
            throw FormatError(ErrorCode::format_parse, "bad index line " + std::to_string(i + 1));
        }
        if (*idx >= dim) {
            throw FormatError(ErrorCode::format_parse, "index " + std::to_string(*idx) + " out of range");
        }
        if (!out.empty() && *idx <= out.back()) {
            throw FormatError(ErrorCode::format_parse, "indices must be strictly increasing");
        }
        out.push_back(*idx);
    }
    return out;
}
}  // namespace detail

inline std::string region_to_text(const CoreRegion& region) {
    if (region.task_id.empty() || region.task_id.find_first_of(" \t\r\n") != std::string::npos) {
        throw ConfigError("task id '" + region.task_id + "' cannot be written to a region file");
    }
    std::ostringstream out;
    out << "#dpi-region v1 dim=" << region.dim << " task=" << region.task_id
        << " p=" << format_double(region.percent) << '\n';
    for (auto j : region.indices) out << j << '\n';
    return out.str();
}

inline CoreRegion region_from_text(std::string_view text) {
    const auto lines = detail::split_lines(text);
    if (lines.empty()) throw FormatError(ErrorCode::format_truncated, "empty region file");
    const auto header = detail::split_ws(lines[0]);
    if (header.size() < 2 || header[0] != "#dpi-region") {
        throw FormatError(ErrorCode::format_magic, "not a region file");
    }
    if (header[1] != "v1") throw FormatError(ErrorCode::format_version, "unsupported region file version");
    CoreRegion region;
    auto dim = parse_integer<std::size_t>(detail::header_value(header, "dim"));
    auto p = parse_double(detail::header_value(header, "p"));
    if (!dim || !p) throw FormatError(ErrorCode::format_parse, "malformed region header");
    region.dim = *dim;
    region.percent = *p;
    region.task_id = std::string(detail::header_value(header, "task"));
    region.indices = detail::parse_index_lines(lines, region.dim);
    return region;
}

inline std::string mask_to_text(const FreezeMask& mask) {
    std::ostringstream out;
    out << "#dpi-mask v1 dim=" << mask.dim() << " frozen=" << (mask.dim() - mask.trainable_count()) << '\n';
    for (std::size_t j = 0; j < mask.dim(); ++j) {
        if (!mask.bits[j]) out << j << '\n';
    }
    return out.str();
}

inline FreezeMask mask_from_text(std::string_view text) {
    const auto lines = detail::split_lines(text);
    if (lines.empty()) throw FormatError(ErrorCode::format_truncated, "empty mask file");
    const auto header = detail::split_ws(lines[0]);
    if (header.size() < 2 || header[0] != "#dpi-mask") throw FormatError(ErrorCode::format_magic, "not a mask file");
    if (header[1] != "v1") throw FormatError(ErrorCode::format_version, "unsupported mask file version");
    auto dim = parse_integer<std::size_t>(detail::header_value(header, "dim"));
    auto frozen_count = parse_integer<std::size_t>(detail::header_value(header, "frozen"));
    if (!dim || !frozen_count) throw FormatError(ErrorCode::format_parse, "malformed mask header");
    const auto frozen = detail::parse_index_lines(lines, *dim);
    if (frozen.size() != *frozen_count) {
        throw FormatError(ErrorCode::format_truncated, "mask file lists fewer frozen indices than its header");
    }
    FreezeMask mask = FreezeMask::all_trainable(*dim);
    for (auto j : frozen) mask.bits[j] = 0;
    return mask;
}

}  // namespace dpi
