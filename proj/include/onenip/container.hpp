#pragma once

// ONIP binary files.
//
// Grid file (version 1), used for feature maps and score maps:
//   "ONIP" | u32 version=1 | u32 h | u32 w | u32 c | h*w*c f32, channel fastest
//
// Archive (version 2), used for checkpoints: the same magic/version framing,
// then a named index followed by the payload.
//   "ONIP" | u32 version=2 | u32 count
//   count x { u32 name_len | name | u8 kind | u32 rank | rank x u32 dim | u64 byte_length }
//   payloads in index order (kind 0: f32 values, kind 1: raw bytes)
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "onenip/errors.hpp"

namespace onenip {

inline constexpr char kOnipMagic[4] = {'O', 'N', 'I', 'P'};
inline constexpr std::uint32_t kGridVersion = 1;
inline constexpr std::uint32_t kArchiveVersion = 2;

namespace detail {

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        bytes_.insert(bytes_.end(), b, b + n);
    }
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    const std::vector<std::uint8_t>& bytes() const { return bytes_; }

private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void need(std::size_t n, const char* what) const {
        if (remaining() < n) throw FormatError(std::string("truncated ") + what, pos_);
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return bytes_[pos_++];
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    void header(std::uint32_t expected_version) {
        need(4, "magic");
        if (std::memcmp(bytes_.data(), kOnipMagic, 4) != 0) throw FormatError("bad magic, not an ONIP file", 0);
        pos_ = 4;
        const std::size_t at = pos_;
        const std::uint32_t version = u32("version");
        if (version != expected_version)
            throw FormatError("unsupported ONIP version " + std::to_string(version) + " (expected " +
                              std::to_string(expected_version) + ")",
                              at);
    }

private:
    std::vector<std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace detail

struct GridPayload {
    std::uint32_t h = 0, w = 0, c = 0;
    std::vector<float> values;
};

inline std::vector<std::uint8_t> encode_grid(const GridPayload& g) {
    if (static_cast<std::size_t>(g.h) * g.w * g.c != g.values.size())
        throw DimensionError("grid payload size does not match its header");
    detail::ByteWriter w;
    w.raw(kOnipMagic, 4);
    w.u32(kGridVersion);
    w.u32(g.h);
    w.u32(g.w);
    w.u32(g.c);
    for (float v : g.values) w.f32(v);
    return w.bytes();
}

inline GridPayload decode_grid(std::vector<std::uint8_t> bytes) {
    detail::ByteReader r(std::move(bytes));
    r.header(kGridVersion);
    GridPayload g;
    g.h = r.u32("header (h)");
    g.w = r.u32("header (w)");
    g.c = r.u32("header (c)");
    const std::size_t n = static_cast<std::size_t>(g.h) * g.w * g.c;
    if (r.remaining() / 4 < n) throw FormatError("truncated payload, expected " + std::to_string(n) + " floats", r.offset());
    g.values.resize(n);
    for (auto& v : g.values) v = r.f32("payload");
    if (r.remaining() != 0) throw FormatError("trailing bytes after payload", r.offset());
    return g;
}

inline void write_grid_file(const std::filesystem::path& path, const GridPayload& g) {
    detail::write_file(path, encode_grid(g));
}

inline GridPayload read_grid_file(const std::filesystem::path& path) { return decode_grid(detail::read_file(path)); }

// Named tensors and byte blobs for checkpoints.
class TensorArchive {
public:
    struct Entry {
        bool is_blob = false;
        std::vector<std::uint32_t> dims;
        std::vector<float> values;
        std::string blob;
    };

    void put_tensor(const std::string& name, std::vector<std::uint32_t> dims, std::vector<float> values) {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        if (n != values.size()) throw DimensionError("archive tensor '" + name + "' size does not match dims");
        entries_[name] = Entry{false, std::move(dims), std::move(values), {}};
    }
    void put_blob(const std::string& name, std::string bytes) { entries_[name] = Entry{true, {}, {}, std::move(bytes)}; }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    const Entry& get(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw FormatError("archive has no entry '" + name + "'", 0);
        return it->second;
    }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    std::vector<std::uint8_t> encode() const {
        detail::ByteWriter w;
        w.raw(kOnipMagic, 4);
        w.u32(kArchiveVersion);
        w.u32(static_cast<std::uint32_t>(entries_.size()));
        for (const auto& [name, e] : entries_) {
            w.u32(static_cast<std::uint32_t>(name.size()));
            w.raw(name.data(), name.size());
            w.u8(e.is_blob ? 1 : 0);
            w.u32(static_cast<std::uint32_t>(e.dims.size()));
            for (auto d : e.dims) w.u32(d);
            w.u64(e.is_blob ? e.blob.size() : e.values.size() * 4);
        }
        for (const auto& [name, e] : entries_) {
            if (e.is_blob)
                w.raw(e.blob.data(), e.blob.size());
            else
                for (float v : e.values) w.f32(v);
        }
        return w.bytes();
    }

    static TensorArchive decode(std::vector<std::uint8_t> bytes) {
        detail::ByteReader r(std::move(bytes));
        r.header(kArchiveVersion);
        const std::uint32_t count = r.u32("entry count");
        struct IndexRow {
            std::string name;
            bool blob;
            std::vector<std::uint32_t> dims;
            std::uint64_t length;
        };
        std::vector<IndexRow> index;
        for (std::uint32_t i = 0; i < count; ++i) {
            IndexRow row;
            const std::uint32_t len = r.u32("index name length");
            row.name = r.str(len, "index name");
            const std::size_t kind_at = r.offset();
            const std::uint8_t kind = r.u8("index kind");
            if (kind > 1) throw FormatError("unknown entry kind " + std::to_string(kind), kind_at);
            row.blob = kind == 1;
            const std::uint32_t rank = r.u32("index rank");
            if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), r.offset() - 4);
            std::uint64_t n = 1;
            for (std::uint32_t k = 0; k < rank; ++k) {
                row.dims.push_back(r.u32("index dims"));
                n *= row.dims.back();
            }
            const std::size_t len_at = r.offset();
            row.length = r.u64("index byte length");
            if (!row.blob && row.length != n * 4)
                throw FormatError("entry '" + row.name + "' length disagrees with its dims", len_at);
            index.push_back(std::move(row));
        }
        TensorArchive archive;
        for (auto& row : index) {
            if (r.remaining() < row.length) throw FormatError("truncated payload of '" + row.name + "'", r.offset());
            Entry e;
            e.is_blob = row.blob;
            e.dims = row.dims;
            if (row.blob) {
                e.blob = r.str(row.length, "blob");
            } else {
                e.values.resize(row.length / 4);
                for (auto& v : e.values) v = r.f32("tensor payload");
            }
            archive.entries_[row.name] = std::move(e);
        }
        if (r.remaining() != 0) throw FormatError("trailing bytes after archive payload", r.offset());
        return archive;
    }

    void save(const std::filesystem::path& path) const { detail::write_file(path, encode()); }
    static TensorArchive load(const std::filesystem::path& path) { return decode(detail::read_file(path)); }

private:
    std::map<std::string, Entry> entries_;
};

// 64-bit FNV-1a, used for parameter and file checksums.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace onenip
