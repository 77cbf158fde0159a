#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mffm/core.hpp"

namespace mffm {

static_assert(std::endian::native == std::endian::little,
              "ArrayContainer stores little-endian data and this build assumes a little-endian host");

/// On-disk array container. Layout (all integers little-endian u32):
///   magic "MFFM" | version | entry count
///   per entry: name length, UTF-8 name, dtype (0=f32, 1=f64, 2=u8),
///              ndim, dims..., raw data
///   metadata length, UTF-8 metadata text
enum class Dtype : uint32_t { f32 = 0, f64 = 1, u8 = 2 };

inline size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::f32: return 4;
        case Dtype::f64: return 8;
        case Dtype::u8: return 1;
    }
    throw format_error("unknown dtype code");
}

struct ArrayEntry {
    std::string name;
    Dtype dtype = Dtype::f64;
    std::vector<uint32_t> dims;
    std::vector<unsigned char> raw;

    size_t count() const {
        size_t n = 1;
        for (uint32_t d : dims) n *= d;
        return n;
    }

    std::vector<double> as_doubles() const {
        std::vector<double> out(count());
        if (dtype == Dtype::f64) {
            std::memcpy(out.data(), raw.data(), raw.size());
        } else if (dtype == Dtype::f32) {
            const float* p = reinterpret_cast<const float*>(raw.data());
            for (size_t i = 0; i < out.size(); ++i) out[i] = p[i];
        } else {
            for (size_t i = 0; i < out.size(); ++i) out[i] = raw[i];
        }
        return out;
    }
};

class ArrayContainer {
public:
    static constexpr uint32_t kVersion = 1;

    std::string metadata;

    const std::vector<ArrayEntry>& entries() const { return entries_; }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const ArrayEntry& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw format_error("container: no entry named '" + name + "'");
        return entries_[it->second];
    }

    void add(ArrayEntry e) {
        if (index_.count(e.name)) throw format_error("container: duplicate entry name '" + e.name + "'");
        if (e.raw.size() != e.count() * dtype_size(e.dtype))
            throw format_error("container: raw size inconsistent with dims for '" + e.name + "'");
        index_[e.name] = entries_.size();
        entries_.push_back(std::move(e));
    }

    void add_f64(const std::string& name, std::vector<uint32_t> dims, const double* data) {
        ArrayEntry e;
        e.name = name;
        e.dtype = Dtype::f64;
        e.dims = std::move(dims);
        e.raw.resize(e.count() * 8);
        std::memcpy(e.raw.data(), data, e.raw.size());
        add(std::move(e));
    }

    /// Stores doubles rounded to single precision (the on-disk field format).
    void add_f32(const std::string& name, std::vector<uint32_t> dims, const double* data) {
        ArrayEntry e;
        e.name = name;
        e.dtype = Dtype::f32;
        e.dims = std::move(dims);
        e.raw.resize(e.count() * 4);
        float* p = reinterpret_cast<float*>(e.raw.data());
        for (size_t i = 0; i < e.count(); ++i) p[i] = static_cast<float>(data[i]);
        add(std::move(e));
    }

    void add_u8(const std::string& name, std::vector<uint32_t> dims, const unsigned char* data) {
        ArrayEntry e;
        e.name = name;
        e.dtype = Dtype::u8;
        e.dims = std::move(dims);
        e.raw.assign(data, data + e.count());
        add(std::move(e));
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw format_error("container: cannot open '" + path + "' for writing");
        out.write("MFFM", 4);
        write_u32(out, kVersion);
        write_u32(out, static_cast<uint32_t>(entries_.size()));
        for (const auto& e : entries_) {
            write_u32(out, static_cast<uint32_t>(e.name.size()));
            out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
            write_u32(out, static_cast<uint32_t>(e.dtype));
            write_u32(out, static_cast<uint32_t>(e.dims.size()));
            for (uint32_t d : e.dims) write_u32(out, d);
            out.write(reinterpret_cast<const char*>(e.raw.data()), static_cast<std::streamsize>(e.raw.size()));
        }
        write_u32(out, static_cast<uint32_t>(metadata.size()));
        out.write(metadata.data(), static_cast<std::streamsize>(metadata.size()));
        if (!out) throw format_error("container: write failed for '" + path + "'");
    }

    static ArrayContainer load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw format_error("container: cannot open '" + path + "'");
        char magic[4];
        in.read(magic, 4);
        if (!in || std::memcmp(magic, "MFFM", 4) != 0)
            throw format_error("container: bad magic in '" + path + "'");
        const uint32_t version = read_u32(in, path);
        if (version != kVersion)
            throw format_error("container: unsupported version " + std::to_string(version) + " in '" + path + "'");
        const uint32_t n = read_u32(in, path);
        ArrayContainer c;
        for (uint32_t i = 0; i < n; ++i) {
            ArrayEntry e;
            const uint32_t name_len = read_u32(in, path);
            e.name.resize(name_len);
            in.read(e.name.data(), name_len);
            const uint32_t dt = read_u32(in, path);
            if (dt > 2) throw format_error("container: bad dtype code in '" + path + "'");
            e.dtype = static_cast<Dtype>(dt);
            const uint32_t ndim = read_u32(in, path);
            if (ndim > 8) throw format_error("container: implausible ndim in '" + path + "'");
            e.dims.resize(ndim);
            for (uint32_t d = 0; d < ndim; ++d) e.dims[d] = read_u32(in, path);
            e.raw.resize(e.count() * dtype_size(e.dtype));
            in.read(reinterpret_cast<char*>(e.raw.data()), static_cast<std::streamsize>(e.raw.size()));
            if (!in) throw format_error("container: truncated file '" + path + "'");
            c.add(std::move(e));
        }
        const uint32_t meta_len = read_u32(in, path);
        c.metadata.resize(meta_len);
        in.read(c.metadata.data(), meta_len);
        if (!in) throw format_error("container: truncated metadata in '" + path + "'");
        return c;
    }

    /// FNV-1a over entry names and raw bytes; identifies the array payload.
    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](const unsigned char* p, size_t n) {
            for (size_t i = 0; i < n; ++i) {
                h ^= p[i];
                h *= 0x100000001b3ULL;
            }
        };
        for (const auto& e : entries_) {
            mix(reinterpret_cast<const unsigned char*>(e.name.data()), e.name.size());
            mix(e.raw.data(), e.raw.size());
        }
        return h;
    }

private:
    static void write_u32(std::ofstream& out, uint32_t v) {
        out.write(reinterpret_cast<const char*>(&v), 4);
    }
    static uint32_t read_u32(std::ifstream& in, const std::string& path) {
        uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        if (!in) throw format_error("container: truncated file '" + path + "'");
        return v;
    }

    std::vector<ArrayEntry> entries_;
    std::map<std::string, size_t> index_;
};

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace mffm
