#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "pia/hash.hpp"
#include "pia/tensor.hpp"

// Binary checkpoint container. All integers and doubles are little-endian.
//
//   magic        8 bytes  "PIACKPT\x01"
//   config_len   u32      length of the resolved configuration text
//   config       bytes    flat `key = value` lines
//   fingerprint  u64      FNV-1a 64 of the configuration text
//   count        u32      number of tensors
//   per tensor:
//     name_len   u32, name bytes (UTF-8)
//     rank       u32, dims u64[rank]
//     data       f64[prod(dims)], row-major
namespace pia {

inline constexpr char kCheckpointMagic[8] = {'P', 'I', 'A', 'C', 'K', 'P', 'T', '\x01'};

struct Checkpoint {
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) return &t;
        }
        return nullptr;
    }

    const Tensor& at(const std::string& name) const {
        if (const auto* t = find(name)) return *t;
        throw IoError("checkpoint has no tensor named '" + name + "'");
    }

    std::uint64_t fingerprint() const { return fnv1a64(config_text); }
};

namespace detail {

template <class T>
void put_le(std::ostream& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& in, const std::string& path) {
    unsigned char buf[sizeof(T)];
    in.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) throw IoError("truncated checkpoint " + path);
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp + " for writing");
        out.write(kCheckpointMagic, sizeof kCheckpointMagic);
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.config_text.size()));
        out.write(ck.config_text.data(), static_cast<std::streamsize>(ck.config_text.size()));
        detail::put_le<std::uint64_t>(out, ck.fingerprint());
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
        for (const auto& [name, t] : ck.tensors) {
            detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
            for (auto d : t.shape) detail::put_le<std::uint64_t>(out, d);
            for (double v : t.data) detail::put_le<double>(out, v);
        }
        if (!out) throw IoError("write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot publish checkpoint " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string p = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("missing checkpoint " + p);
    char magic[8];
    in.read(magic, sizeof magic);
    if (in.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw IoError("not a checkpoint file: " + p);
    Checkpoint ck;
    const auto clen = detail::get_le<std::uint32_t>(in, p);
    ck.config_text.resize(clen);
    in.read(ck.config_text.data(), clen);
    if (in.gcount() != static_cast<std::streamsize>(clen)) throw IoError("truncated checkpoint " + p);
    const auto fp = detail::get_le<std::uint64_t>(in, p);
    if (fp != ck.fingerprint()) throw IoError("checkpoint config fingerprint mismatch in " + p);
    const auto count = detail::get_le<std::uint32_t>(in, p);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto nlen = detail::get_le<std::uint32_t>(in, p);
        std::string name(nlen, '\0');
        in.read(name.data(), nlen);
        if (in.gcount() != static_cast<std::streamsize>(nlen)) throw IoError("truncated checkpoint " + p);
        const auto rank = detail::get_le<std::uint32_t>(in, p);
        if (rank > 8) throw IoError("implausible tensor rank in checkpoint " + p);
        Shape shape(rank);
        for (auto& d : shape) d = detail::get_le<std::uint64_t>(in, p);
        const auto n = numel(shape);
        if (n > (std::size_t{1} << 28)) throw IoError("implausible tensor size in checkpoint " + p);
        std::vector<double> data(n);
        for (auto& v : data) v = detail::get_le<double>(in, p);
        ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return ck;
}

}  // namespace pia
