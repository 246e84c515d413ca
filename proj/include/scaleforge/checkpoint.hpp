// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scaleforge/error.hpp"
#include "scaleforge/tensor.hpp"

// Checkpoint container, all integers and floats little-endian:
//
//   magic      16 bytes  "SCALEFORGE-CKPT" NUL
//   version    u32       1
//   header     u64 length + UTF-8 JSON (config echo and run metadata)
//   count      u64       number of arrays
//   per array: u32 name length, name bytes, u32 rank, rank x u64 extents,
//              numel x f64 payload (IEEE-754 binary64)
//
// Arrays appear in model parameter order, then optimizer moments as
// "optim.m/<name>" and "optim.v/<name>". JSON keys are sorted, so identical
// runs produce byte-identical files.
namespace scaleforge {

inline constexpr char kCheckpointMagic[16] = "SCALEFORGE-CKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

struct Checkpoint {
    nlohmann::json header;
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return &a;
        return nullptr;
    }
};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
    std::uint64_t bits = 0;
    if constexpr (std::is_same_v<T, double>) {
        bits = std::bit_cast<std::uint64_t>(v);
    } else {
        bits = static_cast<std::uint64_t>(v);
    }
    char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    os.write(buf, sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw Error("checkpoint: truncated file");
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    if constexpr (std::is_same_v<T, double>) {
        return std::bit_cast<double>(bits);
    } else {
        return static_cast<T>(bits);
    }
}

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("checkpoint: cannot write " + path.string());
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    const std::string header = ckpt.header.dump();
    detail::put_le<std::uint64_t>(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    detail::put_le<std::uint64_t>(os, ckpt.arrays.size());
    for (const auto& a : ckpt.arrays) {
        if (shape_numel(a.shape) != a.data.size()) throw ShapeError("checkpoint: array '" + a.name + "' shape mismatch");
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.shape.size()));
        for (std::size_t d : a.shape) detail::put_le<std::uint64_t>(os, d);
        for (double v : a.data) detail::put_le<double>(os, v);
    }
    if (!os) throw Error("checkpoint: write failed for " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("checkpoint: cannot open " + path.string());
    char magic[16];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw Error("checkpoint: bad magic in " + path.string());
    if (detail::get_le<std::uint32_t>(is) != kCheckpointVersion) throw Error("checkpoint: unsupported version");
    Checkpoint ck;
    std::string header(detail::get_le<std::uint64_t>(is), '\0');
    if (!is.read(header.data(), static_cast<std::streamsize>(header.size()))) throw Error("checkpoint: truncated header");
    ck.header = nlohmann::json::parse(header);
    const auto count = detail::get_le<std::uint64_t>(is);
    for (std::uint64_t k = 0; k < count; ++k) {
        NamedArray a;
        a.name.resize(detail::get_le<std::uint32_t>(is));
        if (!is.read(a.name.data(), static_cast<std::streamsize>(a.name.size()))) throw Error("checkpoint: truncated name");
        const auto rank = detail::get_le<std::uint32_t>(is);
        for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(detail::get_le<std::uint64_t>(is));
        a.data.resize(shape_numel(a.shape));
        for (double& v : a.data) v = detail::get_le<double>(is);
        ck.arrays.push_back(std::move(a));
    }
    return ck;
}

}  // namespace scaleforge
