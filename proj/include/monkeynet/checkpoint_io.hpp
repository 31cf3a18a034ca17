#pragma once

// Self-describing weight container.
//
//   bytes 0..7   magic "MNKYCKPT"
//   u32          format version (1)
//   u64          entry count
//   per entry:   u32 name length, name bytes, u32 rank, rank x i64 dims,
//                numel x f64 values
//
// All integers and floats are little-endian. Entries keep insertion order, so
// writing what was read reproduces the file byte for byte.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "monkeynet/tensor.hpp"

namespace monkeynet {

inline constexpr char kCheckpointMagic[8] = {'M', 'N', 'K', 'Y', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void put_le(std::ostream& os, U v) {
    unsigned char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw CheckpointError("checkpoint: truncated file");
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::vector<CheckpointEntry>& entries) {
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    detail::put_le<std::uint64_t>(os, entries.size());
    for (const auto& e : entries) {
        if (shape_numel(e.shape) != static_cast<std::int64_t>(e.values.size()))
            throw CheckpointError("checkpoint: entry '" + e.name + "' has inconsistent shape");
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) detail::put_le<std::int64_t>(os, d);
        for (double v : e.values) detail::put_le<double>(os, v);
    }
    if (!os) throw CheckpointError("checkpoint: write failed");
}

inline std::vector<CheckpointEntry> read_checkpoint(std::istream& is) {
    char magic[8];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw CheckpointError("checkpoint: bad magic");
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    const auto count = detail::get_le<std::uint64_t>(is);
    std::vector<CheckpointEntry> entries;
    entries.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        const auto len = detail::get_le<std::uint32_t>(is);
        e.name.resize(len);
        if (!is.read(e.name.data(), len)) throw CheckpointError("checkpoint: truncated name");
        const auto rank = detail::get_le<std::uint32_t>(is);
        for (std::uint32_t r = 0; r < rank; ++r) {
            const auto d = detail::get_le<std::int64_t>(is);
            if (d < 0) throw CheckpointError("checkpoint: negative dimension in '" + e.name + "'");
            e.shape.push_back(d);
        }
        e.values.resize(static_cast<std::size_t>(shape_numel(e.shape)));
        for (auto& v : e.values) v = detail::get_le<double>(is);
        entries.push_back(std::move(e));
    }
    return entries;
}

inline void save_checkpoint_file(const std::string& path, const std::vector<CheckpointEntry>& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
    write_checkpoint(os, entries);
    os.flush();
    if (!os) throw CheckpointError("checkpoint: write to '" + path + "' failed");
}

inline std::vector<CheckpointEntry> load_checkpoint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("checkpoint: cannot open '" + path + "'");
    return read_checkpoint(is);
}

}  // namespace monkeynet
