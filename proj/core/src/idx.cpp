#include "bittrace/idx.hpp"

#include <cstdio>
#include <fstream>

#include "bittrace/errors.hpp"

namespace bittrace {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::uint32_t read_be32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw io_error("truncated IDX file: " + path);
    return (static_cast<std::uint32_t>(b[0]) << 24) |
           (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

void write_be32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

IdxData load_idx(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open IDX file: " + path);
    const std::uint32_t magic = read_be32(is, path);
    std::size_t ndim = 0;
    if (magic == kImagesMagic) {
        ndim = 3;
    } else if (magic == kLabelsMagic) {
        ndim = 1;
    } else {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "0x%08x", magic);
        throw io_error("bad IDX magic in " + path + ": expected 0x00000803 or "
                       "0x00000801, got " + buf);
    }
    IdxData data;
    std::int64_t n = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
        const std::int64_t d = static_cast<std::int64_t>(read_be32(is, path));
        data.dims.push_back(d);
        n *= d;
    }
    data.bytes.resize(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(data.bytes.data()),
            static_cast<std::streamsize>(data.bytes.size()));
    if (!is) throw io_error("truncated IDX payload: " + path);
    return data;
}

void save_idx(const std::string& path, const IdxData& data) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path);
    write_be32(os, data.dims.size() == 1 ? kLabelsMagic : kImagesMagic);
    for (const std::int64_t d : data.dims) {
        write_be32(os, static_cast<std::uint32_t>(d));
    }
    os.write(reinterpret_cast<const char*>(data.bytes.data()),
             static_cast<std::streamsize>(data.bytes.size()));
    if (!os) throw io_error("failed writing IDX file: " + path);
}

}  // namespace bittrace
