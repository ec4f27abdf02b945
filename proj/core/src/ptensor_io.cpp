#include "bittrace/ptensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "bittrace/errors.hpp"

namespace bittrace {

namespace {

constexpr char kMagic[4] = {'P', 'T', 'S', 'R'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

template <class T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_raw(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw io_error("truncated tensor stream");
    return v;
}

}  // namespace

void write_ptensor(std::ostream& os, const PTensor& t) {
    os.write(kMagic, 4);
    write_raw(os, kVersion);
    const std::uint8_t dtype = t.precision() == Precision::Single ? 0 : 1;
    write_raw(os, dtype);
    const auto ndim = static_cast<std::uint32_t>(t.shape().rank());
    write_raw(os, ndim);
    for (std::size_t i = 0; i < t.shape().rank(); ++i) {
        write_raw(os, static_cast<std::uint64_t>(t.shape().extent(i)));
    }
    if (t.precision() == Precision::Single) {
        for (const double v : t.values()) {
            write_raw(os, static_cast<float>(v));
        }
    } else {
        for (const double v : t.values()) write_raw(os, v);
    }
    os.write(reinterpret_cast<const char*>(t.bits().data()),
             static_cast<std::streamsize>(t.bits().size()));
    if (!os) throw io_error("failed writing tensor stream");
}

PTensor read_ptensor(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw io_error("bad tensor magic (expected PTSR)");
    }
    const auto version = read_raw<std::uint32_t>(is);
    if (version != kVersion) {
        throw io_error("unsupported tensor version " + std::to_string(version));
    }
    const auto dtype = read_raw<std::uint8_t>(is);
    if (dtype > 1) throw io_error("unknown tensor dtype " + std::to_string(dtype));
    const Precision p = dtype == 0 ? Precision::Single : Precision::Double;
    const auto ndim = read_raw<std::uint32_t>(is);
    std::vector<std::int64_t> dims(ndim);
    for (auto& d : dims) {
        d = static_cast<std::int64_t>(read_raw<std::uint64_t>(is));
        if (d < 0) throw io_error("negative tensor extent");
    }
    Shape shape(std::move(dims));
    const std::int64_t n = shape.numel();
    std::vector<double> values(static_cast<std::size_t>(n));
    if (p == Precision::Single) {
        for (auto& v : values) v = static_cast<double>(read_raw<float>(is));
    } else {
        for (auto& v : values) v = read_raw<double>(is);
    }
    std::vector<ExactBits> bits(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(bits.data()),
            static_cast<std::streamsize>(bits.size()));
    if (!is) throw io_error("truncated tensor stream");
    return PTensor::from_parts(std::move(shape), std::move(values), std::move(bits), p);
}

void save_ptensor(const std::string& path, const PTensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path);
    write_ptensor(os, t);
}

PTensor load_ptensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open for reading: " + path);
    return read_ptensor(is);
}

}  // namespace bittrace
