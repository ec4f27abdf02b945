#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bittrace {

/// Raw contents of an IDX image/label file pair member.
struct IdxData {
    std::vector<std::int64_t> dims;   // e.g. {count, 28, 28} or {count}
    std::vector<std::uint8_t> bytes;  // row-major payload
};

/// Parses big-endian IDX: magic 0x00000803 (u8 images, 3 dims) or
/// 0x00000801 (u8 labels, 1 dim), then u32 extents, then raw bytes.
IdxData load_idx(const std::string& path);

/// Writes the same format (round-trip counterpart for tests and the
/// synthetic dataset path).
void save_idx(const std::string& path, const IdxData& data);

}  // namespace bittrace
