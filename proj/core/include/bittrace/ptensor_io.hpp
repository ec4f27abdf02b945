#pragma once

#include <iosfwd>
#include <string>

#include "bittrace/ptensor.hpp"

namespace bittrace {

/// Flat little-endian container:
///   magic "PTSR", version u32, dtype u8 (0 = single, 1 = double),
///   ndim u32, extents u64 x ndim, values (f32 or f64), bits (u8).
void write_ptensor(std::ostream& os, const PTensor& t);
PTensor read_ptensor(std::istream& is);

void save_ptensor(const std::string& path, const PTensor& t);
PTensor load_ptensor(const std::string& path);

}  // namespace bittrace
