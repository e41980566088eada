#pragma once

#include <filesystem>
#include <string>

#include "hcl/tensor.hpp"

namespace hcl {

enum class DType { F32, F64 };

std::string dtype_name(DType d);
DType parse_dtype(const std::string& name);

/// Writes `<base>.bin` (raw little-endian IEEE-754 payload) and `<base>.json`
/// ({"shape":[...],"dtype":"f32","order":"row-major"}).
void save_tensor(const std::filesystem::path& base, const Tensor& t, DType dtype = DType::F32);
Tensor load_tensor(const std::filesystem::path& base);

/// Rounds every element to the nearest float32, so that a subsequent f32
/// round-trip is lossless.
Tensor round_to_f32(Tensor t);

/// 64-bit FNV-1a of a byte string, as 16 lowercase hex digits.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace hcl
