#include "hcl/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"

namespace hcl {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path with_ext(const fs::path& base, const char* ext) {
  fs::path p = base;
  p += ext;
  return p;
}

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U r = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) r = (r << 8) | ((v >> (8 * i)) & 0xff);
    return r;
  }
  return v;
}

}  // namespace

std::string dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::F32;
  if (name == "f64") return DType::F64;
  throw std::invalid_argument("unknown dtype '" + name + "'");
}

void save_tensor(const fs::path& base, const Tensor& t, DType dtype) {
  if (base.has_parent_path()) fs::create_directories(base.parent_path());
  std::ofstream bin(with_ext(base, ".bin"), std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot write " + with_ext(base, ".bin").string());
  if (dtype == DType::F32) {
    std::vector<std::uint32_t> buf(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) buf[i] = to_little(std::bit_cast<std::uint32_t>(static_cast<float>(t[i])));
    bin.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  } else {
    std::vector<std::uint64_t> buf(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) buf[i] = to_little(std::bit_cast<std::uint64_t>(t[i]));
    bin.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 8));
  }
  if (!bin) throw std::runtime_error("failed writing " + with_ext(base, ".bin").string());

  json meta{{"shape", t.shape()}, {"dtype", dtype_name(dtype)}, {"order", "row-major"}};
  std::ofstream side(with_ext(base, ".json"), std::ios::trunc);
  if (!side) throw std::runtime_error("cannot write " + with_ext(base, ".json").string());
  side << meta.dump() << '\n';
}

Tensor load_tensor(const fs::path& base) {
  const auto side_path = with_ext(base, ".json");
  const auto bin_path = with_ext(base, ".bin");
  std::ifstream side(side_path);
  if (!side) throw std::runtime_error("missing tensor sidecar " + side_path.string());
  json meta;
  try {
    side >> meta;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed tensor sidecar " + side_path.string() + ": " + e.what());
  }
  if (meta.value("order", "row-major") != "row-major")
    throw std::runtime_error(side_path.string() + ": only row-major order is supported");
  const auto shape = meta.at("shape").get<Shape>();
  const auto dtype = parse_dtype(meta.at("dtype").get<std::string>());
  const std::size_t n = shape_size(shape);
  const std::size_t width = dtype == DType::F32 ? 4 : 8;

  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("missing tensor payload " + bin_path.string());
  bin.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  if (bytes != n * width)
    throw std::runtime_error(bin_path.string() + ": payload has " + std::to_string(bytes) + " bytes, shape " +
                             shape_str(shape) + " needs " + std::to_string(n * width));
  bin.seekg(0);
  std::vector<double> data(n);
  if (dtype == DType::F32) {
    std::vector<std::uint32_t> buf(n);
    bin.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(to_little(buf[i]));
  } else {
    std::vector<std::uint64_t> buf(n);
    bin.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 8));
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<double>(to_little(buf[i]));
  }
  return Tensor(shape, std::move(data));
}

Tensor round_to_f32(Tensor t) {
  for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  return t;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace hcl
