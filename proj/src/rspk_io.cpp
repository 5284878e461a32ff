#include "respike/rspk_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace respike {

static_assert(std::endian::native == std::endian::little,
              "RSPK payloads are copied verbatim; big-endian hosts need byte swapping");

namespace {

constexpr std::uint8_t kMagic[4] = {0x52, 0x53, 0x50, 0x4B};
constexpr std::uint8_t kVersion = 1;

[[noreturn]] void bad(const std::string& source, std::size_t offset, const std::string& what) {
  throw FormatError(source + ": " + what + " at byte offset " + std::to_string(offset));
}

}  // namespace

RspkHeader parse_rspk_header(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() < 7) bad(source, bytes.size(), "file too short for header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) bad(source, 0, "bad magic (expected RSPK)");
  if (bytes[4] != kVersion) bad(source, 4, "unsupported version " + std::to_string(bytes[4]));
  RspkHeader h;
  if (bytes[5] == 0) h.dtype = Precision::f32;
  else if (bytes[5] == 1) h.dtype = Precision::f64;
  else bad(source, 5, "unknown dtype code " + std::to_string(bytes[5]));
  const std::size_t ndim = bytes[6];
  if (ndim == 0) bad(source, 6, "zero dimensions");
  const std::size_t dims_end = 7 + 4 * ndim;
  if (bytes.size() < dims_end) bad(source, bytes.size(), "truncated dimension table");
  for (std::size_t i = 0; i < ndim; ++i) {
    std::uint32_t d;
    std::memcpy(&d, bytes.data() + 7 + 4 * i, 4);
    if (d == 0) bad(source, 7 + 4 * i, "zero extent in dimension " + std::to_string(i));
    h.shape.push_back(d);
  }
  h.payload_offset = dims_end;
  const std::size_t elem = h.dtype == Precision::f32 ? 4 : 8;
  const std::size_t expected = dims_end + shape_numel(h.shape) * elem;
  if (bytes.size() < expected) {
    bad(source, bytes.size(),
        "truncated payload (declared length ends at " + std::to_string(expected) + ")");
  }
  if (bytes.size() > expected) bad(source, expected, "trailing bytes after payload");
  return h;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path);
  return bytes;
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

RspkHeader read_rspk_header(const std::string& path) {
  return parse_rspk_header(read_file_bytes(path), path);
}

template <class T>
std::vector<std::uint8_t> encode_rspk(const Tensor<T>& t) {
  if (t.dim() > 255) throw ShapeError("RSPK supports at most 255 dimensions");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kVersion);
  out.push_back(precision_of<T>() == Precision::f32 ? 0 : 1);
  out.push_back(static_cast<std::uint8_t>(t.dim()));
  for (auto d : t.shape()) {
    if (d > 0xffffffffu) throw ShapeError("extent too large for RSPK: " + std::to_string(d));
    const auto v = static_cast<std::uint32_t>(d);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + 4);
  }
  const auto* payload = reinterpret_cast<const std::uint8_t*>(t.data().data());
  out.insert(out.end(), payload, payload + t.numel() * sizeof(T));
  return out;
}

template <class T>
Tensor<T> decode_rspk(std::span<const std::uint8_t> bytes, const std::string& source) {
  const RspkHeader h = parse_rspk_header(bytes, source);
  const std::size_t n = shape_numel(h.shape);
  std::vector<T> values(n);
  const std::uint8_t* p = bytes.data() + h.payload_offset;
  if (h.dtype == precision_of<T>()) {
    std::memcpy(values.data(), p, n * sizeof(T));
  } else if (h.dtype == Precision::f32) {
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, p + 4 * i, 4);
      values[i] = static_cast<T>(f);
    }
  } else {
    bad(source, 5, "f64 payload refused in an f32 session (no silent downcast)");
  }
  return Tensor<T>(h.shape, std::move(values));
}

template <class T>
void write_rspk(const std::string& path, const Tensor<T>& t) {
  write_file_bytes(path, encode_rspk(t));
}

template <class T>
Tensor<T> read_rspk(const std::string& path) {
  return decode_rspk<T>(read_file_bytes(path), path);
}

template std::vector<std::uint8_t> encode_rspk<float>(const Tensor<float>&);
template std::vector<std::uint8_t> encode_rspk<double>(const Tensor<double>&);
template Tensor<float> decode_rspk<float>(std::span<const std::uint8_t>, const std::string&);
template Tensor<double> decode_rspk<double>(std::span<const std::uint8_t>, const std::string&);
template void write_rspk<float>(const std::string&, const Tensor<float>&);
template void write_rspk<double>(const std::string&, const Tensor<double>&);
template Tensor<float> read_rspk<float>(const std::string&);
template Tensor<double> read_rspk<double>(const std::string&);

}  // namespace respike
