#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "respike/errors.hpp"
#include "respike/tensor.hpp"

// RSPK v1 tensor files: "RSPK", u8 version, u8 dtype (0=f32, 1=f64), u8 ndim,
// ndim x u32 LE dims, row-major LE payload.
namespace respike {

struct RspkHeader {
  Precision dtype = Precision::f32;
  Shape shape;
  std::size_t payload_offset = 0;
};

RspkHeader parse_rspk_header(std::span<const std::uint8_t> bytes, const std::string& source);
RspkHeader read_rspk_header(const std::string& path);

template <class T>
std::vector<std::uint8_t> encode_rspk(const Tensor<T>& t);

/// An f32 payload may be widened into an f64 tensor; an f64 payload is never
/// narrowed into f32 and raises FormatError.
template <class T>
Tensor<T> decode_rspk(std::span<const std::uint8_t> bytes, const std::string& source);

template <class T>
void write_rspk(const std::string& path, const Tensor<T>& t);
template <class T>
Tensor<T> read_rspk(const std::string& path);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace respike
