#pragma once

// NSDT tensor container: "NSDT", u16 version, u32 record count, then per
// record: u16 name length, UTF-8 name, u8 rank, u32 extents, u8 dtype, and a
// little-endian row-major payload. All integers are little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nsd/ndarray.hpp"

namespace nsd {

enum class DType : std::uint8_t { F32 = 0, F64 = 1, U8 = 2 };

std::size_t dtype_size(DType dtype);

struct Record {
  std::string name;
  std::vector<std::uint32_t> extents;
  DType dtype = DType::F64;
  std::vector<unsigned char> payload;  // little-endian bytes

  static Record from_array(std::string name, const NdArray& a, DType dtype = DType::F64);
  static Record from_text(std::string name, const std::string& text);
  // Widens F32 to double; throws FormatError for U8.
  NdArray to_array() const;
  std::string to_text() const;
};

struct Container {
  static constexpr std::uint16_t kVersion = 1;
  std::vector<Record> records;

  // Throws FormatError when absent.
  const Record& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  void add(Record record);  // throws ContractViolation on a duplicate name
};

std::vector<unsigned char> encode_container(const Container& c);
// Throws FormatError naming the byte offset of the first problem.
Container decode_container(const std::vector<unsigned char>& bytes);

// Writes to a sibling temporary and renames, so readers never see a
// partial file. Throws IoError.
void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

}  // namespace nsd
