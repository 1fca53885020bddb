#pragma once

#include "vlkd/common.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace vlkd {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kU8 = 2 };

/// Named-tensor container in the VLKC layout:
///   "VLKC", u8 version, u32 count, then per tensor
///   u16 name length, name, u8 dtype, u8 rank, rank x u32 dims, payload.
/// All integers and floats little-endian, payloads row-major. The run
/// configuration travels as a u8 tensor named "__config__" holding JSON.
class Checkpoint {
 public:
  static constexpr std::uint8_t kVersion = 1;
  static constexpr const char* kConfigName = "__config__";

  nlohmann::json config = nlohmann::json::object();

  /// Adds or replaces a rank-2 tensor.
  void put(const std::string& name, const Matrix& value, DType dtype = DType::kF64);
  const Matrix& get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.contains(name); }
  DType dtype(const std::string& name) const;
  std::vector<std::string> names() const;

  void write(std::ostream& out) const;
  static Checkpoint read(std::istream& in);

  /// Writes to a sibling temporary file and renames it into place.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  struct Entry {
    std::string name;
    DType dtype;
    Matrix value;
  };
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace vlkd
