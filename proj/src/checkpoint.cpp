#include "vlkd/checkpoint.hpp"

#include "binary_io.hpp"

#include <fstream>
#include <sstream>

namespace vlkd {

void Checkpoint::put(const std::string& name, const Matrix& value, DType dtype) {
  if (name == kConfigName) throw Error("tensor name reserved: " + name);
  if (name.size() > 0xFFFF) throw Error("tensor name too long");
  if (dtype == DType::kU8) throw Error("u8 tensors are reserved for the config blob");
  auto it = index_.find(name);
  if (it != index_.end()) {
    entries_[it->second] = {name, dtype, value};
    return;
  }
  index_.emplace(name, entries_.size());
  entries_.push_back({name, dtype, value});
}

const Matrix& Checkpoint::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("checkpoint has no tensor named " + name);
  return entries_[it->second].value;
}

DType Checkpoint::dtype(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("checkpoint has no tensor named " + name);
  return entries_[it->second].dtype;
}

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  for (auto& e : entries_) out.push_back(e.name);
  return out;
}

void Checkpoint::write(std::ostream& out) const {
  out.write("VLKC", 4);
  io::put_u8(out, kVersion);
  io::put_le(out, static_cast<std::uint32_t>(entries_.size() + 1));

  const std::string blob = config.dump();
  io::put_le(out, static_cast<std::uint16_t>(std::string(kConfigName).size()));
  out.write(kConfigName, static_cast<std::streamsize>(std::string(kConfigName).size()));
  io::put_u8(out, static_cast<std::uint8_t>(DType::kU8));
  io::put_u8(out, 1);
  io::put_le(out, static_cast<std::uint32_t>(blob.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));

  for (const auto& e : entries_) {
    io::put_le(out, static_cast<std::uint16_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    io::put_u8(out, static_cast<std::uint8_t>(e.dtype));
    io::put_u8(out, 2);
    io::put_le(out, static_cast<std::uint32_t>(e.value.rows()));
    io::put_le(out, static_cast<std::uint32_t>(e.value.cols()));
    for (Eigen::Index i = 0; i < e.value.size(); ++i) {
      const double v = e.value.data()[i];
      if (e.dtype == DType::kF32) io::put_f32(out, static_cast<float>(v));
      else io::put_f64(out, v);
    }
  }
  if (!out) throw Error("failed writing checkpoint stream");
}

Checkpoint Checkpoint::read(std::istream& in) {
  io::ByteReader r(in);
  char magic[4];
  r.read(magic, 4, "header");
  if (std::string_view(magic, 4) != "VLKC") throw FormatError("bad magic", 0);
  const std::uint8_t version = r.u8("header");
  if (version != kVersion) throw FormatError("version mismatch: expected " + std::to_string(kVersion) +
                                                 ", found " + std::to_string(version), 4);
  const std::uint32_t count = r.u32("header");

  Checkpoint ck;
  bool saw_config = false;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = r.u16("tensor name length");
    std::string name(name_len, '\0');
    r.read(name.data(), name_len, "tensor name");
    const std::uint64_t dtype_at = r.offset();
    const std::uint8_t dtype_tag = r.u8("tensor dtype");
    if (dtype_tag > 2) throw FormatError("unknown dtype tag " + std::to_string(dtype_tag), dtype_at);
    const auto dtype = static_cast<DType>(dtype_tag);
    const std::uint64_t rank_at = r.offset();
    const std::uint8_t rank = r.u8("tensor rank");
    if (rank > 2) throw FormatError("unsupported tensor rank " + std::to_string(rank), rank_at);
    std::vector<std::uint32_t> dims(rank);
    for (auto& d : dims) d = r.u32("tensor dims");
    std::uint64_t elements = 1;
    for (auto d : dims) elements *= d;
    if (elements > (std::uint64_t{1} << 31)) throw FormatError("implausible tensor size", rank_at);

    if (dtype == DType::kU8) {
      if (name != kConfigName) throw FormatError("u8 tensor other than " + std::string(kConfigName), dtype_at);
      std::string blob(static_cast<std::size_t>(elements), '\0');
      const std::uint64_t at = r.offset();
      r.read(blob.data(), blob.size(), "config payload");
      try {
        ck.config = nlohmann::json::parse(blob);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed config JSON: ") + e.what(), at);
      }
      saw_config = true;
      continue;
    }

    const Eigen::Index rows = rank == 2 ? dims[0] : 1;
    const Eigen::Index cols = rank == 2 ? dims[1] : (rank == 1 ? dims[0] : 1);
    Matrix value(rows, cols);
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      const std::uint64_t at = r.offset();
      const double v = dtype == DType::kF32 ? static_cast<double>(r.f32("tensor payload")) : r.f64("tensor payload");
      if (!std::isfinite(v)) throw FormatError("non-finite value in tensor " + name, at);
      value.data()[i] = v;
    }
    if (ck.has(name)) throw FormatError("duplicate tensor " + name, dtype_at);
    ck.index_.emplace(name, ck.entries_.size());
    ck.entries_.push_back({name, dtype, std::move(value)});
  }
  if (!saw_config) throw FormatError("missing " + std::string(kConfigName) + " tensor", r.offset());
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open for writing: " + tmp.string());
    write(out);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  return read(in);
}

}  // namespace vlkd
