#include "nsd/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_set>

#include "nsd/error.hpp"

namespace nsd {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::U8: return 1;
  }
  return 0;
}

namespace {

std::size_t element_count(const std::vector<std::uint32_t>& extents) {
  std::size_t n = 1;
  for (auto e : extents) n *= e;
  return n;
}

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    out.insert(out.end(), p, p + sizeof v);
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    out.insert(out.end(), b, b + n);
  }
  std::vector<unsigned char> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& b) : buf(b) {}
  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof v);
    pos += sizeof v;
    return v;
  }
  const unsigned char* take(std::size_t n, const char* what) {
    need(n, what);
    const unsigned char* p = buf.data() + pos;
    pos += n;
    return p;
  }
  std::size_t pos = 0;

 private:
  void need(std::size_t n, const char* what) const {
    if (buf.size() - pos < n) {
      throw FormatError("container truncated at byte offset " + std::to_string(pos) + " reading " +
                        what + " (" + std::to_string(n) + " bytes needed, " +
                        std::to_string(buf.size() - pos) + " left)");
    }
  }
  const std::vector<unsigned char>& buf;
};

}  // namespace

Record Record::from_array(std::string name, const NdArray& a, DType dtype) {
  Record r{std::move(name), {}, dtype, {}};
  for (auto e : a.shape()) r.extents.push_back(static_cast<std::uint32_t>(e));
  const auto v = a.vec();
  if (dtype == DType::F64) {
    r.payload.resize(v.size() * 8);
    std::memcpy(r.payload.data(), v.data(), r.payload.size());
  } else if (dtype == DType::F32) {
    r.payload.resize(v.size() * 4);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const float f = static_cast<float>(v[i]);
      std::memcpy(r.payload.data() + 4 * i, &f, 4);
    }
  } else {
    throw ContractViolation("record " + r.name + ": arrays are stored as f32 or f64");
  }
  return r;
}

Record Record::from_text(std::string name, const std::string& text) {
  Record r{std::move(name), {static_cast<std::uint32_t>(text.size())}, DType::U8, {}};
  r.payload.assign(text.begin(), text.end());
  return r;
}

NdArray Record::to_array() const {
  Shape shape(extents.begin(), extents.end());
  NdArray a(shape);
  auto d = a.data();
  if (dtype == DType::F64) {
    std::memcpy(d.data(), payload.data(), payload.size());
  } else if (dtype == DType::F32) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      float f;
      std::memcpy(&f, payload.data() + 4 * i, 4);
      d[i] = f;
    }
  } else {
    throw FormatError("record " + name + " holds bytes, not an array");
  }
  return a;
}

std::string Record::to_text() const {
  if (dtype != DType::U8) throw FormatError("record " + name + " is not text");
  return {payload.begin(), payload.end()};
}

const Record& Container::at(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return r;
  throw FormatError("container has no record '" + name + "'");
}

bool Container::contains(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return true;
  return false;
}

void Container::add(Record record) {
  if (contains(record.name)) throw ContractViolation("duplicate record name " + record.name);
  records.push_back(std::move(record));
}

std::vector<unsigned char> encode_container(const Container& c) {
  Writer w;
  w.bytes("NSDT", 4);
  w.put<std::uint16_t>(Container::kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.records.size()));
  std::unordered_set<std::string> names;
  for (const auto& r : c.records) {
    if (!names.insert(r.name).second) {
      throw ContractViolation("duplicate record name " + r.name);
    }
    if (r.name.size() > 0xFFFF || r.extents.size() > 0xFF) {
      throw ContractViolation("record " + r.name + ": name or rank too long");
    }
    if (r.payload.size() != dtype_size(r.dtype) * element_count(r.extents)) {
      throw ContractViolation("record " + r.name + ": payload size does not match extents");
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(r.extents.size()));
    for (auto e : r.extents) w.put<std::uint32_t>(e);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(r.dtype));
    w.bytes(r.payload.data(), r.payload.size());
  }
  return std::move(w.out);
}

Container decode_container(const std::vector<unsigned char>& bytes) {
  Reader in(bytes);
  const unsigned char* magic = in.take(4, "magic");
  if (std::memcmp(magic, "NSDT", 4) != 0) {
    throw FormatError("bad container magic at byte offset 0 (expected NSDT)");
  }
  const std::size_t version_at = in.pos;
  const auto version = in.get<std::uint16_t>("version");
  if (version != Container::kVersion) {
    throw FormatError("unsupported container version " + std::to_string(version) +
                      " at byte offset " + std::to_string(version_at));
  }
  const auto count = in.get<std::uint32_t>("record count");
  Container c;
  std::unordered_set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t record_at = in.pos;
    Record r;
    const auto len = in.get<std::uint16_t>("name length");
    const unsigned char* name = in.take(len, "name");
    r.name.assign(reinterpret_cast<const char*>(name), len);
    if (!names.insert(r.name).second) {
      throw FormatError("duplicate record name '" + r.name + "' at byte offset " +
                        std::to_string(record_at));
    }
    const auto rank = in.get<std::uint8_t>("rank");
    for (std::uint8_t k = 0; k < rank; ++k) r.extents.push_back(in.get<std::uint32_t>("extent"));
    const std::size_t dtype_at = in.pos;
    const auto tag = in.get<std::uint8_t>("dtype");
    if (tag > 2) {
      throw FormatError("unknown dtype " + std::to_string(tag) + " at byte offset " +
                        std::to_string(dtype_at));
    }
    r.dtype = static_cast<DType>(tag);
    const std::size_t n = dtype_size(r.dtype) * element_count(r.extents);
    const unsigned char* p = in.take(n, "payload");
    r.payload.assign(p, p + n);
    c.records.push_back(std::move(r));
  }
  if (in.pos != bytes.size()) {
    throw FormatError("trailing bytes after the last record at byte offset " + std::to_string(in.pos));
  }
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " +
                        ec.message());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in),
                                         std::istreambuf_iterator<char>()};
  try {
    return decode_container(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace nsd
