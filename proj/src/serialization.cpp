#include "sparseadapter/serialization.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "sparseadapter/errors.hpp"

namespace sparseadapter {

namespace {

class ByteWriter {
 public:
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  template <class T>
  void uint_le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) { uint_le(v); }
  void u64(std::uint64_t v) { uint_le(v); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, const char* what) : bytes_(bytes), what_(what) {}

  std::size_t offset() const noexcept { return pos_; }

  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("truncated ") + what_ + " file: " + field + " needs " + std::to_string(n) +
                        " bytes at offset " + std::to_string(pos_) + ", expected length >= " +
                        std::to_string(pos_ + n) + ", actual length " + std::to_string(bytes_.size()));
    }
  }
  const std::uint8_t* take(std::size_t n, const char* field) {
    need(n, field);
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8(const char* field) { return *take(1, field); }
  template <class T>
  T uint_le(const char* field) {
    const std::uint8_t* p = take(sizeof(T), field);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(p[i]) << (8 * i));
    return v;
  }
  std::uint32_t u32(const char* field) { return uint_le<std::uint32_t>(field); }
  std::uint64_t u64(const char* field) { return uint_le<std::uint64_t>(field); }
  double f64(const char* field) { return std::bit_cast<double>(u64(field)); }
  std::string str(const char* field) {
    const std::uint32_t n = u32(field);
    const std::uint8_t* p = take(n, field);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  void magic(const char (&expected)[5]) {
    const std::size_t at = pos_;
    const std::uint8_t* p = take(4, "magic");
    if (std::memcmp(p, expected, 4) != 0) {
      throw FormatError(std::string("bad magic at offset ") + std::to_string(at) + ": expected \"" + expected +
                        "\" in " + what_ + " file");
    }
  }
  void finish() const {
    if (pos_ != bytes_.size()) {
      throw FormatError(std::string("trailing data in ") + what_ + " file at offset " + std::to_string(pos_) +
                        ": expected length " + std::to_string(pos_) + ", actual length " + std::to_string(bytes_.size()));
    }
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

std::vector<std::uint8_t> encode_mask(const PruneMask& mask) {
  ByteWriter w;
  w.raw("SADM", 4);
  w.u8(kMaskFormatVersion);
  w.u8(static_cast<std::uint8_t>(mask.method()));
  w.f64(mask.sparsity());
  w.u64(mask.seed());
  w.u32(static_cast<std::uint32_t>(mask.groups().size()));
  for (const auto& [name, bits] : mask.groups()) {
    w.str(name);
    w.u64(bits.size());
    std::vector<std::uint8_t> packed((bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < bits.size(); ++i)
      if (bits[i]) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    w.raw(packed.data(), packed.size());
  }
  return w.take();
}

PruneMask decode_mask(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "mask");
  r.magic("SADM");
  const std::uint8_t version = r.u8("version");
  if (version != kMaskFormatVersion) {
    throw FormatError("unsupported mask format version " + std::to_string(version) + " at offset 4");
  }
  const std::size_t method_at = r.offset();
  const std::uint8_t tag = r.u8("method");
  if (tag > static_cast<std::uint8_t>(PruneMethod::grasp)) {
    throw FormatError("unknown method tag " + std::to_string(tag) + " at offset " + std::to_string(method_at));
  }
  const double s = r.f64("sparsity");
  const std::uint64_t seed = r.u64("seed");
  const std::uint32_t count = r.u32("group count");
  std::map<std::string, PruneMask::Bits> groups;
  for (std::uint32_t g = 0; g < count; ++g) {
    const std::size_t name_at = r.offset();
    std::string name = r.str("group name");
    const std::uint64_t n = r.u64("element count");
    if (n > bytes.size() * 8) {
      throw FormatError("truncated mask file: group '" + name + "' claims " + std::to_string(n) +
                        " elements but the file has " + std::to_string(bytes.size()) + " bytes");
    }
    const std::size_t nbytes = static_cast<std::size_t>((n + 7) / 8);
    const std::uint8_t* packed = r.take(nbytes, "mask bits");
    PruneMask::Bits bits(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = (packed[i / 8] >> (i % 8)) & 1u;
    if (n % 8 != 0 && (packed[nbytes - 1] >> (n % 8)) != 0) {
      throw FormatError("nonzero padding bits in group '" + name + "' of mask file");
    }
    if (!groups.emplace(std::move(name), std::move(bits)).second) {
      throw FormatError("duplicate group name at offset " + std::to_string(name_at) + " in mask file");
    }
  }
  r.finish();
  try {
    return PruneMask(static_cast<PruneMethod>(tag), s, seed, std::numeric_limits<double>::quiet_NaN(), std::move(groups));
  } catch (const ContractViolation& e) {
    throw FormatError(std::string("invalid mask file: ") + e.what());
  }
}

void save_mask(const std::filesystem::path& path, const PruneMask& mask) { write_file_bytes(path, encode_mask(mask)); }

PruneMask load_mask(const std::filesystem::path& path) {
  try {
    return decode_mask(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  ByteWriter w;
  w.raw("SACP", 4);
  w.u8(kCheckpointFormatVersion);
  w.u32(static_cast<std::uint32_t>(model.params().size()));
  for (const ParamGroup& g : model.params()) {
    w.str(g.name);
    w.u8(g.trainable ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(g.tensor.rank()));
    for (std::size_t d : g.tensor.shape()) w.u64(d);
    for (double v : g.tensor.data()) w.f64(v);
  }
  return w.take();
}

std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "checkpoint");
  r.magic("SACP");
  const std::uint8_t version = r.u8("version");
  if (version != kCheckpointFormatVersion) {
    throw FormatError("unsupported checkpoint format version " + std::to_string(version) + " at offset 4");
  }
  const std::uint32_t count = r.u32("group count");
  std::vector<CheckpointEntry> out;
  for (std::uint32_t g = 0; g < count; ++g) {
    CheckpointEntry e;
    e.name = r.str("group name");
    const std::uint8_t flag = r.u8("trainable flag");
    if (flag > 1) throw FormatError("bad trainable flag for group '" + e.name + "'");
    e.trainable = flag == 1;
    const std::uint32_t rank = r.u32("rank");
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(static_cast<std::size_t>(r.u64("dimension")));
      numel *= shape.back();
      if (numel > bytes.size()) {
        throw FormatError("truncated checkpoint file: group '" + e.name + "' is larger than the file");
      }
    }
    r.need(static_cast<std::size_t>(numel) * 8, "tensor data");
    std::vector<double> data(static_cast<std::size_t>(numel));
    for (double& v : data) v = r.f64("tensor data");
    e.tensor = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(e));
  }
  r.finish();
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  write_file_bytes(path, encode_checkpoint(model));
}

void restore_checkpoint(const std::vector<CheckpointEntry>& entries, Model& model) {
  if (entries.size() != model.params().size()) {
    throw FormatError("checkpoint has " + std::to_string(entries.size()) + " groups, model has " +
                      std::to_string(model.params().size()));
  }
  for (const CheckpointEntry& e : entries) {
    if (!model.has_param(e.name)) throw FormatError("checkpoint group '" + e.name + "' is not in the model");
    const ParamGroup& g = model.param(e.name);
    if (g.tensor.shape() != e.tensor.shape()) {
      throw FormatError("checkpoint group '" + e.name + "' has shape " + shape_to_string(e.tensor.shape()) +
                        ", model expects " + shape_to_string(g.tensor.shape()));
    }
  }
  for (const CheckpointEntry& e : entries) {
    ParamGroup& g = model.param(e.name);
    g.tensor = e.tensor;
    g.trainable = e.trainable;
    if (!g.trainable) g.prunable = false;
  }
}

void load_checkpoint(const std::filesystem::path& path, Model& model) {
  try {
    restore_checkpoint(decode_checkpoint(read_file_bytes(path)), model);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace sparseadapter
