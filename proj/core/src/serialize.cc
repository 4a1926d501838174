#include "dualfed/serialize.h"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "dualfed/errors.h"

namespace dualfed {

namespace {

constexpr std::array<char, 8> kSlotsMagic = {'D', 'F', 'S', 'L', 'O', 'T', 'S', '1'};
constexpr std::array<char, 8> kCkptMagic = {'D', 'F', 'C', 'K', 'P', 'T', '0', '1'};
// Guards against absurd allocations from a corrupt header.
constexpr std::uint64_t kMaxValues = std::uint64_t{1} << 32;

template <typename UInt>
void put_le(std::ostream& out, UInt v) {
  std::array<char, sizeof(UInt)> buf;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  }
  out.write(buf.data(), buf.size());
}

template <typename UInt>
UInt get_le(std::istream& in) {
  std::array<unsigned char, sizeof(UInt)> buf;
  in.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (!in) throw ParseError("unexpected end of slot stream");
  UInt v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) v |= static_cast<UInt>(buf[i]) << (8 * i);
  return v;
}

void write_block(std::ostream& out, const SlotList& slots) {
  out.write(kSlotsMagic.data(), kSlotsMagic.size());
  put_le<std::uint64_t>(out, slots.size());
  for (const NamedTensor& s : slots) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.name.size()));
    out.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(s.tag));
    put_le<std::uint64_t>(out, s.value.rows());
    put_le<std::uint64_t>(out, s.value.cols());
    for (double v : s.value.values()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
}

SlotList read_block(std::istream& in) {
  std::array<char, 8> magic;
  in.read(magic.data(), magic.size());
  if (!in || magic != kSlotsMagic) throw ParseError("bad slot stream magic");
  const auto count = get_le<std::uint64_t>(in);
  if (count > kMaxValues) throw ParseError("slot count out of range");
  SlotList slots;
  slots.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor s;
    const auto len = get_le<std::uint32_t>(in);
    s.name.resize(len);
    in.read(s.name.data(), len);
    if (!in) throw ParseError("truncated slot name");
    const auto tag = get_le<std::uint8_t>(in);
    if (tag > 1) throw ParseError("invalid tag byte for slot '" + s.name + "'");
    s.tag = static_cast<Tag>(tag);
    const auto rows = get_le<std::uint64_t>(in);
    const auto cols = get_le<std::uint64_t>(in);
    if (rows > kMaxValues || cols > kMaxValues || rows * cols > kMaxValues) {
      throw ParseError("shape out of range for slot '" + s.name + "'");
    }
    std::vector<double> values(rows * cols);
    for (double& v : values) v = std::bit_cast<double>(get_le<std::uint64_t>(in));
    s.value = Tensor(rows, cols, std::move(values));
    slots.push_back(std::move(s));
  }
  return slots;
}

}  // namespace

std::size_t value_count(const SlotList& slots) {
  std::size_t n = 0;
  for (const NamedTensor& s : slots) n += s.value.size();
  return n;
}

SlotList export_slots(const ModelParams& params, std::optional<Tag> only) {
  SlotList out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamSlot& s = params.slot(i);
    if (only && s.tag() != *only) continue;
    out.push_back({s.name(), s.tag(), s.value()});
  }
  return out;
}

void import_slots(ModelParams& params, const SlotList& slots) {
  for (const NamedTensor& s : slots) {
    const auto index = params.find(s.name);
    if (!index) throw SchemaError("import_slots: unknown slot '" + s.name + "'");
    const ParamSlot& dst = params.slot(*index);
    if (dst.tag() != s.tag) {
      throw SchemaError("import_slots: tag mismatch for '" + s.name + "'");
    }
    if (!dst.value().same_shape(s.value)) {
      throw SchemaError("import_slots: shape mismatch for '" + s.name + "'");
    }
    params.set_value(*index, s.value);
  }
}

void write_slots(std::ostream& out, const SlotList& slots) {
  write_block(out, slots);
  if (!out) throw IoError("write_slots: stream failure");
}

SlotList read_slots(std::istream& in) { return read_block(in); }

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream out(std::ios::binary);
  out.write(kCkptMagic.data(), kCkptMagic.size());
  put_le<std::uint64_t>(out, ckpt.seed);
  put_le<std::uint64_t>(out, ckpt.round);
  put_le<std::uint64_t>(out, ckpt.clients.size());
  write_block(out, ckpt.server);
  for (const SlotList& c : ckpt.clients) write_block(out, c);
  write_file_atomic(path, out.str());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_checkpoint: cannot open " + path.string());
  std::array<char, 8> magic;
  in.read(magic.data(), magic.size());
  if (!in || magic != kCkptMagic) throw ParseError("read_checkpoint: bad magic in " + path.string());
  Checkpoint ckpt;
  ckpt.seed = get_le<std::uint64_t>(in);
  ckpt.round = get_le<std::uint64_t>(in);
  const auto clients = get_le<std::uint64_t>(in);
  if (clients > kMaxValues) throw ParseError("read_checkpoint: client count out of range");
  ckpt.server = read_block(in);
  for (std::uint64_t i = 0; i < clients; ++i) ckpt.clients.push_back(read_block(in));
  return ckpt;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace dualfed
