#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dualfed/model.h"

namespace dualfed {

struct NamedTensor {
  std::string name;
  Tag tag = Tag::kGlobal;
  Tensor value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

// Flat ordered list of slots. This is both the message payload exchanged
// between server and clients and the unit of on-disk serialization.
using SlotList = std::vector<NamedTensor>;

std::size_t value_count(const SlotList& slots);

// Slots in model order, optionally restricted to one tag. Running statistics
// are included (they are PERSONAL, so a GLOBAL export never contains them).
SlotList export_slots(const ModelParams& params, std::optional<Tag> only = std::nullopt);

// Overwrites the named slots. Every entry must exist in `params` with the same
// tag and shape; otherwise SchemaError.
void import_slots(ModelParams& params, const SlotList& slots);

// Binary layout, all integers and floats little-endian:
//   "DFSLOTS1"                     8-byte magic
//   u64 slot_count
//   per slot: u32 name_len, name bytes, u8 tag (0 global, 1 personal),
//             u64 rows, u64 cols, rows*cols f64 payload
void write_slots(std::ostream& out, const SlotList& slots);
SlotList read_slots(std::istream& in);

struct Checkpoint {
  std::uint64_t seed = 0;
  std::uint64_t round = 0;
  SlotList server;                // GLOBAL snapshot
  std::vector<SlotList> clients;  // full parameter set per client, by client id
};

// "DFCKPT01", u64 seed, u64 round, u64 client_count, then the server slot
// block followed by one slot block per client.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Writes `contents` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace dualfed
