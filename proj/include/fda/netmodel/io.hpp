#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include "fda/binio.hpp"
#include "fda/netmodel/block.hpp"

namespace fda {

inline constexpr std::string_view kCheckpointMagic = "FDACKPT1";
inline constexpr std::string_view kTaskVectorMagic = "FDATVEC1";
inline constexpr std::uint16_t kFormatVersion = 1;

namespace detail {

inline void write_blocks(const std::string& path, std::string_view magic, const std::vector<Block>& blocks) {
  binio::Writer w;
  w.magic(magic);
  w.u16(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(blocks.size()));
  for (const Block& b : blocks) {
    b.validate();
    w.u8(static_cast<std::uint8_t>(b.kind));
    w.u8(static_cast<std::uint8_t>(b.activation));
    w.u32(static_cast<std::uint32_t>(b.in_dim()));
    w.u32(static_cast<std::uint32_t>(b.hidden_dim()));
    w.u32(static_cast<std::uint32_t>(b.out_dim()));
    for (const Matrix& p : b.params) w.f64s(p.values());
  }
  w.finish(path);
}

inline std::vector<Block> read_blocks(const std::string& path, std::string_view magic) {
  binio::Reader r(path, magic);
  if (r.u16() != kFormatVersion) r.bad("unsupported format version");
  const std::uint32_t count = r.u32();
  if (count == 0) r.bad("no blocks");
  std::vector<Block> blocks;
  for (std::uint32_t l = 0; l < count; ++l) {
    const std::uint8_t kind = r.u8();
    const std::uint8_t act = r.u8();
    const std::size_t d = r.u32(), h = r.u32(), q = r.u32();
    if (kind > 1) r.bad("unknown block kind tag");
    if (act > 2) r.bad("unknown activation tag");
    if (d == 0 || q == 0) r.bad("zero dimension");
    Block b;
    b.kind = static_cast<BlockKind>(kind);
    b.activation = static_cast<Activation>(act);
    if (b.kind == BlockKind::Affine) {
      if (h != 0) r.bad("affine block with hidden dim");
      b.params.push_back(r.matrix(q, d));
      b.params.push_back(r.matrix(q, 1));
    } else {
      if (h == 0) r.bad("ffn block without hidden dim");
      b.params.push_back(r.matrix(h, d));
      b.params.push_back(r.matrix(h, 1));
      b.params.push_back(r.matrix(q, h));
      b.params.push_back(r.matrix(q, 1));
    }
    try {
      b.validate();
    } catch (const Error& e) {
      r.bad(e.what());
    }
    blocks.push_back(std::move(b));
  }
  r.expect_end();
  return blocks;
}

inline std::string meta_path(const std::string& path) { return path + ".meta"; }

}  // namespace detail

/// Writes the binary checkpoint and a `<path>.meta` key=value sidecar with the
/// metadata (the binary layout has no room for it).
inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  c.validate();
  detail::write_blocks(path, kCheckpointMagic, c.blocks);
  std::ofstream meta(detail::meta_path(path), std::ios::trunc);
  if (!meta) fail(ErrorCode::Io, "cannot write metadata for '" + path + "'");
  meta << "name=" << c.meta.name << "\nseed=" << c.meta.seed << "\nconfig_digest=" << c.meta.config_digest << "\n";
}

inline Checkpoint load_checkpoint(const std::string& path) {
  Checkpoint c{detail::read_blocks(path, kCheckpointMagic), {}};
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorCode::FormatViolation, "'" + path + "': " + e.what());
  }
  std::ifstream meta(detail::meta_path(path));
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "name") c.meta.name = value;
    else if (key == "seed") c.meta.seed = std::stoull(value);
    else if (key == "config_digest") c.meta.config_digest = value;
  }
  return c;
}

inline void save_task_vector(const TaskVector& tv, const std::string& path) {
  detail::write_blocks(path, kTaskVectorMagic, tv.blocks);
}

inline TaskVector load_task_vector(const std::string& path) {
  return TaskVector{detail::read_blocks(path, kTaskVectorMagic)};
}

/// FNV-1a over a string, printed as 16 hex digits. Used to tag checkpoints
/// with the configuration that produced them.
inline std::string digest_hex(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace fda
