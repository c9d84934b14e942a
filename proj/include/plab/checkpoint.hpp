#pragma once

// Binary checkpoints: magic "PLAB1", format version, model spec hash, epoch,
// seed, then one record per parameter tensor (running stats included) with
// name, shape, and raw doubles. Little-endian byte order throughout; the
// round trip is bit-exact.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "plab/model.hpp"

namespace plab {

namespace detail {

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::string& what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(bool(is), msg("checkpoint: truncated while reading ", what));
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, std::uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

inline std::string read_string(std::istream& is, const std::string& what) {
  const auto n = read_pod<std::uint32_t>(is, what);
  std::string s(n, '\0');
  is.read(s.data(), std::streamsize(n));
  require(bool(is), msg("checkpoint: truncated while reading ", what));
  return s;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[5] = {'P', 'L', 'A', 'B', '1'};

inline void save_checkpoint(const std::string& path, const ModelState& st,
                            int epoch) {
  std::ofstream os(path, std::ios::binary);
  require(bool(os), msg("checkpoint: cannot open '", path, "' for writing"));
  os.write(kCheckpointMagic, 5);
  detail::write_pod<std::uint32_t>(os, 1);  // format version
  detail::write_pod<std::uint64_t>(os, spec_hash(st.spec));
  detail::write_pod<std::int32_t>(os, epoch);
  detail::write_pod<std::uint64_t>(os, st.seed);
  detail::write_pod<std::uint32_t>(os, std::uint32_t(st.params.size()));
  for (const ParamInfo& p : st.params) {
    detail::write_string(os, p.name);
    detail::write_pod<std::int32_t>(os, p.group);
    detail::write_pod<std::uint8_t>(os, p.buffer ? 1 : 0);
    detail::write_pod<std::uint32_t>(os, std::uint32_t(p.tensor->shape.size()));
    for (int d : p.tensor->shape) detail::write_pod<std::int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(p.tensor->values.data()),
             std::streamsize(p.tensor->values.size() * sizeof(double)));
  }
  require(bool(os), msg("checkpoint: write to '", path, "' failed"));
}

struct CheckpointMeta {
  std::uint64_t spec_hash = 0;
  int epoch = 0;
  std::uint64_t seed = 0;
};

// Loads into an existing state built from the same spec; every stored record
// must match a parameter by name and shape.
inline CheckpointMeta load_checkpoint(const std::string& path,
                                      ModelState& st) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), msg("checkpoint: cannot open '", path, "'"));
  char magic[5];
  is.read(magic, 5);
  require(bool(is) && std::memcmp(magic, kCheckpointMagic, 5) == 0,
          msg("checkpoint: '", path, "' has no PLAB1 magic"));
  const auto version = detail::read_pod<std::uint32_t>(is, "version");
  require(version == 1, msg("checkpoint: unsupported format version ",
                            version));
  CheckpointMeta meta;
  meta.spec_hash = detail::read_pod<std::uint64_t>(is, "spec hash");
  require(meta.spec_hash == spec_hash(st.spec),
          msg("checkpoint: spec hash ", meta.spec_hash,
              " does not match model ", spec_hash(st.spec)));
  meta.epoch = detail::read_pod<std::int32_t>(is, "epoch");
  meta.seed = detail::read_pod<std::uint64_t>(is, "seed");
  st.seed = meta.seed;
  const auto n = detail::read_pod<std::uint32_t>(is, "record count");
  require(n == st.params.size(),
          msg("checkpoint: ", n, " records for ", st.params.size(),
              " parameters"));
  for (std::uint32_t r = 0; r < n; ++r) {
    const std::string name = detail::read_string(is, "record name");
    ParamInfo* p = st.find(name);
    require(p != nullptr, msg("checkpoint: unknown parameter '", name, "'"));
    detail::read_pod<std::int32_t>(is, "group");
    detail::read_pod<std::uint8_t>(is, "buffer flag");
    const auto ndim = detail::read_pod<std::uint32_t>(is, "rank");
    Shape shape(ndim);
    for (auto& d : shape) d = detail::read_pod<std::int32_t>(is, "dimension");
    require(shape == p->tensor->shape,
            msg("checkpoint: '", name, "' stored as ", shape_str(shape),
                " but model has ", shape_str(p->tensor->shape)));
    is.read(reinterpret_cast<char*>(p->tensor->values.data()),
            std::streamsize(p->tensor->values.size() * sizeof(double)));
    require(bool(is), msg("checkpoint: truncated in '", name, "' data"));
  }
  return meta;
}

}  // namespace plab
