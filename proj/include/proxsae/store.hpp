// SPDX-License-Identifier: Apache-2.0
#pragma once

// Single-file binary container, little-endian throughout:
//
//   offset  size  field
//   0       8     magic "PROXSAE1"
//   8       4     u32 version (1)
//   12      4     u32 dtype (0 = float32)
//   16      8     u64 n_rows
//   24      8     u64 dim
//   32      8     u64 metadata length in bytes
//   40      m     metadata, UTF-8 JSON with sorted keys
//   40+m    4nd   body, row-major float32
//
// Activation stores use the layout directly. Checkpoints and ground-truth
// files put n_rows = total float count and dim = 1, and list their sections
// (name, rows, cols, in body order) under metadata "sections".

#include <fcntl.h>
#include <unistd.h>

#include <array>
#include <bit>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "proxsae/errors.hpp"
#include "proxsae/numeric.hpp"
#include "proxsae/prox.hpp"
#include "proxsae/rng.hpp"
#include "proxsae/sae.hpp"
#include "proxsae/synth.hpp"

namespace proxsae {

inline constexpr std::array<char, 8> kMagic = {'P', 'R', 'O', 'X', 'S', 'A', 'E', '1'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint32_t kDtypeFloat32 = 0;
inline constexpr std::size_t kHeaderBytes = 40;

struct Container {
  nlohmann::json metadata = nlohmann::json::object();
  std::uint64_t n_rows = 0;
  std::uint64_t dim = 0;
  std::vector<float> body;  // n_rows * dim
};

namespace detail {

inline void put_le(std::uint8_t* p, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

inline std::uint64_t get_le(const std::uint8_t* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read error on '" + path.string() + "'");
  return bytes;
}

}  // namespace detail

/// Canonical metadata text: compact, keys sorted (nlohmann objects are
/// ordered maps).
inline std::string canonical_json(const nlohmann::json& j) { return j.dump(); }

inline std::vector<std::uint8_t> encode_container(const Container& c) {
  require(c.dim > 0, "container: dim must be positive");
  require(c.body.size() == c.n_rows * c.dim, "container: body length != n_rows * dim");
  const std::string meta = canonical_json(c.metadata);
  std::vector<std::uint8_t> out(kHeaderBytes + meta.size() + 4 * c.body.size());
  std::copy(kMagic.begin(), kMagic.end(), out.begin());
  detail::put_le(out.data() + 8, kFormatVersion, 4);
  detail::put_le(out.data() + 12, kDtypeFloat32, 4);
  detail::put_le(out.data() + 16, c.n_rows, 8);
  detail::put_le(out.data() + 24, c.dim, 8);
  detail::put_le(out.data() + 32, meta.size(), 8);
  std::copy(meta.begin(), meta.end(), out.begin() + kHeaderBytes);
  const std::size_t at = kHeaderBytes + meta.size();
  if constexpr (std::endian::native == std::endian::little) {
    if (!c.body.empty()) std::memcpy(out.data() + at, c.body.data(), 4 * c.body.size());
  } else {
    for (std::size_t i = 0; i < c.body.size(); ++i) {
      const auto u = std::bit_cast<std::uint32_t>(c.body[i]);
      detail::put_le(out.data() + at + 4 * i, u, 4);
    }
  }
  return out;
}

/// Validates magic, version, dtype and total length. Error details carry the
/// byte offset of the problem.
inline Container decode_container(std::span<const std::uint8_t> bytes) {
  const std::uint64_t size = bytes.size();
  if (size < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    if (size < kMagic.size() && std::equal(bytes.begin(), bytes.end(), kMagic.begin()))
      throw CorruptionError("container: truncated inside the magic at byte " + std::to_string(size), size);
    throw FormatError("container: bad magic (not a PROXSAE1 file)", 0);
  }
  if (size < kHeaderBytes)
    throw CorruptionError("container: truncated header, file ends at byte " + std::to_string(size), size);
  const auto* p = bytes.data();
  const auto version = static_cast<std::uint32_t>(detail::get_le(p + 8, 4));
  if (version > kFormatVersion)
    throw UnsupportedVersionError("container: version " + std::to_string(version) + " is newer than supported version " +
                                      std::to_string(kFormatVersion),
                                  8);
  if (version == 0) throw FormatError("container: version 0 is invalid", 8);
  const auto dtype = static_cast<std::uint32_t>(detail::get_le(p + 12, 4));
  if (dtype != kDtypeFloat32) throw FormatError("container: unsupported dtype code " + std::to_string(dtype), 12);
  Container c;
  c.n_rows = detail::get_le(p + 16, 8);
  c.dim = detail::get_le(p + 24, 8);
  const std::uint64_t meta_len = detail::get_le(p + 32, 8);
  if (c.dim == 0) throw FormatError("container: dim is 0", 24);

  constexpr std::uint64_t kMax = std::numeric_limits<std::uint64_t>::max();
  if (c.n_rows > kMax / c.dim || c.n_rows * c.dim > (kMax - kHeaderBytes) / 4 ||
      meta_len > kMax - kHeaderBytes - 4 * c.n_rows * c.dim)
    throw FormatError("container: header sizes overflow", 16);
  const std::uint64_t body_at = kHeaderBytes + meta_len;
  const std::uint64_t expected = body_at + 4 * c.n_rows * c.dim;
  if (size < expected)
    throw CorruptionError("container: truncated, expected " + std::to_string(expected) + " bytes but file ends at byte " +
                              std::to_string(size),
                          size);
  if (size > expected)
    throw CorruptionError("container: " + std::to_string(size - expected) + " trailing bytes after offset " +
                              std::to_string(expected),
                          expected);
  try {
    c.metadata = nlohmann::json::parse(bytes.begin() + kHeaderBytes, bytes.begin() + static_cast<std::ptrdiff_t>(body_at));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container: metadata is not valid JSON: ") + e.what(), kHeaderBytes);
  }
  if (!c.metadata.is_object()) throw FormatError("container: metadata is not a JSON object", kHeaderBytes);
  c.body.resize(c.n_rows * c.dim);
  if constexpr (std::endian::native == std::endian::little) {
    if (!c.body.empty()) std::memcpy(c.body.data(), p + body_at, 4 * c.body.size());
  } else {
    for (std::size_t i = 0; i < c.body.size(); ++i)
      c.body[i] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(p + body_at + 4 * i, 4)));
  }
  return c;
}

// ---------------------------------------------------------------- writing

/// Exclusive writer lock: `<path>.lock`, created with O_EXCL and removed on
/// destruction.
class WriteLock {
 public:
  explicit WriteLock(const std::filesystem::path& target) : lock_(target.string() + ".lock") {
    const int fd = ::open(lock_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST)
        throw IoError("'" + target.string() + "' is locked by another writer (remove " + lock_.string() +
                      " if that writer is gone)");
      throw IoError("cannot create lock " + lock_.string() + ": " + std::strerror(errno));
    }
    ::close(fd);
  }
  ~WriteLock() {
    std::error_code ec;
    std::filesystem::remove(lock_, ec);
  }
  WriteLock(const WriteLock&) = delete;
  WriteLock& operator=(const WriteLock&) = delete;

 private:
  std::filesystem::path lock_;
};

/// Writes through a temporary and renames, under the writer lock.
inline void write_bytes_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  WriteLock lock(path);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write error on '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_bytes_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

inline void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  write_bytes_atomic(path, bytes);
}

inline Container read_container(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  return decode_container(bytes);
}

// ---------------------------------------------------------------- activation stores

struct ActivationStore {
  Matrixf X;  // n_rows x dim
  nlohmann::json metadata = nlohmann::json::object();  // model, layer, source, ...

  std::size_t rows() const noexcept { return X.rows(); }
  std::size_t dim() const noexcept { return X.cols(); }
};

inline Container to_container(const ActivationStore& s) {
  require(s.X.rows() > 0 && s.X.cols() > 0, "store: empty activation matrix");
  const auto flat = s.X.flat();
  return {s.metadata, s.X.rows(), s.X.cols(), std::vector<float>(flat.begin(), flat.end())};
}

inline ActivationStore from_container(Container c) {
  if (c.n_rows == 0) throw FormatError("store: no rows", 16);
  if (c.metadata.contains("sections"))
    throw FormatError("store: this file is a sectioned container (checkpoint or ground truth), not activations");
  return {Matrixf(c.n_rows, c.dim, std::move(c.body)), std::move(c.metadata)};
}

inline void store_write(const std::filesystem::path& path, const ActivationStore& s) {
  write_container(path, to_container(s));
}

inline ActivationStore store_read(const std::filesystem::path& path) { return from_container(read_container(path)); }

// ---------------------------------------------------------------- sectioned files

struct Section {
  std::string name;
  std::size_t rows = 0, cols = 0;
  std::vector<float> values;
};

inline Section section(std::string name, const Matrixf& m) {
  return {std::move(name), m.rows(), m.cols(), {m.flat().begin(), m.flat().end()}};
}

inline Section section(std::string name, const Vectorf& v) {
  return {std::move(name), v.size(), 1, v.values()};
}

inline Container pack_sections(nlohmann::json metadata, const std::vector<Section>& sections) {
  Container c;
  c.metadata = std::move(metadata);
  auto& list = c.metadata["sections"] = nlohmann::json::array();
  for (const auto& s : sections) {
    require(s.values.size() == s.rows * s.cols && !s.values.empty(), "sections: bad section shape");
    list.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
    c.body.insert(c.body.end(), s.values.begin(), s.values.end());
  }
  c.n_rows = c.body.size();
  c.dim = 1;
  return c;
}

/// Sections by name, checked against the body length.
inline std::vector<Section> unpack_sections(const Container& c) {
  if (!c.metadata.contains("sections") || !c.metadata["sections"].is_array())
    throw FormatError("container: no section table in metadata", kHeaderBytes);
  if (c.dim != 1) throw FormatError("container: sectioned files must have dim 1", 24);
  std::vector<Section> out;
  std::size_t at = 0;
  try {
    for (const auto& e : c.metadata["sections"]) {
      Section s{e.at("name").get<std::string>(), e.at("rows").get<std::size_t>(), e.at("cols").get<std::size_t>(), {}};
      const std::size_t n = s.rows * s.cols;
      if (n == 0 || at + n > c.body.size())
        throw CorruptionError("container: section '" + s.name + "' runs past the body", kHeaderBytes);
      s.values.assign(c.body.begin() + static_cast<std::ptrdiff_t>(at), c.body.begin() + static_cast<std::ptrdiff_t>(at + n));
      at += n;
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container: malformed section table: ") + e.what(), kHeaderBytes);
  }
  if (at != c.body.size()) throw CorruptionError("container: section table does not cover the body", kHeaderBytes);
  return out;
}

namespace detail {

inline const Section& find_section(const std::vector<Section>& s, std::string_view name, std::size_t rows,
                                   std::size_t cols) {
  for (const auto& x : s)
    if (x.name == name) {
      if (x.rows != rows || x.cols != cols)
        throw FormatError("container: section '" + std::string(name) + "' has shape " + std::to_string(x.rows) + "x" +
                          std::to_string(x.cols) + ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
      return x;
    }
  throw FormatError("container: missing section '" + std::string(name) + "'");
}

inline Matrixf section_matrix(const std::vector<Section>& s, std::string_view name, std::size_t rows,
                              std::size_t cols) {
  return Matrixf(rows, cols, find_section(s, name, rows, cols).values);
}

inline Vectorf section_vector(const std::vector<Section>& s, std::string_view name, std::size_t n) {
  return Vectorf(find_section(s, name, n, 1).values);
}

}  // namespace detail

// ---------------------------------------------------------------- checkpoints

inline nlohmann::json variant_to_json(const ProxSpec& v) {
  return {{"kind", std::string(to_string(v.kind))}, {"lambda", v.lambda}, {"theta", v.theta}, {"k", v.k}};
}

inline ProxSpec variant_from_json(const nlohmann::json& j) {
  try {
    ProxSpec v;
    v.kind = parse_prox_kind(j.at("kind").get<std::string>());
    v.lambda = j.at("lambda").get<double>();
    v.theta = j.at("theta").get<double>();
    v.k = j.at("k").get<std::size_t>();
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("variant: ") + e.what());
  }
}

inline std::string hash_hex(std::uint64_t h) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = kDigits[h & 0xF];
  return s;
}

inline std::uint64_t parse_hash_hex(const std::string& s) {
  if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos)
    throw FormatError("config hash '" + s + "' is not 16 lowercase hex digits");
  return std::stoull(s, nullptr, 16);
}

struct Checkpoint {
  SaeParams<float> params;
  ProxSpec variant;
  std::uint64_t step = 0;
  std::uint64_t config_hash = 0;
  RngState rng;
};

inline Container to_container(const Checkpoint& ck) {
  ck.params.validate();
  const nlohmann::json meta = {
      {"kind", "checkpoint"},
      {"d", ck.params.d()},
      {"latents", ck.params.latents()},
      {"variant", variant_to_json(ck.variant)},
      {"step", ck.step},
      {"config_hash", hash_hex(ck.config_hash)},
      {"rng", {{"algorithm", RngState::algorithm}, {"seed", ck.rng.seed}, {"stream", ck.rng.stream},
               {"counter", ck.rng.counter}}}};
  return pack_sections(meta, {section("W", ck.params.W), section("D", ck.params.D), section("b_e", ck.params.b_e),
                              section("b", ck.params.b), section("log_theta", ck.params.log_theta)});
}

inline Checkpoint checkpoint_from_container(const Container& c) {
  const auto& m = c.metadata;
  if (m.value("kind", std::string{}) != "checkpoint") throw FormatError("not a checkpoint file (metadata kind)");
  const auto sections = unpack_sections(c);
  try {
    const auto d = m.at("d").get<std::size_t>(), P = m.at("latents").get<std::size_t>();
    Checkpoint ck{{detail::section_matrix(sections, "W", d, P), detail::section_matrix(sections, "D", d, P),
                   detail::section_vector(sections, "b_e", P), detail::section_vector(sections, "b", d),
                   detail::section_vector(sections, "log_theta", P)},
                  variant_from_json(m.at("variant")),
                  m.at("step").get<std::uint64_t>(),
                  parse_hash_hex(m.at("config_hash").get<std::string>()),
                  {m.at("rng").at("seed").get<std::uint64_t>(), m.at("rng").at("stream").get<std::uint64_t>(),
                   m.at("rng").at("counter").get<std::uint64_t>()}};
    if (m.at("rng").at("algorithm").get<std::string>() != RngState::algorithm)
      throw FormatError("checkpoint: unknown rng algorithm");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed metadata: ") + e.what(), kHeaderBytes);
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_container(path, to_container(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_container(read_container(path));
}

// ---------------------------------------------------------------- ground truth

/// `spec` is stored verbatim so the file documents its own generator.
inline Container to_container(const GroundTruth& t, const nlohmann::json& spec) {
  const nlohmann::json meta = {
      {"kind", "ground_truth"}, {"d", t.H.rows()}, {"P_true", t.H.cols()}, {"n", t.codes.rows()}, {"spec", spec}};
  return pack_sections(meta, {section("H", t.H), section("codes", t.codes), section("global_mean", t.global_mean)});
}

inline GroundTruth ground_truth_from_container(const Container& c) {
  const auto& m = c.metadata;
  if (m.value("kind", std::string{}) != "ground_truth") throw FormatError("not a ground-truth file (metadata kind)");
  const auto sections = unpack_sections(c);
  try {
    const auto d = m.at("d").get<std::size_t>(), P = m.at("P_true").get<std::size_t>(), n = m.at("n").get<std::size_t>();
    return {detail::section_matrix(sections, "H", d, P), detail::section_matrix(sections, "codes", n, P),
            detail::section_vector(sections, "global_mean", d)};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("ground truth: malformed metadata: ") + e.what(), kHeaderBytes);
  }
}

inline void save_ground_truth(const std::filesystem::path& path, const GroundTruth& t, const nlohmann::json& spec) {
  write_container(path, to_container(t, spec));
}

inline GroundTruth load_ground_truth(const std::filesystem::path& path) {
  return ground_truth_from_container(read_container(path));
}

}  // namespace proxsae
