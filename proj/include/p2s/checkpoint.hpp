#pragma once

// Checkpoint container, all integers little-endian:
//
//   magic    8 bytes  "P2SCKPT1"
//   version  u32      1
//   config   u32 length, then that many bytes of "key = value" lines
//   count    u32      number of records
//   record   u32 name length, name bytes,
//            u32 kind (0 parameter, 1 buffer),
//            u64 rows, u64 cols,
//            rows*cols IEEE-754 binary64 values, little-endian
//
// The stream must end exactly after the last record. The config text holds
// every model.* key plus train.dropout, which is enough to rebuild the network.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "p2s/config.hpp"
#include "p2s/errors.hpp"
#include "p2s/model.hpp"

namespace p2s {

inline constexpr char kCheckpointMagic[8] = {'P', '2', 'S', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <class U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError("checkpoint truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline void put_record(std::string& out, const std::string& name, std::uint32_t kind, ag::Shape shape,
                       std::span<const double> values) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_le<std::uint32_t>(out, kind);
  put_le<std::uint64_t>(out, shape.rows);
  put_le<std::uint64_t>(out, shape.cols);
  for (double v : values) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

}  // namespace detail

inline std::string checkpoint_config_text(const ModelConfig& config) {
  RunConfig rc;
  rc.model = config;
  std::string text = format_config(rc, "model.");
  text += "train.dropout = " + detail::format_double(config.dropout) + "\n";
  return text;
}

inline std::string serialize_checkpoint(const Point2Sequence& model) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string text = checkpoint_config_text(model.config());
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  const auto& params = model.params();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.params().size() + params.buffers().size()));
  for (const auto& p : params.params()) detail::put_record(out, p.name, 0, p.tensor.shape(), p.tensor.values());
  for (const auto& b : params.buffers()) detail::put_record(out, b.name, 1, b.shape, b.values);
  return out;
}

/// Rebuilds a model; any malformed or inconsistent content raises DataError.
inline Point2Sequence deserialize_checkpoint(std::string_view bytes) {
  detail::ByteReader in(bytes);
  if (in.take(sizeof kCheckpointMagic) != std::string_view(kCheckpointMagic, sizeof kCheckpointMagic))
    throw DataError("not a checkpoint (bad magic)");
  if (const auto v = in.le<std::uint32_t>(); v != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(v));
  const std::string text(in.take(in.le<std::uint32_t>()));
  ModelConfig config;
  try {
    config = parse_config(text, {}, "<checkpoint>").model;
    config.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }

  ModelParams params;
  const auto count = in.le<std::uint32_t>();
  for (std::uint32_t r = 0; r < count; ++r) {
    std::string name(in.take(in.le<std::uint32_t>()));
    const auto kind = in.le<std::uint32_t>();
    const ag::Shape shape{static_cast<std::size_t>(in.le<std::uint64_t>()), static_cast<std::size_t>(in.le<std::uint64_t>())};
    if (kind > 1) throw DataError("checkpoint record " + name + ": unknown kind");
    if (shape.cols != 0 && shape.rows > in.remaining() / 8 / shape.cols) throw DataError("checkpoint truncated");
    std::vector<double> values(shape.size());
    for (double& v : values) v = std::bit_cast<double>(in.le<std::uint64_t>());
    try {
      if (kind == 0)
        params.add(name, shape, std::move(values));
      else
        params.add_buffer(name, shape, 0.0).values = std::move(values);
    } catch (const ContractError&) {
      throw DataError("checkpoint record " + name + " repeated");
    }
  }
  if (!in.done()) throw DataError("trailing bytes after the last checkpoint record");
  return Point2Sequence(config, std::move(params));
}

inline void save_checkpoint(const std::filesystem::path& path, const Point2Sequence& model) {
  std::ofstream out(path, std::ios::binary);
  const std::string bytes = serialize_checkpoint(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("cannot write " + path.string());
}

inline Point2Sequence load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace p2s
