#pragma once

// Binary checkpoint container.
//
//   bytes 0-7   "MTNCKPT\0"
//   byte  8     format version
//   u32 + bytes model config as JSON text
//   u32         vocabulary size, then per token: u32 length + bytes
//   u32         tensor count, then per tensor:
//               u32 name length + name, u32 rank, rank × u32 dims,
//               product(dims) × f64 values
//
// All integers and floats are little-endian.

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "mtn/data.hpp"
#include "mtn/model.hpp"

namespace mtn {

inline constexpr std::array<char, 8> kCheckpointMagic{'M', 'T', 'N', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ModelConfig config;
  Vocab vocab;
  MTNParams params;
};

namespace detail {

inline void write_string(std::ostream &os, const std::string &s) {
  write_le(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream &is, const char *what) {
  std::uint32_t n = 0;
  if (!read_le(is, n)) throw CheckpointError(std::string("truncated checkpoint reading ") + what);
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw CheckpointError(std::string("truncated checkpoint reading ") + what);
  return s;
}

} // namespace detail

inline void save_checkpoint(std::ostream &os, const ModelConfig &config, const Vocab &vocab, const MTNParams &params) {
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::write_le(os, kCheckpointVersion);
  detail::write_string(os, config.to_json().dump());
  detail::write_le(os, static_cast<std::uint32_t>(vocab.size()));
  for (auto &t : vocab.tokens()) detail::write_string(os, t);
  detail::write_le(os, static_cast<std::uint32_t>(params.tensor_count()));
  params.visit([&](const std::string &name, const Tensor &t) {
    detail::write_string(os, name);
    detail::write_le(os, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.shape()) detail::write_le(os, static_cast<std::uint32_t>(d));
    for (double v : t.values()) detail::write_le(os, v);
  });
}

inline void save_checkpoint(const std::filesystem::path &path, const ModelConfig &config, const Vocab &vocab,
                            const MTNParams &params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  save_checkpoint(os, config, vocab, params);
  if (!os) throw CheckpointError("failed writing " + path.string());
}

inline Checkpoint load_checkpoint(std::istream &is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) throw CheckpointError("not a checkpoint (bad magic)");
  std::uint8_t version = 0;
  if (!detail::read_le(is, version)) throw CheckpointError("truncated checkpoint header");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ck;
  try {
    ck.config = ModelConfig::from_json(nlohmann::json::parse(detail::read_string(is, "config")));
  } catch (const nlohmann::json::exception &e) {
    throw CheckpointError(std::string("bad config echo: ") + e.what());
  }
  std::uint32_t n_tokens = 0;
  if (!detail::read_le(is, n_tokens)) throw CheckpointError("truncated vocabulary");
  std::vector<std::string> tokens;
  for (std::uint32_t i = 0; i < n_tokens; ++i) tokens.push_back(detail::read_string(is, "vocabulary"));
  ck.vocab = Vocab::from_tokens(std::move(tokens));
  if (ck.vocab.size() != ck.config.vocab_size)
    throw CheckpointError("vocabulary has " + std::to_string(ck.vocab.size()) + " tokens but config says " +
                          std::to_string(ck.config.vocab_size));

  std::uint32_t n_tensors = 0;
  if (!detail::read_le(is, n_tensors)) throw CheckpointError("truncated tensor table");
  std::map<std::string, std::pair<Shape, std::vector<double>>> stored;
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto name = detail::read_string(is, "tensor name");
    std::uint32_t rank = 0;
    if (!detail::read_le(is, rank) || rank == 0 || rank > 8) throw CheckpointError("bad rank for " + name);
    Shape shape(rank);
    for (auto &d : shape) {
      std::uint32_t v = 0;
      if (!detail::read_le(is, v)) throw CheckpointError("truncated shape for " + name);
      d = v;
    }
    std::vector<double> values(element_count(shape));
    for (auto &v : values)
      if (!detail::read_le(is, v)) throw CheckpointError("truncated values for " + name);
    if (!stored.emplace(name, std::pair{shape, std::move(values)}).second)
      throw CheckpointError("duplicate tensor " + name);
  }

  ck.params = make_params(ck.config, [&](const std::string &name, const Shape &shape, ParamRole) {
    auto it = stored.find(name);
    if (it == stored.end()) throw CheckpointError("checkpoint lacks tensor " + name);
    if (it->second.first != shape)
      throw CheckpointError("tensor " + name + " has shape " + to_string(it->second.first) + ", expected " +
                            to_string(shape));
    auto values = std::move(it->second.second);
    stored.erase(it);
    return values;
  });
  if (!stored.empty()) throw CheckpointError("checkpoint has unexpected tensor " + stored.begin()->first);
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  return load_checkpoint(is);
}

} // namespace mtn
