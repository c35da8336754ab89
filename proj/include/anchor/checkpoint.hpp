#ifndef ANCHOR_CHECKPOINT_HPP_
#define ANCHOR_CHECKPOINT_HPP_

#include "anchor/model.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

// Checkpoint file: magic "AEMB", format version u32, serialized config,
// then a manifest of (tensor name, shape, raw little-endian f32 row-major
// data). Round-trips are bit-exact for float parameters.

namespace anchor {

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'A', 'E', 'M', 'B'};

class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline uint32_t read_u32(std::istream& is, const char* what) {
  uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
    throw CheckpointError(std::string("load_checkpoint: truncated file reading ") + what);
  return v;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const ModelParams<S>& params, const std::string& path) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("save_checkpoint: cannot open " + tmp.string());
    os.write(kCheckpointMagic, 4);
    detail::write_u32(os, kCheckpointVersion);
    const ModelConfig& c = params.config;
    for (Index v : {c.vocab_size, c.hidden_dim, c.num_layers, c.num_heads, c.ffn_dim,
                    c.max_seq_len, Index(c.eos_token_id), Index(c.pad_token_id)})
      detail::write_u32(os, static_cast<uint32_t>(v));

    uint32_t count = 0;
    params.for_each_param([&count](const std::string&, const Tensor<S>&) { ++count; });
    detail::write_u32(os, count);
    params.for_each_param([&os](const std::string& name, const Tensor<S>& t) {
      detail::write_u32(os, static_cast<uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::write_u32(os, static_cast<uint32_t>(t.ndim()));
      for (Index i = 0; i < t.ndim(); ++i)
        detail::write_u32(os, static_cast<uint32_t>(t.dim(i)));
      if constexpr (std::is_same_v<S, float>) {
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(float)));
      } else {
        std::vector<float> buf(static_cast<size_t>(t.numel()));
        for (Index i = 0; i < t.numel(); ++i) buf[static_cast<size_t>(i)] = float(t.values()[i]);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
      }
    });
    if (!os) throw CheckpointError("save_checkpoint: write failed for " + tmp.string());
  }
  fs::rename(tmp, target);
}

template <typename S = float>
std::pair<ModelParams<S>, ModelConfig> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("load_checkpoint: cannot open " + path);
  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError("load_checkpoint: bad magic in " + path);
  const uint32_t version = detail::read_u32(is, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError("load_checkpoint: unsupported format version " +
                          std::to_string(version));
  ModelConfig c;
  c.vocab_size = detail::read_u32(is, "config.vocab_size");
  c.hidden_dim = detail::read_u32(is, "config.hidden_dim");
  c.num_layers = detail::read_u32(is, "config.num_layers");
  c.num_heads = detail::read_u32(is, "config.num_heads");
  c.ffn_dim = detail::read_u32(is, "config.ffn_dim");
  c.max_seq_len = detail::read_u32(is, "config.max_seq_len");
  c.eos_token_id = static_cast<int32_t>(detail::read_u32(is, "config.eos_token_id"));
  c.pad_token_id = static_cast<int32_t>(detail::read_u32(is, "config.pad_token_id"));
  c.validate();

  ModelParams<S> params = init_params<S>(c, 0);
  const uint32_t count = detail::read_u32(is, "tensor count");
  uint32_t expected = 0;
  params.for_each_param([&expected](const std::string&, const Tensor<S>&) { ++expected; });
  if (count != expected)
    throw CheckpointError("load_checkpoint: manifest holds " + std::to_string(count) +
                          " tensors, config implies " + std::to_string(expected));

  params.for_each_param([&is, &path](const std::string& name, Tensor<S>& t) {
    const uint32_t name_len = detail::read_u32(is, "tensor name length");
    std::string stored(name_len, '\0');
    if (!is.read(stored.data(), name_len))
      throw CheckpointError("load_checkpoint: truncated file reading tensor name");
    if (stored != name)
      throw CheckpointError("load_checkpoint: tensor name mismatch, expected " + name +
                            ", found " + stored + " in " + path);
    const uint32_t ndim = detail::read_u32(is, "tensor rank");
    if (ndim != static_cast<uint32_t>(t.ndim()))
      throw CheckpointError("load_checkpoint: rank mismatch for " + name);
    for (Index i = 0; i < t.ndim(); ++i) {
      const uint32_t d = detail::read_u32(is, "tensor dim");
      if (d != static_cast<uint32_t>(t.dim(i)))
        throw CheckpointError("load_checkpoint: shape mismatch for " + name);
    }
    std::vector<float> buf(static_cast<size_t>(t.numel()));
    if (!is.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float))))
      throw CheckpointError("load_checkpoint: truncated tensor data for " + name);
    for (Index i = 0; i < t.numel(); ++i) t.values()[i] = S(buf[static_cast<size_t>(i)]);
  });
  is.peek();
  if (!is.eof())
    throw CheckpointError("load_checkpoint: trailing bytes after manifest in " + path);
  return {std::move(params), c};
}

}  // namespace anchor

#endif  // ANCHOR_CHECKPOINT_HPP_
