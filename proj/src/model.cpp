#include "medseq/model.hpp"

#include <cstring>
#include <fstream>

namespace medseq {

namespace {
constexpr char kCkptMagic[8] = {'M', 'S', 'Q', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCkptVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const ParameterSet<float>& p,
                     std::uint64_t step, const std::string& rng_state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot write checkpoint: " + path);
  out.write(kCkptMagic, sizeof(kCkptMagic));
  out.write(reinterpret_cast<const char*>(&kCkptVersion), sizeof(kCkptVersion));
  const std::int32_t fields[6] = {p.config.layers,     p.config.dim,
                                  p.config.heads,      p.config.mlp_dim,
                                  p.config.vocab_size, p.config.context};
  out.write(reinterpret_cast<const char*>(fields), sizeof(fields));
  out.write(reinterpret_cast<const char*>(&step), sizeof(step));
  const auto rng_len = static_cast<std::uint32_t>(rng_state.size());
  out.write(reinterpret_cast<const char*>(&rng_len), sizeof(rng_len));
  out.write(rng_state.data(), rng_len);
  p.for_each([&out](const std::string&, const Tensor<float>& t) {
    const auto count = static_cast<std::uint64_t>(t.size());
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(count * sizeof(float)));
  });
  if (!out) throw FileError("error writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0) {
    throw SchemaError("not a checkpoint file: " + path);
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kCkptVersion) {
    throw SchemaError("unsupported checkpoint version: " + path);
  }
  std::int32_t fields[6];
  in.read(reinterpret_cast<char*>(fields), sizeof(fields));
  Checkpoint ckpt;
  ModelConfig config;
  config.layers = fields[0];
  config.dim = fields[1];
  config.heads = fields[2];
  config.mlp_dim = fields[3];
  config.vocab_size = fields[4];
  config.context = fields[5];
  config.validate();
  in.read(reinterpret_cast<char*>(&ckpt.step), sizeof(ckpt.step));
  std::uint32_t rng_len = 0;
  in.read(reinterpret_cast<char*>(&rng_len), sizeof(rng_len));
  ckpt.rng_state.resize(rng_len);
  in.read(ckpt.rng_state.data(), rng_len);
  if (!in) throw SchemaError("truncated checkpoint header: " + path);
  ckpt.params = ParameterSet<float>::zeros(config);
  ckpt.params.for_each([&in, &path](const std::string& name,
                                    Tensor<float>& t) {
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    if (!in || count != t.size()) {
      throw SchemaError("checkpoint tensor size mismatch at " + name + ": " +
                        path);
    }
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw SchemaError("truncated checkpoint tensor " + name);
  });
  return ckpt;
}

}  // namespace medseq
