#include "msdit/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace msdit {
namespace {

constexpr char kMagic[4] = {'L', 'V', 'C', 'K'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF32 = 0;
constexpr uint8_t kMaxNdim = 8;

template <class T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::ifstream& f, const std::string& path) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw io_error("load_checkpoint: " + path + " is truncated");
  return v;
}

}  // namespace

void save_checkpoint(const ParamStore<float>& params, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("save_checkpoint: cannot open " + tmp);
    f.write(kMagic, sizeof kMagic);
    put(f, kVersion);
    put(f, static_cast<uint32_t>(params.size()));
    for (const auto& name : params.names()) {
      const Tensor<float>& t = params.at(name);
      if (t.rank() > kMaxNdim)
        throw contract_error("save_checkpoint: tensor " + name + " has too many dims");
      put(f, static_cast<uint32_t>(name.size()));
      f.write(name.data(), static_cast<std::streamsize>(name.size()));
      put(f, kDtypeF32);
      put(f, static_cast<uint8_t>(t.rank()));
      for (const int64_t d : t.shape) put(f, static_cast<uint64_t>(d));
      f.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!f) throw io_error("save_checkpoint: write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw io_error("save_checkpoint: cannot move " + tmp + " to " + path + ": " +
                         ec.message());
}

ParamStore<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("load_checkpoint: cannot open " + path);

  char magic[4];
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw io_error("load_checkpoint: " + path + " is not a checkpoint (bad magic)");
  const auto version = get<uint32_t>(f, path);
  if (version != kVersion)
    throw io_error("load_checkpoint: " + path + " has unsupported version " +
                   std::to_string(version));
  const auto count = get<uint32_t>(f, path);

  ParamStore<float> params;
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<uint32_t>(f, path);
    if (name_len == 0 || name_len > 4096)
      throw io_error("load_checkpoint: " + path + " has a corrupt entry name length");
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (!f) throw io_error("load_checkpoint: " + path + " is truncated");
    const auto dtype = get<uint8_t>(f, path);
    if (dtype != kDtypeF32)
      throw io_error("load_checkpoint: " + path + " entry " + name +
                     " has unsupported dtype " + std::to_string(dtype));
    const auto ndim = get<uint8_t>(f, path);
    if (ndim > kMaxNdim)
      throw io_error("load_checkpoint: " + path + " entry " + name + " has corrupt rank");
    Shape shape(ndim);
    for (auto& d : shape) {
      const auto u = get<uint64_t>(f, path);
      if (u == 0 || u > (uint64_t(1) << 32))
        throw io_error("load_checkpoint: " + path + " entry " + name + " has corrupt dims");
      d = static_cast<int64_t>(u);
    }
    Tensor<float> t(shape);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!f) throw io_error("load_checkpoint: " + path + " is truncated");
    params.add(name, std::move(t));
  }
  return params;
}

}  // namespace msdit
