#include "pibnas/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <fmt/format.h>

namespace pibnas {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw CheckpointError(fmt::format("checkpoint truncated while reading {}", what));
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint: " + path.string());
  out.write("PIBW", 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape& s = t.shape();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.rank()));
    for (std::int64_t d : s.dims()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    for (Real v : t.data()) put<float>(out, static_cast<float>(v));
  }
  if (!out) throw CheckpointError("failed writing checkpoint: " + path.string());
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "PIBW", 4) != 0) {
    throw CheckpointError("not a PIBW checkpoint: " + path.string());
  }
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(fmt::format("unsupported checkpoint version {}", version));
  }
  const auto count = get<std::uint32_t>(in, "tensor count");
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in, "name length");
    if (len > (1u << 16)) throw CheckpointError("checkpoint tensor name too long");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw CheckpointError("checkpoint truncated in name");
    const auto rank = get<std::uint32_t>(in, "rank");
    if (rank > 4) throw CheckpointError(fmt::format("tensor '{}' has rank {} > 4", name, rank));
    std::vector<std::int64_t> dims(rank);
    for (auto& d : dims) d = static_cast<std::int64_t>(get<std::uint64_t>(in, "dims"));
    const Shape shape(dims);
    std::vector<Real> values(static_cast<std::size_t>(shape.numel()));
    for (auto& v : values) v = static_cast<Real>(get<float>(in, "values"));
    out.emplace_back(std::move(name), Tensor::from(shape, std::move(values)));
  }
  return out;
}

void restore_checkpoint(const NamedTensors& loaded, NamedTensors& target) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : loaded) by_name[name] = &t;
  for (auto& [name, t] : target) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw CheckpointMismatch(name, fmt::format("checkpoint is missing tensor '{}'", name));
    }
    if (!(it->second->shape() == t.shape())) {
      throw CheckpointMismatch(name, fmt::format("tensor '{}' has shape {} in checkpoint, model expects {}",
                                                 name, it->second->shape().to_string(),
                                                 t.shape().to_string()));
    }
  }
  if (loaded.size() != target.size()) {
    std::map<std::string, bool> expected;
    for (const auto& [name, t] : target) expected[name] = true;
    for (const auto& [name, t] : loaded) {
      if (!expected.count(name)) {
        throw CheckpointMismatch(name, fmt::format("checkpoint has unexpected tensor '{}'", name));
      }
    }
  }
  for (auto& [name, t] : target) t.copy_from(by_name[name]->data());
}

}  // namespace pibnas
