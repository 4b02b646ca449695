#include "driftlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "driftlab/corpus.hpp"
#include "driftlab/hashing.hpp"

namespace driftlab {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes little-endian hosts");

namespace {

constexpr char kMagic[8] = {'D', 'L', 'C', 'K', 'P', 'T', 0, 0};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("checkpoint: truncated header");
  return v;
}

}  // namespace

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor;
  throw DataError("checkpoint: missing tensor '" + name + "'");
}

void write_checkpoint(std::ostream& os, const nlohmann::json& meta, const std::vector<NamedTensor>& tensors) {
  nlohmann::json header;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) header["tensors"].push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
  const std::string text = header.dump();
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    const auto d = t.tensor.data();
    os.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!os) throw DataError("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("checkpoint: bad magic");
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto header_len = get<std::uint64_t>(is);
  if (header_len > (1u << 26)) throw DataError("checkpoint: implausible header length");
  std::string text(header_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(header_len))) throw DataError("checkpoint: truncated header");
  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(text);
    ck.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
      Shape shape = entry.at("shape").get<Shape>();
      std::size_t n = 1;
      for (auto s : shape) n *= s;
      std::vector<double> data(n);
      if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
        throw DataError("checkpoint: truncated payload");
      }
      ck.tensors.push_back({entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const std::vector<NamedTensor>& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("checkpoint: cannot open " + tmp);
    write_checkpoint(os, meta, tensors);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path.string());
  return read_checkpoint(is);
}

std::string checkpoint_hash(const nlohmann::json& meta, const std::vector<NamedTensor>& tensors) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, meta, tensors);
  return sha256_hex(os.str());
}

void assign_tensors(const std::vector<NamedTensor>& target, const Checkpoint& source) {
  for (const auto& t : target) {
    const Tensor& src = source.get(t.name);
    if (src.shape() != t.tensor.shape()) {
      throw DataError("checkpoint: tensor '" + t.name + "' has shape " + shape_string(src.shape()) +
                      ", expected " + shape_string(t.tensor.shape()));
    }
    Tensor dst = t.tensor;
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
}

}  // namespace driftlab
