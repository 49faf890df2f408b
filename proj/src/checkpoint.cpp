#include "wcnn/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace wcnn::checkpoint {

namespace {

constexpr char kMagic[8] = {'W', 'C', 'N', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

std::size_t scalar_size(DType d) { return d == DType::f32 ? 4 : 8; }

// Byte order helpers; a no-op on little-endian hosts.
void to_little_endian(std::byte* p, std::size_t n, std::size_t width) {
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < n; i += width) std::reverse(p + i, p + i + width);
  (void)p, (void)n, (void)width;
}

template <typename T>
void write_int(std::ostream& out, T v) {
  std::byte buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  to_little_endian(buf, sizeof(T), sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_int(std::istream& in, const std::filesystem::path& path) {
  std::byte buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T)))
    throw ManifestError("checkpoint " + path.string() + ": truncated header");
  to_little_endian(buf, sizeof(T), sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

struct Opened {
  std::ifstream in;
  Manifest manifest;
  std::streamoff data_start = 0;
};

Opened open(const std::filesystem::path& path) {
  Opened o;
  o.in.open(path, std::ios::binary);
  if (!o.in) throw ManifestError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!o.in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw ManifestError(path.string() + " is not a wcnn checkpoint");
  const auto version = read_int<std::uint32_t>(o.in, path);
  if (version != kVersion)
    throw ManifestError("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
  const auto length = read_int<std::uint64_t>(o.in, path);
  std::string text(length, '\0');
  if (!o.in.read(text.data(), static_cast<std::streamsize>(length)))
    throw ManifestError("checkpoint " + path.string() + ": truncated manifest");
  o.data_start = o.in.tellg();

  try {
    const auto j = nlohmann::json::parse(text);
    o.manifest.config_text = j.value("config", "");
    for (const auto& t : j.at("tensors")) {
      Entry e;
      e.name = t.at("name").get<std::string>();
      const auto dims = t.at("dims").get<std::vector<std::int64_t>>();
      if (dims.size() != 4) throw ManifestError("tensor '" + e.name + "' does not have 4 dims");
      e.shape = {dims[0], dims[1], dims[2], dims[3]};
      e.dtype = parse_dtype(t.at("dtype").get<std::string>());
      e.offset = t.at("offset").get<std::uint64_t>();
      e.nbytes = t.at("nbytes").get<std::uint64_t>();
      if (e.nbytes != static_cast<std::uint64_t>(e.shape.numel()) * scalar_size(e.dtype))
        throw ManifestError("tensor '" + e.name + "': byte count disagrees with dims");
      o.manifest.tensors.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ManifestError("checkpoint " + path.string() + ": bad manifest: " + ex.what());
  }
  return o;
}

Tensor read_entry(Opened& o, const Entry& e, const std::filesystem::path& path) {
  Tensor t(e.shape, e.dtype);
  auto bytes = t.mutable_bytes();
  o.in.seekg(o.data_start + static_cast<std::streamoff>(e.offset));
  if (!o.in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(e.nbytes)))
    throw ManifestError("checkpoint " + path.string() + ": data for '" + e.name + "' is truncated");
  to_little_endian(bytes.data(), bytes.size(), scalar_size(e.dtype));
  return t;
}

}  // namespace

void save(const std::filesystem::path& path, const ParamStore& store, const std::string& config_text) {
  if (!store.allocated()) throw ContractError("checkpoint::save: parameters are not initialized");
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& spec : store.specs()) {
    const Tensor& t = store.get(spec.name);
    const std::uint64_t nbytes = t.bytes().size();
    tensors.push_back({{"name", spec.name},
                       {"dims", {t.shape().n, t.shape().c, t.shape().h, t.shape().w}},
                       {"dtype", to_string(t.dtype())},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string manifest = nlohmann::json{{"config", config_text}, {"tensors", tensors}}.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(kMagic, 8);
    write_int<std::uint32_t>(out, kVersion);
    write_int<std::uint64_t>(out, manifest.size());
    out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    std::vector<std::byte> buf;
    for (const auto& spec : store.specs()) {
      const Tensor& t = store.get(spec.name);
      buf.assign(t.bytes().begin(), t.bytes().end());
      to_little_endian(buf.data(), buf.size(), scalar_size(t.dtype()));
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    }
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Manifest read_manifest(const std::filesystem::path& path) { return open(path).manifest; }

std::map<std::string, Tensor> read_tensors(const std::filesystem::path& path) {
  Opened o = open(path);
  std::map<std::string, Tensor> out;
  for (const auto& e : o.manifest.tensors) out.emplace(e.name, read_entry(o, e, path));
  return out;
}

void load_into(const std::filesystem::path& path, ParamStore& store) {
  if (!store.allocated()) throw ContractError("checkpoint::load_into: initialize the store first");
  Opened o = open(path);
  std::map<std::string, const Entry*> by_name;
  for (const auto& e : o.manifest.tensors) by_name.emplace(e.name, &e);

  // Validate everything before touching the store.
  for (const auto& spec : store.specs()) {
    auto it = by_name.find(spec.name);
    if (it == by_name.end())
      throw ManifestError("checkpoint " + path.string() + " has no tensor '" + spec.name + "'");
    if (it->second->shape != spec.shape)
      throw ManifestError("checkpoint tensor '" + spec.name + "' has dims " + it->second->shape.str() +
                          ", model expects " + spec.shape.str());
  }
  for (const auto& e : o.manifest.tensors)
    if (!store.contains(e.name))
      throw ManifestError("checkpoint tensor '" + e.name + "' does not exist in the model");

  for (const auto& spec : store.specs()) {
    Tensor t = read_entry(o, *by_name.at(spec.name), path);
    store.get(spec.name) = t.dtype() == store.dtype() ? std::move(t) : t.cast(store.dtype());
  }
}

}  // namespace wcnn::checkpoint
