#include "floorgen/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "floorgen/hash.hpp"

namespace floorgen {

namespace {

constexpr std::string_view kMagic = "FLOORGEN-CKPT\n";

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are little-endian");

std::string shape_string(const ag::Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

}  // namespace

const Archive::Entry* Archive::find(const std::string& name) const {
  for (const auto& e : tensors)
    if (e.name == name) return &e;
  return nullptr;
}

NamedParams Archive::view(const std::string& prefix) const {
  NamedParams p;
  const std::string pre = prefix.empty() ? "" : prefix + ".";
  for (const auto& e : tensors)
    if (e.name.rfind(pre, 0) == 0) p.add(e.name.substr(pre.size()), ag::Tensor::from(e.shape, e.values));
  return p;
}

void save_archive(const std::filesystem::path& path, const nlohmann::json& meta, const NamedParams& params) {
  std::string payload;
  nlohmann::json index = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : params.items) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    const auto d = t.data();
    payload.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
    offset += d.size();
  }
  nlohmann::json header{{"format", 1}, {"meta", meta}, {"tensors", index}, {"payload_values", offset},
                        {"payload_sha256", sha256_hex(payload)}};
  const std::string h = header.dump();
  const std::uint64_t len = h.size();

  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot write " + tmp.string());
    out.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out.flush()) throw IoError("checkpoint: write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("checkpoint: cannot move into place " + path.string() + ": " + ec.message());
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("checkpoint: cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string() + ": ";
  if (bytes.compare(0, kMagic.size(), kMagic) != 0) throw LoadError(where + "not a floorgen checkpoint");
  std::size_t pos = kMagic.size();
  std::uint64_t len = 0;
  if (bytes.size() < pos + sizeof len) throw LoadError(where + "truncated header");
  std::memcpy(&len, bytes.data() + pos, sizeof len);
  pos += sizeof len;
  if (bytes.size() - pos < len) throw LoadError(where + "truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(where + "corrupt header (" + e.what() + ")");
  }
  pos += len;
  const std::string_view payload(bytes.data() + pos, bytes.size() - pos);
  try {
    const auto values = header.at("payload_values").get<std::size_t>();
    if (payload.size() != values * sizeof(double)) throw LoadError(where + "payload size mismatch (truncated?)");
    if (sha256_hex(payload) != header.at("payload_sha256").get<std::string>())
      throw LoadError(where + "payload checksum mismatch");
    Archive a;
    a.meta = header.at("meta");
    for (const auto& e : header.at("tensors")) {
      Archive::Entry entry;
      entry.name = e.at("name").get<std::string>();
      entry.shape = e.at("shape").get<ag::Shape>();
      const auto off = e.at("offset").get<std::size_t>();
      std::size_t n = 1;
      for (int d : entry.shape) n *= static_cast<std::size_t>(d);
      if (off + n > values) throw LoadError(where + "tensor " + entry.name + " exceeds the payload");
      entry.values.resize(n);
      std::memcpy(entry.values.data(), payload.data() + off * sizeof(double), n * sizeof(double));
      a.tensors.push_back(std::move(entry));
    }
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(where + "corrupt header (" + e.what() + ")");
  }
}

void restore(const Archive& archive, const std::string& prefix, NamedParams& dst) {
  const std::string pre = prefix.empty() ? "" : prefix + ".";
  for (auto& [name, t] : dst.items) {
    const Archive::Entry* e = archive.find(pre + name);
    if (!e) throw LoadError("checkpoint: missing tensor " + pre + name);
    if (e->shape != t.shape())
      throw LoadError("checkpoint: tensor " + pre + name + " has shape " + shape_string(e->shape) + ", expected " +
                      shape_string(t.shape()));
    std::copy(e->values.begin(), e->values.end(), t.mutable_data().begin());
  }
}

}  // namespace floorgen
