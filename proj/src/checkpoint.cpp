#include "dsem/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "json.hpp"

namespace dsem {

using nlohmann::json;

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

bool Checkpoint::operator==(const Checkpoint& other) const {
  if (entries.size() != other.entries.size()) return false;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& a = entries[i];
    const auto& b = other.entries[i];
    if (a.name != b.name || !(a.shape == b.shape) || a.values.size() != b.values.size())
      return false;
    if (std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

template <typename T>
Checkpoint capture_checkpoint(std::span<const Parameter<T>* const> params) {
  Checkpoint ckpt;
  for (const Parameter<T>* p : params) {
    CheckpointEntry e;
    e.name = p->name;
    e.shape = p->tensor.shape();
    e.values.reserve(p->tensor.numel());
    for (T v : p->tensor.data()) e.values.push_back(static_cast<float>(v));
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

Checkpoint merge_checkpoints(const Checkpoint& a, const Checkpoint& b) {
  Checkpoint out = a;
  for (const auto& e : b.entries) {
    if (out.find(e.name) != nullptr) {
      throw CheckpointError("checkpoint merge: duplicate parameter '" + e.name + "'");
    }
    out.entries.push_back(e);
  }
  return out;
}

template <typename T>
void apply_checkpoint(const Checkpoint& ckpt, std::span<Parameter<T>* const> params,
                      std::span<const std::string> ignored_prefixes) {
  std::set<std::string> wanted;
  for (const Parameter<T>* p : params) {
    wanted.insert(p->name);
    const CheckpointEntry* e = ckpt.find(p->name);
    if (e == nullptr) {
      throw CheckpointError("checkpoint is missing parameter '" + p->name + "'");
    }
    if (!(e->shape == p->tensor.shape())) {
      throw CheckpointError("checkpoint parameter '" + p->name + "' has shape " +
                            e->shape.str() + ", model expects " +
                            p->tensor.shape().str());
    }
  }
  std::string unknown;
  for (const auto& e : ckpt.entries) {
    if (wanted.count(e.name)) continue;
    bool ignored = false;
    for (const auto& prefix : ignored_prefixes)
      ignored = ignored || e.name.rfind(prefix, 0) == 0;
    if (!ignored) unknown += (unknown.empty() ? "" : ", ") + e.name;
  }
  if (!unknown.empty()) {
    throw CheckpointError("checkpoint has unknown parameters: " + unknown);
  }
  for (Parameter<T>* p : params) {
    const CheckpointEntry* e = ckpt.find(p->name);
    auto dst = p->tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e->values[i]);
    std::fill(p->momentum_buffer.begin(), p->momentum_buffer.end(), T(0));
    p->tensor.zero_grad();
  }
}

Checkpoint strip_prefix(const Checkpoint& ckpt, const std::string& prefix) {
  Checkpoint out;
  for (const auto& e : ckpt.entries)
    if (e.name.rfind(prefix, 0) != 0) out.entries.push_back(e);
  return out;
}

namespace {

void put_le32(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

float get_le32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return std::bit_cast<float>(bits);
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "dsem-lab-checkpoint";
  manifest["version"] = 1;
  manifest["blob"] = "params.bin";
  manifest["params"] = json::array();
  std::string blob;
  for (const auto& e : ckpt.entries) {
    const std::size_t offset = blob.size();
    for (float v : e.values) put_le32(blob, v);
    manifest["params"].push_back({{"name", e.name},
                                  {"shape", {e.shape.n, e.shape.c, e.shape.h, e.shape.w}},
                                  {"offset", offset},
                                  {"length", blob.size() - offset}});
  }
  {
    std::ofstream os(dir / "params.bin", std::ios::binary | std::ios::trunc);
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!os) throw CheckpointError("cannot write " + (dir / "params.bin").string());
  }
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  os << manifest.dump(2) << "\n";
  if (!os) throw CheckpointError("cannot write " + (dir / "manifest.json").string());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream ms(manifest_path);
  if (!ms) throw CheckpointError("cannot open checkpoint manifest " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(ms);
  } catch (const json::exception& ex) {
    throw CheckpointError("malformed checkpoint manifest " + manifest_path.string() + ": " +
                          ex.what());
  }
  const std::string blob_name = manifest.value("blob", std::string("params.bin"));
  std::ifstream bs(dir / blob_name, std::ios::binary);
  if (!bs) throw CheckpointError("cannot open checkpoint blob " + (dir / blob_name).string());
  const std::string blob((std::istreambuf_iterator<char>(bs)), std::istreambuf_iterator<char>());

  Checkpoint ckpt;
  std::set<std::string> names;
  try {
    for (const auto& rec : manifest.at("params")) {
      CheckpointEntry e;
      e.name = rec.at("name").get<std::string>();
      const auto dims = rec.at("shape").get<std::vector<int>>();
      if (dims.size() != 4) throw CheckpointError("parameter '" + e.name + "' shape is not 4-d");
      e.shape = Shape{dims[0], dims[1], dims[2], dims[3]};
      const auto offset = rec.at("offset").get<std::size_t>();
      const auto length = rec.at("length").get<std::size_t>();
      if (length != e.shape.numel() * 4) {
        throw CheckpointError("parameter '" + e.name + "' length " + std::to_string(length) +
                              " does not match shape " + e.shape.str());
      }
      if (offset + length > blob.size()) {
        throw CheckpointError("checkpoint blob truncated: parameter '" + e.name + "' needs bytes [" +
                              std::to_string(offset) + ", " + std::to_string(offset + length) +
                              ") but blob has " + std::to_string(blob.size()));
      }
      if (!names.insert(e.name).second) {
        throw CheckpointError("duplicate parameter '" + e.name + "' in manifest");
      }
      e.values.resize(e.shape.numel());
      const auto* base = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
      for (std::size_t i = 0; i < e.values.size(); ++i) e.values[i] = get_le32(base + 4 * i);
      ckpt.entries.push_back(std::move(e));
    }
  } catch (const json::exception& ex) {
    throw CheckpointError("malformed checkpoint manifest " + manifest_path.string() + ": " +
                          ex.what());
  }
  return ckpt;
}

#define DSEM_INSTANTIATE_CKPT(T)                                              \
  template Checkpoint capture_checkpoint(std::span<const Parameter<T>* const>); \
  template void apply_checkpoint(const Checkpoint&, std::span<Parameter<T>* const>, \
                                 std::span<const std::string>);

DSEM_INSTANTIATE_CKPT(float)
DSEM_INSTANTIATE_CKPT(double)
#undef DSEM_INSTANTIATE_CKPT

}  // namespace dsem
