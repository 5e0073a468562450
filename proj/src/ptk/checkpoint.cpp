#include "ptk/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace ptk {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'T', 'K', 'C', 'K', 'P', 'T', '1'};

template <typename T>
const char* dtype_name();
template <>
const char* dtype_name<float>() {
  return "f32";
}
template <>
const char* dtype_name<double>() {
  return "f64";
}

template <typename T>
void save_impl(const std::string& path, const CheckpointMeta& meta,
               const ParamStoreT<T>& params) {
  nlohmann::json manifest;
  manifest["stage"] = meta.stage;
  manifest["arch_hash"] = meta.arch_hash;
  manifest["extra"] = meta.extra;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& name : params.names()) {
    const auto& t = params.get(name);
    nlohmann::json e;
    e["name"] = name;
    e["dtype"] = dtype_name<T>();
    e["shape"] = t.shape;
    e["trainable"] = params.trainable(name);
    entries.push_back(std::move(e));
  }
  manifest["entries"] = std::move(entries);
  const std::string mtext = manifest.dump();

  std::ofstream f(path, std::ios::binary);
  PTK_CHECK(f.good(), "cannot open checkpoint for writing: " << path);
  f.write(kMagic, sizeof(kMagic));
  const u64 mlen = mtext.size();
  f.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  f.write(mtext.data(), std::streamsize(mtext.size()));
  for (const auto& name : params.names()) {
    const auto& t = params.get(name);
    f.write(reinterpret_cast<const char*>(t.data.data()),
            std::streamsize(t.data.size() * sizeof(T)));
  }
  PTK_CHECK(f.good(), "checkpoint write failed: " << path);
}

template <typename T>
CheckpointMeta load_impl(const std::string& path, ParamStoreT<T>* params,
                         u64 expected_arch_hash) {
  std::ifstream f(path, std::ios::binary);
  PTK_CHECK(f.good(), "cannot open checkpoint: " << path);
  char magic[8];
  f.read(magic, sizeof(magic));
  PTK_CHECK(f.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
            "not a checkpoint archive: " << path);
  u64 mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string mtext(mlen, '\0');
  f.read(mtext.data(), std::streamsize(mlen));
  PTK_CHECK(f.good(), "truncated checkpoint manifest: " << path);
  nlohmann::json manifest = nlohmann::json::parse(mtext);

  CheckpointMeta meta;
  meta.stage = manifest.at("stage").get<std::string>();
  meta.arch_hash = manifest.at("arch_hash").get<u64>();
  meta.extra = manifest.value("extra", std::map<std::string, std::string>{});
  PTK_CHECK(expected_arch_hash == 0 || expected_arch_hash == meta.arch_hash,
            "architecture hash mismatch loading " << path << " (expected "
                << expected_arch_hash << ", found " << meta.arch_hash << ")");

  for (const auto& e : manifest.at("entries")) {
    const std::string name = e.at("name").get<std::string>();
    const std::string dtype = e.at("dtype").get<std::string>();
    PTK_CHECK(dtype == dtype_name<T>(),
              "dtype mismatch for entry " << name << ": archive has " << dtype);
    const std::vector<i64> shape = e.at("shape").get<std::vector<i64>>();
    TensorT<T> t(shape);
    f.read(reinterpret_cast<char*>(t.data.data()),
           std::streamsize(t.data.size() * sizeof(T)));
    PTK_CHECK(f.good(), "truncated checkpoint data for entry " << name);
    params->add(name, std::move(t), e.value("trainable", true));
  }
  return meta;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamStoreT<float>& params) {
  save_impl(path, meta, params);
}
void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamStoreT<double>& params) {
  save_impl(path, meta, params);
}

CheckpointMeta load_checkpoint(const std::string& path, ParamStoreT<float>* params,
                               u64 expected_arch_hash) {
  return load_impl(path, params, expected_arch_hash);
}
CheckpointMeta load_checkpoint(const std::string& path, ParamStoreT<double>* params,
                               u64 expected_arch_hash) {
  return load_impl(path, params, expected_arch_hash);
}

u64 param_hash(const ParamStoreT<float>& params) {
  u64 h = 1469598103934665603ull;
  for (const auto& name : params.names()) {
    h = fnv1a(name, h);
    const auto& t = params.get(name);
    h = fnv1a(t.shape.data(), t.shape.size() * sizeof(i64), h);
    h = fnv1a(t.data.data(), t.data.size() * sizeof(float), h);
  }
  return h;
}

bool params_bit_equal(const ParamStoreT<float>& a, const ParamStoreT<float>& b) {
  if (a.names() != b.names()) return false;
  for (const auto& name : a.names())
    if (!bit_equal(a.get(name), b.get(name))) return false;
  return true;
}

}  // namespace ptk
