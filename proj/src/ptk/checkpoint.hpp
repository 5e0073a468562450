#pragma once

#include <map>
#include <string>

#include "ptk/param_store.hpp"

namespace ptk {

// Checkpoint archive: fixed magic, a JSON manifest (name, dtype, shape,
// trainable flag, stage tag, architecture hash), then raw little-endian
// buffers in manifest order. Round-trips are bit-exact.
struct CheckpointMeta {
  std::string stage;
  u64 arch_hash = 0;
  std::map<std::string, std::string> extra;
};

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamStoreT<float>& params);
void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamStoreT<double>& params);

// Loads into an empty store. If expected_arch_hash is nonzero it must match
// the stored hash.
CheckpointMeta load_checkpoint(const std::string& path, ParamStoreT<float>* params,
                               u64 expected_arch_hash = 0);
CheckpointMeta load_checkpoint(const std::string& path, ParamStoreT<double>* params,
                               u64 expected_arch_hash = 0);

// Order-sensitive content hash over names, shapes and raw bytes.
u64 param_hash(const ParamStoreT<float>& params);

bool params_bit_equal(const ParamStoreT<float>& a, const ParamStoreT<float>& b);

}  // namespace ptk
