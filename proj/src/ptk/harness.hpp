#pragma once

// Synthetic data generators, the optional CIFAR binary loader and run
// configuration. The synthetic world drives every hermetic test: images are
// 64x64 renders of colored shapes whose latent factors (shape, color,
// position, distance) also determine captions, class labels, boxes, masks and
// depth maps, so cross-task transfer is learnable by construction.

#include <array>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ptk/tensor.hpp"

namespace ptk::harness {

// ------------------------------------------------------------------- vocab

// Toy caption vocabulary (well under the 64-token budget).
namespace vocab {
constexpr i64 kPad = 0;
constexpr i64 kMask = 1;
constexpr i64 kA = 2;
constexpr i64 kColor0 = 3;   // red green blue yellow
constexpr i64 kShape0 = 7;   // circle square triangle cross
constexpr i64 kAt = 11;
constexpr i64 kPos0 = 12;    // left right top bottom center
constexpr i64 kSize0 = 17;   // small large
constexpr i64 kSize = 19;
constexpr i64 kCaptionLen = 8;

const char* word(i64 token);
}  // namespace vocab

constexpr i64 kImageSize = 64;
constexpr i64 kShapeCount = 4;
constexpr i64 kColorCount = 4;

struct Latents {
  i64 shape = 0;
  i64 color = 0;
  double cx = 32, cy = 32;
  double dist = 2;  // in [1,3]; raised distance shrinks the object
};

struct MultimodalSample {
  Tensor image;               // [3,64,64]
  std::vector<i64> caption;   // kCaptionLen tokens, PAD-filled tail
  Latents latents;
  i64 label = 0;              // shape * kColorCount + color
};

// Deterministic paired corpus; same seed, same corpus.
std::vector<MultimodalSample> gen_multimodal(u64 seed, i64 n);

// Caption grammar: "a <color> <shape> at <pos> <size>".
std::vector<i64> caption_of(const Latents& l);

// ---------------------------------------------------------------- task data

struct ClsDataset {
  std::string id;
  i64 classes = 0;
  std::vector<Tensor> images;
  std::vector<i64> labels;
  std::vector<i64> train_idx, val_idx;
};

struct BoxAnnotation {
  std::array<double, 4> box{};  // x1,y1,x2,y2 pixels
  i64 cls = 0;
};

struct DetDataset {
  std::string id;
  i64 classes = 0;
  std::vector<Tensor> images;
  std::vector<std::vector<BoxAnnotation>> boxes;
  std::vector<i64> train_idx, val_idx;
};

struct DenseDataset {
  std::string id;
  i64 classes = 0;                // 0 for depth regression
  std::vector<Tensor> images;
  std::vector<Tensor> maps;       // [1,64,64] class ids or metric depth
  std::vector<i64> train_idx, val_idx;
};

// Consistent-latents task suite. Depth is the held-out task: generated here
// but never consumed by the upstream pretraining stages.
struct TaskSuite {
  ClsDataset cls16;       // shape x color
  ClsDataset cls_shape;   // 4-way
  ClsDataset cls_color;   // 4-way
  DetDataset det;
  DenseDataset seg;       // classes = 1 + kShapeCount (0 = background)
  DenseDataset depth;
};

TaskSuite gen_task_suite(u64 seed, i64 n = 512);

// Assemble [N,3,H,W] from per-sample tensors.
Tensor make_batch(const std::vector<Tensor>& images, const std::vector<i64>& indices);

// -------------------------------------------------------------------- CIFAR

struct CifarData {
  std::vector<Tensor> images;  // [3,32,32], exact u8 values as f32
  std::vector<i64> labels;
};

// Standard binary layout: 3,073-byte records (1 label + 3,072 pixels).
CifarData load_cifar_file(const std::string& path);

// Directory with data_batch_1..5.bin and test_batch.bin.
struct CifarSplit {
  CifarData train, test;
};
CifarSplit load_cifar_dir(const std::string& dir);

// Byte-exact re-encoding of decoded records.
std::vector<u8> encode_cifar(const CifarData& data);

// ------------------------------------------------------------------ runspec

struct RunSpec {
  std::string stage;  // amateur | expert | generalist | adapt | benchmark | nas
  u64 seed = 0;
  std::map<std::string, std::string> options;  // validated per stage
};

// Parses a JSON config document with fail-fast key validation: unknown keys
// are an error listing every offending key.
RunSpec parse_run_spec(const std::string& json_text);
const std::map<std::string, std::set<std::string>>& allowed_stage_keys();

}  // namespace ptk::harness
