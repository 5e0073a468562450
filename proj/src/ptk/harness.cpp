#include "ptk/harness.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "ptk/rng.hpp"

namespace ptk::harness {

namespace vocab {
const char* word(i64 token) {
  static const char* kWords[] = {"<pad>",  "<mask>", "a",      "red",    "green",
                                 "blue",   "yellow", "circle", "square", "triangle",
                                 "cross",  "at",     "left",   "right",  "top",
                                 "bottom", "center", "small",  "large"};
  PTK_CHECK(token >= 0 && token < kSize, "vocab: token out of range");
  return kWords[token];
}
}  // namespace vocab

namespace {

const double kColors[kColorCount][3] = {{0.85, 0.15, 0.15},
                                        {0.15, 0.80, 0.20},
                                        {0.15, 0.25, 0.85},
                                        {0.85, 0.80, 0.15}};

bool inside_shape(i64 shape, double x, double y, double cx, double cy, double r) {
  const double dx = x - cx, dy = y - cy;
  switch (shape) {
    case 0:  // circle
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case 2:  // triangle, apex up
      return dy >= -r && dy <= r && std::abs(dx) <= 0.6 * (dy + r);
    default:  // cross
      return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) ||
             (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
  }
}

Tensor render(const Latents& l, Rng& noise) {
  Tensor img({3, kImageSize, kImageSize});
  const double r = 24.0 / l.dist;
  for (i64 y = 0; y < kImageSize; ++y)
    for (i64 x = 0; x < kImageSize; ++x) {
      const bool in = inside_shape(l.shape, double(x), double(y), l.cx, l.cy, r);
      for (i64 c = 0; c < 3; ++c) {
        double v = in ? kColors[l.color][c] : 0.10;
        v += noise.uniform(-0.02, 0.02);
        img.data[std::size_t((c * kImageSize + y) * kImageSize + x)] = float(v);
      }
    }
  return img;
}

// object pixel mask; used for boxes and segmentation so they stay consistent
std::vector<bool> shape_mask(const Latents& l) {
  std::vector<bool> m(std::size_t(kImageSize * kImageSize), false);
  const double r = 24.0 / l.dist;
  for (i64 y = 0; y < kImageSize; ++y)
    for (i64 x = 0; x < kImageSize; ++x)
      m[std::size_t(y * kImageSize + x)] =
          inside_shape(l.shape, double(x), double(y), l.cx, l.cy, r);
  return m;
}

i64 position_token(const Latents& l) {
  if (l.cx < 24) return vocab::kPos0 + 0;       // left
  if (l.cx > 40) return vocab::kPos0 + 1;       // right
  if (l.cy < 24) return vocab::kPos0 + 2;       // top
  if (l.cy > 40) return vocab::kPos0 + 3;       // bottom
  return vocab::kPos0 + 4;                      // center
}

Latents draw_latents(Rng& rng) {
  Latents l;
  l.shape = rng.uniform_int(kShapeCount);
  l.color = rng.uniform_int(kColorCount);
  l.cx = rng.uniform(18.0, 46.0);
  l.cy = rng.uniform(18.0, 46.0);
  l.dist = rng.uniform(1.0, 3.0);
  return l;
}

void fill_splits(i64 n, std::vector<i64>* train, std::vector<i64>* val) {
  const i64 cut = n - std::max<i64>(1, n / 5);
  for (i64 i = 0; i < n; ++i)
    (i < cut ? train : val)->push_back(i);
}

}  // namespace

std::vector<i64> caption_of(const Latents& l) {
  std::vector<i64> c = {vocab::kA,
                        vocab::kColor0 + l.color,
                        vocab::kShape0 + l.shape,
                        vocab::kAt,
                        position_token(l),
                        vocab::kSize0 + (l.dist < 2.0 ? 1 : 0)};
  while (i64(c.size()) < vocab::kCaptionLen) c.push_back(vocab::kPad);
  return c;
}

std::vector<MultimodalSample> gen_multimodal(u64 seed, i64 n) {
  PTK_CHECK(n >= 1, "gen_multimodal: n must be >= 1");
  Rng rng(fnv1a("multimodal", seed));
  std::vector<MultimodalSample> out;
  out.reserve(std::size_t(n));
  for (i64 i = 0; i < n; ++i) {
    MultimodalSample s;
    s.latents = draw_latents(rng);
    s.image = render(s.latents, rng);
    s.caption = caption_of(s.latents);
    s.label = s.latents.shape * kColorCount + s.latents.color;
    out.push_back(std::move(s));
  }
  return out;
}

TaskSuite gen_task_suite(u64 seed, i64 n) {
  auto corpus = gen_multimodal(fnv1a("task-suite", seed), n);
  TaskSuite suite;
  suite.cls16.id = "syn-cls16";
  suite.cls16.classes = kShapeCount * kColorCount;
  suite.cls_shape.id = "syn-shape";
  suite.cls_shape.classes = kShapeCount;
  suite.cls_color.id = "syn-color";
  suite.cls_color.classes = kColorCount;
  suite.det.id = "syn-det";
  suite.det.classes = kShapeCount;
  suite.seg.id = "syn-seg";
  suite.seg.classes = 1 + kShapeCount;
  suite.depth.id = "syn-depth";

  for (const auto& s : corpus) {
    suite.cls16.images.push_back(s.image);
    suite.cls16.labels.push_back(s.label);
    suite.cls_shape.images.push_back(s.image);
    suite.cls_shape.labels.push_back(s.latents.shape);
    suite.cls_color.images.push_back(s.image);
    suite.cls_color.labels.push_back(s.latents.color);

    const auto mask = shape_mask(s.latents);
    double x1 = kImageSize, y1 = kImageSize, x2 = -1, y2 = -1;
    Tensor seg_map({1, kImageSize, kImageSize});
    Tensor depth_map({1, kImageSize, kImageSize});
    for (i64 y = 0; y < kImageSize; ++y)
      for (i64 x = 0; x < kImageSize; ++x) {
        const bool in = mask[std::size_t(y * kImageSize + x)];
        seg_map.data[std::size_t(y * kImageSize + x)] = in ? float(1 + s.latents.shape) : 0.0f;
        depth_map.data[std::size_t(y * kImageSize + x)] = in ? float(s.latents.dist) : 4.0f;
        if (in) {
          x1 = std::min(x1, double(x));
          y1 = std::min(y1, double(y));
          x2 = std::max(x2, double(x));
          y2 = std::max(y2, double(y));
        }
      }
    PTK_CHECK(x2 >= x1 && y2 >= y1, "task suite: object rendered off-screen");
    suite.det.images.push_back(s.image);
    suite.det.boxes.push_back({BoxAnnotation{{x1, y1, x2 + 1, y2 + 1}, s.latents.shape}});
    suite.seg.images.push_back(s.image);
    suite.seg.maps.push_back(seg_map);
    suite.depth.images.push_back(s.image);
    suite.depth.maps.push_back(depth_map);
  }
  fill_splits(n, &suite.cls16.train_idx, &suite.cls16.val_idx);
  suite.cls_shape.train_idx = suite.cls16.train_idx;
  suite.cls_shape.val_idx = suite.cls16.val_idx;
  suite.cls_color.train_idx = suite.cls16.train_idx;
  suite.cls_color.val_idx = suite.cls16.val_idx;
  suite.det.train_idx = suite.cls16.train_idx;
  suite.det.val_idx = suite.cls16.val_idx;
  suite.seg.train_idx = suite.cls16.train_idx;
  suite.seg.val_idx = suite.cls16.val_idx;
  suite.depth.train_idx = suite.cls16.train_idx;
  suite.depth.val_idx = suite.cls16.val_idx;
  return suite;
}

Tensor make_batch(const std::vector<Tensor>& images, const std::vector<i64>& indices) {
  PTK_CHECK(!indices.empty(), "make_batch: empty index list");
  const auto& first = images.at(std::size_t(indices[0]));
  Tensor out({i64(indices.size()), first.shape[0], first.shape[1], first.shape[2]});
  const i64 per = first.numel();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& img = images.at(std::size_t(indices[i]));
    PTK_CHECK(img.numel() == per, "make_batch: inconsistent image shapes");
    std::copy(img.data.begin(), img.data.end(), out.data.begin() + i64(i) * per);
  }
  return out;
}

// ----------------------------------------------------------------- CIFAR

namespace {
constexpr i64 kCifarRecord = 3073;
constexpr i64 kCifarPixels = 3072;
}  // namespace

CifarData load_cifar_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  PTK_CHECK(f.good(), "cifar: cannot open " << path);
  f.seekg(0, std::ios::end);
  const i64 size = i64(f.tellg());
  f.seekg(0);
  PTK_CHECK(size > 0 && size % kCifarRecord == 0,
            "cifar: malformed file size " << size << " (want a multiple of 3073)");
  const i64 records = size / kCifarRecord;
  CifarData out;
  std::vector<u8> rec(std::size_t(kCifarRecord), 0);
  for (i64 r = 0; r < records; ++r) {
    f.read(reinterpret_cast<char*>(rec.data()), kCifarRecord);
    PTK_CHECK(f.good(), "cifar: truncated record " << r);
    const i64 label = rec[0];
    PTK_CHECK(label >= 0 && label <= 9, "cifar: label out of range in record " << r);
    out.labels.push_back(label);
    Tensor img({3, 32, 32});
    for (i64 i = 0; i < kCifarPixels; ++i) img.data[std::size_t(i)] = float(rec[std::size_t(1 + i)]);
    out.images.push_back(std::move(img));
  }
  return out;
}

CifarSplit load_cifar_dir(const std::string& dir) {
  CifarSplit split;
  for (int b = 1; b <= 5; ++b) {
    CifarData batch = load_cifar_file(dir + "/data_batch_" + std::to_string(b) + ".bin");
    for (std::size_t i = 0; i < batch.images.size(); ++i) {
      split.train.images.push_back(std::move(batch.images[i]));
      split.train.labels.push_back(batch.labels[i]);
    }
  }
  split.test = load_cifar_file(dir + "/test_batch.bin");
  PTK_CHECK(split.train.images.size() == 50000, "cifar: expected 50,000 training records");
  PTK_CHECK(split.test.images.size() == 10000, "cifar: expected 10,000 test records");
  return split;
}

std::vector<u8> encode_cifar(const CifarData& data) {
  std::vector<u8> out;
  out.reserve(data.images.size() * std::size_t(kCifarRecord));
  for (std::size_t r = 0; r < data.images.size(); ++r) {
    out.push_back(u8(data.labels[r]));
    for (float v : data.images[r].data) out.push_back(u8(std::lround(v)));
  }
  return out;
}

// ----------------------------------------------------------------- runspec

const std::map<std::string, std::set<std::string>>& allowed_stage_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"amateur",
       {"alpha", "tau_init", "queue_capacity", "monitor_threshold", "proposal_count",
        "ema_momentum", "steps", "local_steps", "batch", "lr", "corpus", "embed_dim",
        "arch", "out"}},
      {"expert",
       {"task", "datasets", "scheme", "init", "steps", "batch", "lr", "weight_decay",
        "head_weight_decay", "corpus", "arch", "out", "synonyms"}},
      {"generalist",
       {"experts", "scheme", "module", "steps", "batch", "lr", "warmup", "corpus", "arch",
        "out"}},
      {"adapt",
       {"init", "rerepresenter", "task", "contrastive", "stage3_steps", "stage4_steps",
        "batch", "percent", "corpus", "arch", "out", "codebook_size", "commitment_beta"}},
      {"benchmark", {"model", "suite", "percent", "protocol", "corpus", "arch", "out"}},
      {"nas",
       {"space", "budget", "topk", "oracle", "alpha", "target_flops", "resolution",
        "corpus", "out"}},
  };
  return keys;
}

RunSpec parse_run_spec(const std::string& json_text) {
  nlohmann::json doc = nlohmann::json::parse(json_text);
  RunSpec spec;
  PTK_CHECK(doc.contains("stage"), "run spec: missing required key 'stage'");
  PTK_CHECK(doc.contains("seed"), "run spec: missing required key 'seed' (seeds are mandatory)");
  spec.stage = doc.at("stage").get<std::string>();
  const auto& allowed_map = allowed_stage_keys();
  auto it = allowed_map.find(spec.stage);
  PTK_CHECK(it != allowed_map.end(), "run spec: unknown stage '" << spec.stage << "'");
  spec.seed = doc.at("seed").get<u64>();
  std::vector<std::string> offending;
  for (const auto& [key, value] : doc.items()) {
    if (key == "stage" || key == "seed") continue;
    if (!it->second.count(key)) {
      offending.push_back(key);
      continue;
    }
    if (value.is_string())
      spec.options[key] = value.get<std::string>();
    else
      spec.options[key] = value.dump();
  }
  if (!offending.empty()) {
    std::string msg = "run spec: unknown keys for stage '" + spec.stage + "':";
    for (const auto& k : offending) msg += " " + k;
    PTK_FAIL(msg);
  }
  return spec;
}

}  // namespace ptk::harness
