#include <filesystem>
#include <fstream>
#include <map>

#include "doctest.h"
#include "ptk/harness.hpp"
#include "ptk/rng.hpp"

using namespace ptk;
using namespace ptk::harness;

TEST_CASE("multimodal corpus: same seed, identical corpora") {
  auto a = gen_multimodal(77, 12);
  auto b = gen_multimodal(77, 12);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(bit_equal(a[i].image, b[i].image));
    CHECK(a[i].caption == b[i].caption);
    CHECK(a[i].label == b[i].label);
  }
  auto c = gen_multimodal(78, 12);
  CHECK(!bit_equal(a[0].image, c[0].image));
}

TEST_CASE("multimodal corpus: captions name the latent factors") {
  auto corpus = gen_multimodal(5, 64);
  for (const auto& s : corpus) {
    const i64 color_tok = vocab::kColor0 + s.latents.color;
    const i64 shape_tok = vocab::kShape0 + s.latents.shape;
    bool has_color = false, has_shape = false;
    for (i64 t : s.caption) {
      has_color = has_color || t == color_tok;
      has_shape = has_shape || t == shape_tok;
    }
    CHECK(has_color);
    CHECK(has_shape);
    CHECK(i64(s.caption.size()) == vocab::kCaptionLen);
  }
  // a concrete red circle
  Latents l;
  l.shape = 0;
  l.color = 0;
  auto cap = caption_of(l);
  CHECK(std::string(vocab::word(cap[1])) == "red");
  CHECK(std::string(vocab::word(cap[2])) == "circle");
}

TEST_CASE("multimodal corpus: latent class balance within 2% of uniform") {
  auto corpus = gen_multimodal(123, 10000);
  std::map<i64, i64> counts;
  for (const auto& s : corpus) ++counts[s.label];
  CHECK(counts.size() == 16);
  for (const auto& [label, c] : counts)
    CHECK(std::abs(double(c) / 10000.0 - 1.0 / 16.0) < 0.02);
}

TEST_CASE("task suite: boxes are the bounding rectangles of the masks") {
  TaskSuite suite = gen_task_suite(9, 40);
  for (std::size_t i = 0; i < suite.det.images.size(); ++i) {
    const auto& box = suite.det.boxes[i][0].box;
    const auto& seg = suite.seg.maps[i];
    double x1 = 1e9, y1 = 1e9, x2 = -1, y2 = -1;
    for (i64 y = 0; y < kImageSize; ++y)
      for (i64 x = 0; x < kImageSize; ++x)
        if (seg.data[std::size_t(y * kImageSize + x)] > 0) {
          x1 = std::min(x1, double(x));
          y1 = std::min(y1, double(y));
          x2 = std::max(x2, double(x) + 1);
          y2 = std::max(y2, double(y) + 1);
        }
    CHECK(box[0] == x1);
    CHECK(box[1] == y1);
    CHECK(box[2] == x2);
    CHECK(box[3] == y2);
  }
}

TEST_CASE("task suite: depth maps are monotone in the distance latent") {
  TaskSuite suite = gen_task_suite(10, 60);
  // per image: object depth value and object area; among same-shape samples
  // depth must decrease as area grows (distance shrinks)
  struct Obj {
    double depth, area;
    i64 shape;
  };
  std::vector<Obj> objs;
  for (std::size_t i = 0; i < suite.depth.maps.size(); ++i) {
    const auto& d = suite.depth.maps[i];
    const auto& seg = suite.seg.maps[i];
    double depth = -1;
    double area = 0;
    i64 shape = -1;
    for (i64 p = 0; p < kImageSize * kImageSize; ++p)
      if (seg.data[std::size_t(p)] > 0) {
        depth = d.data[std::size_t(p)];
        shape = i64(seg.data[std::size_t(p)]) - 1;
        area += 1;
      }
    REQUIRE(depth > 0);
    CHECK(depth >= 1.0);
    CHECK(depth <= 3.0);
    // clipped shapes break the area<->distance relation; skip them
    const auto& box = suite.det.boxes[i][0].box;
    const bool clipped =
        box[0] <= 0 || box[1] <= 0 || box[2] >= kImageSize || box[3] >= kImageSize;
    if (!clipped) objs.push_back({depth, area, shape});
  }
  CHECK(objs.size() > 10);
  for (const auto& a : objs)
    for (const auto& b : objs)
      if (a.shape == b.shape && a.area > b.area * 1.15) CHECK(a.depth < b.depth);
}

TEST_CASE("task suite: train/val splits are disjoint and cover the corpus") {
  TaskSuite suite = gen_task_suite(11, 50);
  std::set<i64> train(suite.cls16.train_idx.begin(), suite.cls16.train_idx.end());
  std::set<i64> val(suite.cls16.val_idx.begin(), suite.cls16.val_idx.end());
  for (i64 v : val) CHECK(!train.count(v));
  CHECK(train.size() + val.size() == 50);
}

TEST_CASE("cifar: synthetic binary file round-trips byte-exactly") {
  Rng rng(21);
  const std::string path = (std::filesystem::temp_directory_path() / "ptk_cifar.bin").string();
  std::vector<u8> raw;
  const int records = 7;
  for (int r = 0; r < records; ++r) {
    raw.push_back(u8(r % 10));
    for (int i = 0; i < 3072; ++i) raw.push_back(u8(rng.uniform_int(256)));
  }
  {
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
  }
  CifarData data = load_cifar_file(path);
  CHECK(data.images.size() == records);
  CHECK(data.labels[3] == 3);
  CHECK(data.images[0].shape == std::vector<i64>{3, 32, 32});
  // decode -> re-encode is byte-identical
  CHECK(encode_cifar(data) == raw);
  std::filesystem::remove(path);
}

TEST_CASE("cifar: file-size arithmetic matches the batch convention") {
  // one batch file: 10,000 records of 3,073 bytes; five batches train
  CHECK(i64(10000) * 3073 == 30730000);
  CHECK(i64(5) * 10000 * 3073 == i64(50000) * 3073);
}

TEST_CASE("cifar: malformed record length and bad labels are errors") {
  const std::string path = (std::filesystem::temp_directory_path() / "ptk_cifar_bad.bin").string();
  {
    std::ofstream f(path, std::ios::binary);
    std::vector<char> junk(3073 * 2 + 5, 0);
    f.write(junk.data(), std::streamsize(junk.size()));
  }
  CHECK_THROWS(load_cifar_file(path));
  {
    std::ofstream f(path, std::ios::binary);
    std::vector<char> rec(3073, 0);
    rec[0] = 11;  // label out of range
    f.write(rec.data(), std::streamsize(rec.size()));
  }
  CHECK_THROWS(load_cifar_file(path));
  std::filesystem::remove(path);
}

TEST_CASE("run spec: valid config parses; unknown keys are all reported") {
  RunSpec spec = parse_run_spec(R"({"stage":"benchmark","seed":7,"percent":"10"})");
  CHECK(spec.stage == "benchmark");
  CHECK(spec.seed == 7);
  CHECK(spec.options.at("percent") == "10");

  try {
    parse_run_spec(R"({"stage":"benchmark","seed":7,"bogus":1,"wrong":2})");
    FAIL("expected validation error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("bogus") != std::string::npos);
    CHECK(msg.find("wrong") != std::string::npos);
  }
}

TEST_CASE("run spec: unknown stage and missing seed are errors") {
  CHECK_THROWS(parse_run_spec(R"({"stage":"warp","seed":1})"));
  CHECK_THROWS(parse_run_spec(R"({"stage":"benchmark"})"));
}

TEST_CASE("make_batch assembles NCHW in index order") {
  auto corpus = gen_multimodal(3, 4);
  std::vector<Tensor> imgs;
  for (const auto& s : corpus) imgs.push_back(s.image);
  Tensor b = make_batch(imgs, {2, 0});
  CHECK(b.shape == std::vector<i64>{2, 3, 64, 64});
  CHECK(b.at4(0, 0, 5, 5) == imgs[2].data[std::size_t(5 * 64 + 5)]);
  CHECK(b.at4(1, 0, 5, 5) == imgs[0].data[std::size_t(5 * 64 + 5)]);
}
