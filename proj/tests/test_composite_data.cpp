#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "dualharm/composite_data.hpp"
#include "dualharm/synthetic.hpp"

using namespace dualharm;
using namespace dualharm::data;
namespace fs = std::filesystem;

namespace {

// Photo with a filled axis-aligned block of the given size at the origin.
struct Block {
  Tensor<float> photo;
  Tensor<float> mask;
};

Block block(int size, int bh, int bw) {
  Block b{Tensor<float>(1, 3, size, size, 0.9f), Tensor<float>(1, 1, size, size)};
  for (int y = 0; y < bh; ++y)
    for (int x = 0; x < bw; ++x) {
      b.mask(0, 0, y, x) = 1;
      b.photo(0, 0, y, x) = 0.1f;
    }
  return b;
}

fs::path scratch_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("dualharm_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("foreground_ratio", "[data]") {
  CHECK(foreground_ratio(Tensor<float>(1, 1, 16, 16, 1.0f)) == 1.0);
  CHECK(foreground_ratio(Tensor<float>(1, 1, 16, 16)) == 0.0);
  CHECK(foreground_ratio(block(32, 8, 8).mask) == 0.0625);
  Tensor<float> soft(1, 1, 4, 4, 0.5f);
  CHECK_THROWS_AS(foreground_ratio(soft), std::invalid_argument);
}

TEST_CASE("downsample_mask", "[data]") {
  CHECK(downsample_mask(Tensor<float>(1, 1, 256, 256, 1.0f), 4) == Tensor<float>(1, 1, 32, 32, 1.0f));

  Tensor<float> left(1, 1, 256, 256);
  for (int y = 0; y < 256; ++y)
    for (int x = 0; x < 128; ++x) left(0, 0, y, x) = 1;
  auto half = downsample_mask(left, 2);
  REQUIRE(half.shape() == Shape{1, 1, 128, 128});
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 128; ++x) CHECK(half(0, 0, y, x) == (x < 64 ? 1.0f : 0.0f));

  // Every 2^k pool of a 1x1 checkerboard averages exactly 0.5, which rounds up.
  Tensor<float> checker(1, 1, 64, 64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) checker(0, 0, y, x) = static_cast<float>((x + y) % 2);
  for (int level : {2, 3, 4}) {
    auto d = downsample_mask(checker, level);
    for (float v : d) CHECK(v == 1.0f);
  }

  CHECK(downsample_mask(left, 1) == left);
  CHECK(pool_mask(half, 1) == half);
  CHECK_THROWS_AS(downsample_mask(Tensor<float>(1, 1, 30, 30), 3), std::invalid_argument);
  CHECK_THROWS_AS(downsample_mask(left, 5), std::invalid_argument);
  CHECK(downsample_mask_to_grid(left, 4).shape() == Shape{1, 1, 4, 4});
}

TEST_CASE("build_composite preserves the background outside the mask", "[data]") {
  auto b = block(64, 20, 20);  // 400 / 4096 ~ 0.098
  auto painting = synthetic::painting<float>(64, 5);
  auto s = build_composite(b.photo, b.mask, painting, 42);
  CHECK(foreground_ratio(s.mask) == Catch::Approx(400.0 / 4096.0));
  CHECK(s.background == painting);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (s.mask(0, 0, y, x) == 0.0f) CHECK(s.composite(0, c, y, x) == painting(0, c, y, x));
  CHECK(s.meta.paste.scale == 1.0);
}

TEST_CASE("build_composite rejects objects that cannot reach the ratio range", "[data]") {
  auto painting = synthetic::painting<float>(100, 1);
  auto tiny = block(100, 10, 20);  // ratio 0.02
  CHECK_THROWS_AS(build_composite(tiny.photo, tiny.mask, painting, 1), CompositeRejected);
  CHECK_THROWS_AS(build_composite(tiny.photo, Tensor<float>(1, 1, 100, 100), painting, 1), CompositeRejected);

  auto small = block(100, 20, 20);  // 0.04, reachable by upscaling
  auto s = build_composite(small.photo, small.mask, painting, 3);
  CHECK(s.meta.paste.scale > 1.0);
  const double r = foreground_ratio(s.mask);
  CHECK(r >= 0.05);
  CHECK(r <= 0.3);
}

TEST_CASE("build_composite is deterministic in its seed", "[data]") {
  auto b = block(64, 16, 24);
  auto painting = synthetic::painting<float>(64, 9);
  auto a = build_composite(b.photo, b.mask, painting, 77);
  auto c = build_composite(b.photo, b.mask, painting, 77);
  CHECK(a.composite == c.composite);
  CHECK(a.mask == c.mask);
  bool moved = false;
  for (std::uint64_t seed = 78; seed < 90 && !moved; ++seed)
    moved = build_composite(b.photo, b.mask, painting, seed).meta.paste.top != a.meta.paste.top ||
            build_composite(b.photo, b.mask, painting, seed).meta.paste.left != a.meta.paste.left;
  CHECK(moved);
}

TEST_CASE("manifest round trip and validation", "[data]") {
  auto dir = scratch_dir("manifest");
  DatasetManifest m;
  m.seed = 5;
  m.records.push_back({"a.png", "a_mask.png", "p.png", "train", "", "", ""});
  m.records.push_back({"b.png", "b_mask.png", "q.png", "test", "c.png", "bg.png", "m.png"});
  m.save(dir / "manifest.jsonl");
  auto back = DatasetManifest::load(dir / "manifest.jsonl");
  CHECK(back.seed == 5);
  REQUIRE(back.records.size() == 2);
  CHECK(back.records[1].prebuilt());
  CHECK(back.records[1].split == "test");
  CHECK(back.resolve("x.png") == dir / "x.png");

  std::ofstream(dir / "bad.jsonl") << R"({"format":"dualharm-manifest","version":1,"seed":1})" << '\n'
                                   << R"({"photo":"a","mask":"b","painting":"c","split":"val"})" << '\n';
  CHECK_THROWS_WITH(DatasetManifest::load(dir / "bad.jsonl"), Catch::Matchers::ContainsSubstring("bad.jsonl:2"));
}

TEST_CASE("dataset iteration", "[data]") {
  auto dir = scratch_dir("iterate");
  synthetic::write_corpus(dir / "raw", 24, 64, 11);
  auto summary = build_dataset(dir / "raw" / "photos", dir / "raw" / "paintings", dir / "built", 3);
  CHECK(summary.built + summary.rejected == 24);
  REQUIRE(summary.built >= 16);

  auto manifest = DatasetManifest::load(summary.manifest);
  manifest.records.resize(16);
  DatasetIterator<float> it(manifest, 4, 99, 32);
  auto epoch = it.epoch();
  CHECK(epoch.size() == 4);
  std::vector<std::size_t> seen;
  for (const auto& b : epoch) {
    CHECK(b.composite.shape() == Shape{4, 3, 32, 32});
    seen.insert(seen.end(), b.records.begin(), b.records.end());
    for (float v : b.mask) CHECK((v == 0.0f || v == 1.0f));
  }
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < 16; ++i) CHECK(seen[i] == i);

  DatasetIterator<float> again(manifest, 4, 99, 32);
  auto epoch2 = again.epoch();
  for (std::size_t i = 0; i < 4; ++i) CHECK(epoch2[i].records == epoch[i].records);

  // Resized all-ones masks stay all ones.
  auto full = Tensor<float>(1, 1, 64, 64, 1.0f);
  CHECK(binarize(resize_bilinear(full, 32, 32)) == Tensor<float>(1, 1, 32, 32, 1.0f));

  // next() continues across epochs in the same order as epoch().
  DatasetIterator<float> stream(manifest, 4, 99, 32);
  for (std::size_t i = 0; i < 4; ++i) CHECK(stream.next().records == epoch[i].records);
  CHECK(stream.next().records == again.epoch()[0].records);
}

TEST_CASE("iteration skips unreadable records and fails when none load", "[data]") {
  auto dir = scratch_dir("unreadable");
  synthetic::write_corpus(dir / "raw", 6, 64, 2);
  auto summary = build_dataset(dir / "raw" / "photos", dir / "raw" / "paintings", dir / "built", 4);
  auto manifest = DatasetManifest::load(summary.manifest);
  const std::size_t good = manifest.records.size();
  manifest.records.push_back({"", "", "", "train", "missing.png", "missing_bg.png", "missing_mask.png"});
  DatasetIterator<float> it(manifest, 2, 1, 32);
  std::size_t total = 0;
  for (const auto& b : it.epoch()) total += b.size();
  CHECK(total == good);

  DatasetManifest broken;
  broken.base_dir = dir;
  broken.records.push_back({"", "", "", "train", "nope.png", "nope.png", "nope.png"});
  DatasetIterator<float> bad(broken, 1, 1, 32);
  CHECK_THROWS_AS(bad.epoch(), std::runtime_error);
  CHECK_THROWS_AS(bad.next(), std::runtime_error);
}

TEST_CASE("PNG round trip", "[data]") {
  auto dir = scratch_dir("png");
  auto img = synthetic::painting<float>(16, 1);
  write_png(dir / "p.png", img);
  auto back = read_image<float>(dir / "p.png");
  CHECK(max_abs_diff(back, img) <= 0.5f / 255.0f + 1e-6f);
  CHECK_THROWS_AS(read_image<float>(dir / "none.png"), ImageIoError);
}
