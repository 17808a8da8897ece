#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "dualharm/trainer.hpp"
#include "support_fs.hpp"

using namespace dualharm;
using namespace dualharm::train;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(const std::string& preset_name = "V5") {
  TrainConfig c;
  c.image_size = 128;
  c.n = 2;
  c.width = 1.0 / 16;
  c.batch_size = 2;
  c.iterations = 4;
  c.ablation = preset(preset_name);
  c.seed = 5;
  return c;
}

data::Batch<float> tiny_batch(int size = 128, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  data::Batch<float> b{random_uniform<float>(Shape{2, 3, size, size}, rng, 0, 1),
                       random_uniform<float>(Shape{2, 3, size, size}, rng, 0, 1), Tensor<float>(Shape{2, 1, size, size}), {0, 1}};
  for (int n = 0; n < 2; ++n)
    for (int y = size / 4; y < size / 2 + size / 8; ++y)
      for (int x = size / 4; x < size / 2; ++x) b.mask(n, 0, y, x) = 1;
  return b;
}

std::vector<Tensor<float>> values(const ParamList<float>& pl) {
  std::vector<Tensor<float>> out;
  for (auto& p : pl.params) out.push_back(p.var->value);
  return out;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

}  // namespace

TEST_CASE("ablation presets map to flag triples", "[trainer]") {
  CHECK(preset("V1") == Ablation{false, false, false});
  CHECK(preset("V2") == Ablation{true, false, false});
  CHECK(preset("V3") == Ablation{true, true, false});
  CHECK(preset("V4") == Ablation{false, true, true});
  CHECK(preset("V5") == Ablation{true, true, true});
  CHECK_THROWS_AS(preset("V6"), ConfigError);
}

TEST_CASE("config defaults and validation", "[trainer]") {
  TrainConfig c;
  CHECK(c.image_size == 256);
  CHECK(c.n == 4);
  CHECK(c.batch_size == 4);
  CHECK(c.adam.learning_rate == 2e-4);
  CHECK(c.adam.beta1 == 0.5);
  CHECK(c.adam.beta2 == 0.999);
  CHECK(c.weights.lambda_c == 2.0);
  CHECK(c.weights.lambda_adv == 10.0);
  CHECK_NOTHROW(c.validate());
  c.image_size = 128;
  CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("64*n"));
  c.ablation = preset("V2");
  CHECK_NOTHROW(c.validate());
  c.adam.learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config file parsing and diagnostics", "[trainer]") {
  auto dir = testing::scratch_dir("config");
  write_text(dir / "ok.json", R"({"image_size": 128, "n": 2, "width": 0.125, "preset": "V3",
    "weights": {"lambda_c": 1.5}, "manifest": "data/manifest.jsonl", "output_dir": "out"})");
  auto c = load_config(dir / "ok.json");
  CHECK(c.image_size == 128);
  CHECK(c.weights.lambda_c == 1.5);
  CHECK(c.weights.lambda_adv == 10.0);
  CHECK(c.ablation == preset("V3"));
  CHECK(c.manifest == "data/manifest.jsonl");  // left relative to the working directory

  write_text(dir / "syntax.json", "{\n  \"n\": 2,\n  \"width\": ,\n}");
  CHECK_THROWS_WITH(load_config(dir / "syntax.json"), Catch::Matchers::ContainsSubstring("syntax.json:3:"));
  write_text(dir / "unknown.json", R"({"image_size": 256, "colour": 3})");
  CHECK_THROWS_WITH(load_config(dir / "unknown.json"), Catch::Matchers::ContainsSubstring("field 'colour': unknown field"));
  write_text(dir / "type.json", R"({"ablation": {"use_resfft": 1}})");
  CHECK_THROWS_WITH(load_config(dir / "type.json"), Catch::Matchers::ContainsSubstring("field 'ablation.use_resfft'"));
  write_text(dir / "range.json", R"({"image_size": 128})");
  CHECK_THROWS_WITH(load_config(dir / "range.json"), Catch::Matchers::ContainsSubstring("64*n"));
  CHECK_THROWS_AS(load_config(dir / "absent.json"), ConfigError);

  auto round = config_from_json(config_to_json(c));
  CHECK(config_hash(round) == config_hash(c));
  auto other = c;
  other.weights.lambda_adv = 3;
  CHECK(config_hash(other) != config_hash(c));
  other = c;
  other.iterations = 999;
  CHECK(config_hash(other) == config_hash(c));
}

TEST_CASE("V1 step runs without a discriminator", "[trainer]") {
  auto s = TrainState<float>::create(tiny_config("V1"));
  CHECK_FALSE(s.d);
  auto r = train_step(s, tiny_batch());
  CHECK_FALSE(r.d_adv.has_value());
  CHECK(r.g_adv == 0.0);
  CHECK(r.total_g == Catch::Approx(r.style + 2 * r.content).epsilon(1e-5));
  CHECK(s.iteration == 1);
  CHECK(report_to_json(1, r, 0.0, false)["d_adv"].is_null());
}

TEST_CASE("V5 step reports every term and keeps the encoder frozen", "[trainer]") {
  auto s = TrainState<float>::create(tiny_config("V5"));
  const auto enc_before = values(s.g->encoder().params());
  const auto dec_before = values(s.g->trainable());
  const auto d_before = values(s.d->params());
  for (int k = 0; k < 2; ++k) {
    auto r = train_step(s, tiny_batch(128, k));
    REQUIRE(r.d_adv.has_value());
    CHECK(*r.d_adv >= 0);
    CHECK(r.style >= 0);
    CHECK(r.content >= 0);
    CHECK(r.g_adv >= 0);
    CHECK(r.total_g == Catch::Approx(r.style + 2 * r.content + 10 * r.g_adv).epsilon(1e-5));
  }
  CHECK(values(s.g->encoder().params()) == enc_before);
  CHECK(values(s.g->trainable()) != dec_before);
  CHECK(values(s.d->params()) != d_before);
  CHECK(s.g_opt.steps() == 2);
  CHECK(s.d_opt.steps() == 2);
}

TEST_CASE("identical config and seed give identical loss streams", "[trainer]") {
  auto a = TrainState<float>::create(tiny_config("V3"));
  auto b = TrainState<float>::create(tiny_config("V3"));
  for (int k = 0; k < 3; ++k) {
    auto batch = tiny_batch(128, 10 + k);
    auto ra = train_step(a, batch), rb = train_step(b, batch);
    CHECK(ra.total_g == rb.total_g);
    CHECK(*ra.d_adv == *rb.d_adv);
  }
}

TEST_CASE("non-finite losses abort the step and leave state unchanged", "[trainer]") {
  SECTION("discriminator term") {
    auto s = TrainState<float>::create(tiny_config("V4"));
    auto batch = tiny_batch();
    s.d->head_params().params.back().var->value[0] = std::numeric_limits<float>::quiet_NaN();
    const auto d_before = values(s.d->params());
    try {
      train_step(s, batch);
      FAIL("expected NonFiniteLoss");
    } catch (const NonFiniteLoss& e) {
      CHECK(e.term == "d_adv");
    }
    const auto d_after = values(s.d->params());
    bool same_bits = d_after.size() == d_before.size();
    for (std::size_t i = 0; same_bits && i < d_after.size(); ++i)
      same_bits = std::memcmp(d_after[i].data(), d_before[i].data(), d_after[i].size() * sizeof(float)) == 0;
    CHECK(same_bits);
    CHECK(s.iteration == 0);
    CHECK(s.d_opt.steps() == 0);
  }
  SECTION("generator term after the discriminator update") {
    auto cfg = tiny_config("V5");
    cfg.weights.lambda_c = std::numeric_limits<double>::infinity();
    auto s = TrainState<float>::create(cfg);
    const auto d_before = values(s.d->params());
    const auto g_before = values(s.g->trainable());
    std::vector<Tensor<float>> bn_before;
    for (auto& b : s.d->params().buffers) bn_before.push_back(*b.tensor);
    CHECK_THROWS_AS(train_step(s, tiny_batch()), NonFiniteLoss);
    CHECK(values(s.d->params()) == d_before);
    CHECK(values(s.g->trainable()) == g_before);
    std::vector<Tensor<float>> bn_after;
    for (auto& b : s.d->params().buffers) bn_after.push_back(*b.tensor);
    CHECK(bn_after == bn_before);
    CHECK(s.d_opt.steps() == 0);
    CHECK(s.iteration == 0);
  }
}

TEST_CASE("checkpoint save, load, save is byte-identical", "[trainer][checkpoint]") {
  auto dir = testing::scratch_dir("ckpt");
  auto s = TrainState<float>::create(tiny_config("V5"));
  train_step(s, tiny_batch());
  s.rng.discard(17);
  s.data_state = {3, 5};
  save_checkpoint(s, dir / "a");
  auto loaded = load_checkpoint<float>(dir / "a");
  CHECK(loaded.iteration == 1);
  CHECK(loaded.rng == s.rng);
  CHECK(loaded.data_state.epoch == 3);
  CHECK(loaded.data_state.cursor == 5);
  save_checkpoint(loaded, dir / "b");
  const bool same_bytes = ckpt::read_file(dir / "a") == ckpt::read_file(dir / "b");
  CHECK(same_bytes);
  auto ma = read_checkpoint_metadata(dir / "a"), mb = read_checkpoint_metadata(dir / "b");
  ma.erase("weights_file");
  mb.erase("weights_file");
  ma.erase("metadata_checksum");
  mb.erase("metadata_checksum");
  CHECK(ma == mb);

  // The same step from both states gives the same losses.
  auto batch = tiny_batch(128, 3);
  auto r1 = train_step(s, batch), r2 = train_step(loaded, batch);
  CHECK(r1.total_g == r2.total_g);
  CHECK(*r1.d_adv == *r2.d_adv);
}

TEST_CASE("checkpoint integrity errors", "[trainer][checkpoint]") {
  auto dir = testing::scratch_dir("ckpt_bad");
  auto s = TrainState<float>::create(tiny_config("V2"));
  save_checkpoint(s, dir / "c");
  const auto meta_text = ckpt::read_file(dir / "c.json");

  auto tampered = meta_text;
  tampered.replace(tampered.find("\"iteration\": 0"), 14, "\"iteration\": 7");
  write_text(dir / "c.json", tampered);
  CHECK_THROWS_WITH(load_checkpoint<float>(dir / "c"), Catch::Matchers::ContainsSubstring("checksum mismatch"));

  auto versioned = meta_text;
  versioned.replace(versioned.find("\"version\": 1"), 12, "\"version\": 9");
  write_text(dir / "c.json", versioned);
  CHECK_THROWS_WITH(load_checkpoint<float>(dir / "c"), Catch::Matchers::ContainsSubstring("version 9, expected 1"));

  write_text(dir / "c.json", meta_text);
  auto bytes = ckpt::read_file(dir / "c");
  bytes[bytes.size() / 2] ^= 0x5a;
  write_text(dir / "c", bytes);
  CHECK_THROWS_WITH(load_checkpoint<float>(dir / "c"), Catch::Matchers::ContainsSubstring("weights checksum"));
}

TEST_CASE("weights container round-trips between precisions", "[trainer][checkpoint]") {
  ckpt::NamedTensors<double> entries{{"a", Tensor<double>(Shape{1, 2, 3, 1}, 0.25)}, {"b", Tensor<double>(Shape{2, 1, 1, 1}, -3)}};
  auto bytes = ckpt::encode_weights(entries);
  auto back = ckpt::decode_weights<float>(bytes);
  REQUIRE(back.size() == 2);
  CHECK(back[0].first == "a");
  CHECK(back[0].second.shape() == Shape{1, 2, 3, 1});
  CHECK(back[1].second[1] == -3.0f);
  CHECK_THROWS_AS(ckpt::decode_weights<float>(bytes.substr(0, bytes.size() - 3)), ckpt::CheckpointError);
  CHECK_THROWS_AS(ckpt::decode_weights<float>("XXXX" + bytes.substr(4)), ckpt::CheckpointError);
}

TEST_CASE("training writes metrics, checkpoints and resumes exactly", "[trainer][slow]") {
  auto dir = testing::scratch_dir("train_resume");
  auto manifest = testing::synthetic_dataset(dir, 6, 96, 3);
  auto cfg = tiny_config("V5");
  cfg.iterations = 6;
  cfg.checkpoint_every = 3;
  cfg.manifest = manifest.string();
  cfg.output_dir = (dir / "full").string();
  auto full = train<float>(cfg);
  REQUIRE(full.reports.size() == 6);
  CHECK(fs::exists(dir / "full" / "checkpoint_000003"));
  CHECK(fs::exists(dir / "full" / "checkpoint_000006.json"));
  CHECK(fs::exists(dir / "full" / "final"));

  std::ifstream log(full.metrics_log);
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j["iteration"] == ++lines);
    CHECK(j["updates"] == "D,G");
    for (const char* k : {"style", "content", "g_adv", "d_adv", "total_g", "wall_time"}) CHECK(j.contains(k));
  }
  CHECK(lines == 6);

  auto resumed_cfg = cfg;
  resumed_cfg.output_dir = (dir / "resumed").string();
  auto resumed = train<float>(resumed_cfg, {(dir / "full" / "checkpoint_000003").string()});
  CHECK_FALSE(resumed.config_mismatch);
  REQUIRE(resumed.reports.size() == 3);
  CHECK(resumed.first_iteration == 3);
  for (int k = 0; k < 3; ++k) {
    CHECK(resumed.reports[k].total_g == full.reports[3 + k].total_g);
    CHECK(*resumed.reports[k].d_adv == *full.reports[3 + k].d_adv);
  }
  const bool same_final = ckpt::read_file(dir / "resumed" / "final") == ckpt::read_file(dir / "full" / "final");
  CHECK(same_final);

  auto changed = resumed_cfg;
  changed.weights.lambda_adv = 1;
  changed.output_dir = (dir / "changed").string();
  auto warned = train<float>(changed, {(dir / "full" / "checkpoint_000003").string()});
  CHECK(warned.config_mismatch);
}
