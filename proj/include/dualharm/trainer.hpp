#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualharm/checkpoint.hpp"
#include "dualharm/composite_data.hpp"
#include "dualharm/discriminator.hpp"
#include "dualharm/generator.hpp"
#include "dualharm/losses.hpp"
#include "dualharm/optim.hpp"

namespace dualharm::train {

using nlohmann::json;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when a loss term is NaN or infinite; the step is rolled back.
struct NonFiniteLoss : std::runtime_error {
  std::string term;
  explicit NonFiniteLoss(std::string t) : std::runtime_error("non-finite loss term '" + t + "'"), term(std::move(t)) {}
};

struct Ablation {
  bool use_resfft = true;
  bool use_discriminator = true;
  bool use_freq_branch = true;

  bool operator==(const Ablation&) const = default;
};

/// Ablation presets V1..V5.
inline Ablation preset(const std::string& name) {
  if (name == "V1") return {false, false, false};
  if (name == "V2") return {true, false, false};
  if (name == "V3") return {true, true, false};
  if (name == "V4") return {false, true, true};
  if (name == "V5") return {true, true, true};
  throw ConfigError("unknown preset '" + name + "' (expected V1..V5)");
}

struct TrainConfig {
  int image_size = 256;
  int n = 4;
  double width = 1.0;
  int batch_size = 4;
  std::int64_t iterations = 200;
  AdamOptions adam;
  loss::LossWeights weights;
  Ablation ablation;
  int resfft_blocks = 1;
  int d_steps_per_g = 1;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;
  std::string manifest;
  std::string output_dir;
  std::string encoder_weights;

  void validate() const {
    if (image_size <= 0 || image_size % 8) throw ConfigError("image_size must be a positive multiple of 8, got " + std::to_string(image_size));
    if (ablation.use_discriminator && image_size != 64 * n)
      throw ConfigError("image_size must equal 64*n when the discriminator is enabled (n=" + std::to_string(n) +
                        " requires " + std::to_string(64 * n) + ", got " + std::to_string(image_size) + ")");
    if (ablation.use_discriminator && n != 2 && n != 4 && n != 8) throw ConfigError("n must be 2, 4 or 8, got " + std::to_string(n));
    if (!(width > 0)) throw ConfigError("width must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
    if (resfft_blocks < 1) throw ConfigError("resfft_blocks must be positive");
    if (d_steps_per_g < 1) throw ConfigError("d_steps_per_g must be positive");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
    try {
      adam.validate();
      weights.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Config serialization.

inline json config_to_json(const TrainConfig& c) {
  return json{{"image_size", c.image_size},
              {"n", c.n},
              {"width", c.width},
              {"batch_size", c.batch_size},
              {"iterations", c.iterations},
              {"learning_rate", c.adam.learning_rate},
              {"beta1", c.adam.beta1},
              {"beta2", c.adam.beta2},
              {"weights", {{"lambda_c", c.weights.lambda_c}, {"lambda_adv", c.weights.lambda_adv}}},
              {"ablation",
               {{"use_resfft", c.ablation.use_resfft},
                {"use_discriminator", c.ablation.use_discriminator},
                {"use_freq_branch", c.ablation.use_freq_branch}}},
              {"resfft_blocks", c.resfft_blocks},
              {"d_steps_per_g", c.d_steps_per_g},
              {"seed", c.seed},
              {"checkpoint_every", c.checkpoint_every},
              {"manifest", c.manifest},
              {"output_dir", c.output_dir},
              {"encoder_weights", c.encoder_weights}};
}

namespace detail {

class FieldReader {
 public:
  FieldReader(const json& j, std::string source, std::string prefix = "")
      : j_(j), source_(std::move(source)), prefix_(std::move(prefix)) {
    if (!j_.is_object()) fail("", "expected an object");
  }

  template <typename V>
  void read(const char* key, V& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const json& v = *it;
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) fail(key, "expected true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<V>) {
      if (!v.is_number_integer()) fail(key, "expected an integer");
      if (std::is_unsigned_v<V> && v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
        fail(key, "expected a non-negative integer");
      out = v.get<V>();
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!v.is_number()) fail(key, "expected a number");
      out = v.get<V>();
    } else {
      if (!v.is_string()) fail(key, "expected a string");
      out = v.get<std::string>();
    }
  }

  FieldReader child(const char* key) {
    seen_.push_back(key);
    static const json empty = json::object();
    auto it = j_.find(key);
    return FieldReader(it == j_.end() ? empty : *it, source_, prefix_ + key + ".");
  }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) fail(it.key(), "unknown field");
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(source_ + ": field '" + prefix_ + key + "': " + msg);
  }

 private:
  const json& j_;
  std::string source_;
  std::string prefix_;
  std::vector<std::string> seen_;
};

}  // namespace detail

/// Reads a config object; missing fields keep their defaults, unknown or
/// mistyped fields are errors naming the field.
inline TrainConfig config_from_json(const json& j, const std::string& source = "config") {
  TrainConfig c;
  detail::FieldReader r(j, source);
  r.read("image_size", c.image_size);
  r.read("n", c.n);
  r.read("width", c.width);
  r.read("batch_size", c.batch_size);
  r.read("iterations", c.iterations);
  r.read("learning_rate", c.adam.learning_rate);
  r.read("beta1", c.adam.beta1);
  r.read("beta2", c.adam.beta2);
  auto w = r.child("weights");
  w.read("lambda_c", c.weights.lambda_c);
  w.read("lambda_adv", c.weights.lambda_adv);
  w.reject_unknown();
  auto a = r.child("ablation");
  a.read("use_resfft", c.ablation.use_resfft);
  a.read("use_discriminator", c.ablation.use_discriminator);
  a.read("use_freq_branch", c.ablation.use_freq_branch);
  a.reject_unknown();
  std::string preset_name;
  r.read("preset", preset_name);
  if (!preset_name.empty()) {
    try {
      c.ablation = preset(preset_name);
    } catch (const ConfigError& e) {
      r.fail("preset", e.what());
    }
  }
  r.read("resfft_blocks", c.resfft_blocks);
  r.read("d_steps_per_g", c.d_steps_per_g);
  r.read("seed", c.seed);
  r.read("checkpoint_every", c.checkpoint_every);
  r.read("manifest", c.manifest);
  r.read("output_dir", c.output_dir);
  r.read("encoder_weights", c.encoder_weights);
  r.reject_unknown();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return c;
}

/// Parses a config file. Syntax errors report line and column.
inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), {});
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(path.string() + ":" + std::to_string(line) + ":" + std::to_string(col) + ": syntax error");
  }
  return config_from_json(j, path.string());
}

/// Hash over the fields that shape the model and its optimization (paths,
/// iteration budget and checkpoint cadence are excluded).
inline std::string config_hash(const TrainConfig& c) {
  json j = config_to_json(c);
  for (const char* k : {"iterations", "checkpoint_every", "manifest", "output_dir", "encoder_weights"}) j.erase(k);
  return ckpt::hex64(ckpt::fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------
// Training state.

template <typename T>
void load_encoder_weights(gen::Generator<T>& g, const std::filesystem::path& path) {
  auto entries = ckpt::read_weights<T>(path);
  auto params = g.encoder().params();
  for (auto& p : params.params) {
    auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.first == p.name; });
    if (it == entries.end()) throw ckpt::CheckpointError(path.string() + ": missing encoder tensor " + p.name);
    if (!(it->second.shape() == p.var->shape()))
      throw ckpt::CheckpointError(path.string() + ": " + p.name + " has shape " + it->second.shape().str() + ", expected " +
                                  p.var->shape().str());
    p.var->value = it->second;
  }
  g.encoder().imagenet_normalization = true;
}

template <typename T>
struct TrainState {
  TrainConfig config;
  std::int64_t iteration = 0;
  std::unique_ptr<gen::Generator<T>> g;
  std::unique_ptr<disc::Discriminator<T>> d;
  Adam<T> g_opt;
  Adam<T> d_opt;
  std::mt19937_64 rng;
  data::IteratorState data_state;

  static TrainState create(const TrainConfig& config) {
    config.validate();
    TrainState s;
    s.config = config;
    gen::GeneratorConfig gc;
    gc.width = config.width;
    gc.resfft_blocks = config.resfft_blocks;
    gc.use_resfft = config.ablation.use_resfft;
    gc.seed = config.seed;
    s.g = std::make_unique<gen::Generator<T>>(gc);
    if (!config.encoder_weights.empty()) load_encoder_weights(*s.g, config.encoder_weights);
    s.g_opt = Adam<T>(s.g->trainable(), config.adam);
    if (config.ablation.use_discriminator) {
      disc::DiscriminatorConfig dc;
      dc.n = config.n;
      dc.width = config.width;
      dc.use_freq_branch = config.ablation.use_freq_branch;
      dc.seed = config.seed;
      s.d = std::make_unique<disc::Discriminator<T>>(dc);
      s.d_opt = Adam<T>(s.d->params(), config.adam);
    }
    s.rng.seed(data::mix_seed(config.seed, 5));
    return s;
  }
};

namespace detail {

template <typename T>
struct DiscriminatorSnapshot {
  std::vector<Tensor<T>> params, buffers, m, v;
  std::int64_t steps = 0;
};

template <typename T>
DiscriminatorSnapshot<T> snapshot(TrainState<T>& s) {
  DiscriminatorSnapshot<T> snap;
  if (!s.d) return snap;
  auto pl = s.d->params();
  for (auto& p : pl.params) snap.params.push_back(p.var->value);
  for (auto& b : pl.buffers) snap.buffers.push_back(*b.tensor);
  snap.m = s.d_opt.first_moments();
  snap.v = s.d_opt.second_moments();
  snap.steps = s.d_opt.steps();
  return snap;
}

template <typename T>
void restore(TrainState<T>& s, DiscriminatorSnapshot<T>& snap) {
  if (!s.d) return;
  auto pl = s.d->params();
  for (std::size_t i = 0; i < pl.params.size(); ++i) pl.params[i].var->value = std::move(snap.params[i]);
  for (std::size_t i = 0; i < pl.buffers.size(); ++i) *pl.buffers[i].tensor = std::move(snap.buffers[i]);
  s.d_opt.first_moments() = std::move(snap.m);
  s.d_opt.second_moments() = std::move(snap.v);
  s.d_opt.set_steps(snap.steps);
}

template <typename T>
double checked(const Var<T>& v, const char* term) {
  const double x = static_cast<double>(v->value.item());
  if (!std::isfinite(x)) throw NonFiniteLoss(term);
  return x;
}

}  // namespace detail

struct StepOptions {
  bool update_generator = true;
  bool update_discriminator = true;
};

/// One discriminator update (harmonized output detached) followed by one
/// generator update. On any failure the state is restored; a non-finite loss
/// surfaces as NonFiniteLoss naming the term.
template <typename T>
loss::LossReport train_step(TrainState<T>& s, const data::Batch<T>& batch, const StepOptions& opts = {}) {
  auto snap = detail::snapshot(s);
  loss::LossReport report;
  try {
    auto out = s.g->forward(batch.composite, batch.background, batch.mask);
    const bool use_d = s.config.ablation.use_discriminator;

    if (use_d && opts.update_discriminator) {
      const Tensor<T> grid = data::downsample_mask_to_grid(batch.mask, s.config.n);
      auto dparams = s.d->params();
      dparams.set_requires_grad(true);
      auto fake = detach(out.harmonized);
      auto real_c = constant(batch.composite), real_b = constant(batch.background);
      for (int k = 0; k < s.config.d_steps_per_g; ++k) {
        dparams.zero_grad();
        auto ld = loss::d_loss((*s.d)(fake, true), (*s.d)(real_c, true), (*s.d)(real_b, true), grid);
        report.d_adv = detail::checked(ld, "d_adv");
        backward(ld);
        s.d_opt.step();
      }
    }

    if (opts.update_generator) {
      s.g_opt.zero_grad();
      auto feats = s.g->encoder()(out.harmonized);
      auto ls = loss::pyramid_style_loss(feats, out.background_features, out.masks);
      auto lc = loss::content_loss(feats[3], out.composite_features[3]);
      report.style = detail::checked(ls, "style");
      report.content = detail::checked(lc, "content");
      Var<T> la;
      if (use_d) {
        auto dparams = s.d->params();
        dparams.set_requires_grad(false);
        la = loss::g_adv_loss((*s.d)(out.harmonized, true));
        dparams.set_requires_grad(true);
        report.g_adv = detail::checked(la, "g_adv");
      }
      auto total = loss::total_g_loss(ls, lc, la, s.config.weights);
      report.total_g = detail::checked(total, "total_g");
      backward(total);
      s.g_opt.step();
    } else {
      // Report the generator terms without updating it.
      NoGradGuard guard;
      auto feats = s.g->encoder()(out.harmonized);
      report.style = detail::checked(loss::pyramid_style_loss(feats, out.background_features, out.masks), "style");
      report.content = detail::checked(loss::content_loss(feats[3], out.composite_features[3]), "content");
      if (use_d) report.g_adv = detail::checked(loss::g_adv_loss((*s.d)(out.harmonized, false)), "g_adv");
      report.total_g = loss::total_g_loss(report.style, report.content, report.g_adv, s.config.weights);
    }
  } catch (...) {
    detail::restore(s, snap);
    if (s.d) s.d->params().set_requires_grad(true);
    throw;
  }
  ++s.iteration;
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints: a weights container at P and JSON metadata at P.json.

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr const char* kCheckpointFormat = "dualharm-checkpoint";

inline std::filesystem::path metadata_path(const std::filesystem::path& p) { return p.string() + ".json"; }

template <typename T>
ckpt::NamedTensors<T> collect_tensors(TrainState<T>& s) {
  ckpt::NamedTensors<T> out;
  auto gl = s.g->all();
  for (auto& p : gl.params) out.emplace_back(p.name, p.var->value);
  auto add_adam = [&](const Adam<T>& opt, const std::string& tag) {
    const auto& ps = opt.params().params;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      out.emplace_back("adam." + tag + ".m." + ps[i].name, opt.first_moments()[i]);
      out.emplace_back("adam." + tag + ".v." + ps[i].name, opt.second_moments()[i]);
    }
  };
  add_adam(s.g_opt, "g");
  if (s.d) {
    auto dl = s.d->params();
    for (auto& p : dl.params) out.emplace_back(p.name, p.var->value);
    for (auto& b : dl.buffers) out.emplace_back(b.name, *b.tensor);
    add_adam(s.d_opt, "d");
  }
  return out;
}

template <typename T>
json checkpoint_metadata(const TrainState<T>& s, const std::string& weights_bytes, const std::string& weights_file) {
  std::ostringstream rng;
  rng << s.rng;
  json meta{{"format", kCheckpointFormat},
            {"version", kCheckpointFormatVersion},
            {"dtype", sizeof(T) == 4 ? "float32" : "float64"},
            {"iteration", s.iteration},
            {"config", config_to_json(s.config)},
            {"config_hash", config_hash(s.config)},
            {"width", s.config.width},
            {"n", s.config.n},
            {"ablation",
             {{"use_resfft", s.config.ablation.use_resfft},
              {"use_discriminator", s.config.ablation.use_discriminator},
              {"use_freq_branch", s.config.ablation.use_freq_branch}}},
            {"seed", s.config.seed},
            {"pretrained_encoder", s.g->encoder().imagenet_normalization},
            {"rng_state", rng.str()},
            {"iterator", {{"epoch", s.data_state.epoch}, {"cursor", s.data_state.cursor}}},
            {"adam", {{"g_steps", s.g_opt.steps()}, {"d_steps", s.d_opt.steps()}}},
            {"weights_file", weights_file},
            {"weights_checksum", ckpt::hex64(ckpt::fnv1a64(weights_bytes))}};
  meta["metadata_checksum"] = ckpt::hex64(ckpt::fnv1a64(meta.dump()));
  return meta;
}

/// Writes the weights container at `path` and metadata at `path`.json.
template <typename T>
void save_checkpoint(TrainState<T>& s, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = ckpt::encode_weights(collect_tensors(s));
  const json meta = checkpoint_metadata(s, bytes, path.filename().string());
  ckpt::write_file_atomic(path, bytes);
  ckpt::write_file_atomic(metadata_path(path), meta.dump(2) + "\n");
}

/// Reads and verifies checkpoint metadata.
inline json read_checkpoint_metadata(const std::filesystem::path& path) {
  const auto mp = metadata_path(path);
  json meta;
  try {
    meta = json::parse(ckpt::read_file(mp));
  } catch (const json::exception& e) {
    throw ckpt::CheckpointError(mp.string() + ": unreadable metadata: " + e.what());
  }
  if (!meta.is_object() || meta.value("format", "") != kCheckpointFormat)
    throw ckpt::CheckpointError(mp.string() + ": not a checkpoint metadata file");
  const int version = meta.value("version", -1);
  if (version != kCheckpointFormatVersion)
    throw ckpt::CheckpointError(mp.string() + ": checkpoint format version " + std::to_string(version) + ", expected " +
                                std::to_string(kCheckpointFormatVersion));
  if (!meta.contains("metadata_checksum") || !meta["metadata_checksum"].is_string())
    throw ckpt::CheckpointError(mp.string() + ": metadata checksum missing");
  const std::string stored = meta["metadata_checksum"].get<std::string>();
  json body = meta;
  body.erase("metadata_checksum");
  if (ckpt::hex64(ckpt::fnv1a64(body.dump())) != stored)
    throw ckpt::CheckpointError(mp.string() + ": metadata checksum mismatch (file was modified)");
  return meta;
}

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path) {
  const json meta = read_checkpoint_metadata(path);
  const std::string bytes = ckpt::read_file(path);
  if (ckpt::hex64(ckpt::fnv1a64(bytes)) != meta.at("weights_checksum").get<std::string>())
    throw ckpt::CheckpointError(path.string() + ": weights checksum mismatch");
  TrainConfig config = config_from_json(meta.at("config"), metadata_path(path).string());
  config.encoder_weights.clear();  // weights come from the checkpoint itself
  TrainState<T> s = TrainState<T>::create(config);
  s.config.encoder_weights = meta.at("config").value("encoder_weights", "");
  s.g->encoder().imagenet_normalization = meta.value("pretrained_encoder", false);

  auto entries = ckpt::decode_weights<T>(bytes, path.string());
  std::map<std::string, Tensor<T>*> by_name;
  for (auto& [name, t] : entries) by_name[name] = &t;
  auto assign = [&](const std::string& name, Tensor<T>& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ckpt::CheckpointError(path.string() + ": missing tensor " + name);
    if (!(it->second->shape() == dst.shape()))
      throw ckpt::CheckpointError(path.string() + ": tensor " + name + " has shape " + it->second->shape().str() +
                                  ", expected " + dst.shape().str());
    dst = std::move(*it->second);
    by_name.erase(it);
  };
  auto gl = s.g->all();
  for (auto& p : gl.params) assign(p.name, p.var->value);
  auto load_adam = [&](Adam<T>& opt, const std::string& tag) {
    const auto& ps = opt.params().params;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      assign("adam." + tag + ".m." + ps[i].name, opt.first_moments()[i]);
      assign("adam." + tag + ".v." + ps[i].name, opt.second_moments()[i]);
    }
  };
  load_adam(s.g_opt, "g");
  if (s.d) {
    auto dl = s.d->params();
    for (auto& p : dl.params) assign(p.name, p.var->value);
    for (auto& b : dl.buffers) assign(b.name, *b.tensor);
    load_adam(s.d_opt, "d");
  }
  if (!by_name.empty()) throw ckpt::CheckpointError(path.string() + ": unexpected tensor " + by_name.begin()->first);

  s.iteration = meta.at("iteration").get<std::int64_t>();
  std::istringstream rng(meta.at("rng_state").get<std::string>());
  rng >> s.rng;
  if (!rng) throw ckpt::CheckpointError(path.string() + ": malformed rng state");
  s.data_state.epoch = meta.at("iterator").at("epoch").get<std::uint64_t>();
  s.data_state.cursor = meta.at("iterator").at("cursor").get<std::size_t>();
  s.g_opt.set_steps(meta.at("adam").at("g_steps").get<std::int64_t>());
  s.d_opt.set_steps(meta.at("adam").at("d_steps").get<std::int64_t>());
  return s;
}

// ---------------------------------------------------------------------------
// Training loop.

inline json report_to_json(std::int64_t iteration, const loss::LossReport& r, double wall_time, bool use_d) {
  json j{{"iteration", iteration},
         {"updates", use_d ? "D,G" : "G"},
         {"style", r.style},
         {"content", r.content},
         {"g_adv", use_d ? json(r.g_adv) : json(nullptr)},
         {"d_adv", r.d_adv ? json(*r.d_adv) : json(nullptr)},
         {"total_g", r.total_g},
         {"wall_time", wall_time}};
  return j;
}

struct TrainOptions {
  std::string resume;  // checkpoint to continue from
  bool verbose = false;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path metrics_log;
  std::vector<loss::LossReport> reports;  // only the iterations run in this call
  std::int64_t first_iteration = 0;       // iteration index of reports[0]
  bool config_mismatch = false;
};

inline std::string checkpoint_name(std::int64_t iteration) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "checkpoint_%06lld", static_cast<long long>(iteration));
  return buf;
}

/// Runs config.iterations steps (counting from the resumed iteration),
/// writing checkpoints and a metrics log under config.output_dir.
template <typename T = float>
TrainResult train(const TrainConfig& config, const TrainOptions& options = {}) {
  config.validate();
  if (config.manifest.empty()) throw ConfigError("config has no manifest");
  if (config.output_dir.empty()) throw ConfigError("config has no output_dir");
  const std::filesystem::path out_dir(config.output_dir);
  std::filesystem::create_directories(out_dir);

  TrainResult result;
  TrainState<T> state;
  if (!options.resume.empty()) {
    state = load_checkpoint<T>(options.resume);
    if (config_hash(state.config) != config_hash(config)) {
      std::clog << "warning: resuming " << options.resume << " with a different config (hash " << config_hash(state.config)
                << " vs " << config_hash(config) << "); continuing with the checkpoint's model settings\n";
      result.config_mismatch = true;
    }
    const auto keep = state.config;
    state.config = config;
    // Model shape and ablation come from the checkpoint; budgets and paths from the new config.
    state.config.width = keep.width;
    state.config.n = keep.n;
    state.config.image_size = keep.image_size;
    state.config.ablation = keep.ablation;
    state.config.resfft_blocks = keep.resfft_blocks;
  } else {
    state = TrainState<T>::create(config);
  }

  data::DatasetIterator<T> it(data::DatasetManifest::load(config.manifest), state.config.batch_size,
                              data::mix_seed(state.config.seed, 4), state.config.image_size);
  it.set_state(state.data_state);

  result.metrics_log = out_dir / "metrics.jsonl";
  std::ofstream log(result.metrics_log, options.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot write metrics log " + result.metrics_log.string());
  result.first_iteration = state.iteration;

  const auto start = std::chrono::steady_clock::now();
  while (state.iteration < config.iterations) {
    auto batch = it.next();
    auto report = train_step(state, batch);
    state.data_state = it.state();
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log << report_to_json(state.iteration, report, wall, state.config.ablation.use_discriminator).dump() << '\n';
    log.flush();
    if (options.verbose)
      std::clog << "iter " << state.iteration << " total_g " << report.total_g
                << (report.d_adv ? " d_adv " + std::to_string(*report.d_adv) : std::string()) << '\n';
    result.reports.push_back(report);
    if (config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0)
      save_checkpoint(state, out_dir / checkpoint_name(state.iteration));
  }
  result.final_checkpoint = out_dir / "final";
  save_checkpoint(state, result.final_checkpoint);
  return result;
}

}  // namespace dualharm::train
