#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualharm/image.hpp"
#include "dualharm/tensor.hpp"

namespace dualharm::data {

// ---------------------------------------------------------------------------
// Mask utilities.

/// Fraction of pixels set in a binary mask. Throws on values other than 0/1.
template <typename T>
double foreground_ratio(const Tensor<T>& mask) {
  if (mask.empty()) throw std::invalid_argument("foreground_ratio: empty mask");
  std::size_t on = 0;
  for (T v : mask) {
    if (v == T(1)) {
      ++on;
    } else if (v != T(0)) {
      throw std::invalid_argument("foreground_ratio: mask is not binary (found value " + std::to_string(static_cast<double>(v)) + ")");
    }
  }
  return static_cast<double>(on) / static_cast<double>(mask.size());
}

/// Sets values >= threshold to 1 and the rest to 0.
template <typename T>
Tensor<T> binarize(const Tensor<T>& t, T threshold = T(0.5)) {
  Tensor<T> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = t[i] >= threshold ? T(1) : T(0);
  return out;
}

/// Average-pools by `factor` then thresholds at 0.5 (ties resolve to 1).
template <typename T>
Tensor<T> pool_mask(const Tensor<T>& mask, int factor) {
  const Shape s = mask.shape();
  if (factor < 1 || s.h % factor || s.w % factor)
    throw std::invalid_argument("pool_mask: size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                                " is not divisible by " + std::to_string(factor));
  if (factor == 1) return binarize(mask);
  Tensor<T> out(s.n, s.c, s.h / factor, s.w / factor);
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < out.h(); ++y)
        for (int x = 0; x < out.w(); ++x) {
          double acc = 0;
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx) acc += mask(n, c, y * factor + dy, x * factor + dx);
          out(n, c, y, x) = acc * inv >= 0.5 ? T(1) : T(0);
        }
  return out;
}

/// Mask for encoder level l in {1, 2, 3, 4}: resolution H / 2^(l-1).
template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask, int level) {
  if (level < 1 || level > 4) throw std::invalid_argument("downsample_mask: level must be in 1..4, got " + std::to_string(level));
  return pool_mask(mask, 1 << (level - 1));
}

/// Mask pooled onto an n x n grid of patches.
template <typename T>
Tensor<T> downsample_mask_to_grid(const Tensor<T>& mask, int n) {
  if (mask.h() != mask.w() || n < 1 || mask.h() % n)
    throw std::invalid_argument("downsample_mask_to_grid: " + mask.shape().str() + " cannot be tiled into " +
                                std::to_string(n) + "x" + std::to_string(n));
  return pool_mask(mask, mask.h() / n);
}

// ---------------------------------------------------------------------------
// Composite construction.

struct PasteGeometry {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
  double scale = 1.0;
};

struct SampleMeta {
  std::string photo_id;
  std::string painting_id;
  PasteGeometry paste;
  std::uint64_t seed = 0;
};

/// A composite image, the painting it was pasted onto and the paste mask.
template <typename T>
struct CompositeSample {
  Tensor<T> composite;
  Tensor<T> background;
  Tensor<T> mask;
  SampleMeta meta;
};

struct BuildOptions {
  double min_ratio = 0.05;
  double max_ratio = 0.3;
  // Linear rescale range tried when the raw object misses the ratio bounds.
  double min_scale = 2.0 / 3.0;
  double max_scale = 1.5;
};

class CompositeRejected : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Cuts the masked object out of `photo`, optionally rescales it toward the
/// allowed foreground ratio, and pastes it at a seeded uniform-random position
/// on `painting`. Throws CompositeRejected when no allowed scale works.
template <typename T>
CompositeSample<T> build_composite(const Tensor<T>& photo, const Tensor<T>& instance_mask, const Tensor<T>& painting,
                                   std::uint64_t seed, const BuildOptions& options = {}) {
  if (photo.c() != 3 || painting.c() != 3) throw std::invalid_argument("build_composite: photo and painting must be RGB");
  if (instance_mask.h() != photo.h() || instance_mask.w() != photo.w())
    throw std::invalid_argument("build_composite: mask " + instance_mask.shape().str() + " does not match photo " +
                                photo.shape().str());
  int y0 = photo.h(), y1 = -1, x0 = photo.w(), x1 = -1;
  std::size_t area = 0;
  for (int y = 0; y < photo.h(); ++y)
    for (int x = 0; x < photo.w(); ++x)
      if (instance_mask(0, 0, y, x) >= T(0.5)) {
        ++area;
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (area == 0) throw CompositeRejected("empty instance mask");

  const int H = painting.h(), W = painting.w();
  const double raw_ratio = static_cast<double>(area) / (static_cast<double>(H) * W);
  double scale = 1.0;
  if (raw_ratio < options.min_ratio || raw_ratio > options.max_ratio) {
    // Aim slightly inside the nearest bound so resampling noise does not
    // push the result back out.
    const double target = raw_ratio < options.min_ratio ? options.min_ratio * 1.02 : options.max_ratio * 0.98;
    scale = std::sqrt(target / raw_ratio);
    if (scale < options.min_scale || scale > options.max_scale) {
      std::ostringstream os;
      os << "foreground ratio " << raw_ratio << " cannot reach [" << options.min_ratio << ", " << options.max_ratio
         << "] within scale range [" << options.min_scale << ", " << options.max_scale << "]";
      throw CompositeRejected(os.str());
    }
  }
  const int bh = std::max(1, static_cast<int>(std::lround((y1 - y0 + 1) * scale)));
  const int bw = std::max(1, static_cast<int>(std::lround((x1 - x0 + 1) * scale)));
  if (bh > H || bw > W) throw CompositeRejected("scaled object does not fit on the painting");

  Tensor<T> obj = crop(photo, y0, x0, y1 - y0 + 1, x1 - x0 + 1);
  Tensor<T> obj_mask = crop(instance_mask, y0, x0, y1 - y0 + 1, x1 - x0 + 1);
  if (scale != 1.0) {
    obj = resize_bilinear(obj, bh, bw);
    obj_mask = resize_bilinear(obj_mask, bh, bw);
  }
  obj_mask = binarize(obj_mask);

  std::mt19937_64 rng(seed);
  const int top = std::uniform_int_distribution<int>(0, H - bh)(rng);
  const int left = std::uniform_int_distribution<int>(0, W - bw)(rng);

  CompositeSample<T> out{painting, painting, Tensor<T>(1, 1, H, W), {}};
  for (int y = 0; y < bh; ++y)
    for (int x = 0; x < bw; ++x) {
      if (obj_mask(0, 0, y, x) != T(1)) continue;
      out.mask(0, 0, top + y, left + x) = T(1);
      for (int c = 0; c < 3; ++c) out.composite(0, c, top + y, left + x) = obj(0, c, y, x);
    }
  const double ratio = foreground_ratio(out.mask);
  if (ratio < options.min_ratio || ratio > options.max_ratio) {
    std::ostringstream os;
    os << "pasted foreground ratio " << ratio << " outside [" << options.min_ratio << ", " << options.max_ratio << "]";
    throw CompositeRejected(os.str());
  }
  out.meta.paste = PasteGeometry{top, left, bh, bw, scale};
  out.meta.seed = seed;
  return out;
}

// ---------------------------------------------------------------------------
// Manifest.

struct ManifestRecord {
  std::string photo;
  std::string mask;
  std::string painting;
  std::string split = "train";
  // Pre-built composite files written by the dataset builder; optional.
  std::string composite;
  std::string background;
  std::string composite_mask;

  bool prebuilt() const { return !composite.empty() && !background.empty() && !composite_mask.empty(); }
};

inline constexpr const char* kManifestFormat = "dualharm-manifest";
inline constexpr int kManifestVersion = 1;

/// Line-delimited JSON: a header object followed by one object per record.
/// Relative paths resolve against the manifest's directory.
struct DatasetManifest {
  std::uint64_t seed = 0;
  std::vector<ManifestRecord> records;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest " + path.string());
    out << nlohmann::json{{"format", kManifestFormat}, {"version", kManifestVersion}, {"seed", seed}}.dump() << '\n';
    for (const auto& r : records) {
      nlohmann::json j{{"photo", r.photo}, {"mask", r.mask}, {"painting", r.painting}, {"split", r.split}};
      if (r.prebuilt()) {
        j["composite"] = r.composite;
        j["background"] = r.background;
        j["composite_mask"] = r.composite_mask;
      }
      out << j.dump() << '\n';
    }
    if (!out) throw std::runtime_error("failed writing manifest " + path.string());
  }

  static DatasetManifest load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest " + path.string());
    DatasetManifest m;
    m.base_dir = path.parent_path();
    std::string line;
    int line_no = 0;
    bool header = false;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
      auto where = [&] { return path.string() + ":" + std::to_string(line_no) + ": "; };
      if (!header) {
        if (j.value("format", "") != kManifestFormat)
          throw std::runtime_error(where() + "missing manifest header");
        if (j.value("version", 0) != kManifestVersion)
          throw std::runtime_error(where() + "unsupported manifest version " + std::to_string(j.value("version", 0)));
        m.seed = j.value("seed", std::uint64_t{0});
        header = true;
        continue;
      }
      ManifestRecord r;
      try {
        r.photo = j.value("photo", "");
        r.mask = j.value("mask", "");
        r.painting = j.value("painting", "");
        r.split = j.value("split", "train");
        r.composite = j.value("composite", "");
        r.background = j.value("background", "");
        r.composite_mask = j.value("composite_mask", "");
      } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(where() + e.what());
      }
      if (r.split != "train" && r.split != "test") throw std::runtime_error(where() + "split must be train or test, got '" + r.split + "'");
      if (!r.prebuilt() && (r.photo.empty() || r.mask.empty() || r.painting.empty()))
        throw std::runtime_error(where() + "record needs photo, mask and painting (or prebuilt composite files)");
      m.records.push_back(std::move(r));
    }
    if (!header) throw std::runtime_error(path.string() + ": empty manifest");
    return m;
  }
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finaliser over a combined word.
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Loads (or builds) record `index` and resizes it to size x size.
template <typename T>
CompositeSample<T> load_record(const DatasetManifest& manifest, std::size_t index, int size,
                               const BuildOptions& options = {}) {
  const ManifestRecord& r = manifest.records.at(index);
  CompositeSample<T> s;
  if (r.prebuilt()) {
    s.composite = read_image<T>(manifest.resolve(r.composite));
    s.background = read_image<T>(manifest.resolve(r.background));
    s.mask = read_mask<T>(manifest.resolve(r.composite_mask));
  } else {
    s = build_composite(read_image<T>(manifest.resolve(r.photo)), read_mask<T>(manifest.resolve(r.mask)),
                        read_image<T>(manifest.resolve(r.painting)), mix_seed(manifest.seed, index), options);
  }
  s.meta.photo_id = r.photo;
  s.meta.painting_id = r.painting;
  s.composite = resize_bilinear(s.composite, size, size);
  s.background = resize_bilinear(s.background, size, size);
  s.mask = binarize(resize_bilinear(s.mask, size, size));
  return s;
}

template <typename T>
struct Batch {
  Tensor<T> composite;   // (B, 3, S, S)
  Tensor<T> background;  // (B, 3, S, S)
  Tensor<T> mask;        // (B, 1, S, S)
  std::vector<std::size_t> records;

  int size() const { return composite.n(); }
};

template <typename T>
Batch<T> stack(const std::vector<const CompositeSample<T>*>& samples, std::vector<std::size_t> records) {
  const int b = static_cast<int>(samples.size());
  const Shape is = samples.front()->composite.shape();
  Batch<T> out{Tensor<T>(b, 3, is.h, is.w), Tensor<T>(b, 3, is.h, is.w), Tensor<T>(b, 1, is.h, is.w), std::move(records)};
  for (int i = 0; i < b; ++i) {
    std::copy(samples[i]->composite.begin(), samples[i]->composite.end(), out.composite.plane(i, 0));
    std::copy(samples[i]->background.begin(), samples[i]->background.end(), out.background.plane(i, 0));
    std::copy(samples[i]->mask.begin(), samples[i]->mask.end(), out.mask.plane(i, 0));
  }
  return out;
}

/// Position inside the epoch stream; enough to resume iteration exactly.
struct IteratorState {
  std::uint64_t epoch = 0;
  std::size_t cursor = 0;
};

/// Seeded epoch-wise shuffled batches over the records of one split.
/// Records that fail to load are skipped with a warning on stderr.
template <typename T>
class DatasetIterator {
 public:
  DatasetIterator(DatasetManifest manifest, int batch_size, std::uint64_t seed, int image_size,
                  std::string split = "train", bool cache = true)
      : manifest_(std::move(manifest)), batch_size_(batch_size), seed_(seed), size_(image_size), cache_(cache) {
    if (batch_size_ < 1) throw std::invalid_argument("batch size must be positive");
    for (std::size_t i = 0; i < manifest_.records.size(); ++i)
      if (manifest_.records[i].split == split) ids_.push_back(i);
    if (ids_.empty()) throw std::invalid_argument("manifest has no '" + split + "' records");
  }

  /// Shuffled record order for a given epoch.
  std::vector<std::size_t> epoch_order(std::uint64_t epoch) const {
    std::vector<std::size_t> order = ids_;
    std::mt19937_64 rng(mix_seed(seed_, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }

  Batch<T> next() {
    std::vector<const CompositeSample<T>*> picked;
    std::vector<std::size_t> records;
    std::vector<CompositeSample<T>> uncached;
    uncached.reserve(batch_size_);
    std::size_t failures_in_epoch = 0;
    while (static_cast<int>(picked.size()) < batch_size_) {
      if (state_.cursor >= ids_.size()) {
        if (!picked.empty()) break;  // partial final batch
        ++state_.epoch;
        state_.cursor = 0;
        failures_in_epoch = 0;
      }
      const std::size_t id = order(state_.epoch)[state_.cursor++];
      const CompositeSample<T>* s = fetch(id, uncached);
      if (!s) {
        if (++failures_in_epoch >= ids_.size()) throw std::runtime_error("no readable records in manifest");
        continue;
      }
      picked.push_back(s);
      records.push_back(id);
    }
    return stack(picked, std::move(records));
  }

  /// All batches of the next full epoch (advances to an epoch boundary first).
  std::vector<Batch<T>> epoch() {
    if (state_.cursor != 0) {
      ++state_.epoch;
      state_.cursor = 0;
    }
    std::vector<Batch<T>> out;
    std::vector<const CompositeSample<T>*> picked;
    std::vector<std::size_t> records;
    std::vector<CompositeSample<T>> scratch;
    scratch.reserve(ids_.size());
    for (std::size_t id : order(state_.epoch)) {
      const CompositeSample<T>* s = fetch(id, scratch);
      if (!s) continue;
      picked.push_back(s);
      records.push_back(id);
      if (static_cast<int>(picked.size()) == batch_size_) {
        out.push_back(stack(picked, std::move(records)));
        picked.clear();
        records.clear();
      }
    }
    if (!picked.empty()) out.push_back(stack(picked, std::move(records)));
    if (out.empty()) throw std::runtime_error("no readable records in manifest");
    ++state_.epoch;
    return out;
  }

  const IteratorState& state() const { return state_; }
  void set_state(const IteratorState& s) { state_ = s; }
  std::size_t record_count() const { return ids_.size(); }
  const DatasetManifest& manifest() const { return manifest_; }

 private:
  const std::vector<std::size_t>& order(std::uint64_t epoch) {
    if (!order_valid_ || order_epoch_ != epoch) {
      order_ = epoch_order(epoch);
      order_epoch_ = epoch;
      order_valid_ = true;
    }
    return order_;
  }

  const CompositeSample<T>* fetch(std::size_t id, std::vector<CompositeSample<T>>& scratch) {
    if (auto it = cache_map_.find(id); it != cache_map_.end()) return &it->second;
    if (bad_.count(id)) return nullptr;
    try {
      CompositeSample<T> s = load_record<T>(manifest_, id, size_);
      if (!cache_) {
        scratch.push_back(std::move(s));
        return &scratch.back();
      }
      return &cache_map_.emplace(id, std::move(s)).first->second;
    } catch (const std::exception& e) {
      std::clog << "warning: skipping manifest record " << id << ": " << e.what() << '\n';
      bad_[id] = true;
      return nullptr;
    }
  }

  DatasetManifest manifest_;
  int batch_size_;
  std::uint64_t seed_;
  int size_;
  bool cache_;
  std::vector<std::size_t> ids_;
  IteratorState state_;
  std::vector<std::size_t> order_;
  std::uint64_t order_epoch_ = 0;
  bool order_valid_ = false;
  std::map<std::size_t, CompositeSample<T>> cache_map_;
  std::map<std::size_t, bool> bad_;
};

// ---------------------------------------------------------------------------
// Offline dataset builder.

struct BuildSummary {
  std::size_t built = 0;
  std::size_t rejected = 0;
  std::filesystem::path manifest;
};

/// Pairs every photo `<stem>.png` in `photos_dir` that has a `<stem>_mask.png`
/// partner with a seeded random painting, writes composite/background/mask
/// PNGs to `out_dir` and a manifest.jsonl describing them. Rejected pairs are
/// reported on stderr and counted.
inline BuildSummary build_dataset(const std::filesystem::path& photos_dir, const std::filesystem::path& paintings_dir,
                                  const std::filesystem::path& out_dir, std::uint64_t seed,
                                  const BuildOptions& options = {}, double test_fraction = 0.0) {
  namespace fs = std::filesystem;
  auto list_png = [](const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    return files;
  };
  std::vector<fs::path> photos;
  for (const auto& p : list_png(photos_dir)) {
    const std::string stem = p.stem().string();
    if (stem.size() >= 5 && stem.compare(stem.size() - 5, 5, "_mask") == 0) continue;
    if (fs::exists(p.parent_path() / (stem + "_mask.png"))) photos.push_back(p);
  }
  const std::vector<fs::path> paintings = list_png(paintings_dir);
  if (photos.empty()) throw std::runtime_error("no photo/mask pairs found in " + photos_dir.string());
  if (paintings.empty()) throw std::runtime_error("no paintings found in " + paintings_dir.string());

  fs::create_directories(out_dir);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, paintings.size() - 1);
  std::uniform_real_distribution<double> split(0.0, 1.0);
  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.base_dir = out_dir;
  BuildSummary summary;
  for (std::size_t i = 0; i < photos.size(); ++i) {
    const fs::path& photo = photos[i];
    const fs::path mask = photo.parent_path() / (photo.stem().string() + "_mask.png");
    const fs::path& painting = paintings[pick(rng)];
    const bool is_test = split(rng) < test_fraction;
    try {
      auto sample = build_composite(read_image<float>(photo), read_mask<float>(mask), read_image<float>(painting),
                                    mix_seed(seed, i), options);
      char name[32];
      std::snprintf(name, sizeof(name), "%05zu", summary.built);
      ManifestRecord r{fs::absolute(photo).string(), fs::absolute(mask).string(), fs::absolute(painting).string(),
                       is_test ? "test" : "train", std::string("composite_") + name + ".png",
                       std::string("background_") + name + ".png", std::string("mask_") + name + ".png"};
      write_png(out_dir / r.composite, sample.composite);
      write_png(out_dir / r.background, sample.background);
      write_png(out_dir / r.composite_mask, sample.mask);
      manifest.records.push_back(std::move(r));
      ++summary.built;
    } catch (const CompositeRejected& e) {
      std::clog << "rejected " << photo.filename().string() << ": " << e.what() << '\n';
      ++summary.rejected;
    }
  }
  summary.manifest = out_dir / "manifest.jsonl";
  manifest.save(summary.manifest);
  return summary;
}

}  // namespace dualharm::data
