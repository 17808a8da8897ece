#pragma once

#include <filesystem>
#include <string>

#include "dualharm/composite_data.hpp"
#include "dualharm/synthetic.hpp"

namespace dualharm::testing {

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("dualharm_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

/// Synthetic corpus plus prebuilt composites; returns the manifest path.
inline std::filesystem::path synthetic_dataset(const std::filesystem::path& dir, int count, int size, std::uint64_t seed) {
  synthetic::write_corpus(dir / "raw", count, size, seed);
  auto summary = data::build_dataset(dir / "raw" / "photos", dir / "raw" / "paintings", dir / "data", seed);
  return summary.manifest;
}

}  // namespace dualharm::testing
