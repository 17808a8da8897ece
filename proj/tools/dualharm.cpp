// dualharm: dataset building, training, inference, frequency maps and
// Bradley-Terry ranking from one executable.
//
// Exit codes: 0 success, 1 usage or input error, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dualharm/btrank.hpp"
#include "dualharm/composite_data.hpp"
#include "dualharm/image.hpp"
#include "dualharm/inference.hpp"
#include "dualharm/spectral.hpp"
#include "dualharm/synthetic.hpp"
#include "dualharm/trainer.hpp"

namespace fs = std::filesystem;
using namespace dualharm;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;

/// Bad input supplied by the caller (exit code 1).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename F>
auto input(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ImageIoError& e) {
    throw UsageError(e.what());
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

// ---------------------------------------------------------------------------

struct DatasetBuildArgs {
  std::string photos, paintings, out;
  std::uint64_t seed = 0;
  double test_fraction = 0.0;
  double min_ratio = 0.05, max_ratio = 0.3;
};

int run_dataset_build(const DatasetBuildArgs& a) {
  data::BuildOptions opts;
  opts.min_ratio = a.min_ratio;
  opts.max_ratio = a.max_ratio;
  auto summary = data::build_dataset(a.photos, a.paintings, a.out, a.seed, opts, a.test_fraction);
  std::cout << "built " << summary.built << " composites, rejected " << summary.rejected << "\n"
            << "manifest " << summary.manifest.string() << "\n";
  return summary.built > 0 ? kOk : kRuntime;
}

struct DatasetSynthArgs {
  std::string out;
  int count = 16;
  int size = 256;
  std::uint64_t seed = 0;
};

int run_dataset_synth(const DatasetSynthArgs& a) {
  if (a.count < 1 || a.size < 16) throw UsageError("--count must be >= 1 and --size >= 16");
  synthetic::write_corpus(a.out, a.count, a.size, a.seed);
  std::cout << "wrote " << a.count << " photo/mask pairs and paintings under " << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  std::string config, preset, resume;
  long long iterations = -1;
  bool verbose = false;
};

int run_train(const TrainArgs& a) {
  train::TrainConfig cfg;
  try {
    cfg = train::load_config(a.config);
    if (!a.preset.empty()) cfg.ablation = train::preset(a.preset);
    if (a.iterations >= 0) cfg.iterations = a.iterations;
    cfg.validate();
  } catch (const train::ConfigError& e) {
    throw UsageError(e.what());
  }
  auto result = train::train<float>(cfg, {a.resume, a.verbose});
  std::cout << "trained " << result.reports.size() << " iterations";
  if (!result.reports.empty()) std::cout << ", final total_g " << result.reports.back().total_g;
  std::cout << "\ncheckpoint " << result.final_checkpoint.string() << "\nmetrics " << result.metrics_log.string() << "\n";
  return kOk;
}

struct HarmonizeArgs {
  std::string composite, mask, background, checkpoint, out, soft_mask;
  bool size_check = false;
};

int run_harmonize(HarmonizeArgs a) {
  if (a.checkpoint.empty()) {
    const char* dir = std::getenv("DUALHARM_CHECKPOINT_DIR");
    if (!dir || !*dir) throw UsageError("no --checkpoint given and DUALHARM_CHECKPOINT_DIR is not set");
    a.checkpoint = (fs::path(dir) / "final").string();
  }
  if (!fs::exists(a.checkpoint)) throw UsageError("checkpoint not found: " + a.checkpoint);
  auto composite = input([&] { return read_image<float>(a.composite); });
  auto background = input([&] { return read_image<float>(a.background); });
  auto mask = input([&] { return read_mask<float>(a.mask); });
  if (mask.h() != composite.h() || mask.w() != composite.w() || background.h() != composite.h() ||
      background.w() != composite.w())
    throw UsageError("size mismatch: composite " + std::to_string(composite.h()) + "x" + std::to_string(composite.w()) +
                     ", mask " + std::to_string(mask.h()) + "x" + std::to_string(mask.w()) + ", background " +
                     std::to_string(background.h()) + "x" + std::to_string(background.w()));
  if (a.size_check && (composite.h() % 8 || composite.w() % 8))
    throw UsageError("image sides must be divisible by 8 with --size-check, got " + std::to_string(composite.h()) + "x" +
                     std::to_string(composite.w()));
  if (!a.size_check && (composite.h() < 8 || composite.w() < 8))
    throw UsageError("images must be at least 8x8, got " + std::to_string(composite.h()) + "x" + std::to_string(composite.w()));
  auto state = train::load_checkpoint<float>(a.checkpoint);
  auto result = infer::harmonize(*state.g, composite, background, mask, a.size_check);
  write_png(a.out, result.image);
  if (!a.soft_mask.empty()) write_png(a.soft_mask, result.soft_mask);
  std::cout << "wrote " << a.out << " (" << composite.h() << "x" << composite.w() << ")\n";
  return kOk;
}

struct FreqmapArgs {
  std::string image, out;
};

int run_freqmap(const FreqmapArgs& a) {
  auto image = input([&] { return read_image<double>(a.image); });
  auto map = spectral::log_magnitude_map(image);
  write_png(a.out, normalize_min_max(map.data));
  std::cout << "wrote " << a.out << "\n";
  return kOk;
}

struct BtFitArgs {
  std::string tally;
  std::string format = "text";
  int max_iter = 10000;
  double tol = 1e-9;
};

int run_btrank_fit(const BtFitArgs& a) {
  bt::PairwiseTally tally;
  try {
    tally = bt::read_tally(a.tally);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  bt::BTScores scores;
  try {
    scores = bt::fit(tally, {a.max_iter, a.tol});
  } catch (const bt::DegenerateTally& e) {
    throw UsageError(e.what());
  }
  const auto order = bt::rank(scores);
  auto score_of = [&](const std::string& m) {
    return scores.scores[std::find(scores.methods.begin(), scores.methods.end(), m) - scores.methods.begin()];
  };
  if (a.format == "json") {
    for (std::size_t r = 0; r < order.size(); ++r)
      std::cout << nlohmann::json{{"rank", r + 1}, {"method", order[r]}, {"score", score_of(order[r])}}.dump() << "\n";
  } else {
    std::cout << "rank\tmethod\tscore\n";
    for (std::size_t r = 0; r < order.size(); ++r)
      std::cout << r + 1 << '\t' << order[r] << '\t' << std::fixed << std::setprecision(3) << score_of(order[r]) << '\n';
  }
  return kOk;
}

struct BtSimArgs {
  std::string methods, scores, out;
  long long outcomes = 30000;
  std::uint64_t seed = 0;
};

int run_btrank_simulate(const BtSimArgs& a) {
  const auto methods = split_list(a.methods);
  std::vector<double> scores;
  for (const auto& s : split_list(a.scores)) {
    try {
      scores.push_back(std::stod(s));
    } catch (const std::exception&) {
      throw UsageError("--scores: not a number: '" + s + "'");
    }
  }
  if (methods.size() != scores.size()) throw UsageError("--methods and --scores must have the same length");
  if (a.outcomes < 1) throw UsageError("--outcomes must be positive");
  bt::PairwiseTally t;
  try {
    t = bt::simulate(methods, scores, a.outcomes, a.seed);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  std::ostringstream text;
  text << "# simulated: " << a.outcomes << " outcomes, seed " << a.seed << ", scores " << a.scores << "\n"
       << bt::format_tally_matrix(t);
  if (a.out.empty()) {
    std::cout << text.str();
  } else {
    std::ofstream f(a.out);
    f << text.str();
    if (!f) throw std::runtime_error("cannot write " + a.out);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-domain painterly image harmonization", "dualharm"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "dualharm 0.1.0");

  auto* dataset = app.add_subcommand("dataset", "Build composite datasets");
  dataset->require_subcommand(1);
  DatasetBuildArgs build_args;
  auto* build = dataset->add_subcommand("build", "Cut-and-paste composites from photos with masks onto paintings");
  build->add_option("--photos", build_args.photos, "Directory of NAME.png photos with NAME_mask.png masks")
      ->required()
      ->check(CLI::ExistingDirectory);
  build->add_option("--paintings", build_args.paintings, "Directory of painting PNGs")->required()->check(CLI::ExistingDirectory);
  build->add_option("--out", build_args.out, "Output directory (composites and manifest.jsonl)")->required();
  build->add_option("--seed", build_args.seed, "Random seed")->required();
  build->add_option("--test-fraction", build_args.test_fraction, "Fraction of records assigned to the test split")
      ->check(CLI::Range(0.0, 1.0));
  build->add_option("--min-ratio", build_args.min_ratio, "Minimum foreground ratio")->check(CLI::Range(0.0, 1.0));
  build->add_option("--max-ratio", build_args.max_ratio, "Maximum foreground ratio")->check(CLI::Range(0.0, 1.0));

  DatasetSynthArgs synth_args;
  auto* synth = dataset->add_subcommand("synth", "Write a synthetic photo/mask/painting corpus");
  synth->add_option("--out", synth_args.out, "Output directory")->required();
  synth->add_option("--count", synth_args.count, "Number of photos and paintings");
  synth->add_option("--size", synth_args.size, "Image side length");
  synth->add_option("--seed", synth_args.seed, "Random seed");

  TrainArgs train_args;
  auto* trn = app.add_subcommand("train", "Train generator and discriminator");
  trn->add_option("--config", train_args.config, "JSON training config")->required()->check(CLI::ExistingFile);
  trn->add_option("--preset", train_args.preset, "Ablation preset overriding the config flags")
      ->check(CLI::IsMember({"V1", "V2", "V3", "V4", "V5"}));
  trn->add_option("--resume", train_args.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  trn->add_option("--iterations", train_args.iterations, "Override the iteration budget");
  trn->add_flag("--verbose", train_args.verbose, "Print per-iteration losses");

  HarmonizeArgs harm_args;
  auto* harm = app.add_subcommand("harmonize", "Harmonize a composite with a trained checkpoint");
  harm->add_option("--composite", harm_args.composite, "Composite image PNG")->required()->check(CLI::ExistingFile);
  harm->add_option("--mask", harm_args.mask, "Foreground mask PNG")->required()->check(CLI::ExistingFile);
  harm->add_option("--background", harm_args.background, "Background painting PNG")->required()->check(CLI::ExistingFile);
  harm->add_option("--checkpoint", harm_args.checkpoint, "Checkpoint path (default $DUALHARM_CHECKPOINT_DIR/final)");
  harm->add_option("--out", harm_args.out, "Output PNG")->required();
  harm->add_option("--soft-mask", harm_args.soft_mask, "Also write the soft blending mask to this PNG");
  harm->add_flag("--size-check", harm_args.size_check, "Reject sides not divisible by 8 instead of padding");

  FreqmapArgs freq_args;
  auto* freq = app.add_subcommand("freqmap", "Write the centered log-magnitude spectrum of an image");
  freq->add_option("--image", freq_args.image, "Input PNG")->required()->check(CLI::ExistingFile);
  freq->add_option("--out", freq_args.out, "Output PNG")->required();

  auto* btrank = app.add_subcommand("btrank", "Bradley-Terry scores from pairwise preferences");
  btrank->require_subcommand(1);
  BtFitArgs fit_args;
  auto* fit = btrank->add_subcommand("fit", "Fit scores to a tally file and print the ranking");
  fit->add_option("--tally", fit_args.tally, "Tally file (matrix or 'winner loser count' lines)")
      ->required()
      ->check(CLI::ExistingFile);
  fit->add_option("--format", fit_args.format, "Output format")->check(CLI::IsMember({"text", "json"}));
  fit->add_option("--max-iter", fit_args.max_iter, "Iteration limit");
  fit->add_option("--tol", fit_args.tol, "Convergence tolerance on log scores");
  BtSimArgs sim_args;
  auto* sim = btrank->add_subcommand("simulate", "Sample a tally from known scores");
  sim->add_option("--methods", sim_args.methods, "Comma-separated method names")->required();
  sim->add_option("--scores", sim_args.scores, "Comma-separated log scores")->required();
  sim->add_option("--outcomes", sim_args.outcomes, "Number of sampled comparisons");
  sim->add_option("--seed", sim_args.seed, "Random seed");
  sim->add_option("--out", sim_args.out, "Output tally file (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (build->parsed()) return run_dataset_build(build_args);
    if (synth->parsed()) return run_dataset_synth(synth_args);
    if (trn->parsed()) return run_train(train_args);
    if (harm->parsed()) return run_harmonize(harm_args);
    if (freq->parsed()) return run_freqmap(freq_args);
    if (fit->parsed()) return run_btrank_fit(fit_args);
    if (sim->parsed()) return run_btrank_simulate(sim_args);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
