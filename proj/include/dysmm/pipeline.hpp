#pragma once

// Run configuration, feature caches, per-fold training and evaluation. The
// command-line tool is a thin layer over these functions.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "dysmm/audio.hpp"
#include "dysmm/harness.hpp"
#include "dysmm/training.hpp"

namespace dysmm {

/// Flat key=value configuration. Keys are frontend.*, model.*, train.*,
/// seed, plan, plan.selection and paths.*; see RunConfig::keys().
struct RunConfig {
  FrontendConfig frontend;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::string plan = "SD";
  UncommonSelection selection = UncommonSelection::random;
  std::filesystem::path manifest;
  std::filesystem::path features;
  std::filesystem::path out;

  /// One line per line of input; '#' starts a comment. Throws ConfigError
  /// naming the key for unknown keys, repeats and unparsable values.
  static RunConfig parse(std::istream& in);
  static RunConfig load(const std::filesystem::path& path);
  /// Every key in a fixed order, so parse(to_text()) reproduces the config.
  std::string to_text() const;
  void save(const std::filesystem::path& path) const;
  static const std::vector<std::string>& keys();

  /// Copies frontend.n_mels into the model and the task's loss into train.
  void sync();
  void validate() const;
  /// Digest of everything that affects learned weights (paths excluded).
  std::uint64_t digest() const;
};

std::string hex_digest(std::uint64_t d);

/// "<speaker>_<word_id>_B<block>.feat"
std::string feature_file_name(const UtteranceRecord& r);

struct FeatureExclusion {
  std::size_t record = 0;
  std::string name;
  double duration_s = 0.0;
};

struct FeatureSummary {
  std::size_t written = 0;
  std::vector<FeatureExclusion> excluded;  // longer than max_duration_s after trimming
};

/// Extracts log-mel caches for every record into out_dir and writes
/// out_dir/features.json listing the exclusions with the frontend digest.
/// Work is spread over `jobs` threads; outputs do not depend on it.
FeatureSummary build_feature_cache(const Manifest& m, const FrontendConfig& frontend, const std::filesystem::path& out_dir,
                                   std::size_t jobs = 1);

std::uint64_t frontend_digest(const FrontendConfig& c);

/// Loaded features for a set of records, normalised per utterance when the
/// frontend asks for it. Records excluded at extraction time are dropped.
struct FeatureSet {
  std::map<std::size_t, Tensor> features;
  std::vector<std::size_t> excluded;
};

/// Throws FormatError when a cache is missing without being listed as excluded,
/// or when the cache directory was built with a different frontend.
FeatureSet load_features(const Manifest& m, const std::vector<std::size_t>& records, const std::filesystem::path& dir,
                         const FrontendConfig& frontend);

std::vector<Example> make_examples(const Manifest& m, const std::vector<std::size_t>& records, const FeatureSet& fs,
                                   Task task);

/// Runs fn(0..n-1) on up to `jobs` threads.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

struct FoldTraining {
  std::string fold_id;
  TrainLog log;
  std::size_t n_train = 0;
  std::size_t n_validation = 0;
};

/// Trains one fold from scratch. Seeds derive from config.seed and the fold
/// index, so folds are independent of each other and of scheduling.
FoldTraining train_fold(const RunConfig& config, const SplitPlan& plan, const Manifest& m, std::size_t fold,
                        const FeatureSet& features, Model& model);

/// Writes fold_<id>.ckpt, fold_<id>_log.csv, run.cfg and train.json into
/// out_dir for every fold of the plan.
std::vector<FoldTraining> train_plan(const RunConfig& config, const SplitPlan& plan, const Manifest& m,
                                     const std::filesystem::path& out_dir, std::size_t jobs, std::ostream& log);

/// Loads run.cfg and each fold checkpoint from ckpt_dir, predicts the fold
/// test records and aggregates. Throws FormatError naming the fold when a
/// checkpoint is missing, and when checkpoint digests disagree.
EvalReport evaluate_plan(const SplitPlan& plan, const Manifest& m, const std::filesystem::path& ckpt_dir,
                         const std::filesystem::path& features_dir = {}, std::size_t jobs = 1);

/// Reads only the digest field of a checkpoint header.
std::uint64_t checkpoint_digest(const std::filesystem::path& path);

void write_report(const EvalReport& report, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Synthetic fusion gate

/// Small model and schedule sized for a desk CPU.
RunConfig gate_config(SyntheticTask task, Modality modality, std::uint64_t seed);

struct GateOptions {
  SyntheticTask task = SyntheticTask::detection_xor;
  Modality modality = Modality::speech_text;
  std::uint64_t seed = 0;
  std::size_t test_speakers = 4;
  std::filesystem::path work_dir;
};

struct GateResult {
  double test_accuracy = 0.0;
  std::size_t n_test = 0;
  std::size_t epochs = 0;
  double seconds = 0.0;
};

/// Generates the corpus, extracts features, holds out `test_speakers`
/// speakers, trains and scores the held-out set.
GateResult run_synthetic_gate(const GateOptions& options);

/// Pass thresholds: detection speech <= 0.60, speech-text >= 0.95;
/// severity speech <= 0.40, speech-text >= 0.90.
bool gate_passes(SyntheticTask task, Modality modality, double accuracy);

}  // namespace dysmm
