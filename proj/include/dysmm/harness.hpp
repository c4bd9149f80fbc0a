#pragma once

// Manifest ingestion, split protocols, the Bayes decision-rule oracle, the
// synthetic verification corpus, and report aggregation.

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <string>
#include <vector>

#include "dysmm/model.hpp"
#include "dysmm/rng.hpp"

namespace dysmm {

enum class Cohort { healthy, dysarthric };
enum class Severity { none, very_low, low, medium, high };
enum class WordGroup { digit, alphabet, command, common, uncommon };

std::string to_string(Cohort c);
std::string to_string(Severity s);
std::string to_string(WordGroup g);
Cohort parse_cohort(const std::string& s);
Severity parse_severity(const std::string& s);
WordGroup parse_word_group(const std::string& s);

struct UtteranceRecord {
  std::string speaker_id;
  Cohort cohort = Cohort::healthy;
  Severity severity = Severity::none;
  std::string word_id;
  std::string word_text;
  WordGroup group = WordGroup::common;
  int block = 1;
  std::string audio_path;  // relative paths resolve against the manifest directory
};

/// Class index of a record: detection 0 healthy / 1 dysarthric; severity
/// 0 very_low .. 3 high. Throws InvariantError for a healthy record under severity.
int label_of(const UtteranceRecord& r, Task task);

enum class ManifestCheck {
  basic,     // per-record rules and (speaker, word_id, block) uniqueness
  ua_speech  // additionally the full corpus layout: 26 speakers, 455 words, block rules
};

class Manifest {
 public:
  Manifest() = default;
  explicit Manifest(std::vector<UtteranceRecord> records, std::filesystem::path base_dir = {});

  const std::vector<UtteranceRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  const UtteranceRecord& operator[](std::size_t i) const { return records_[i]; }
  const std::filesystem::path& base_dir() const { return base_dir_; }

  /// Sorted distinct speaker ids.
  std::vector<std::string> speakers() const;
  /// Sorted distinct word ids, optionally restricted to one group.
  std::vector<std::string> words() const;
  std::vector<std::string> words(WordGroup group) const;
  std::vector<std::size_t> records_of_speaker(const std::string& speaker) const;
  std::filesystem::path audio_path(std::size_t i) const;

  /// Throws InvariantError naming the first violated rule.
  void validate(ManifestCheck level) const;

 private:
  std::vector<UtteranceRecord> records_;
  std::filesystem::path base_dir_;
};

inline constexpr const char* kManifestHeader = "speaker_id,cohort,severity,word_id,word_text,group,block,audio_path";

/// Parses the CSV (header required) and validates at `level`. Throws
/// FormatError on schema problems and InvariantError on rule violations.
Manifest parse_manifest(std::istream& in, ManifestCheck level = ManifestCheck::basic,
                        const std::filesystem::path& base_dir = {});
Manifest load_manifest(const std::filesystem::path& path, ManifestCheck level = ManifestCheck::basic);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);
std::string manifest_csv(const Manifest& manifest);

/// A manifest with the corpus layout of the UA-Speech collection (26
/// speakers, 3 blocks, 455 words) and generic speaker ids. Digits, radio
/// alphabet, commands and common words use real word lists; uncommon words
/// are placeholder pseudo-words. Audio paths are placeholders.
Manifest ua_speech_layout();

// ---------------------------------------------------------------------------
// Split protocols

enum class Protocol { SD, SID1, SID2, SEVERITY, HOLDOUT };
std::string to_string(Protocol p);
Protocol parse_protocol(const std::string& s);

/// How the 200 train / 100 test uncommon words are chosen.
enum class UncommonSelection { random, block };
std::string to_string(UncommonSelection s);
UncommonSelection parse_uncommon_selection(const std::string& s);

struct Fold {
  std::string id;
  std::vector<std::size_t> train;  // record indices
  std::vector<std::size_t> test;
  std::vector<std::string> test_speakers;
};

struct SplitPlan {
  Protocol protocol = Protocol::SD;
  Task task = Task::detection;
  std::uint64_t seed = 0;
  UncommonSelection selection = UncommonSelection::random;
  bool unseen_words = false;  // test side restricted to the held-out uncommon words
  std::vector<std::string> train_uncommon;
  std::vector<std::string> test_uncommon;
  std::vector<Fold> folds;
};

struct UncommonPartition {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// random: two thirds of the distinct uncommon words (200 of 300) sampled
/// without replacement; block: blocks 1-2 train, block 3 test. Throws
/// InvariantError with fewer than 3 uncommon words.
UncommonPartition partition_uncommon(const Manifest& m, UncommonSelection selection, std::uint64_t seed);

SplitPlan build_sd_split(const Manifest& m, std::uint64_t seed, UncommonSelection selection = UncommonSelection::random);
/// One fold per speaker. Throws ConfigError unless protocol is SID1 or SID2.
SplitPlan build_sid_loso(const Manifest& m, Protocol variant, std::uint64_t seed,
                         UncommonSelection selection = UncommonSelection::random);
/// 2 train speakers per severity class by ascending id; the rest test.
/// word_variant SID1 keeps all words on both sides; SD or SID2 applies the
/// uncommon-word partition.
SplitPlan build_severity_split(const Manifest& m, Protocol word_variant = Protocol::SID1, std::uint64_t seed = 0,
                               UncommonSelection selection = UncommonSelection::random);
/// Single fold holding out `n_test_speakers` seeded-chosen speakers with all their words.
SplitPlan build_speaker_holdout(const Manifest& m, Task task, std::size_t n_test_speakers, std::uint64_t seed);

/// Asserts the protocol's disjointness rules for every fold; returns a
/// description of each violation (empty when the plan is sound).
std::vector<std::string> check_plan(const SplitPlan& plan, const Manifest& m);

/// Plan JSON embeds the manifest rows so later stages need only the plan file.
std::string plan_to_json(const SplitPlan& plan, const Manifest& m, std::uint64_t config_digest = 0);
void save_plan(const std::filesystem::path& path, const SplitPlan& plan, const Manifest& m,
               std::uint64_t config_digest = 0);
std::pair<SplitPlan, Manifest> load_plan(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Decision-rule oracle

/// Dense joint table P(S=s, T=t, C=c), index (s * T + t) * C + c.
struct JointTable {
  std::size_t n_s = 0, n_t = 0, n_c = 0;
  std::vector<double> p;

  double at(std::size_t s, std::size_t t, std::size_t c) const { return p[(s * n_t + t) * n_c + c]; }
};

JointTable random_joint_table(Rng& rng, std::size_t n_s, std::size_t n_t, std::size_t n_c);

/// Index of the maximum; entries within a relative 1e-12 of the maximum tie
/// and the lowest such index wins.
std::size_t argmax_lowest(const std::vector<double>& v);

struct BayesCell {
  std::size_t s = 0, t = 0;
  std::size_t posterior = 0;   // argmax P(C | S, T)
  std::size_t likelihood = 0;  // argmax P(S, T | C) P(C)
  std::size_t factored = 0;    // argmax P(S | T, C) P(T | C) P(C)
};

struct BayesReport {
  std::vector<BayesCell> cells;
  std::size_t agreements = 0;
  bool all_agree() const { return agreements == cells.size(); }
};

/// Throws InvariantError for negative entries, a total away from 1 by more
/// than 1e-9, or any (s, t) with zero marginal.
BayesReport bayes_oracle_check(const JointTable& table);

// ---------------------------------------------------------------------------
// Synthetic verification corpus

enum class SyntheticTask { detection_xor, severity_mod4 };
std::string to_string(SyntheticTask t);
SyntheticTask parse_synthetic_task(const std::string& s);

struct SyntheticConfig {
  SyntheticTask task = SyntheticTask::detection_xor;
  std::size_t n_words = 20;
  std::size_t n_speakers = 16;
  std::size_t repetitions = 3;   // utterances per (speaker, word, pattern); one block each
  double duration_s = 0.5;
  std::vector<double> tones_hz{350.0, 800.0, 1600.0, 3200.0};
  double pitch_spread = 0.04;    // per-speaker relative pitch offset, uniform in [-spread, spread]
  double amplitude = 0.4;
  double noise_std = 0.01;

  std::size_t n_patterns() const { return task == SyntheticTask::detection_xor ? 2 : 4; }
  void validate() const;
};

/// Class of an utterance with audio pattern k of word index i.
int synthetic_label(SyntheticTask task, std::size_t k, std::size_t word_index);

/// Pattern k splits the utterance into n_patterns equal segments; segment j
/// carries tone (j + k) mod n_patterns. Every pattern therefore uses every
/// tone, and only the word tells which segment decides the label.
std::vector<double> synthetic_waveform(const SyntheticConfig& config, std::size_t k, double pitch_factor, Rng& rng);

/// English number words zero, one, ... for the first n integers (n <= 20).
std::vector<std::string> number_words(std::size_t n);

/// Writes out_dir/manifest.csv and out_dir/wav/<speaker>/<word_id>_B<block>.wav.
Manifest generate_synthetic_corpus(const SyntheticConfig& config, std::uint64_t seed,
                                   const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Reports

/// Word-group columns in report order.
const std::vector<std::string>& report_columns();

struct ColumnAccuracy {
  std::string column;
  std::size_t correct = 0;
  std::size_t total = 0;
  double percent() const;  // NaN when total == 0
};

struct FoldOutcome {
  std::string fold_id;
  std::vector<std::size_t> records;
  std::vector<int> labels;
  std::vector<int> predictions;
  std::size_t correct() const;
};

struct EvalReport {
  Protocol protocol = Protocol::SD;
  Task task = Task::detection;
  std::string modality;
  std::uint64_t config_digest = 0;
  std::uint64_t seed = 0;
  std::vector<FoldOutcome> folds;
  std::vector<ColumnAccuracy> columns;

  const ColumnAccuracy& column(const std::string& name) const;
  double pooled_accuracy() const;  // fraction in [0, 1]

  /// column,correct,total,accuracy with accuracy in percent to 2 decimals.
  std::string to_csv() const;
  std::string to_json() const;
};

/// Aggregates per-fold predictions (aligned with each fold's test list).
/// Throws InvariantError naming a fold that has no predictions.
EvalReport build_report(const SplitPlan& plan, const Manifest& m,
                        const std::map<std::string, std::vector<int>>& predictions);

}  // namespace dysmm
