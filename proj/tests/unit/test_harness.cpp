#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "dysmm/audio.hpp"
#include "dysmm/error.hpp"
#include "dysmm/harness.hpp"

using namespace dysmm;
namespace fs = std::filesystem;

namespace {

const Manifest& layout() {
  static const Manifest m = ua_speech_layout();
  return m;
}

std::set<std::string> speakers_of(const Manifest& m, const std::vector<std::size_t>& idx) {
  std::set<std::string> s;
  for (auto i : idx) s.insert(m[i].speaker_id);
  return s;
}

std::set<std::string> uncommon_of(const Manifest& m, const std::vector<std::size_t>& idx) {
  std::set<std::string> s;
  for (auto i : idx)
    if (m[i].group == WordGroup::uncommon) s.insert(m[i].word_id);
  return s;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("dysmm_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

// --- Manifest ------------------------------------------------------------------

TEST(Manifest, CorpusLayoutCounts) {
  const auto& m = layout();
  EXPECT_NO_THROW(m.validate(ManifestCheck::ua_speech));
  EXPECT_EQ(m.speakers().size(), 26u);
  EXPECT_EQ(m.words().size(), 455u);
  EXPECT_EQ(m.words(WordGroup::digit).size(), 10u);
  EXPECT_EQ(m.words(WordGroup::alphabet).size(), 26u);
  EXPECT_EQ(m.words(WordGroup::command).size(), 19u);
  EXPECT_EQ(m.words(WordGroup::common).size(), 100u);
  EXPECT_EQ(m.words(WordGroup::uncommon).size(), 300u);
  // 155 repeated words x 3 blocks + 300 uncommon, per speaker.
  EXPECT_EQ(m.size(), 26u * (155u * 3u + 300u));
}

TEST(Manifest, CsvRoundTrip) {
  std::istringstream in(manifest_csv(layout()));
  Manifest back = parse_manifest(in, ManifestCheck::ua_speech);
  ASSERT_EQ(back.size(), layout().size());
  EXPECT_EQ(manifest_csv(back), manifest_csv(layout()));
}

TEST(Manifest, RejectsHealthySpeakerWithSeverity) {
  std::istringstream in(std::string(kManifestHeader) + "\nH01,healthy,low,D1,one,digit,1,a.wav\n");
  EXPECT_THROW(parse_manifest(in), InvariantError);
}

TEST(Manifest, RejectsDuplicateKey) {
  std::istringstream in(std::string(kManifestHeader) +
                        "\nH01,healthy,none,D1,one,digit,1,a.wav\nH01,healthy,none,D1,one,digit,1,b.wav\n");
  EXPECT_THROW(parse_manifest(in), InvariantError);
}

TEST(Manifest, RejectsSchemaProblems) {
  std::istringstream bad_header("speaker,cohort\n");
  EXPECT_THROW(parse_manifest(bad_header), FormatError);
  std::istringstream short_row(std::string(kManifestHeader) + "\nH01,healthy,none,D1\n");
  EXPECT_THROW(parse_manifest(short_row), FormatError);
  std::istringstream bad_block(std::string(kManifestHeader) + "\nH01,healthy,none,D1,one,digit,x,a.wav\n");
  EXPECT_THROW(parse_manifest(bad_block), FormatError);
  std::istringstream bad_group(std::string(kManifestHeader) + "\nH01,healthy,none,D1,one,number,1,a.wav\n");
  EXPECT_THROW(parse_manifest(bad_group), FormatError);
  std::istringstream no_text(std::string(kManifestHeader) + "\nH01,healthy,none,D1,123,digit,1,a.wav\n");
  EXPECT_THROW(parse_manifest(no_text), InvariantError);
}

TEST(Manifest, QuotedFields) {
  std::istringstream in(std::string(kManifestHeader) + "\nH01,healthy,none,C1,\"mother-in-law\",command,2,\"a,b.wav\"\n");
  Manifest m = parse_manifest(in);
  EXPECT_EQ(m[0].audio_path, "a,b.wav");
  EXPECT_EQ(m[0].word_text, "mother-in-law");
  EXPECT_EQ(m[0].block, 2);
}

TEST(Manifest, StrictLayoutChecks) {
  auto recs = layout().records();
  recs.erase(recs.begin());  // one repeated word now misses block 1 for H01 only: still present overall
  EXPECT_NO_THROW(Manifest(recs).validate(ManifestCheck::ua_speech));
  std::vector<UtteranceRecord> no_d15;
  for (const auto& r : layout().records())
    if (r.speaker_id != "D15") no_d15.push_back(r);
  EXPECT_THROW(Manifest(no_d15).validate(ManifestCheck::ua_speech), InvariantError);
  auto moved = layout().records();
  for (auto& r : moved)
    if (r.word_id == "B1_UW1" && r.speaker_id == "H01") r.block = 2;
  EXPECT_THROW(Manifest(moved).validate(ManifestCheck::ua_speech), InvariantError);
}

TEST(Labels, DetectionAndSeverity) {
  UtteranceRecord r;
  r.cohort = Cohort::dysarthric;
  r.severity = Severity::medium;
  EXPECT_EQ(label_of(r, Task::detection), 1);
  EXPECT_EQ(label_of(r, Task::severity), 2);
  r.cohort = Cohort::healthy;
  r.severity = Severity::none;
  EXPECT_EQ(label_of(r, Task::detection), 0);
  EXPECT_THROW(label_of(r, Task::severity), InvariantError);
}

// --- Splits ----------------------------------------------------------------------

TEST(SdSplit, UncommonPartitionAndSpeakers) {
  const auto& m = layout();
  auto plan = build_sd_split(m, 17);
  ASSERT_EQ(plan.folds.size(), 1u);
  const auto& f = plan.folds[0];
  auto tr = uncommon_of(m, f.train), te = uncommon_of(m, f.test);
  EXPECT_EQ(tr.size(), 200u);
  EXPECT_EQ(te.size(), 100u);
  for (const auto& w : te) EXPECT_FALSE(tr.count(w));
  EXPECT_EQ(speakers_of(m, f.train).size(), 26u);
  EXPECT_EQ(speakers_of(m, f.test), speakers_of(m, f.train));
  for (auto i : f.test) EXPECT_EQ(m[i].group, WordGroup::uncommon);
  EXPECT_TRUE(check_plan(plan, m).empty());
  EXPECT_EQ(build_sd_split(m, 17).train_uncommon, plan.train_uncommon);
  EXPECT_NE(build_sd_split(m, 18).train_uncommon, plan.train_uncommon);
}

TEST(SdSplit, BlockSelection) {
  const auto& m = layout();
  auto plan = build_sd_split(m, 1, UncommonSelection::block);
  for (auto i : plan.folds[0].test) EXPECT_EQ(m[i].block, 3);
  EXPECT_EQ(plan.train_uncommon.size(), 200u);
  EXPECT_EQ(plan.test_uncommon.size(), 100u);
  EXPECT_TRUE(check_plan(plan, m).empty());
}

TEST(SdSplit, InsufficientUncommonWords) {
  std::vector<UtteranceRecord> recs;
  for (const auto& r : layout().records())
    if (r.group != WordGroup::uncommon) recs.push_back(r);
  EXPECT_THROW(build_sd_split(Manifest(recs), 1), InvariantError);
}

TEST(SidSplit, LosoFolds) {
  const auto& m = layout();
  for (Protocol v : {Protocol::SID1, Protocol::SID2}) {
    auto plan = build_sid_loso(m, v, 5);
    ASSERT_EQ(plan.folds.size(), 26u);
    for (const auto& f : plan.folds) {
      auto test_sp = speakers_of(m, f.test);
      ASSERT_EQ(test_sp.size(), 1u);
      EXPECT_FALSE(speakers_of(m, f.train).count(*test_sp.begin()));
      if (v == Protocol::SID1) {
        EXPECT_EQ(f.test.size(), 765u);
      } else {
        std::set<std::string> train_words, test_words;
        for (auto i : f.train) train_words.insert(m[i].word_id);
        for (auto i : f.test) test_words.insert(m[i].word_id);
        EXPECT_EQ(test_words.size(), 100u);
        for (const auto& w : test_words) EXPECT_FALSE(train_words.count(w));
      }
    }
    EXPECT_TRUE(check_plan(plan, m).empty());
  }
  EXPECT_THROW(build_sid_loso(m, Protocol::SD, 5), ConfigError);
}

TEST(SeveritySplit, TwoSpeakersPerClass) {
  const auto& m = layout();
  auto plan = build_severity_split(m);
  ASSERT_EQ(plan.folds.size(), 1u);
  const auto& f = plan.folds[0];
  auto tr = speakers_of(m, f.train), te = speakers_of(m, f.test);
  EXPECT_EQ(tr.size(), 8u);
  EXPECT_EQ(te.size(), 7u);
  for (const auto& s : te) EXPECT_FALSE(tr.count(s));
  std::map<Severity, int> per;
  for (const auto& s : tr) per[m[m.records_of_speaker(s)[0]].severity]++;
  EXPECT_EQ(per, (std::map<Severity, int>{{Severity::very_low, 2}, {Severity::low, 2}, {Severity::medium, 2}, {Severity::high, 2}}));
  std::set<int> tr_labels, te_labels;
  for (auto i : f.train) tr_labels.insert(label_of(m[i], Task::severity));
  for (auto i : f.test) te_labels.insert(label_of(m[i], Task::severity));
  EXPECT_EQ(tr_labels.size(), 4u);
  EXPECT_EQ(te_labels.size(), 4u);
  EXPECT_TRUE(check_plan(plan, m).empty());
  // Ascending ids: D01, D02 are the very-low training speakers.
  EXPECT_TRUE(tr.count("D01") && tr.count("D02") && !tr.count("D03"));
  auto unseen = build_severity_split(m, Protocol::SID2, 3);
  EXPECT_TRUE(check_plan(unseen, m).empty());
  EXPECT_EQ(uncommon_of(m, unseen.folds[0].test).size(), 100u);
}

TEST(SeveritySplit, RejectsThinClass) {
  std::vector<UtteranceRecord> recs;
  for (const auto& r : layout().records())
    if (r.speaker_id != "D05" && r.speaker_id != "D06") recs.push_back(r);
  EXPECT_THROW(build_severity_split(Manifest(recs)), InvariantError);
}

TEST(CheckPlan, DetectsViolations) {
  const auto& m = layout();
  auto plan = build_sid_loso(m, Protocol::SID1, 1);
  plan.folds[3].train.push_back(plan.folds[3].test.front());
  EXPECT_FALSE(check_plan(plan, m).empty());
  auto sd = build_sd_split(m, 1);
  sd.folds[0].train.push_back(sd.folds[0].test.front());
  EXPECT_FALSE(check_plan(sd, m).empty());
}

TEST(Plan, JsonRoundTrip) {
  const auto dir = temp_dir("plan");
  const auto& m = layout();
  auto plan = build_sid_loso(m, Protocol::SID2, 9);
  save_plan(dir / "p.json", plan, m, 0xabcdef);
  auto [back, mb] = load_plan(dir / "p.json");
  EXPECT_EQ(back.protocol, Protocol::SID2);
  EXPECT_EQ(back.folds.size(), 26u);
  EXPECT_EQ(back.folds[7].train, plan.folds[7].train);
  EXPECT_EQ(back.test_uncommon, plan.test_uncommon);
  EXPECT_EQ(manifest_csv(mb), manifest_csv(m));
  save_plan(dir / "q.json", back, mb, 0xabcdef);
  EXPECT_EQ(file_bytes(dir / "p.json"), file_bytes(dir / "q.json"));
  fs::remove_all(dir);
}

TEST(Holdout, DisjointSpeakers) {
  const auto& m = layout();
  auto plan = build_speaker_holdout(m, Task::detection, 4, 3);
  EXPECT_EQ(speakers_of(m, plan.folds[0].test).size(), 4u);
  EXPECT_TRUE(check_plan(plan, m).empty());
  EXPECT_THROW(build_speaker_holdout(m, Task::detection, 26, 3), ConfigError);
}

// --- Decision-rule oracle -----------------------------------------------------------

TEST(Bayes, UniformTableTiesToClassZero) {
  JointTable t{4, 4, 4, std::vector<double>(64, 1.0 / 64)};
  auto rep = bayes_oracle_check(t);
  EXPECT_TRUE(rep.all_agree());
  for (const auto& c : rep.cells) {
    EXPECT_EQ(c.posterior, 0u);
    EXPECT_EQ(c.likelihood, 0u);
    EXPECT_EQ(c.factored, 0u);
  }
}

TEST(Bayes, RandomTablesAgree) {
  Rng rng(2024);
  std::size_t agree = 0;
  for (int i = 0; i < 1000; ++i) agree += bayes_oracle_check(random_joint_table(rng, 4, 4, 4)).all_agree();
  EXPECT_EQ(agree, 1000u);
}

TEST(Bayes, ZeroProbabilityClassNeverSelected) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto t = random_joint_table(rng, 4, 4, 4);
    double removed = 0;
    for (std::size_t s = 0; s < 4; ++s)
      for (std::size_t u = 0; u < 4; ++u) {
        removed += t.p[(s * 4 + u) * 4 + 2];
        t.p[(s * 4 + u) * 4 + 2] = 0;
      }
    for (auto& v : t.p) v /= (1 - removed);
    auto rep = bayes_oracle_check(t);
    EXPECT_TRUE(rep.all_agree());
    for (const auto& c : rep.cells) EXPECT_NE(c.posterior, 2u);
  }
}

TEST(Bayes, RejectsDegenerateTables) {
  JointTable t{2, 2, 2, std::vector<double>(8, 0.125)};
  t.p[0] = t.p[1] = 0;
  t.p[2] += 0.25;
  EXPECT_THROW(bayes_oracle_check(t), InvariantError);
  JointTable u{2, 2, 2, std::vector<double>(8, 0.1)};
  EXPECT_THROW(bayes_oracle_check(u), InvariantError);
  JointTable neg{1, 1, 2, {1.5, -0.5}};
  EXPECT_THROW(bayes_oracle_check(neg), InvariantError);
}

TEST(Bayes, ArgmaxTieRule) {
  EXPECT_EQ(argmax_lowest({0.2, 0.4, 0.4}), 1u);
  EXPECT_EQ(argmax_lowest({0.4 * (1 + 1e-14), 0.4}), 0u);
  EXPECT_EQ(argmax_lowest({0.4, 0.4 * (1 + 1e-14)}), 0u);
  EXPECT_EQ(argmax_lowest({0.4, 0.4 * (1 + 1e-9)}), 1u);
}

// --- Synthetic corpus --------------------------------------------------------------

TEST(Synthetic, LabelRules) {
  EXPECT_EQ(synthetic_label(SyntheticTask::detection_xor, 0, 0), 0);
  EXPECT_EQ(synthetic_label(SyntheticTask::detection_xor, 0, 1), 1);
  EXPECT_EQ(synthetic_label(SyntheticTask::detection_xor, 1, 0), 1);
  EXPECT_EQ(synthetic_label(SyntheticTask::detection_xor, 1, 1), 0);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < 20; ++i)
      EXPECT_EQ(synthetic_label(SyntheticTask::severity_mod4, k, i), static_cast<int>((k + i) % 4));
}

TEST(Synthetic, SegmentsCarryRotatedTones) {
  SyntheticConfig c;
  c.task = SyntheticTask::severity_mod4;
  c.noise_std = 0;
  Rng rng(1);
  for (std::size_t k = 0; k < 4; ++k) {
    auto x = synthetic_waveform(c, k, 1.0, rng);
    const std::size_t seg = x.size() / 4;
    for (std::size_t j = 0; j < 4; ++j) {
      // Strongest of the four tones in this segment, by direct correlation.
      std::size_t best = 0;
      double best_mag = -1;
      for (std::size_t q = 0; q < 4; ++q) {
        std::complex<double> acc = 0;
        for (std::size_t n = j * seg; n < (j + 1) * seg; ++n)
          acc += x[n] * std::polar(1.0, -2 * std::numbers::pi * c.tones_hz[q] * n / kSampleRate);
        if (std::abs(acc) > best_mag) best_mag = std::abs(acc), best = q;
      }
      EXPECT_EQ(best, (j + k) % 4);
    }
  }
}

TEST(Synthetic, CorpusContract) {
  const auto dir = temp_dir("synth");
  SyntheticConfig c;
  c.n_speakers = 3;
  c.repetitions = 2;
  auto m = generate_synthetic_corpus(c, 7, dir / "a");
  EXPECT_EQ(m.size(), 3u * 20u * 2u * 2u);
  // P(label = 1 | pattern k) = 1/2 by counting.
  std::map<char, std::pair<int, int>> by_k;
  std::map<std::tuple<std::string, std::string, char>, int> per_pair;
  for (const auto& r : m.records()) {
    const char k = r.word_id.back();
    by_k[k].first += label_of(r, Task::detection);
    by_k[k].second += 1;
    per_pair[{r.speaker_id, r.word_text, k}]++;
  }
  ASSERT_EQ(by_k.size(), 2u);
  for (auto& [k, v] : by_k) EXPECT_EQ(2 * v.first, v.second);
  EXPECT_EQ(per_pair.size(), 3u * 20u * 2u);
  for (auto& [key, n] : per_pair) EXPECT_GE(n, 1);

  auto loaded = load_manifest(dir / "a" / "manifest.csv");
  EXPECT_EQ(loaded.size(), m.size());
  auto w = load_wav(loaded.audio_path(5));
  EXPECT_EQ(w.samples.size(), 8000u);

  generate_synthetic_corpus(c, 7, dir / "b");
  for (std::size_t i = 0; i < m.size(); i += 17)
    EXPECT_EQ(file_bytes(dir / "a" / m[i].audio_path), file_bytes(dir / "b" / m[i].audio_path));
  EXPECT_EQ(file_bytes(dir / "a" / "manifest.csv"), file_bytes(dir / "b" / "manifest.csv"));
  generate_synthetic_corpus(c, 8, dir / "c");
  EXPECT_NE(file_bytes(dir / "a" / m[0].audio_path), file_bytes(dir / "c" / m[0].audio_path));
  fs::remove_all(dir);
}

TEST(Synthetic, SeverityBalance) {
  const auto dir = temp_dir("synth4");
  SyntheticConfig c;
  c.task = SyntheticTask::severity_mod4;
  c.n_speakers = 2;
  c.repetitions = 1;
  auto m = generate_synthetic_corpus(c, 3, dir);
  std::map<char, std::map<int, int>> counts;
  for (const auto& r : m.records()) counts[r.word_id.back()][label_of(r, Task::severity)]++;
  ASSERT_EQ(counts.size(), 4u);
  for (auto& [k, per] : counts) {
    ASSERT_EQ(per.size(), 4u);
    for (auto& [label, n] : per) EXPECT_EQ(n, 10);
  }
  fs::remove_all(dir);
}

TEST(Synthetic, RejectsInvalidConfig) {
  SyntheticConfig c;
  c.n_words = 21;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SyntheticConfig{};
  c.repetitions = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SyntheticConfig{};
  c.task = SyntheticTask::severity_mod4;
  c.n_words = 18;
  EXPECT_THROW(c.validate(), ConfigError);
}

// --- Reports -----------------------------------------------------------------------

namespace {

std::map<std::string, std::vector<int>> random_predictions(const SplitPlan& plan, const Manifest& m, Rng& rng,
                                                           double p_correct) {
  std::map<std::string, std::vector<int>> out;
  for (const auto& f : plan.folds)
    for (auto i : f.test) {
      const int y = label_of(m[i], plan.task);
      out[f.id].push_back(rng.uniform() < p_correct ? y : 1 - y);
    }
  return out;
}

}  // namespace

TEST(Report, AllCorrectGivesHundred) {
  const auto& m = layout();
  auto plan = build_sd_split(m, 1);
  Rng rng(1);
  auto rep = build_report(plan, m, random_predictions(plan, m, rng, 1.0));
  ASSERT_EQ(rep.columns.size(), 12u);
  for (const auto& c : rep.columns) {
    if (c.total == 0) continue;
    EXPECT_EQ(c.percent(), 100.0) << c.column;
  }
  EXPECT_EQ(rep.column("Uncommon").total, 26u * 100u);
}

TEST(Report, ColumnsMatchIndependentRecount) {
  const auto& m = layout();
  auto plan = build_sid_loso(m, Protocol::SID1, 2);
  Rng rng(2);
  auto preds = random_predictions(plan, m, rng, 0.7);
  auto rep = build_report(plan, m, preds);
  // Recount by word-id prefix and block, without the group field.
  std::map<std::string, std::pair<double, double>> cnt;
  double fold_weighted = 0, total = 0;
  for (const auto& f : plan.folds) {
    double fold_correct = 0;
    for (std::size_t k = 0; k < f.test.size(); ++k) {
      const auto& r = m[f.test[k]];
      const double ok = preds[f.id][k] == label_of(r, Task::detection);
      const std::string& id = r.word_id;
      std::string g = id.rfind("CW", 0) == 0 ? "Common" : id.find("_UW") != std::string::npos ? "Uncommon"
                    : id[0] == 'D' ? "Digits" : id[0] == 'L' ? "Alphabets" : "Commands";
      std::vector<std::string> cols{g, "B" + std::to_string(r.block) + "_all", "All words"};
      if (g == "Uncommon") cols.push_back(id.substr(0, 2) + "_uncommon");
      for (const auto& c : cols) {
        cnt[c].first += ok;
        cnt[c].second += 1;
      }
      fold_correct += ok;
    }
    fold_weighted += (fold_correct / f.test.size()) * f.test.size();
    total += f.test.size();
  }
  for (const auto& c : rep.columns) EXPECT_NEAR(c.percent(), 100.0 * cnt[c.column].first / cnt[c.column].second, 1e-9);
  EXPECT_NEAR(rep.pooled_accuracy(), fold_weighted / total, 1e-12);
}

TEST(Report, InvariantToRecordOrder) {
  const auto& m = layout();
  auto plan = build_sd_split(m, 4);
  Rng rng(3);
  auto preds = random_predictions(plan, m, rng, 0.6);
  auto a = build_report(plan, m, preds);
  auto shuffled = plan;
  std::vector<std::size_t> perm(plan.folds[0].test.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng(9).shuffle(perm.begin(), perm.end());
  std::vector<int> p2;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    shuffled.folds[0].test[i] = plan.folds[0].test[perm[i]];
    p2.push_back(preds["SD"][perm[i]]);
  }
  auto b = build_report(shuffled, m, {{"SD", p2}});
  EXPECT_EQ(a.to_csv(), b.to_csv());
}

TEST(Report, CsvFormatAndMissingFold) {
  const auto& m = layout();
  auto plan = build_severity_split(m);
  Rng rng(4);
  std::map<std::string, std::vector<int>> preds;
  for (auto i : plan.folds[0].test) preds["SEVERITY"].push_back(static_cast<int>(i % 4));
  auto rep = build_report(plan, m, preds);
  std::istringstream csv(rep.to_csv());
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "column,correct,total,accuracy");
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    const auto acc = line.substr(line.rfind(',') + 1);
    ASSERT_EQ(acc.size() - acc.find('.'), 3u) << line;
  }
  EXPECT_EQ(rows, 12);
  EXPECT_NE(rep.to_json().find("\"All words\""), std::string::npos);
  EXPECT_THROW(build_report(plan, m, {}), InvariantError);
}
