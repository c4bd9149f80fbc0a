#include "dysmm/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dysmm/audio.hpp"
#include "dysmm/error.hpp"
#include "dysmm/text.hpp"

namespace dysmm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Enumerations

std::string to_string(Cohort c) { return c == Cohort::healthy ? "healthy" : "dysarthric"; }

std::string to_string(Severity s) {
  switch (s) {
    case Severity::none: return "none";
    case Severity::very_low: return "very_low";
    case Severity::low: return "low";
    case Severity::medium: return "medium";
    case Severity::high: return "high";
  }
  return "?";
}

std::string to_string(WordGroup g) {
  switch (g) {
    case WordGroup::digit: return "digit";
    case WordGroup::alphabet: return "alphabet";
    case WordGroup::command: return "command";
    case WordGroup::common: return "common";
    case WordGroup::uncommon: return "uncommon";
  }
  return "?";
}

Cohort parse_cohort(const std::string& s) {
  if (s == "healthy") return Cohort::healthy;
  if (s == "dysarthric") return Cohort::dysarthric;
  throw FormatError("unknown cohort '" + s + "'");
}

Severity parse_severity(const std::string& s) {
  for (Severity v : {Severity::none, Severity::very_low, Severity::low, Severity::medium, Severity::high})
    if (s == to_string(v)) return v;
  throw FormatError("unknown severity '" + s + "'");
}

WordGroup parse_word_group(const std::string& s) {
  for (WordGroup g : {WordGroup::digit, WordGroup::alphabet, WordGroup::command, WordGroup::common, WordGroup::uncommon})
    if (s == to_string(g)) return g;
  throw FormatError("unknown word group '" + s + "'");
}

int label_of(const UtteranceRecord& r, Task task) {
  if (task == Task::detection) return r.cohort == Cohort::dysarthric ? 1 : 0;
  if (r.severity == Severity::none)
    throw InvariantError("record " + r.speaker_id + "/" + r.word_id + " has no severity label");
  return static_cast<int>(r.severity) - 1;
}

// ---------------------------------------------------------------------------
// Manifest

Manifest::Manifest(std::vector<UtteranceRecord> records, std::filesystem::path base_dir)
    : records_(std::move(records)), base_dir_(std::move(base_dir)) {}

std::vector<std::string> Manifest::speakers() const {
  std::set<std::string> s;
  for (const auto& r : records_) s.insert(r.speaker_id);
  return {s.begin(), s.end()};
}

std::vector<std::string> Manifest::words() const {
  std::set<std::string> s;
  for (const auto& r : records_) s.insert(r.word_id);
  return {s.begin(), s.end()};
}

std::vector<std::string> Manifest::words(WordGroup group) const {
  std::set<std::string> s;
  for (const auto& r : records_)
    if (r.group == group) s.insert(r.word_id);
  return {s.begin(), s.end()};
}

std::vector<std::size_t> Manifest::records_of_speaker(const std::string& speaker) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records_.size(); ++i)
    if (records_[i].speaker_id == speaker) out.push_back(i);
  return out;
}

std::filesystem::path Manifest::audio_path(std::size_t i) const {
  std::filesystem::path p = records_.at(i).audio_path;
  return p.is_absolute() || base_dir_.empty() ? p : base_dir_ / p;
}

void Manifest::validate(ManifestCheck level) const {
  auto where = [](const UtteranceRecord& r) { return r.speaker_id + "/" + r.word_id + "/B" + std::to_string(r.block); };
  std::set<std::tuple<std::string, std::string, int>> keys;
  std::map<std::string, std::pair<std::string, WordGroup>> word_info;
  for (const auto& r : records_) {
    if (r.speaker_id.empty() || r.word_id.empty() || r.audio_path.empty())
      throw InvariantError("manifest: empty speaker_id, word_id or audio_path at " + where(r));
    if ((r.cohort == Cohort::healthy) != (r.severity == Severity::none))
      throw InvariantError("manifest: cohort " + to_string(r.cohort) + " with severity " + to_string(r.severity) +
                           " at " + where(r));
    if (r.block < 1 || r.block > 3) throw InvariantError("manifest: block outside 1..3 at " + where(r));
    normalize_word(r.word_text);
    if (!keys.emplace(r.speaker_id, r.word_id, r.block).second)
      throw InvariantError("manifest: duplicate (speaker, word_id, block) " + where(r));
    auto [it, fresh] = word_info.try_emplace(r.word_id, r.word_text, r.group);
    if (!fresh && (it->second.first != r.word_text || it->second.second != r.group))
      throw InvariantError("manifest: word_id " + r.word_id + " has inconsistent text or group");
  }
  if (level == ManifestCheck::basic) return;

  std::map<std::string, std::pair<Cohort, Severity>> speaker_info;
  for (const auto& r : records_) {
    auto [it, fresh] = speaker_info.try_emplace(r.speaker_id, r.cohort, r.severity);
    if (!fresh && it->second != std::make_pair(r.cohort, r.severity))
      throw InvariantError("manifest: speaker " + r.speaker_id + " has inconsistent cohort/severity");
  }
  std::size_t healthy = 0, dysarthric = 0;
  for (const auto& [sp, info] : speaker_info) (info.first == Cohort::healthy ? healthy : dysarthric)++;
  if (healthy != 11 || dysarthric != 15)
    throw InvariantError("manifest: expected 11 healthy and 15 dysarthric speakers, found " + std::to_string(healthy) +
                         " and " + std::to_string(dysarthric));
  const std::pair<WordGroup, std::size_t> expected[] = {{WordGroup::digit, 10},
                                                        {WordGroup::alphabet, 26},
                                                        {WordGroup::command, 19},
                                                        {WordGroup::common, 100},
                                                        {WordGroup::uncommon, 300}};
  for (auto [g, n] : expected)
    if (words(g).size() != n)
      throw InvariantError("manifest: expected " + std::to_string(n) + " " + to_string(g) + " words, found " +
                           std::to_string(words(g).size()));
  if (word_info.size() != 455)
    throw InvariantError("manifest: expected 455 distinct words, found " + std::to_string(word_info.size()));
  std::map<std::string, std::set<int>> blocks;
  for (const auto& r : records_) blocks[r.word_id].insert(r.block);
  for (const auto& [w, b] : blocks) {
    const bool uncommon = word_info[w].second == WordGroup::uncommon;
    if (uncommon && b.size() != 1) throw InvariantError("manifest: uncommon word " + w + " spans several blocks");
    if (!uncommon && b.size() != 3) throw InvariantError("manifest: word " + w + " is missing from a block");
  }
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw FormatError("unterminated quote");
  out.push_back(std::move(cur));
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace

Manifest parse_manifest(std::istream& in, ManifestCheck level, const std::filesystem::path& base_dir) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("manifest: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) throw FormatError("manifest: header must be '" + std::string(kManifestHeader) + "'");
  std::vector<UtteranceRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    try {
      auto f = split_csv_line(line);
      if (f.size() != 8) throw FormatError("expected 8 fields, found " + std::to_string(f.size()));
      UtteranceRecord r;
      r.speaker_id = f[0];
      r.cohort = parse_cohort(f[1]);
      r.severity = parse_severity(f[2]);
      r.word_id = f[3];
      r.word_text = f[4];
      r.group = parse_word_group(f[5]);
      std::size_t pos = 0;
      r.block = std::stoi(f[6], &pos);
      if (pos != f[6].size()) throw FormatError("block is not an integer");
      r.audio_path = f[7];
      records.push_back(std::move(r));
    } catch (const std::invalid_argument&) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": block is not an integer");
    } catch (const FormatError& e) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  Manifest m(std::move(records), base_dir);
  m.validate(level);
  return m;
}

Manifest load_manifest(const std::filesystem::path& path, ManifestCheck level) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  return parse_manifest(in, level, path.parent_path());
}

std::string manifest_csv(const Manifest& m) {
  std::ostringstream os;
  os << kManifestHeader << '\n';
  for (const auto& r : m.records())
    os << csv_field(r.speaker_id) << ',' << to_string(r.cohort) << ',' << to_string(r.severity) << ','
       << csv_field(r.word_id) << ',' << csv_field(r.word_text) << ',' << to_string(r.group) << ',' << r.block << ','
       << csv_field(r.audio_path) << '\n';
  return os.str();
}

void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << manifest_csv(m);
}

Manifest ua_speech_layout() {
  const std::vector<std::string> digits = number_words(10);
  const std::vector<std::string> alphabet = {"alpha",  "bravo",   "charlie", "delta",  "echo",  "foxtrot", "golf",
                                             "hotel",  "india",   "juliett", "kilo",   "lima",  "mike",    "november",
                                             "oscar",  "papa",    "quebec",  "romeo",  "sierra", "tango",  "uniform",
                                             "victor", "whiskey", "xray",    "yankee", "zulu"};
  const std::vector<std::string> commands = {"command", "backspace", "delete", "enter", "escape", "tab",   "shift",
                                             "control", "alt",       "space",  "up",    "down",   "left",  "right",
                                             "home",    "end",       "insert", "sentence", "paragraph"};
  const std::vector<std::string> common_pool = {
      "the",   "of",    "and",   "to",    "in",    "is",    "you",   "that",  "it",     "he",    "was",   "for",
      "on",    "are",   "as",    "with",  "his",   "they",  "at",    "be",    "this",   "have",  "from",  "or",
      "had",   "by",    "word",  "but",   "not",   "what",  "all",   "were",  "we",     "when",  "your",  "can",
      "said",  "there", "use",   "an",    "each",  "which", "she",   "do",    "how",    "their", "if",    "will",
      "other", "about", "out",   "many",  "then",  "them",  "these", "so",    "some",   "her",   "would", "make",
      "like",  "him",   "into",  "time",  "has",   "look",  "more",  "write", "go",     "see",   "number", "no",
      "way",   "could", "people", "my",   "than",  "first", "water", "been",  "call",   "who",   "oil",   "its",
      "now",   "find",  "long",  "day",   "did",   "get",   "come",  "made",  "may",    "part",  "over",  "new",
      "sound", "take",  "only",  "little", "work", "know",  "place", "year",  "live",   "me",    "back",  "give"};
  std::set<std::string> used(digits.begin(), digits.end());
  used.insert(alphabet.begin(), alphabet.end());
  used.insert(commands.begin(), commands.end());
  std::vector<std::string> common;
  for (const auto& w : common_pool)
    if (common.size() < 100 && used.insert(w).second) common.push_back(w);
  if (common.size() != 100) throw Error("ua_speech_layout: common word pool too small");

  const std::string cons = "bdfgklmnprstvz", vows = "aeiou";
  auto syllable = [&](std::size_t i) { return std::string{cons[i / 5], vows[i % 5]}; };
  std::vector<std::string> uncommon;
  for (std::size_t i = 0; i < 300; ++i) uncommon.push_back(syllable(i / 70) + syllable(i % 70) + syllable((i * 31 + 7) % 70));

  struct Word {
    std::string id, text;
    WordGroup group;
    int block;  // 0 = all blocks
  };
  std::vector<Word> vocab;
  for (std::size_t i = 0; i < digits.size(); ++i) vocab.push_back({"D" + std::to_string(i + 1), digits[i], WordGroup::digit, 0});
  for (std::size_t i = 0; i < alphabet.size(); ++i)
    vocab.push_back({"L" + std::to_string(i + 1), alphabet[i], WordGroup::alphabet, 0});
  for (std::size_t i = 0; i < commands.size(); ++i)
    vocab.push_back({"C" + std::to_string(i + 1), commands[i], WordGroup::command, 0});
  for (std::size_t i = 0; i < common.size(); ++i) vocab.push_back({"CW" + std::to_string(i + 1), common[i], WordGroup::common, 0});
  for (std::size_t i = 0; i < uncommon.size(); ++i) {
    const int block = static_cast<int>(i / 100) + 1;
    vocab.push_back({"B" + std::to_string(block) + "_UW" + std::to_string(i % 100 + 1), uncommon[i], WordGroup::uncommon, block});
  }

  struct Speaker {
    std::string id;
    Cohort cohort;
    Severity severity;
  };
  std::vector<Speaker> speakers;
  char buf[8];
  for (int i = 1; i <= 11; ++i) {
    std::snprintf(buf, sizeof buf, "H%02d", i);
    speakers.push_back({buf, Cohort::healthy, Severity::none});
  }
  const Severity sev[] = {Severity::very_low, Severity::very_low, Severity::very_low, Severity::very_low,
                          Severity::low,      Severity::low,      Severity::low,      Severity::medium,
                          Severity::medium,   Severity::medium,   Severity::high,     Severity::high,
                          Severity::high,     Severity::high,     Severity::high};
  for (int i = 1; i <= 15; ++i) {
    std::snprintf(buf, sizeof buf, "D%02d", i);
    speakers.push_back({buf, Cohort::dysarthric, sev[i - 1]});
  }

  std::vector<UtteranceRecord> records;
  for (const auto& sp : speakers)
    for (int block = 1; block <= 3; ++block)
      for (const auto& w : vocab) {
        if (w.block != 0 && w.block != block) continue;
        records.push_back({sp.id, sp.cohort, sp.severity, w.id, w.text, w.group, block,
                           sp.id + "/" + sp.id + "_B" + std::to_string(block) + "_" + w.id + ".wav"});
      }
  return Manifest(std::move(records));
}

// ---------------------------------------------------------------------------
// Splits

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::SD: return "SD";
    case Protocol::SID1: return "SID-1";
    case Protocol::SID2: return "SID-2";
    case Protocol::SEVERITY: return "SEVERITY";
    case Protocol::HOLDOUT: return "HOLDOUT";
  }
  return "?";
}

Protocol parse_protocol(const std::string& s) {
  for (Protocol p : {Protocol::SD, Protocol::SID1, Protocol::SID2, Protocol::SEVERITY, Protocol::HOLDOUT})
    if (s == to_string(p)) return p;
  throw ConfigError("unknown plan '" + s + "' (expected SD|SID-1|SID-2|SEVERITY|HOLDOUT)");
}

std::string to_string(UncommonSelection s) { return s == UncommonSelection::random ? "random" : "block"; }

UncommonSelection parse_uncommon_selection(const std::string& s) {
  if (s == "random") return UncommonSelection::random;
  if (s == "block") return UncommonSelection::block;
  throw ConfigError("unknown uncommon-word selection '" + s + "' (expected random|block)");
}

UncommonPartition partition_uncommon(const Manifest& m, UncommonSelection selection, std::uint64_t seed) {
  auto words = m.words(WordGroup::uncommon);
  if (words.size() < 3)
    throw InvariantError("insufficient uncommon words: " + std::to_string(words.size()) + " (need at least 3)");
  UncommonPartition p;
  if (selection == UncommonSelection::random) {
    Rng rng(derive_seed(seed, "uncommon-words"));
    rng.shuffle(words.begin(), words.end());
    const std::size_t n_train = words.size() * 2 / 3;
    p.train.assign(words.begin(), words.begin() + static_cast<std::ptrdiff_t>(n_train));
    p.test.assign(words.begin() + static_cast<std::ptrdiff_t>(n_train), words.end());
  } else {
    std::set<std::string> train, test;
    for (const auto& r : m.records())
      if (r.group == WordGroup::uncommon) (r.block == 3 ? test : train).insert(r.word_id);
    p.train.assign(train.begin(), train.end());
    p.test.assign(test.begin(), test.end());
  }
  if (p.train.empty() || p.test.empty()) throw InvariantError("insufficient uncommon words on one side of the partition");
  std::sort(p.train.begin(), p.train.end());
  std::sort(p.test.begin(), p.test.end());
  return p;
}

namespace {

enum class WordSide { excluded, train_only, test_only, both };

WordSide word_side(const UtteranceRecord& r, const std::set<std::string>& train_uw, const std::set<std::string>& test_uw,
                   bool unseen) {
  if (!unseen) return WordSide::both;
  if (r.group != WordGroup::uncommon) return WordSide::train_only;
  if (train_uw.count(r.word_id)) return WordSide::train_only;
  if (test_uw.count(r.word_id)) return WordSide::test_only;
  return WordSide::excluded;
}

void apply_partition(SplitPlan& plan, const Manifest& m) {
  auto part = partition_uncommon(m, plan.selection, plan.seed);
  plan.train_uncommon = std::move(part.train);
  plan.test_uncommon = std::move(part.test);
}

}  // namespace

SplitPlan build_sd_split(const Manifest& m, std::uint64_t seed, UncommonSelection selection) {
  SplitPlan plan;
  plan.protocol = Protocol::SD;
  plan.task = Task::detection;
  plan.seed = seed;
  plan.selection = selection;
  plan.unseen_words = true;
  apply_partition(plan, m);
  const std::set<std::string> tr(plan.train_uncommon.begin(), plan.train_uncommon.end());
  const std::set<std::string> te(plan.test_uncommon.begin(), plan.test_uncommon.end());
  Fold f;
  f.id = "SD";
  for (std::size_t i = 0; i < m.size(); ++i) {
    auto side = word_side(m[i], tr, te, true);
    if (side == WordSide::train_only) f.train.push_back(i);
    if (side == WordSide::test_only) f.test.push_back(i);
  }
  f.test_speakers = m.speakers();
  plan.folds.push_back(std::move(f));
  return plan;
}

SplitPlan build_sid_loso(const Manifest& m, Protocol variant, std::uint64_t seed, UncommonSelection selection) {
  if (variant != Protocol::SID1 && variant != Protocol::SID2)
    throw ConfigError("build_sid_loso: variant must be SID-1 or SID-2, got " + to_string(variant));
  SplitPlan plan;
  plan.protocol = variant;
  plan.task = Task::detection;
  plan.seed = seed;
  plan.selection = selection;
  plan.unseen_words = variant == Protocol::SID2;
  if (plan.unseen_words) apply_partition(plan, m);
  const std::set<std::string> tr(plan.train_uncommon.begin(), plan.train_uncommon.end());
  const std::set<std::string> te(plan.test_uncommon.begin(), plan.test_uncommon.end());
  for (const auto& sp : m.speakers()) {
    Fold f;
    f.id = sp;
    f.test_speakers = {sp};
    for (std::size_t i = 0; i < m.size(); ++i) {
      const auto side = word_side(m[i], tr, te, plan.unseen_words);
      if (m[i].speaker_id == sp) {
        if (side == WordSide::test_only || side == WordSide::both) f.test.push_back(i);
      } else if (side == WordSide::train_only || side == WordSide::both) {
        f.train.push_back(i);
      }
    }
    plan.folds.push_back(std::move(f));
  }
  return plan;
}

SplitPlan build_severity_split(const Manifest& m, Protocol word_variant, std::uint64_t seed, UncommonSelection selection) {
  if (word_variant == Protocol::SEVERITY || word_variant == Protocol::HOLDOUT)
    throw ConfigError("build_severity_split: word variant must be SD, SID-1 or SID-2");
  SplitPlan plan;
  plan.protocol = Protocol::SEVERITY;
  plan.task = Task::severity;
  plan.seed = seed;
  plan.selection = selection;
  plan.unseen_words = word_variant != Protocol::SID1;
  std::map<Severity, std::set<std::string>> by_class;
  for (const auto& r : m.records())
    if (r.cohort == Cohort::dysarthric) by_class[r.severity].insert(r.speaker_id);
  std::set<std::string> train_speakers;
  for (Severity s : {Severity::very_low, Severity::low, Severity::medium, Severity::high}) {
    const auto& sp = by_class[s];
    if (sp.size() < 2)
      throw InvariantError("severity class " + to_string(s) + " has " + std::to_string(sp.size()) +
                           " speakers; need at least 2");
    auto it = sp.begin();
    train_speakers.insert(*it++);
    train_speakers.insert(*it);
  }
  if (plan.unseen_words) apply_partition(plan, m);
  const std::set<std::string> tr(plan.train_uncommon.begin(), plan.train_uncommon.end());
  const std::set<std::string> te(plan.test_uncommon.begin(), plan.test_uncommon.end());
  Fold f;
  f.id = "SEVERITY";
  std::set<std::string> test_speakers;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& r = m[i];
    if (r.cohort != Cohort::dysarthric) continue;
    const auto side = word_side(r, tr, te, plan.unseen_words);
    if (train_speakers.count(r.speaker_id)) {
      if (side == WordSide::train_only || side == WordSide::both) f.train.push_back(i);
    } else {
      test_speakers.insert(r.speaker_id);
      if (side == WordSide::test_only || side == WordSide::both) f.test.push_back(i);
    }
  }
  f.test_speakers.assign(test_speakers.begin(), test_speakers.end());
  plan.folds.push_back(std::move(f));
  return plan;
}

SplitPlan build_speaker_holdout(const Manifest& m, Task task, std::size_t n_test_speakers, std::uint64_t seed) {
  auto speakers = m.speakers();
  if (n_test_speakers == 0 || n_test_speakers >= speakers.size())
    throw ConfigError("build_speaker_holdout: need between 1 and " + std::to_string(speakers.size() - 1) +
                      " test speakers");
  Rng rng(derive_seed(seed, "holdout-speakers"));
  rng.shuffle(speakers.begin(), speakers.end());
  std::set<std::string> test(speakers.begin(), speakers.begin() + static_cast<std::ptrdiff_t>(n_test_speakers));
  SplitPlan plan;
  plan.protocol = Protocol::HOLDOUT;
  plan.task = task;
  plan.seed = seed;
  Fold f;
  f.id = "HOLDOUT";
  f.test_speakers.assign(test.begin(), test.end());
  for (std::size_t i = 0; i < m.size(); ++i) (test.count(m[i].speaker_id) ? f.test : f.train).push_back(i);
  plan.folds.push_back(std::move(f));
  return plan;
}

std::vector<std::string> check_plan(const SplitPlan& plan, const Manifest& m) {
  std::vector<std::string> problems;
  auto fail = [&](const std::string& fold, const std::string& what) { problems.push_back("fold " + fold + ": " + what); };
  const bool speaker_disjoint = plan.protocol != Protocol::SD;
  if (plan.folds.empty()) problems.push_back("plan has no folds");
  if ((plan.protocol == Protocol::SID1 || plan.protocol == Protocol::SID2) && plan.folds.size() != m.speakers().size())
    problems.push_back("expected " + std::to_string(m.speakers().size()) + " LOSO folds, found " +
                       std::to_string(plan.folds.size()));
  for (const auto& f : plan.folds) {
    std::set<std::size_t> train(f.train.begin(), f.train.end());
    std::set<std::string> train_sp, test_sp, train_uw, test_uw, train_words, test_words;
    if (f.train.empty() || f.test.empty()) fail(f.id, "empty train or test side");
    for (std::size_t i : f.train) {
      if (i >= m.size()) {
        fail(f.id, "record index out of range");
        continue;
      }
      train_sp.insert(m[i].speaker_id);
      train_words.insert(m[i].word_id);
      if (m[i].group == WordGroup::uncommon) train_uw.insert(m[i].word_id);
    }
    for (std::size_t i : f.test) {
      if (i >= m.size()) {
        fail(f.id, "record index out of range");
        continue;
      }
      if (train.count(i)) fail(f.id, "record " + std::to_string(i) + " on both sides");
      test_sp.insert(m[i].speaker_id);
      test_words.insert(m[i].word_id);
      if (m[i].group == WordGroup::uncommon) test_uw.insert(m[i].word_id);
    }
    for (const auto& s : test_sp) {
      if (speaker_disjoint && train_sp.count(s)) fail(f.id, "speaker " + s + " on both sides");
      if (!speaker_disjoint && !train_sp.count(s)) fail(f.id, "speaker " + s + " missing from train");
    }
    if (plan.protocol == Protocol::SID1 || plan.protocol == Protocol::SID2)
      if (test_sp.size() != 1) fail(f.id, "LOSO fold must test exactly one speaker");
    if (plan.unseen_words) {
      for (const auto& w : test_uw)
        if (train_uw.count(w)) fail(f.id, "uncommon word " + w + " on both sides");
      if (plan.protocol == Protocol::SID2)
        for (const auto& w : test_words)
          if (train_words.count(w)) fail(f.id, "word " + w + " on both sides");
      std::set<std::string> ptr(plan.train_uncommon.begin(), plan.train_uncommon.end());
      for (const auto& w : plan.test_uncommon)
        if (ptr.count(w)) fail(f.id, "partition lists " + w + " on both sides");
    }
    if (plan.protocol == Protocol::SEVERITY) {
      std::map<Severity, std::set<std::string>> per;
      for (std::size_t i : f.train)
        if (i < m.size()) per[m[i].severity].insert(m[i].speaker_id);
      for (Severity s : {Severity::very_low, Severity::low, Severity::medium, Severity::high})
        if (per[s].size() != 2) fail(f.id, "severity class " + to_string(s) + " has " + std::to_string(per[s].size()) +
                                               " train speakers, expected 2");
    }
  }
  return problems;
}

namespace {

json record_json(const UtteranceRecord& r) {
  return {{"speaker_id", r.speaker_id}, {"cohort", to_string(r.cohort)}, {"severity", to_string(r.severity)},
          {"word_id", r.word_id},       {"word_text", r.word_text},      {"group", to_string(r.group)},
          {"block", r.block},           {"audio_path", r.audio_path}};
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::string plan_to_json(const SplitPlan& plan, const Manifest& m, std::uint64_t config_digest) {
  json j;
  j["protocol"] = to_string(plan.protocol);
  j["task"] = to_string(plan.task);
  j["seed"] = plan.seed;
  j["selection"] = to_string(plan.selection);
  j["unseen_words"] = plan.unseen_words;
  j["config_digest"] = hex64(config_digest);
  j["train_uncommon"] = plan.train_uncommon;
  j["test_uncommon"] = plan.test_uncommon;
  j["manifest_dir"] = m.base_dir().string();
  json recs = json::array();
  for (const auto& r : m.records()) recs.push_back(record_json(r));
  j["records"] = std::move(recs);
  json folds = json::array();
  for (const auto& f : plan.folds)
    folds.push_back({{"id", f.id}, {"test_speakers", f.test_speakers}, {"train", f.train}, {"test", f.test}});
  j["folds"] = std::move(folds);
  return j.dump(1) + "\n";
}

void save_plan(const std::filesystem::path& path, const SplitPlan& plan, const Manifest& m, std::uint64_t digest) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << plan_to_json(plan, m, digest);
}

std::pair<SplitPlan, Manifest> load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open plan " + path.string());
  try {
    json j = json::parse(in);
    SplitPlan p;
    p.protocol = parse_protocol(j.at("protocol").get<std::string>());
    p.task = parse_task(j.at("task").get<std::string>());
    p.seed = j.at("seed").get<std::uint64_t>();
    p.selection = parse_uncommon_selection(j.at("selection").get<std::string>());
    p.unseen_words = j.at("unseen_words").get<bool>();
    p.train_uncommon = j.at("train_uncommon").get<std::vector<std::string>>();
    p.test_uncommon = j.at("test_uncommon").get<std::vector<std::string>>();
    std::vector<UtteranceRecord> records;
    for (const auto& r : j.at("records")) {
      records.push_back({r.at("speaker_id").get<std::string>(), parse_cohort(r.at("cohort").get<std::string>()),
                         parse_severity(r.at("severity").get<std::string>()), r.at("word_id").get<std::string>(),
                         r.at("word_text").get<std::string>(), parse_word_group(r.at("group").get<std::string>()),
                         r.at("block").get<int>(), r.at("audio_path").get<std::string>()});
    }
    for (const auto& f : j.at("folds"))
      p.folds.push_back({f.at("id").get<std::string>(), f.at("train").get<std::vector<std::size_t>>(),
                         f.at("test").get<std::vector<std::size_t>>(),
                         f.at("test_speakers").get<std::vector<std::string>>()});
    Manifest m(std::move(records), j.at("manifest_dir").get<std::string>());
    m.validate(ManifestCheck::basic);
    auto problems = check_plan(p, m);
    if (!problems.empty()) throw InvariantError("plan " + path.string() + ": " + problems.front());
    return {std::move(p), std::move(m)};
  } catch (const json::exception& e) {
    throw FormatError("plan " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Bayes oracle

JointTable random_joint_table(Rng& rng, std::size_t n_s, std::size_t n_t, std::size_t n_c) {
  JointTable t{n_s, n_t, n_c, std::vector<double>(n_s * n_t * n_c)};
  double z = 0;
  for (auto& v : t.p) z += (v = rng.uniform());
  for (auto& v : t.p) v /= z;
  return t;
}

std::size_t argmax_lowest(const std::vector<double>& v) {
  if (v.empty()) throw ShapeError("argmax_lowest: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  const double tol = 1e-12 * std::abs(mx);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] >= mx - tol) return i;
  return 0;
}

BayesReport bayes_oracle_check(const JointTable& t) {
  if (t.p.size() != t.n_s * t.n_t * t.n_c || t.p.empty()) throw ShapeError("bayes_oracle_check: table size mismatch");
  double total = 0;
  for (double v : t.p) {
    if (!(v >= 0) || !std::isfinite(v)) throw InvariantError("bayes_oracle_check: negative or non-finite entry");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvariantError("bayes_oracle_check: table does not sum to 1");

  std::vector<double> p_c(t.n_c, 0.0), p_tc(t.n_t * t.n_c, 0.0);
  for (std::size_t s = 0; s < t.n_s; ++s)
    for (std::size_t u = 0; u < t.n_t; ++u)
      for (std::size_t c = 0; c < t.n_c; ++c) {
        p_c[c] += t.at(s, u, c);
        p_tc[u * t.n_c + c] += t.at(s, u, c);
      }

  BayesReport rep;
  std::vector<double> a(t.n_c), b(t.n_c), f(t.n_c);
  for (std::size_t s = 0; s < t.n_s; ++s)
    for (std::size_t u = 0; u < t.n_t; ++u) {
      double p_st = 0;
      for (std::size_t c = 0; c < t.n_c; ++c) p_st += t.at(s, u, c);
      if (!(p_st > 0))
        throw InvariantError("bayes_oracle_check: degenerate marginal at (s=" + std::to_string(s) +
                             ", t=" + std::to_string(u) + ")");
      for (std::size_t c = 0; c < t.n_c; ++c) {
        const double joint = t.at(s, u, c);
        a[c] = joint / p_st;
        b[c] = p_c[c] > 0 ? (joint / p_c[c]) * p_c[c] : 0.0;
        const double ptc = p_tc[u * t.n_c + c];
        f[c] = (ptc > 0 && p_c[c] > 0) ? (joint / ptc) * (ptc / p_c[c]) * p_c[c] : 0.0;
      }
      BayesCell cell{s, u, argmax_lowest(a), argmax_lowest(b), argmax_lowest(f)};
      if (cell.posterior == cell.likelihood && cell.likelihood == cell.factored) ++rep.agreements;
      rep.cells.push_back(cell);
    }
  return rep;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

std::string to_string(SyntheticTask t) { return t == SyntheticTask::detection_xor ? "detection-xor" : "severity-mod4"; }

SyntheticTask parse_synthetic_task(const std::string& s) {
  if (s == "detection-xor") return SyntheticTask::detection_xor;
  if (s == "severity-mod4") return SyntheticTask::severity_mod4;
  throw ConfigError("unknown synthetic task '" + s + "' (expected detection-xor|severity-mod4)");
}

void SyntheticConfig::validate() const {
  if (n_words < n_patterns() || n_words > 20 || n_words % n_patterns() != 0)
    throw ConfigError("synthetic: n_words must be a multiple of the pattern count, at most 20");
  if (n_speakers < 2) throw ConfigError("synthetic: need at least 2 speakers");
  if (repetitions < 1 || repetitions > 3) throw ConfigError("synthetic: repetitions must be 1..3 (one per block)");
  if (tones_hz.size() < n_patterns()) throw ConfigError("synthetic: need one tone per pattern");
  for (double f : tones_hz)
    if (!(f > 0 && f * 2 * (1 + pitch_spread) < kSampleRate / 2.0))
      throw ConfigError("synthetic: tones and their second harmonic must lie below Nyquist");
  if (!(duration_s > 0.1 && duration_s <= 10)) throw ConfigError("synthetic: duration_s must be in (0.1, 10]");
  if (!(amplitude > 0 && amplitude * 1.0 + 4 * noise_std < 1)) throw ConfigError("synthetic: amplitude too large");
}

int synthetic_label(SyntheticTask task, std::size_t k, std::size_t i) {
  if (task == SyntheticTask::detection_xor) return ((k == 0) != (i % 2 == 0)) ? 1 : 0;
  return static_cast<int>((k + i) % 4);
}

std::vector<std::string> number_words(std::size_t n) {
  static const char* names[] = {"zero",    "one",     "two",       "three",    "four",     "five",    "six",
                                "seven",   "eight",   "nine",      "ten",      "eleven",   "twelve",  "thirteen",
                                "fourteen", "fifteen", "sixteen",  "seventeen", "eighteen", "nineteen"};
  if (n > 20) throw ConfigError("number_words: at most 20");
  return {names, names + n};
}

std::vector<double> synthetic_waveform(const SyntheticConfig& c, std::size_t k, double pitch_factor, Rng& rng) {
  const std::size_t K = c.n_patterns();
  const auto n = static_cast<std::size_t>(std::llround(c.duration_s * kSampleRate));
  const std::size_t seg = n / K;
  const double phase0 = rng.uniform(0, 2 * std::numbers::pi);
  std::vector<double> x(n);
  double phase = phase0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = std::min(i / seg, K - 1);
    const double f = c.tones_hz[(j + k) % K] * pitch_factor;
    phase += 2 * std::numbers::pi * f / kSampleRate;
    x[i] = c.amplitude * (std::sin(phase) + 0.3 * std::sin(2 * phase)) / 1.3 + c.noise_std * rng.normal();
  }
  return x;
}

Manifest generate_synthetic_corpus(const SyntheticConfig& c, std::uint64_t seed, const std::filesystem::path& out_dir) {
  c.validate();
  const auto words = number_words(c.n_words);
  const std::size_t K = c.n_patterns();
  const Rng root(seed);
  std::vector<UtteranceRecord> records;
  char buf[32];
  for (std::size_t sp = 0; sp < c.n_speakers; ++sp) {
    std::snprintf(buf, sizeof buf, "S%02zu", sp + 1);
    const std::string speaker = buf;
    Rng srng = root.split("speaker", sp);
    const double pitch = 1.0 + c.pitch_spread * srng.uniform(-1, 1);
    std::filesystem::create_directories(out_dir / "wav" / speaker);
    for (std::size_t i = 0; i < c.n_words; ++i)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t r = 0; r < c.repetitions; ++r) {
          const std::uint64_t utt = ((sp * c.n_words + i) * K + k) * c.repetitions + r;
          Rng urng = root.split("utterance", utt);
          WaveForm w{synthetic_waveform(c, k, pitch, urng), kSampleRate};
          std::snprintf(buf, sizeof buf, "W%02zu_K%zu", i, k);
          const std::string word_id = buf;
          const int block = static_cast<int>(r) + 1;
          const std::string rel = "wav/" + speaker + "/" + word_id + "_B" + std::to_string(block) + ".wav";
          save_wav(out_dir / rel, w);
          const int label = synthetic_label(c.task, k, i);
          UtteranceRecord rec;
          rec.speaker_id = speaker;
          if (c.task == SyntheticTask::detection_xor) {
            rec.cohort = label ? Cohort::dysarthric : Cohort::healthy;
            rec.severity = label ? Severity::medium : Severity::none;
          } else {
            rec.cohort = Cohort::dysarthric;
            rec.severity = static_cast<Severity>(label + 1);
          }
          rec.word_id = word_id;
          rec.word_text = words[i];
          rec.group = i < 10 ? WordGroup::digit : WordGroup::common;
          rec.block = block;
          rec.audio_path = rel;
          records.push_back(std::move(rec));
        }
  }
  Manifest m(std::move(records), out_dir);
  m.validate(ManifestCheck::basic);
  save_manifest(out_dir / "manifest.csv", m);
  return m;
}

// ---------------------------------------------------------------------------
// Reports

const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = {"Digits",      "Commands",    "Alphabets", "Common",
                                                "Uncommon",    "B1_uncommon", "B2_uncommon", "B3_uncommon",
                                                "B1_all",      "B2_all",      "B3_all",    "All words"};
  return cols;
}

double ColumnAccuracy::percent() const {
  return total == 0 ? std::numeric_limits<double>::quiet_NaN()
                    : 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

std::size_t FoldOutcome::correct() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) n += labels[i] == predictions[i];
  return n;
}

const ColumnAccuracy& EvalReport::column(const std::string& name) const {
  for (const auto& c : columns)
    if (c.column == name) return c;
  throw InvariantError("report has no column " + name);
}

double EvalReport::pooled_accuracy() const {
  const auto& all = column("All words");
  return all.total ? static_cast<double>(all.correct) / static_cast<double>(all.total) : 0.0;
}

namespace {

std::string percent_str(const ColumnAccuracy& c) {
  if (c.total == 0) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", c.percent());
  return buf;
}

bool in_column(const std::string& col, const UtteranceRecord& r) {
  if (col == "Digits") return r.group == WordGroup::digit;
  if (col == "Commands") return r.group == WordGroup::command;
  if (col == "Alphabets") return r.group == WordGroup::alphabet;
  if (col == "Common") return r.group == WordGroup::common;
  if (col == "Uncommon") return r.group == WordGroup::uncommon;
  if (col.size() == 11 && col.substr(2) == "_uncommon")
    return r.group == WordGroup::uncommon && r.block == col[1] - '0';
  if (col.size() == 6 && col.substr(2) == "_all") return r.block == col[1] - '0';
  return col == "All words";
}

}  // namespace

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "column,correct,total,accuracy\n";
  for (const auto& c : columns) os << c.column << ',' << c.correct << ',' << c.total << ',' << percent_str(c) << '\n';
  return os.str();
}

std::string EvalReport::to_json() const {
  json j;
  j["protocol"] = to_string(protocol);
  j["task"] = to_string(task);
  j["modality"] = modality;
  j["config_digest"] = hex64(config_digest);
  j["seed"] = seed;
  json cols = json::array();
  for (const auto& c : columns)
    cols.push_back({{"column", c.column}, {"correct", c.correct}, {"total", c.total}, {"accuracy", percent_str(c)}});
  j["columns"] = std::move(cols);
  json folds = json::array();
  for (const auto& f : this->folds) {
    json preds = json::array();
    for (std::size_t i = 0; i < f.records.size(); ++i) preds.push_back({f.records[i], f.labels[i], f.predictions[i]});
    ColumnAccuracy acc{f.fold_id, f.correct(), f.records.size()};
    folds.push_back({{"id", f.fold_id},
                     {"correct", acc.correct},
                     {"total", acc.total},
                     {"accuracy", percent_str(acc)},
                     {"predictions", std::move(preds)}});
  }
  j["folds"] = std::move(folds);
  return j.dump(1) + "\n";
}

EvalReport build_report(const SplitPlan& plan, const Manifest& m,
                        const std::map<std::string, std::vector<int>>& predictions) {
  EvalReport rep;
  rep.protocol = plan.protocol;
  rep.task = plan.task;
  rep.seed = plan.seed;
  for (const auto& name : report_columns()) rep.columns.push_back({name, 0, 0});
  for (const auto& f : plan.folds) {
    auto it = predictions.find(f.id);
    if (it == predictions.end()) throw InvariantError("missing predictions for fold " + f.id);
    if (it->second.size() != f.test.size())
      throw InvariantError("fold " + f.id + ": " + std::to_string(it->second.size()) + " predictions for " +
                           std::to_string(f.test.size()) + " test records");
    FoldOutcome out;
    out.fold_id = f.id;
    out.records = f.test;
    out.predictions = it->second;
    for (std::size_t k = 0; k < f.test.size(); ++k) {
      const auto& r = m[f.test[k]];
      const int label = label_of(r, plan.task);
      out.labels.push_back(label);
      const bool ok = label == it->second[k];
      for (auto& c : rep.columns)
        if (in_column(c.column, r)) {
          ++c.total;
          c.correct += ok;
        }
    }
    rep.folds.push_back(std::move(out));
  }
  return rep;
}

}  // namespace dysmm
