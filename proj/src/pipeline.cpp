#include "dysmm/pipeline.hpp"

#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "binary_io.hpp"
#include "dysmm/error.hpp"

namespace dysmm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError(key + ": not a number: '" + s + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty())
    throw ConfigError(key + ": not a non-negative integer: '" + s + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

std::string conv_text(const std::vector<ConvLayerConfig>& layers) {
  std::string s;
  for (const auto& c : layers) {
    if (!s.empty()) s += ',';
    s += std::to_string(c.channels) + 'x' + std::to_string(c.kernel) + 'x' + std::to_string(c.time_stride) + 'x' +
         std::to_string(c.freq_stride);
  }
  return s;
}

std::vector<ConvLayerConfig> parse_conv(const std::string& key, const std::string& s) {
  std::vector<ConvLayerConfig> layers;
  for (const auto& item : split_list(s, ',')) {
    const auto parts = split_list(item, 'x');
    if (parts.size() != 4) throw ConfigError(key + ": expected channels x kernel x time_stride x freq_stride, got '" + item + "'");
    layers.push_back({parse_u64(key, parts[0]), parse_u64(key, parts[1]), parse_u64(key, parts[2]), parse_u64(key, parts[3])});
  }
  return layers;
}

struct KeyDef {
  const char* key;
  bool digested;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
};

#define DOUBLE_KEY(name, field, dig) \
  KeyDef{name, dig, [](const RunConfig& c) { return fmt_double(c.field); }, \
         [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_double(k, v); }}
#define SIZE_KEY(name, field, dig) \
  KeyDef{name, dig, [](const RunConfig& c) { return std::to_string(c.field); }, \
         [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_u64(k, v); }}
#define BOOL_KEY(name, field, dig) \
  KeyDef{name, dig, [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }, \
         [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_bool(k, v); }}
#define PATH_KEY(name, field) \
  KeyDef{name, false, [](const RunConfig& c) { return c.field.string(); }, \
         [](RunConfig& c, const std::string&, const std::string& v) { c.field = v; }}

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table = {
      DOUBLE_KEY("frontend.window_ms", frontend.window_ms, true),
      DOUBLE_KEY("frontend.hop_ms", frontend.hop_ms, true),
      SIZE_KEY("frontend.n_mels", frontend.n_mels, true),
      SIZE_KEY("frontend.fft_size", frontend.fft_size, true),
      DOUBLE_KEY("frontend.fmin", frontend.fmin, true),
      DOUBLE_KEY("frontend.fmax", frontend.fmax, true),
      DOUBLE_KEY("frontend.trim_threshold_db", frontend.trim_threshold_db, true),
      DOUBLE_KEY("frontend.max_duration_s", frontend.max_duration_s, true),
      BOOL_KEY("frontend.normalize", frontend.normalize, true),
      KeyDef{"model.modality", true, [](const RunConfig& c) { return to_string(c.model.modality); },
             [](RunConfig& c, const std::string& k, const std::string& v) {
               try {
                 c.model.modality = parse_modality(v);
               } catch (const Error& e) {
                 throw ConfigError(k + ": " + e.what());
               }
             }},
      KeyDef{"model.conv", true, [](const RunConfig& c) { return conv_text(c.model.conv_layers); },
             [](RunConfig& c, const std::string& k, const std::string& v) { c.model.conv_layers = parse_conv(k, v); }},
      DOUBLE_KEY("model.dropout", model.dropout_rate, true),
      SIZE_KEY("model.gru_hidden", model.gru_hidden, true),
      SIZE_KEY("model.speech_gru_layers", model.speech_gru_layers, true),
      SIZE_KEY("model.text_gru_layers", model.text_gru_layers, true),
      SIZE_KEY("model.embed_dim", model.embed_dim, true),
      SIZE_KEY("model.d_model", model.d_model, true),
      KeyDef{"model.head_dims", true,
             [](const RunConfig& c) {
               std::string s;
               for (auto h : c.model.head_dims) s += (s.empty() ? "" : ",") + std::to_string(h);
               return s;
             },
             [](RunConfig& c, const std::string& k, const std::string& v) {
               c.model.head_dims.clear();
               if (v.empty()) return;
               for (const auto& item : split_list(v, ',')) c.model.head_dims.push_back(parse_u64(k, item));
             }},
      DOUBLE_KEY("model.bn_momentum", model.bn_momentum, true),
      DOUBLE_KEY("model.bn_eps", model.bn_eps, true),
      DOUBLE_KEY("train.lr", train.lr, true),
      SIZE_KEY("train.plateau_patience", train.plateau_patience, true),
      DOUBLE_KEY("train.plateau_factor", train.plateau_factor, true),
      SIZE_KEY("train.early_stop_patience", train.early_stop_patience, true),
      DOUBLE_KEY("train.min_delta", train.min_delta, true),
      SIZE_KEY("train.max_epochs", train.max_epochs, true),
      SIZE_KEY("train.batch_size", train.batch_size, true),
      DOUBLE_KEY("train.validation_fraction", train.validation_fraction, true),
      BOOL_KEY("train.class_weighting", train.class_weighting, true),
      SIZE_KEY("seed", seed, true),
      KeyDef{"plan", false, [](const RunConfig& c) { return c.plan; },
             [](RunConfig& c, const std::string& k, const std::string& v) {
               try {
                 parse_protocol(v);
               } catch (const Error& e) {
                 throw ConfigError(k + ": " + e.what());
               }
               c.plan = v;
             }},
      KeyDef{"plan.selection", false, [](const RunConfig& c) { return to_string(c.selection); },
             [](RunConfig& c, const std::string& k, const std::string& v) {
               try {
                 c.selection = parse_uncommon_selection(v);
               } catch (const Error& e) {
                 throw ConfigError(k + ": " + e.what());
               }
             }},
      PATH_KEY("paths.manifest", manifest),
      PATH_KEY("paths.features", features),
      PATH_KEY("paths.out", out),
  };
  return table;
}

#undef DOUBLE_KEY
#undef SIZE_KEY
#undef BOOL_KEY
#undef PATH_KEY

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << text;
  if (!os) throw FormatError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string fold_file_id(const std::string& id) {
  std::string s = id;
  for (auto& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') ch = '_';
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& d : key_table()) out.push_back(d.key);
    return out;
  }();
  return k;
}

RunConfig RunConfig::parse(std::istream& in) {
  RunConfig c;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const KeyDef* def = nullptr;
    for (const auto& d : key_table())
      if (key == d.key) def = &d;
    if (!def) throw ConfigError("unknown config key: " + key);
    if (!seen.insert(key).second) throw ConfigError("config key given twice: " + key);
    def->set(c, key, value);
  }
  c.sync();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse(in);
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& d : key_table()) s += std::string(d.key) + " = " + d.get(*this) + "\n";
  return s;
}

void RunConfig::save(const fs::path& path) const { write_text(path, to_text()); }

void RunConfig::sync() {
  model.n_mels = frontend.n_mels;
  train.loss = loss_for(model.task);
}

void RunConfig::validate() const {
  try {
    frontend.validate();
    model.validate();
    train.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (model.n_mels != frontend.n_mels) throw ConfigError("model n_mels must equal frontend.n_mels");
}

std::uint64_t RunConfig::digest() const {
  std::string s = "task=" + to_string(model.task) + "\n";
  for (const auto& d : key_table())
    if (d.digested) s += std::string(d.key) + "=" + d.get(*this) + "\n";
  return fnv1a64(s);
}

std::string hex_digest(std::uint64_t d) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d));
  return buf;
}

// ---------------------------------------------------------------------------
// Features

std::string feature_file_name(const UtteranceRecord& r) {
  return r.speaker_id + "_" + r.word_id + "_B" + std::to_string(r.block) + ".feat";
}

std::uint64_t frontend_digest(const FrontendConfig& c) {
  RunConfig rc;
  rc.frontend = c;
  std::string s;
  for (const auto& d : key_table())
    if (std::string_view(d.key).starts_with("frontend.")) s += std::string(d.key) + "=" + d.get(rc) + "\n";
  return fnv1a64(s);
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w)
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  for (auto& t : workers) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

FeatureSummary build_feature_cache(const Manifest& m, const FrontendConfig& frontend, const fs::path& out_dir,
                                   std::size_t jobs) {
  frontend.validate();
  fs::create_directories(out_dir);
  std::vector<double> duration(m.size(), 0.0);
  std::vector<char> excluded(m.size(), 0);
  parallel_for(m.size(), jobs, [&](std::size_t i) {
    thread_local std::unique_ptr<LogMelExtractor> ex;
    thread_local std::uint64_t ex_digest = 0;
    if (!ex || ex_digest != frontend_digest(frontend)) {
      ex = std::make_unique<LogMelExtractor>(frontend);
      ex_digest = frontend_digest(frontend);
    }
    WaveForm w;
    try {
      w = trim_silence(load_wav(m.audio_path(i)), frontend);
    } catch (const Error& e) {
      throw FormatError(feature_file_name(m[i]) + ": " + e.what());
    }
    duration[i] = w.duration_s();
    if (duration[i] > frontend.max_duration_s) {
      excluded[i] = 1;
      return;
    }
    write_feature_cache(out_dir / feature_file_name(m[i]), ex->extract(w));
  });

  FeatureSummary summary;
  json ex = json::array();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (excluded[i]) {
      summary.excluded.push_back({i, feature_file_name(m[i]), duration[i]});
      ex.push_back({{"name", feature_file_name(m[i])}, {"duration_s", duration[i]}});
    } else {
      ++summary.written;
    }
  }
  json index = {{"frontend_digest", hex_digest(frontend_digest(frontend))},
                {"records", m.size()},
                {"written", summary.written},
                {"excluded", ex}};
  write_text(out_dir / "features.json", index.dump(2) + "\n");
  return summary;
}

FeatureSet load_features(const Manifest& m, const std::vector<std::size_t>& records, const fs::path& dir,
                         const FrontendConfig& frontend) {
  const json index = read_json(dir / "features.json");
  if (index.at("frontend_digest").get<std::string>() != hex_digest(frontend_digest(frontend)))
    throw FormatError(dir.string() + ": features were extracted with a different frontend configuration");
  std::set<std::string> excluded;
  for (const auto& e : index.at("excluded")) excluded.insert(e.at("name").get<std::string>());

  FeatureSet fs;
  for (auto i : records) {
    const std::string name = feature_file_name(m[i]);
    if (excluded.count(name)) {
      fs.excluded.push_back(i);
      continue;
    }
    if (!fs::exists(dir / name)) throw FormatError("missing feature cache " + (dir / name).string());
    Tensor t = read_feature_cache(dir / name).values;
    if (t.dim(1) != frontend.n_mels) throw FormatError(name + ": unexpected mel band count");
    fs.features.emplace(i, frontend.normalize ? normalize_utterance(t) : std::move(t));
  }
  return fs;
}

std::vector<Example> make_examples(const Manifest& m, const std::vector<std::size_t>& records, const FeatureSet& fs,
                                   Task task) {
  std::vector<Example> out;
  for (auto i : records) {
    auto it = fs.features.find(i);
    if (it == fs.features.end()) continue;
    out.push_back({&it->second, tokenize(normalize_word(m[i].word_text)), label_of(m[i], task), m[i].speaker_id});
  }
  return out;
}

namespace {

// Drops records without features from every fold so predictions stay aligned.
SplitPlan without_records(SplitPlan plan, const std::set<std::size_t>& drop) {
  if (drop.empty()) return plan;
  auto keep = [&](std::vector<std::size_t>& v) { std::erase_if(v, [&](std::size_t i) { return drop.count(i) > 0; }); };
  for (auto& f : plan.folds) {
    keep(f.train);
    keep(f.test);
  }
  return plan;
}

std::vector<std::size_t> all_records(const SplitPlan& plan) {
  std::set<std::size_t> s;
  for (const auto& f : plan.folds) {
    s.insert(f.train.begin(), f.train.end());
    s.insert(f.test.begin(), f.test.end());
  }
  return {s.begin(), s.end()};
}

RunConfig for_plan(RunConfig config, const SplitPlan& plan) {
  config.model.task = plan.task;
  config.sync();
  config.validate();
  return config;
}

}  // namespace

// ---------------------------------------------------------------------------
// Training and evaluation

FoldTraining train_fold(const RunConfig& config, const SplitPlan& plan, const Manifest& m, std::size_t fold,
                        const FeatureSet& features, Model& model) {
  const Fold& f = plan.folds.at(fold);
  auto examples = make_examples(m, f.train, features, plan.task);
  auto split = split_validation(examples, config.train.validation_fraction, derive_seed(config.seed, "validation", fold));
  TrainConfig tc = config.train;
  tc.seed = derive_seed(config.seed, "train", fold);
  FoldTraining out;
  out.fold_id = f.id;
  out.n_train = split.train.size();
  out.n_validation = split.validation.size();
  out.log = train_model(model, split.train, split.validation, tc);
  return out;
}

std::vector<FoldTraining> train_plan(const RunConfig& raw, const SplitPlan& raw_plan, const Manifest& m,
                                     const fs::path& out_dir, std::size_t jobs, std::ostream& log) {
  const RunConfig config = for_plan(raw, raw_plan);
  fs::create_directories(out_dir);
  FeatureSet features = load_features(m, all_records(raw_plan), config.features, config.frontend);
  const SplitPlan plan = without_records(raw_plan, {features.excluded.begin(), features.excluded.end()});
  const std::uint64_t digest = config.digest();

  RunConfig saved = config;
  saved.features = fs::absolute(config.features);
  saved.save(out_dir / "run.cfg");

  std::vector<FoldTraining> results(plan.folds.size());
  std::mutex log_mutex;
  parallel_for(plan.folds.size(), jobs, [&](std::size_t k) {
    Model model(config.model, derive_seed(config.seed, "model", k));
    results[k] = train_fold(config, plan, m, k, features, model);
    const std::string id = fold_file_id(plan.folds[k].id);
    save_checkpoint(out_dir / ("fold_" + id + ".ckpt"), model, digest);
    results[k].log.write_csv(out_dir / ("fold_" + id + "_log.csv"));
    std::lock_guard lock(log_mutex);
    const auto& r = results[k];
    log << "fold " << r.fold_id << ": " << r.log.epochs.size() << " epochs, best epoch " << r.log.best_epoch
        << ", val loss " << r.log.best_val_loss << (r.log.stopped_early ? " (early stop)" : "") << "\n";
  });

  json folds = json::array();
  for (const auto& r : results)
    folds.push_back({{"fold", r.fold_id},
                     {"train", r.n_train},
                     {"validation", r.n_validation},
                     {"epochs", r.log.epochs.size()},
                     {"best_epoch", r.log.best_epoch},
                     {"best_val_loss", r.log.best_val_loss},
                     {"stopped_early", r.log.stopped_early}});
  json summary = {{"config_digest", hex_digest(digest)},
                  {"seed", config.seed},
                  {"protocol", to_string(plan.protocol)},
                  {"task", to_string(plan.task)},
                  {"modality", to_string(config.model.modality)},
                  {"excluded_records", features.excluded.size()},
                  {"folds", folds}};
  write_text(out_dir / "train.json", summary.dump(2) + "\n");
  return results;
}

std::uint64_t checkpoint_digest(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "DCKP") throw FormatError(path.string() + ": not a checkpoint");
  io::read_le<std::uint32_t>(is, "version");
  return io::read_le<std::uint64_t>(is, "digest");
}

EvalReport evaluate_plan(const SplitPlan& raw_plan, const Manifest& m, const fs::path& ckpt_dir,
                         const fs::path& features_dir, std::size_t jobs) {
  if (!fs::exists(ckpt_dir / "run.cfg")) throw FormatError("missing " + (ckpt_dir / "run.cfg").string());
  RunConfig config = for_plan(RunConfig::load(ckpt_dir / "run.cfg"), raw_plan);
  if (!features_dir.empty()) config.features = features_dir;
  const std::uint64_t digest = config.digest();

  std::vector<fs::path> ckpts;
  for (const auto& f : raw_plan.folds) {
    auto p = ckpt_dir / ("fold_" + fold_file_id(f.id) + ".ckpt");
    if (!fs::exists(p)) throw FormatError("missing checkpoint for fold " + f.id + ": " + p.string());
    ckpts.push_back(p);
  }
  std::set<std::uint64_t> digests;
  for (const auto& p : ckpts) digests.insert(checkpoint_digest(p));
  if (digests.size() > 1) throw FormatError("checkpoints in " + ckpt_dir.string() + " carry mixed config digests");
  if (*digests.begin() != digest)
    throw FormatError("checkpoint digest " + hex_digest(*digests.begin()) + " does not match run.cfg digest " +
                      hex_digest(digest));

  std::vector<std::size_t> test_records;
  for (const auto& f : raw_plan.folds) test_records.insert(test_records.end(), f.test.begin(), f.test.end());
  FeatureSet features = load_features(m, test_records, config.features, config.frontend);
  const SplitPlan plan = without_records(raw_plan, {features.excluded.begin(), features.excluded.end()});

  std::vector<std::vector<int>> preds(plan.folds.size());
  parallel_for(plan.folds.size(), jobs, [&](std::size_t k) {
    Model model(config.model, 0);
    load_checkpoint(ckpts[k], model, digest);
    auto examples = make_examples(m, plan.folds[k].test, features, plan.task);
    preds[k] = evaluate(model, examples, config.train.batch_size).predictions;
  });
  std::map<std::string, std::vector<int>> by_fold;
  for (std::size_t k = 0; k < plan.folds.size(); ++k) by_fold[plan.folds[k].id] = std::move(preds[k]);
  EvalReport report = build_report(plan, m, by_fold);
  report.modality = to_string(config.model.modality);
  report.config_digest = digest;
  report.seed = config.seed;
  return report;
}

void write_report(const EvalReport& report, const fs::path& out_dir) {
  write_text(out_dir / "report.csv", report.to_csv());
  write_text(out_dir / "report.json", report.to_json());
}

// ---------------------------------------------------------------------------
// Synthetic gate

RunConfig gate_config(SyntheticTask task, Modality modality, std::uint64_t seed) {
  RunConfig c;
  c.seed = seed;
  c.model.task = task == SyntheticTask::detection_xor ? Task::detection : Task::severity;
  c.model.modality = modality;
  c.model.conv_layers = {{8, 3, 2, 2}, {8, 3, 2, 2}};
  c.model.speech_gru_layers = 1;
  c.model.gru_hidden = 32;
  c.model.embed_dim = 16;
  c.model.d_model = 32;
  c.model.head_dims = {32, 16};
  c.model.dropout_rate = 0.1;
  c.train.lr = 1e-3;
  c.train.max_epochs = 50;
  c.sync();
  c.validate();
  return c;
}

bool gate_passes(SyntheticTask task, Modality modality, double accuracy) {
  if (task == SyntheticTask::detection_xor) return modality == Modality::speech ? accuracy <= 0.60 : accuracy >= 0.95;
  return modality == Modality::speech ? accuracy <= 0.40 : accuracy >= 0.90;
}

GateResult run_synthetic_gate(const GateOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  if (opt.work_dir.empty()) throw ConfigError("synthetic gate: work_dir required");
  SyntheticConfig sc;
  sc.task = opt.task;
  sc.repetitions = opt.task == SyntheticTask::detection_xor ? 3 : 2;
  const std::string tag = to_string(opt.task) + "_" + std::to_string(opt.seed);
  const fs::path corpus = opt.work_dir / ("corpus_" + tag), feats = opt.work_dir / ("features_" + tag);
  // Both modalities of one seed share the corpus and its features.
  Manifest m;
  if (fs::exists(corpus / "manifest.csv") && fs::exists(feats / "features.json")) {
    m = load_manifest(corpus / "manifest.csv");
  } else {
    m = generate_synthetic_corpus(sc, derive_seed(opt.seed, "corpus"), corpus);
  }
  RunConfig cfg = gate_config(opt.task, opt.modality, opt.seed);
  if (!fs::exists(feats / "features.json")) build_feature_cache(m, cfg.frontend, feats);
  cfg.features = feats;

  const Task task = cfg.model.task;
  SplitPlan plan = build_speaker_holdout(m, task, opt.test_speakers, derive_seed(opt.seed, "split"));
  FeatureSet features = load_features(m, all_records(plan), feats, cfg.frontend);
  Model model(cfg.model, derive_seed(opt.seed, "model", 0));
  FoldTraining tr = train_fold(cfg, plan, m, 0, features, model);
  auto test = make_examples(m, plan.folds[0].test, features, task);
  EvalResult ev = evaluate(model, test, cfg.train.batch_size);

  GateResult r;
  r.test_accuracy = ev.accuracy;
  r.n_test = test.size();
  r.epochs = tr.log.epochs.size();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace dysmm
