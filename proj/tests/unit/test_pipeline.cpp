#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dysmm/error.hpp"
#include "dysmm/pipeline.hpp"

using namespace dysmm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("dysmm_pipe_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return RunConfig::parse(in);
}

std::string config_error(const std::string& text) {
  try {
    parse(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

// Small corpus shared by the training tests.
struct Fixture {
  fs::path dir;
  Manifest m;
  RunConfig cfg;
};

Fixture small_corpus(const std::string& name) {
  Fixture f;
  f.dir = temp_dir(name);
  SyntheticConfig sc;
  sc.n_words = 10;
  sc.n_speakers = 3;
  sc.repetitions = 1;
  f.m = generate_synthetic_corpus(sc, 4, f.dir / "corpus");
  f.cfg = gate_config(SyntheticTask::detection_xor, Modality::speech_text, 9);
  f.cfg.train.max_epochs = 2;
  f.cfg.features = f.dir / "features";
  build_feature_cache(f.m, f.cfg.frontend, f.cfg.features);
  return f;
}

struct Run {
  int status;
  std::string output;
};

Run run_cli(const std::string& args) {
  const std::string cmd = std::string(DYSMM_CLI) + " " + args + " 2>&1";
  Run r{0, {}};
  FILE* p = popen(cmd.c_str(), "r");
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), p)) r.output += buf.data();
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

}  // namespace

// --- RunConfig -------------------------------------------------------------------

TEST(RunConfig, EmptyTextGivesDefaults) {
  RunConfig c = parse("# nothing but a comment\n\n");
  EXPECT_EQ(c.model.n_mels, 80u);
  EXPECT_TRUE(c.model.is_reference());
  EXPECT_EQ(c.train.lr, 1e-4);
}

TEST(RunConfig, TextRoundTrip) {
  RunConfig c = parse(
      "model.conv = 4x3x2x2, 8x5x1x2\nmodel.head_dims = 16\ntrain.lr = 3e-3  # faster\nseed = 42\n"
      "frontend.n_mels = 40\nplan = SID-2\nplan.selection = block\npaths.out = /tmp/x\n");
  EXPECT_EQ(c.model.conv_layers.size(), 2u);
  EXPECT_EQ(c.model.conv_layers[1].kernel, 5u);
  EXPECT_EQ(c.model.n_mels, 40u);
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.train.lr, 3e-3);
  RunConfig back = parse(c.to_text());
  EXPECT_EQ(back.to_text(), c.to_text());
  EXPECT_EQ(back.digest(), c.digest());
  const std::string text = c.to_text();
  EXPECT_EQ(RunConfig::keys().size(), static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')));
}

TEST(RunConfig, ErrorsNameTheKey) {
  EXPECT_NE(config_error("train.learning_rate = 0.1\n").find("train.learning_rate"), std::string::npos);
  EXPECT_NE(config_error("train.lr = fast\n").find("train.lr"), std::string::npos);
  EXPECT_NE(config_error("seed = 1\nseed = 2\n").find("seed"), std::string::npos);
  EXPECT_NE(config_error("model.conv = 4x3x2\n").find("model.conv"), std::string::npos);
  EXPECT_NE(config_error("plan = LOSO\n").find("plan"), std::string::npos);
  EXPECT_NE(config_error("just words\n").find("line 1"), std::string::npos);
  EXPECT_FALSE(config_error("model.dropout = 1.5\n").empty());
}

TEST(RunConfig, DigestTracksWeightsNotPaths) {
  RunConfig a = parse(""), b = parse("paths.features = /elsewhere\nplan = SD\n"), c = parse("train.lr = 0.002\n");
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_NE(a.digest(), c.digest());
  RunConfig d = a;
  d.model.task = Task::severity;
  EXPECT_NE(a.digest(), d.digest());
}

// --- Features ----------------------------------------------------------------------

TEST(Features, HundredUtterancesNoExclusions) {
  const auto dir = temp_dir("feat100");
  SyntheticConfig sc;
  sc.n_words = 10;
  sc.n_speakers = 5;
  sc.repetitions = 1;
  Manifest m = generate_synthetic_corpus(sc, 1, dir / "corpus");
  ASSERT_EQ(m.size(), 100u);
  FrontendConfig fc;
  auto s = build_feature_cache(m, fc, dir / "a", 1);
  EXPECT_EQ(s.written, 100u);
  EXPECT_TRUE(s.excluded.empty());
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) files += e.path().extension() == ".feat";
  EXPECT_EQ(files, 100u);
  build_feature_cache(m, fc, dir / "b", 3);
  for (std::size_t i = 0; i < m.size(); ++i)
    EXPECT_EQ(file_bytes(dir / "a" / feature_file_name(m[i])), file_bytes(dir / "b" / feature_file_name(m[i])));
  EXPECT_EQ(file_bytes(dir / "a" / "features.json"), file_bytes(dir / "b" / "features.json"));
  fs::remove_all(dir);
}

TEST(Features, OverDurationListedNotDropped) {
  const auto dir = temp_dir("featlong");
  auto tone = [](double seconds) {
    WaveForm w;
    for (std::size_t i = 0; i < static_cast<std::size_t>(seconds * kSampleRate); ++i)
      w.samples.push_back(0.3 * std::sin(0.1 * static_cast<double>(i)));
    return w;
  };
  save_wav(dir / "short.wav", tone(1.0));
  save_wav(dir / "long.wav", tone(12.0));
  std::vector<UtteranceRecord> recs(2);
  recs[0] = {"S01", Cohort::healthy, Severity::none, "D1", "one", WordGroup::digit, 1, "short.wav"};
  recs[1] = {"S01", Cohort::healthy, Severity::none, "D2", "two", WordGroup::digit, 1, "long.wav"};
  Manifest m(recs, dir);
  FrontendConfig fc;
  auto s = build_feature_cache(m, fc, dir / "feat");
  EXPECT_EQ(s.written, 1u);
  ASSERT_EQ(s.excluded.size(), 1u);
  EXPECT_EQ(s.excluded[0].name, "S01_D2_B1.feat");
  EXPECT_NEAR(s.excluded[0].duration_s, 12.0, 0.02);
  EXPECT_NE(file_bytes(dir / "feat" / "features.json").find("S01_D2_B1.feat"), std::string::npos);

  auto loaded = load_features(m, {0, 1}, dir / "feat", fc);
  EXPECT_EQ(loaded.features.size(), 1u);
  EXPECT_EQ(loaded.excluded, std::vector<std::size_t>{1});

  FrontendConfig other = fc;
  other.trim_threshold_db = 30;
  EXPECT_THROW(load_features(m, {0}, dir / "feat", other), FormatError);
  fs::remove(dir / "feat" / "S01_D1_B1.feat");
  EXPECT_THROW(load_features(m, {0}, dir / "feat", fc), FormatError);
  fs::remove(dir / "short.wav");
  EXPECT_THROW(build_feature_cache(m, fc, dir / "feat2"), FormatError);
  fs::remove_all(dir);
}

TEST(Parallel, RunsEveryIndexAndPropagatesErrors) {
  std::vector<int> hits(50, 0);
  parallel_for(50, 4, [&](std::size_t i) { hits[i]++; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw InvariantError("seven");
               }),
               InvariantError);
}

// --- Training and evaluation ----------------------------------------------------------

TEST(Pipeline, TrainEvaluateAndReport) {
  auto f = small_corpus("train");
  SplitPlan plan = build_sid_loso(f.m, Protocol::SID1, 1);
  ASSERT_EQ(plan.folds.size(), 3u);
  std::ostringstream log;
  auto res = train_plan(f.cfg, plan, f.m, f.dir / "run", 2, log);
  ASSERT_EQ(res.size(), 3u);
  for (const auto& fold : plan.folds) {
    EXPECT_TRUE(fs::exists(f.dir / "run" / ("fold_" + fold.id + ".ckpt")));
    EXPECT_TRUE(fs::exists(f.dir / "run" / ("fold_" + fold.id + "_log.csv")));
  }
  EXPECT_TRUE(fs::exists(f.dir / "run" / "run.cfg"));
  EvalReport rep = evaluate_plan(plan, f.m, f.dir / "run");
  EXPECT_EQ(rep.columns.size(), 12u);
  EXPECT_EQ(rep.column("All words").total, f.m.size());
  EXPECT_EQ(rep.modality, "speech-text");
  EXPECT_EQ(rep.seed, 9u);

  // jobs does not change the outcome.
  train_plan(f.cfg, plan, f.m, f.dir / "run1", 1, log);
  for (const auto& fold : plan.folds)
    EXPECT_EQ(file_bytes(f.dir / "run" / ("fold_" + fold.id + ".ckpt")),
              file_bytes(f.dir / "run1" / ("fold_" + fold.id + ".ckpt")));
  fs::remove_all(f.dir);
}

TEST(Pipeline, EvalErrors) {
  auto f = small_corpus("evalerr");
  SplitPlan plan = build_sid_loso(f.m, Protocol::SID1, 1);
  std::ostringstream log;
  train_plan(f.cfg, plan, f.m, f.dir / "run", 1, log);

  // A checkpoint from another configuration mixes digests.
  RunConfig other = f.cfg;
  other.train.lr = 5e-4;
  train_plan(other, plan, f.m, f.dir / "other", 1, log);
  const std::string moved = "fold_" + plan.folds[1].id + ".ckpt";
  fs::copy_file(f.dir / "other" / moved, f.dir / "run" / moved, fs::copy_options::overwrite_existing);
  try {
    evaluate_plan(plan, f.m, f.dir / "run");
    FAIL() << "mixed digests accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("mixed"), std::string::npos);
  }

  fs::remove(f.dir / "run" / moved);
  try {
    evaluate_plan(plan, f.m, f.dir / "run");
    FAIL() << "missing checkpoint accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("fold " + plan.folds[1].id), std::string::npos);
  }
  fs::remove_all(f.dir);
}

TEST(Gate, Thresholds) {
  EXPECT_TRUE(gate_passes(SyntheticTask::detection_xor, Modality::speech, 0.60));
  EXPECT_FALSE(gate_passes(SyntheticTask::detection_xor, Modality::speech, 0.61));
  EXPECT_TRUE(gate_passes(SyntheticTask::detection_xor, Modality::speech_text, 0.95));
  EXPECT_FALSE(gate_passes(SyntheticTask::detection_xor, Modality::speech_text, 0.94));
  EXPECT_TRUE(gate_passes(SyntheticTask::severity_mod4, Modality::speech, 0.40));
  EXPECT_FALSE(gate_passes(SyntheticTask::severity_mod4, Modality::speech_text, 0.89));
}

// --- Command line ----------------------------------------------------------------------

TEST(Cli, EndToEndOnSyntheticCorpus) {
  const auto dir = temp_dir("cli");
  const std::string d = dir.string();
  ASSERT_EQ(run_cli("synth --task detection-xor --out-dir " + d + "/corpus --seed 3 --speakers 3 --repetitions 1").status, 0);
  std::ofstream(dir / "run.cfg") << "model.conv = 4x3x2x2\nmodel.gru_hidden = 8\nmodel.speech_gru_layers = 1\n"
                                    "model.embed_dim = 8\nmodel.d_model = 8\nmodel.head_dims = 8\ntrain.max_epochs = 2\n"
                                    "train.lr = 0.001\nseed = 5\n";
  auto feat = run_cli("features --manifest " + d + "/corpus/manifest.csv --out-dir " + d + "/feat --config " + d + "/run.cfg");
  EXPECT_EQ(feat.status, 0) << feat.output;
  EXPECT_NE(feat.output.find("120 cached, 0 excluded"), std::string::npos) << feat.output;

  auto sp = run_cli("splits --manifest " + d + "/corpus/manifest.csv --plan SID-1 --seed 1 --out " + d + "/plan.json");
  EXPECT_EQ(sp.status, 0) << sp.output;
  EXPECT_NE(sp.output.find("3 folds"), std::string::npos);
  run_cli("splits --manifest " + d + "/corpus/manifest.csv --plan SID-1 --seed 1 --out " + d + "/plan2.json");
  EXPECT_EQ(file_bytes(dir / "plan.json"), file_bytes(dir / "plan2.json"));

  for (const char* modality : {"speech", "speech-text"}) {
    const std::string out = d + "/ck_" + modality;
    auto tr = run_cli("train --plan-file " + d + "/plan.json --features " + d + "/feat --config " + d +
                      "/run.cfg --modality " + modality + " --out " + out);
    ASSERT_EQ(tr.status, 0) << tr.output;
    auto ev = run_cli("eval --plan-file " + d + "/plan.json --checkpoints " + out + " --out " + out + "/report");
    ASSERT_EQ(ev.status, 0) << ev.output;
    const std::string csv = file_bytes(out + "/report/report.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 13);
    EXPECT_NE(csv.find("All words,"), std::string::npos);
    EXPECT_NE(file_bytes(out + "/report/report.json").find("\"modality\": \"" + std::string(modality)), std::string::npos);
  }
  fs::remove(dir / "ck_speech" / ("fold_" + std::string("S01") + ".ckpt"));
  auto missing = run_cli("eval --plan-file " + d + "/plan.json --checkpoints " + d + "/ck_speech");
  EXPECT_NE(missing.status, 0);
  EXPECT_NE(missing.output.find("fold S01"), std::string::npos) << missing.output;
  fs::remove_all(dir);
}

TEST(Cli, UsageAndConfigErrors) {
  const auto dir = temp_dir("cli_err");
  auto bad_suite = run_cli("verify --suite everything");
  EXPECT_NE(bad_suite.status, 0);
  EXPECT_NE(bad_suite.output.find("everything"), std::string::npos);
  EXPECT_NE(run_cli("").status, 0);

  std::ofstream(dir / "bad.cfg") << "train.lr = 0.001\ntrain.momentum = 0.9\n";
  auto tr = run_cli("train --plan-file " + (dir / "plan.json").string() + " --config " + (dir / "bad.cfg").string() +
                    " --features " + dir.string() + " --out " + (dir / "o").string());
  EXPECT_NE(tr.status, 0);
  EXPECT_NE(tr.output.find("train.momentum"), std::string::npos) << tr.output;

  auto bayes = run_cli("verify --suite bayes");
  EXPECT_EQ(bayes.status, 0);
  EXPECT_NE(bayes.output.find("1000/1000 tables agree"), std::string::npos);
  fs::remove_all(dir);
}
