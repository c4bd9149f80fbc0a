// dysmm: features, splits, training, evaluation and self-checks.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "dysmm/error.hpp"
#include "dysmm/pipeline.hpp"
#include "dysmm/verify.hpp"

using namespace dysmm;
namespace fs = std::filesystem;

namespace {

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : RunConfig::load(path); }

int cmd_features(const std::string& manifest, const std::string& out_dir, const std::string& config, std::size_t jobs) {
  RunConfig cfg = config_or_default(config);
  Manifest m = load_manifest(manifest);
  FeatureSummary s = build_feature_cache(m, cfg.frontend, out_dir, jobs);
  std::cout << "features: " << m.size() << " utterances, " << s.written << " cached, " << s.excluded.size()
            << " excluded (> " << cfg.frontend.max_duration_s << " s after trimming)\n";
  for (const auto& e : s.excluded) std::cout << "excluded " << e.name << " (" << e.duration_s << " s)\n";
  return 0;
}

struct SplitArgs {
  std::string manifest, plan, out, task = "detection", selection = "random", words = "SID-1", config;
  std::uint64_t seed = 0;
  std::size_t test_speakers = 4;
};

int cmd_splits(const SplitArgs& a) {
  Manifest m = load_manifest(a.manifest);
  const Protocol p = parse_protocol(a.plan);
  const UncommonSelection sel = parse_uncommon_selection(a.selection);
  SplitPlan plan;
  switch (p) {
    case Protocol::SD: plan = build_sd_split(m, a.seed, sel); break;
    case Protocol::SID1:
    case Protocol::SID2: plan = build_sid_loso(m, p, a.seed, sel); break;
    case Protocol::SEVERITY: plan = build_severity_split(m, parse_protocol(a.words), a.seed, sel); break;
    case Protocol::HOLDOUT: plan = build_speaker_holdout(m, parse_task(a.task), a.test_speakers, a.seed); break;
  }
  if (auto v = check_plan(plan, m); !v.empty()) throw InvariantError("plan check failed: " + v.front());
  const std::uint64_t digest = a.config.empty() ? 0 : config_or_default(a.config).digest();
  save_plan(a.out, plan, m, digest);
  std::cout << "plan " << to_string(plan.protocol) << " (" << to_string(plan.task) << "): " << plan.folds.size()
            << " folds written to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string plan_file, features, config, modality, out;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = config_or_default(a.config);
  if (!a.features.empty()) cfg.features = a.features;
  if (!a.modality.empty()) cfg.model.modality = parse_modality(a.modality);
  if (a.seed) cfg.seed = *a.seed;
  if (cfg.features.empty()) throw ConfigError("no feature directory: pass --features or set paths.features");
  auto [plan, m] = load_plan(a.plan_file);
  const std::string out = a.out.empty() ? cfg.out.string() : a.out;
  if (out.empty()) throw ConfigError("no output directory: pass --out or set paths.out");
  auto results = train_plan(cfg, plan, m, out, a.jobs, std::cout);
  std::cout << "trained " << results.size() << " folds (" << to_string(cfg.model.modality) << "), checkpoints in " << out
            << "\n";
  return 0;
}

int cmd_eval(const std::string& plan_file, const std::string& ckpts, const std::string& out, const std::string& features,
             std::size_t jobs) {
  auto [plan, m] = load_plan(plan_file);
  EvalReport rep = evaluate_plan(plan, m, ckpts, features, jobs);
  const std::string dir = out.empty() ? ckpts : out;
  write_report(rep, dir);
  std::cout << rep.to_csv() << "report written to " << (fs::path(dir) / "report.csv").string() << " and report.json\n";
  return 0;
}

int cmd_verify(const std::string& suite, std::size_t seeds, const std::string& work_dir) {
  verify::SuiteResult r;
  const fs::path work = work_dir.empty() ? fs::temp_directory_path() / "dysmm_verify" : fs::path(work_dir);
  if (suite == "grad") r = verify::grad(seeds);
  else if (suite == "dsp") r = verify::dsp();
  else if (suite == "bayes") r = verify::bayes();
  else if (suite == "attention") r = verify::attention();
  else if (suite == "splits") r = verify::splits();
  else if (suite == "control") r = verify::control();
  else if (suite == "determinism") r = verify::determinism(work / "determinism");
  else {
    verify::SynthOptions o;
    o.work_dir = work / "synth";
    o.seeds.clear();
    for (std::size_t s = 1; s <= std::min<std::size_t>(seeds, 3); ++s) o.seeds.push_back(s);
    r = verify::synth(o);
  }
  for (const auto& line : r.lines) std::cout << line << "\n";
  std::size_t failed = 0;
  for (const auto& line : r.lines) failed += line.rfind("FAIL", 0) == 0;
  std::printf("%s: %s (%zu checks, %zu failed, %.1f s)\n", r.suite.c_str(), r.passed ? "PASS" : "FAIL", r.lines.size(),
              failed, r.seconds);
  return r.passed ? 0 : 1;
}

int cmd_synth(const std::string& task, const std::string& out_dir, std::uint64_t seed, std::size_t speakers,
              std::size_t reps) {
  SyntheticConfig c;
  c.task = parse_synthetic_task(task);
  c.n_speakers = speakers;
  c.repetitions = reps;
  Manifest m = generate_synthetic_corpus(c, seed, out_dir);
  std::cout << "synthetic " << task << ": " << m.size() << " utterances, manifest " << out_dir << "/manifest.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dysarthric speech assessment with speech and text cross-attention"};
  app.require_subcommand(1);

  std::string manifest, out_dir, config, out, plan_file, features, ckpts, suite, work_dir, modality, task_name;
  std::size_t jobs = 1, seeds = 100, speakers = 16, reps = 3;
  std::uint64_t seed = 0;

  auto* feat = app.add_subcommand("features", "Extract log-mel feature caches");
  feat->add_option("--manifest", manifest, "Manifest CSV")->required();
  feat->add_option("--out-dir", out_dir, "Cache directory")->required();
  feat->add_option("--config", config, "Run config (key=value)");
  feat->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

  SplitArgs sa;
  auto* spl = app.add_subcommand("splits", "Build a split plan");
  spl->add_option("--manifest", sa.manifest)->required();
  spl->add_option("--plan", sa.plan, "SD|SID-1|SID-2|SEVERITY|HOLDOUT")
      ->required()
      ->check(CLI::IsMember({"SD", "SID-1", "SID-2", "SEVERITY", "HOLDOUT"}));
  spl->add_option("--seed", sa.seed);
  spl->add_option("--out", sa.out, "Plan JSON")->required();
  spl->add_option("--selection", sa.selection, "Uncommon word selection")->check(CLI::IsMember({"random", "block"}));
  spl->add_option("--words", sa.words, "Word handling for SEVERITY")->check(CLI::IsMember({"SD", "SID-1", "SID-2"}));
  spl->add_option("--task", sa.task, "Task for HOLDOUT")->check(CLI::IsMember({"detection", "severity"}));
  spl->add_option("--test-speakers", sa.test_speakers, "Held-out speakers for HOLDOUT");
  spl->add_option("--config", sa.config, "Run config whose digest is recorded in the plan");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train one model per fold");
  tr->add_option("--plan-file", ta.plan_file)->required();
  tr->add_option("--features", ta.features, "Feature cache directory");
  tr->add_option("--config", ta.config);
  tr->add_option("--modality", ta.modality)->check(CLI::IsMember({"speech", "speech-text"}));
  tr->add_option("--out", ta.out, "Checkpoint directory");
  tr->add_option("--seed", ta.seed);
  tr->add_option("--jobs", ta.jobs, "Folds trained concurrently")->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("eval", "Evaluate fold checkpoints");
  ev->add_option("--plan-file", plan_file)->required();
  ev->add_option("--checkpoints", ckpts)->required();
  ev->add_option("--out", out, "Report directory (default: checkpoint directory)");
  ev->add_option("--features", features, "Override the feature directory recorded in run.cfg");
  ev->add_option("--jobs", jobs)->check(CLI::PositiveNumber);

  auto* ver = app.add_subcommand("verify", "Run a self-check suite");
  ver->add_option("--suite", suite)->required()->check(CLI::IsMember(verify::suite_names()));
  ver->add_option("--seeds", seeds, "Seeds for grad; gate seeds (max 3) for synth");
  ver->add_option("--work-dir", work_dir, "Scratch directory for synth and determinism");

  auto* syn = app.add_subcommand("synth", "Generate a synthetic verification corpus");
  syn->add_option("--task", task_name)->required()->check(CLI::IsMember({"detection-xor", "severity-mod4"}));
  syn->add_option("--out-dir", out_dir)->required();
  syn->add_option("--seed", seed);
  syn->add_option("--speakers", speakers);
  syn->add_option("--repetitions", reps);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*feat) return cmd_features(manifest, out_dir, config, jobs);
    if (*spl) return cmd_splits(sa);
    if (*tr) return cmd_train(ta);
    if (*ev) return cmd_eval(plan_file, ckpts, out, features, jobs);
    if (*ver) return cmd_verify(suite, seeds, work_dir);
    if (*syn) return cmd_synth(task_name, out_dir, seed, speakers, reps);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
