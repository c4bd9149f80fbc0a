// One PASS/FAIL line per acceptance criterion; details follow each line.
// Usage: acceptance [work_dir] [--skip-synth]

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dysmm/verify.hpp"

using namespace dysmm;

int main(int argc, char** argv) {
  std::filesystem::path work = std::filesystem::temp_directory_path() / "dysmm_acceptance";
  bool skip_synth = false;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--skip-synth") == 0) skip_synth = true;
    else work = argv[i];
  }
  std::filesystem::remove_all(work);

  struct Criterion {
    int id;
    const char* what;
    std::function<verify::SuiteResult()> run;
    double budget_s;  // 0: no runtime bound beyond the suite's own checks
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient correctness", [] { return verify::grad(100, 1e-4); }, 120.0},
      {2, "DSP oracle", [] { return verify::dsp(1); }, 0.0},
      {3, "Bayes decision-rule equivalence", [] { return verify::bayes(1000, 1); }, 5.0},
      {4, "attention invariants", [] { return verify::attention(50, 1); }, 0.0},
      {5, "protocol invariants", [] { return verify::splits(nullptr, 1); }, 0.0},
      {6, "synthetic fusion gate",
       [&] {
         verify::SynthOptions o;
         o.work_dir = work / "synth";
         return verify::synth(o);
       },
       0.0},
      {7, "training-control behaviour", [] { return verify::control(); }, 0.0},
      {8, "determinism", [&] { return verify::determinism(work / "determinism", 1); }, 0.0},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (c.id == 6 && skip_synth) {
      std::printf("criterion 6: FAIL synthetic fusion gate (skipped on request)\n");
      ++failed;
      continue;
    }
    verify::SuiteResult r;
    std::string error;
    try {
      r = c.run();
    } catch (const std::exception& e) {
      r.passed = false;
      error = e.what();
    }
    bool ok = r.passed && error.empty();
    if (c.budget_s > 0 && r.seconds >= c.budget_s) ok = false;
    std::printf("criterion %d: %s %s (%.1f s)\n", c.id, ok ? "PASS" : "FAIL", c.what, r.seconds);
    for (const auto& line : r.lines) std::printf("    %s\n", line.c_str());
    if (!error.empty()) std::printf("    error: %s\n", error.c_str());
    std::fflush(stdout);
    failed += !ok;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
