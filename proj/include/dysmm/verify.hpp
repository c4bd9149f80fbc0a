#pragma once

// Self-check suites behind `dysmm verify` and the acceptance binary.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dysmm/autodiff.hpp"
#include "dysmm/harness.hpp"

namespace dysmm::verify {

struct SuiteResult {
  std::string suite;
  bool passed = false;
  std::vector<std::string> lines;  // human-readable findings, one per check
  double seconds = 0.0;
};

/// A differentiable primitive exercised through a scalar test function.
struct PrimitiveCase {
  std::string name;
  std::vector<Shape> shapes;
  ScalarFn fn;
};

const std::vector<PrimitiveCase>& primitive_cases();

/// Finite-difference checks of every primitive and of reduced full networks
/// (both tasks, both modalities), one random draw per seed.
SuiteResult grad(std::size_t seeds = 100, double tolerance = 1e-4);

/// FFT against a naive DFT, filterbank against a triangle oracle, frame counts, mel scale.
SuiteResult dsp(std::uint64_t seed = 1);

SuiteResult bayes(std::size_t tables = 1000, std::uint64_t seed = 1);

/// Row sums, masked weights, padding invariance and the brute-force formula.
SuiteResult attention(std::size_t trials = 50, std::uint64_t seed = 1);

/// Protocol invariants on `m` (the corpus layout when null).
SuiteResult splits(const Manifest* m = nullptr, std::uint64_t seed = 1);

/// Scripted schedules and best-epoch restoration.
SuiteResult control();

/// Runs features, training and evaluation twice and compares bytes.
SuiteResult determinism(const std::filesystem::path& work_dir, std::uint64_t seed = 1);

struct SynthOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<SyntheticTask> tasks{SyntheticTask::detection_xor, SyntheticTask::severity_mod4};
  std::filesystem::path work_dir;
  double max_seconds_per_run = 600.0;
};

SuiteResult synth(const SynthOptions& options);

const std::vector<std::string>& suite_names();

}  // namespace dysmm::verify
