#include "dysmm/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "dysmm/audio.hpp"
#include "dysmm/error.hpp"
#include "dysmm/pipeline.hpp"
#include "dysmm/training.hpp"

namespace dysmm::verify {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Records a check and folds it into the suite verdict.
void check(SuiteResult& r, bool ok, const std::string& line) {
  r.lines.push_back((ok ? "ok   " : "FAIL ") + line);
  if (!ok) r.passed = false;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

const std::vector<PrimitiveCase>& primitive_cases() {
  static const std::vector<PrimitiveCase> cases = [] {
    Tensor mask3(Shape{2, 1, 4}, 1.0);
    mask3[3] = 0.0;
    std::vector<PrimitiveCase> c = {
        {"add", {{3, 4}, {3, 4}}, [](Tape&, auto in) { return sum(mul(add(in[0], in[1]), in[0])); }},
        {"sub", {{3, 4}, {3, 4}}, [](Tape&, auto in) { return sum(mul(sub(in[0], in[1]), in[1])); }},
        {"mul", {{5}, {5}}, [](Tape&, auto in) { return sum(mul(in[0], in[1])); }},
        {"add_bias", {{2, 3, 4}, {4}}, [](Tape&, auto in) { return sum(tanh(add_bias(in[0], in[1]))); }},
        {"scale", {{4}}, [](Tape&, auto in) { return sum(tanh(scale(in[0], -1.7))); }},
        {"add_scalar", {{4}}, [](Tape&, auto in) { return sum(tanh(add_scalar(in[0], 0.3))); }},
        {"matmul", {{2, 3, 4}, {4, 5}}, [](Tape&, auto in) { return sum(tanh(matmul(in[0], in[1]))); }},
        {"bmm", {{2, 3, 4}, {2, 4, 5}}, [](Tape&, auto in) { return sum(tanh(batched_matmul(in[0], in[1]))); }},
        {"bmm_t", {{2, 3, 4}, {2, 5, 4}},
         [](Tape&, auto in) { return sum(tanh(batched_matmul(in[0], in[1], true))); }},
        {"sigmoid", {{6}}, [](Tape&, auto in) { return sum(mul(sigmoid(in[0]), in[0])); }},
        {"tanh", {{6}}, [](Tape&, auto in) { return sum(mul(tanh(in[0]), in[0])); }},
        {"relu", {{6}}, [](Tape&, auto in) { return sum(mul(relu(in[0]), in[0])); }},
        {"log", {{6}}, [](Tape&, auto in) { return sum(log(add_scalar(mul(in[0], in[0]), 0.5))); }},
        {"exp", {{6}}, [](Tape&, auto in) { return sum(exp(in[0])); }},
        {"concat", {{2, 3}, {2, 2}},
         [](Tape&, auto in) {
           std::vector<Var> parts{in[0], in[1]};
           return sum(tanh(concat(parts, 1)));
         }},
        {"slice", {{3, 5}}, [](Tape&, auto in) { return sum(tanh(slice(in[0], 1, 1, 4))); }},
        {"reshape", {{2, 6}}, [](Tape& t, auto in) {
           Tensor w(Shape{3, 4});
           for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.2 * static_cast<double>(i) - 1.0;
           return sum(mul(tanh(reshape(in[0], {3, 4})), t.constant(w)));
         }},
        {"permute", {{2, 3, 4}}, [](Tape& t, auto in) {
           Tensor w(Shape{4, 2, 3});
           for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.1 * static_cast<double>(i);
           return sum(mul(permute(in[0], {2, 0, 1}), t.constant(w)));
         }},
        {"mean_axis", {{2, 3, 4}}, [](Tape&, auto in) { return sum(tanh(mean_axis(in[0], 1))); }},
        {"mean", {{2, 3}}, [](Tape&, auto in) { return mean(mul(in[0], in[0])); }},
        {"embedding", {{5, 3}}, [](Tape&, auto in) {
           std::vector<int> ids{4, 0, 4, 2};
           return sum(tanh(embedding(in[0], ids, {2, 2})));
         }},
        {"conv2d", {{1, 2, 5, 4}, {3, 2, 3, 3}, {3}},
         [](Tape&, auto in) { return sum(tanh(conv2d(in[0], in[1], in[2], {2, 1, 1, 1}))); }},
        {"batchnorm_train", {{3, 2, 4}, {2}, {2}}, [](Tape& t, auto in) {
           BatchNormState st{Tensor(Shape{2}, 0.0), Tensor(Shape{2}, 1.0)};
           Tensor w(Shape{3, 1, 4}, 1.0);
           w[2] = 0.0;
           w[7] = 0.0;
           Var y = batchnorm(in[0], in[1], in[2], st, Mode::train, {}, &w);
           return sum(mul(tanh(y), t.constant(Tensor(Shape{3, 2, 4}, 0.7))));
         }},
        {"batchnorm_eval", {{3, 2, 4}, {2}, {2}}, [](Tape&, auto in) {
           BatchNormState st{Tensor::vector({0.1, -0.2}), Tensor::vector({0.5, 2.0})};
           return sum(tanh(batchnorm(in[0], in[1], in[2], st, Mode::eval)));
         }},
        {"dropout", {{2, 5}}, [](Tape&, auto in) {
           Rng r(11);  // same mask on every evaluation
           return sum(tanh(dropout(in[0], 0.4, Mode::train, r)));
         }},
        {"masked_softmax", {{2, 3, 4}, {2, 3, 4}},
         [mask3](Tape&, auto in) { return sum(mul(masked_softmax(in[0], &mask3, 2), in[1])); }},
        {"blend", {{2, 3}, {2, 3}}, [](Tape&, auto in) {
           Tensor m(Shape{2, 1}, 0.0);
           m[0] = 1.0;
           return sum(mul(blend(m, in[0], in[1]), in[0]));
         }},
        {"mul_const", {{2, 3}}, [](Tape&, auto in) {
           Tensor c(Shape{1, 3});
           c[0] = 0.5;
           c[1] = -2.0;
           c[2] = 3.0;
           return sum(tanh(mul_const(in[0], c)));
         }},
        {"bce_loss", {{4, 1}}, [](Tape&, auto in) {
           std::vector<int> y{1, 0, 0, 1};
           std::vector<double> w{1.0, 0.5, 2.0, 1.0};
           return bce_loss(sigmoid(in[0]), y, w);
         }},
        {"cce_loss", {{3, 4}}, [](Tape&, auto in) {
           std::vector<int> y{2, 0, 3};
           return cce_loss(softmax(in[0], 1), y);
         }},
    };
    return c;
  }();
  return cases;
}

namespace {

ModelConfig reduced_config(Task task, Modality modality) {
  ModelConfig c;
  c.task = task;
  c.modality = modality;
  c.n_mels = 8;
  c.conv_layers = {{2, 3, 2, 2}, {2, 3, 1, 2}};
  c.dropout_rate = 0.2;
  c.gru_hidden = 4;
  c.speech_gru_layers = 1;
  c.embed_dim = 4;
  c.d_model = 4;
  c.head_dims = {4};
  return c;
}

const std::vector<std::string> kWords{"cat", "ox", "go", "left", "nine", "b"};

}  // namespace

SuiteResult grad(std::size_t seeds, double tolerance) {
  const auto t0 = Clock::now();
  SuiteResult r{"grad", true, {}, 0.0};
  double worst_prim = 0.0;
  std::size_t checks = 0;
  for (const auto& c : primitive_cases()) {
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng(derive_seed(1, c.name, s));
      std::vector<Tensor> inputs;
      for (const auto& shape : c.shapes) inputs.push_back(random_tensor(shape, rng));
      worst = std::max(worst, grad_check(c.fn, inputs, 1e-5, tolerance).max_rel_error);
      ++checks;
    }
    if (!(worst < tolerance)) check(r, false, c.name + ": max relative error " + fmt("%.3e", worst));
    worst_prim = std::max(worst_prim, worst);
  }
  check(r, worst_prim < tolerance,
        std::to_string(primitive_cases().size()) + " primitives x " + std::to_string(seeds) +
            " seeds: max relative error " + fmt("%.3e", worst_prim));

  double worst_net = 0.0;
  for (std::size_t s = 0; s < seeds; ++s) {
    const Task task = s % 2 ? Task::severity : Task::detection;
    const Modality modality = (s / 2) % 2 ? Modality::speech : Modality::speech_text;
    Rng rng(derive_seed(2, "network", s));
    Model model(reduced_config(task, modality), derive_seed(3, "network", s));
    std::vector<Tensor> mels;
    std::vector<Example> ex;
    for (int b = 0; b < 2; ++b) mels.push_back(random_tensor({4 + rng.below(5), 8}, rng, -2, 2));
    for (int b = 0; b < 2; ++b)
      ex.push_back({&mels[b], tokenize(kWords[rng.below(kWords.size())]),
                    static_cast<int>(rng.below(model.config().n_classes())), "S"});
    const Example* items[] = {&ex[0], &ex[1]};
    BatchData batch = make_batch(items);
    const Mode mode = s % 3 == 2 ? Mode::eval : Mode::train;
    auto rep = grad_check_parameters(
        [&](Tape& tape) {
          Rng dr(derive_seed(4, "dropout", s));
          return batch_loss(model, tape, batch, loss_for(task), mode, dr);
        },
        model.parameters(), 1e-6, tolerance);
    worst_net = std::max(worst_net, rep.max_rel_error);
    ++checks;
  }
  check(r, worst_net < tolerance,
        "reduced network (" + std::to_string(seeds) + " seeds, both tasks and modalities): max relative error " +
            fmt("%.3e", worst_net));
  r.seconds = since(t0);
  r.lines.push_back(std::to_string(checks) + " checks, threshold " + fmt("%.0e", tolerance) + ", " +
                    fmt("%.1f s", r.seconds));
  return r;
}

SuiteResult dsp(std::uint64_t seed) {
  const auto t0 = Clock::now();
  SuiteResult r{"dsp", true, {}, 0.0};
  Rng rng(seed);

  const double m1000 = hz_to_mel(1000.0);
  check(r, std::abs(m1000 - 999.99) <= 0.01, "mel(1000 Hz) = " + fmt("%.4f", m1000));

  // Naive O(n^2) DFT of the Hann-windowed, zero-padded frame.
  FrontendConfig cfg;
  LogMelExtractor ex(cfg);
  const std::size_t win = cfg.window_samples(), nfft = cfg.fft_size;
  double worst = 0.0;
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<double> frame(win);
    for (auto& v : frame) v = rng.uniform(-1, 1);
    const auto fast = ex.power_spectrum(frame);
    for (std::size_t k = 0; k <= nfft / 2; ++k) {
      std::complex<double> acc = 0;
      for (std::size_t i = 0; i < win; ++i) {
        const double w = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(win));
        acc += frame[i] * w * std::polar(1.0, -2 * std::numbers::pi * static_cast<double>(k * i % nfft) / nfft);
      }
      worst = std::max(worst, std::abs(std::sqrt(fast[k]) - std::abs(acc)));
    }
  }
  check(r, worst <= 1e-8, "STFT magnitude vs naive DFT (40 frames): max abs error " + fmt("%.3e", worst));

  // Filterbank against a triangle built bin by bin with explicit branches.
  auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  auto hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  std::vector<FrontendConfig> variants(3);
  variants[1].n_mels = 40;
  variants[1].fft_size = 1024;
  variants[2].fmin = 20;
  variants[2].fmax = 7600;
  for (const auto& v : variants) {
    Tensor fb = mel_filterbank_matrix(v);
    std::size_t mismatches = 0;
    for (std::size_t m = 0; m < v.n_mels; ++m) {
      const auto pt = [&](std::size_t i) {
        return hz(mel(v.fmin) + (mel(v.fmax) - mel(v.fmin)) * double(i) / double(v.n_mels + 1));
      };
      const double lo = pt(m), c = pt(m + 1), hi = pt(m + 2);
      for (std::size_t k = 0; k <= v.fft_size / 2; ++k) {
        const double f = double(k) * kSampleRate / double(v.fft_size);
        double w = 0.0;
        if (f > lo && f < hi) w = f <= c ? (f - lo) / (c - lo) : (hi - f) / (hi - c);
        mismatches += fb.at(m, k) != w;
      }
    }
    check(r, mismatches == 0,
          "filterbank " + std::to_string(v.n_mels) + "x" + std::to_string(v.fft_size / 2 + 1) + " (" + fmt("%g", v.fmin) + "-" + fmt("%g Hz)", v.fmax) +
              " vs triangle oracle: " + std::to_string(mismatches) + " mismatching entries");
  }

  std::size_t bad = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = rng.below(160001);
    std::size_t count = 0;
    for (std::size_t start = 0; start + win <= n; start += cfg.hop_samples()) ++count;
    bad += frame_count(n, cfg) != count;
  }
  for (int i = 0; i < 10; ++i) {
    WaveForm w;
    w.samples.resize(win + rng.below(4000));
    for (auto& v : w.samples) v = rng.uniform(-0.5, 0.5);
    std::size_t count = 0;
    for (std::size_t start = 0; start + win <= w.samples.size(); start += cfg.hop_samples()) ++count;
    bad += ex.extract(w).n_frames() != count;
  }
  check(r, bad == 0, "frame count over 1000 random lengths: " + std::to_string(bad) + " mismatches");
  r.seconds = since(t0);
  return r;
}

SuiteResult bayes(std::size_t tables, std::uint64_t seed) {
  const auto t0 = Clock::now();
  SuiteResult r{"bayes", true, {}, 0.0};
  Rng rng(seed);
  std::size_t agree = 0;
  std::vector<BayesReport> first;
  for (std::size_t i = 0; i < tables; ++i) {
    auto rep = bayes_oracle_check(random_joint_table(rng, 4, 4, 4));
    agree += rep.all_agree();
    if (i < 10) first.push_back(rep);
  }
  check(r, agree == tables, std::to_string(agree) + "/" + std::to_string(tables) + " tables agree");

  Rng again(seed);
  bool same = true;
  for (const auto& rep : first) {
    auto b = bayes_oracle_check(random_joint_table(again, 4, 4, 4));
    for (std::size_t c = 0; c < rep.cells.size(); ++c) same = same && b.cells[c].posterior == rep.cells[c].posterior;
  }
  check(r, same, "replay of the first tables gives identical decisions");

  JointTable uniform{4, 4, 4, std::vector<double>(64, 1.0 / 64)};
  auto u = bayes_oracle_check(uniform);
  bool zero = u.all_agree();
  for (const auto& c : u.cells) zero = zero && c.posterior == 0 && c.likelihood == 0 && c.factored == 0;
  check(r, zero, "uniform table: every route picks class 0");
  r.seconds = since(t0);
  check(r, r.seconds < 5.0, "runtime " + fmt("%.2f s", r.seconds));
  return r;
}

SuiteResult attention(std::size_t trials, std::uint64_t seed) {
  const auto t0 = Clock::now();
  SuiteResult r{"attention", true, {}, 0.0};
  Rng rng(seed);
  ModelConfig cfg;
  cfg.n_mels = 10;
  cfg.conv_layers = {{3, 3, 2, 2}, {4, 3, 1, 2}};
  cfg.dropout_rate = 0.0;
  cfg.gru_hidden = 8;
  cfg.embed_dim = 6;
  cfg.d_model = 8;
  cfg.head_dims = {8, 4};
  const std::size_t d = cfg.d_model;

  double worst_sum = 0.0, worst_formula = 0.0;
  std::size_t masked_nonzero = 0;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Model m(cfg, derive_seed(seed, "attention", trial));
    const std::size_t B = 1 + rng.below(3), Lt = 1 + rng.below(5), Ls = 2 + rng.below(8);
    std::vector<std::size_t> lens;
    for (std::size_t b = 0; b < B; ++b) lens.push_back(1 + rng.below(Ls));
    Tensor t = random_tensor({B, Lt, d}, rng, -3, 3), s = random_tensor({B, Ls, d}, rng, -3, 3);
    Tape tape;
    EncodedText text{tape.constant(t), Tensor(Shape{B, Lt}, 1.0), {}};
    EncodedSpeech speech{tape.constant(s), length_mask(lens, Ls), {}};
    auto out = m.cross_attention(tape, text, speech);
    const auto& W = out.attention.value();
    const auto& P = m.parameters();
    const Tensor& WQ = P[P.index("fusion.W_Q")].value;
    const Tensor& WK = P[P.index("fusion.W_K")].value;
    const Tensor& WV = P[P.index("fusion.W_V")].value;
    for (std::size_t b = 0; b < B; ++b) {
      auto project = [&](const Tensor& x, std::size_t L, const Tensor& Wm) {
        std::vector<long double> y(L * d, 0.0L);
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t j = 0; j < d; ++j)
            for (std::size_t k = 0; k < d; ++k) y[i * d + j] += (long double)x[(b * L + i) * d + k] * Wm[k * d + j];
        return y;
      };
      auto Q = project(t, Lt, WQ), K = project(s, Ls, WK), V = project(s, Ls, WV);
      for (std::size_t i = 0; i < Lt; ++i) {
        std::vector<long double> e(lens[b]);
        long double mx = -1e300L, z = 0;
        for (std::size_t j = 0; j < lens[b]; ++j) {
          long double dot = 0;
          for (std::size_t k = 0; k < d; ++k) dot += Q[i * d + k] * K[j * d + k];
          e[j] = dot / std::sqrt((long double)d);
          mx = std::max(mx, e[j]);
        }
        for (auto& v : e) z += (v = std::exp(v - mx));
        double row = 0;
        for (std::size_t j = 0; j < Ls; ++j) {
          const double w = W[(b * Lt + i) * Ls + j];
          row += w;
          if (j >= lens[b]) {
            masked_nonzero += w != 0.0;
          } else {
            worst_formula = std::max(worst_formula, std::abs(w - (double)(e[j] / z)));
          }
        }
        worst_sum = std::max(worst_sum, std::abs(row - 1.0));
        for (std::size_t k = 0; k < d; ++k) {
          long double c = 0;
          for (std::size_t j = 0; j < lens[b]; ++j) c += e[j] / z * V[j * d + k];
          worst_formula = std::max(worst_formula, std::abs(out.context.value()[(b * Lt + i) * d + k] - (double)c));
        }
      }
    }
  }
  check(r, worst_sum <= 1e-6, "row sums: max |sum - 1| " + fmt("%.3e", worst_sum));
  check(r, masked_nonzero == 0, "masked frames: " + std::to_string(masked_nonzero) + " nonzero weights");
  check(r, worst_formula <= 1e-10, "softmax(QK^T/sqrt(d))V brute force: max abs error " + fmt("%.3e", worst_formula));

  double worst_pad = 0.0;
  for (std::size_t trial = 0; trial < 10; ++trial) {
    const Task task = trial % 2 ? Task::severity : Task::detection;
    ModelConfig c = cfg;
    c.task = task;
    c.modality = trial % 4 == 3 ? Modality::speech : Modality::speech_text;
    Model m(c, derive_seed(seed, "padding", trial));
    Tensor short_mel = random_tensor({6 + rng.below(6), 10}, rng, -2, 2);
    Tensor long_mel = random_tensor({20 + rng.below(10), 10}, rng, -2, 2);
    auto w1 = tokenize(kWords[rng.below(3)]), w2 = tokenize("alphabet");
    Tape tape;
    Rng dr(0);
    auto alone = m.forward(tape, make_speech_batch({&short_mel}), make_text_batch({&w1}), Mode::eval, dr);
    auto padded =
        m.forward(tape, make_speech_batch({&short_mel, &long_mel}), make_text_batch({&w1, &w2}), Mode::eval, dr);
    for (std::size_t u = 0; u < c.head_units(); ++u)
      worst_pad = std::max(worst_pad, std::abs(alone.scores.value()[u] - padded.scores.value()[u]));
  }
  check(r, worst_pad < 1e-6, "padding invariance of class scores: max change " + fmt("%.3e", worst_pad));
  r.seconds = since(t0);
  return r;
}

SuiteResult splits(const Manifest* manifest, std::uint64_t seed) {
  const auto t0 = Clock::now();
  SuiteResult r{"splits", true, {}, 0.0};
  const Manifest layout = manifest ? Manifest{} : ua_speech_layout();
  const Manifest& m = manifest ? *manifest : layout;

  auto speakers = [&](const std::vector<std::size_t>& idx) {
    std::set<std::string> s;
    for (auto i : idx) s.insert(m[i].speaker_id);
    return s;
  };
  auto uncommon = [&](const std::vector<std::size_t>& idx) {
    std::set<std::string> s;
    for (auto i : idx)
      if (m[i].group == WordGroup::uncommon) s.insert(m[i].word_id);
    return s;
  };
  auto disjoint = [](const std::set<std::string>& a, const std::set<std::string>& b) {
    for (const auto& x : a)
      if (b.count(x)) return false;
    return true;
  };

  for (Protocol v : {Protocol::SID1, Protocol::SID2}) {
    auto plan = build_sid_loso(m, v, seed);
    bool ok = plan.folds.size() == 26;
    for (const auto& f : plan.folds) {
      auto te = speakers(f.test);
      ok = ok && te.size() == 1 && disjoint(te, speakers(f.train));
    }
    ok = ok && check_plan(plan, m).empty();
    check(r, ok, to_string(v) + ": " + std::to_string(plan.folds.size()) + " folds, one held-out speaker each, speaker-disjoint");
  }
  for (Protocol v : {Protocol::SD, Protocol::SID2}) {
    auto plan = v == Protocol::SD ? build_sd_split(m, seed) : build_sid_loso(m, v, seed);
    bool ok = plan.train_uncommon.size() == 200 && plan.test_uncommon.size() == 100;
    const std::set<std::string> tr(plan.train_uncommon.begin(), plan.train_uncommon.end());
    const std::set<std::string> te(plan.test_uncommon.begin(), plan.test_uncommon.end());
    ok = ok && disjoint(tr, te);
    for (const auto& f : plan.folds) ok = ok && disjoint(uncommon(f.train), uncommon(f.test));
    check(r, ok, to_string(v) + ": uncommon words " + std::to_string(tr.size()) + " train / " + std::to_string(te.size()) +
                     " test, empty intersection");
  }
  {
    auto plan = build_severity_split(m);
    const auto& f = plan.folds.at(0);
    auto tr = speakers(f.train), te = speakers(f.test);
    std::map<Severity, int> per;
    for (const auto& s : tr) per[m[m.records_of_speaker(s).at(0)].severity]++;
    bool ok = tr.size() == 8 && te.size() == 7 && disjoint(tr, te) && per.size() == 4 && check_plan(plan, m).empty();
    for (auto [sev, n] : per) ok = ok && n == 2;
    check(r, ok, "SEVERITY: " + std::to_string(tr.size()) + " train / " + std::to_string(te.size()) +
                     " test speakers, 2 per class in training");
  }
  r.seconds = since(t0);
  return r;
}

SuiteResult control() {
  const auto t0 = Clock::now();
  SuiteResult r{"control", true, {}, 0.0};
  TrainConfig cfg;  // patience 5 / 3, factor 0.5

  auto script = [&](const std::vector<double>& losses, std::size_t& reduced_at, std::size_t& stop_at,
                    std::size_t& best) {
    TrainingController c(cfg);
    reduced_at = stop_at = 0;
    for (double v : losses) {
      auto a = c.observe(v);
      if (a == EpochAction::lr_reduced && !reduced_at) reduced_at = c.epoch();
      if (a == EpochAction::stop) {
        stop_at = c.epoch();
        break;
      }
    }
    best = c.best_epoch();
  };

  std::size_t red = 0, stop = 0, best = 0;
  script(std::vector<double>(20, 0.7), red, stop, best);
  check(r, red == 6 && stop == 9 && best == 1,
        "constant loss: lr reduced at epoch " + std::to_string(red) + ", stop at " + std::to_string(stop) +
            ", best epoch " + std::to_string(best));

  std::vector<double> seq{1.0, 0.9, 0.8};
  seq.resize(20, 0.8);
  script(seq, red, stop, best);
  check(r, red == 8 && stop == 11 && best == 3,
        "improve to epoch 3 then flat: lr reduced at " + std::to_string(red) + ", stop at " + std::to_string(stop) +
            ", best epoch " + std::to_string(best));

  // An improvement after the reduction resets the stop counter.
  seq = std::vector<double>(6, 1.0);
  for (double v : {0.5, 0.5, 0.5, 0.5, 0.5, 0.5}) seq.push_back(v);
  script(seq, red, stop, best);
  check(r, red == 6 && stop == 10 && best == 7,
        "improvement after reduction: stop at " + std::to_string(stop) + ", best epoch " + std::to_string(best));

  // Best-epoch restoration on a real training run.
  Rng rng(5);
  ModelConfig mc = reduced_config(Task::detection, Modality::speech_text);
  mc.dropout_rate = 0.0;
  Model model(mc, 6);
  std::vector<Tensor> mels;
  for (int i = 0; i < 48; ++i) mels.push_back(random_tensor({6 + rng.below(4), 8}, rng, -1, 1));
  std::vector<Example> train, val;
  for (int i = 0; i < 48; ++i) {
    Example e{&mels[i], tokenize(kWords[i % kWords.size()]), static_cast<int>(rng.below(2)), "S" + std::to_string(i % 4)};
    (i % 4 == 0 ? val : train).push_back(e);
  }
  TrainConfig tc;
  tc.lr = 0.05;  // large enough that validation loss moves and overfits
  tc.max_epochs = 15;
  tc.batch_size = 8;
  tc.seed = 7;
  TrainLog log = train_model(model, train, val, tc);
  std::size_t argmin = 1;
  for (std::size_t e = 1; e < log.epochs.size(); ++e)
    if (log.epochs[e].val_loss < log.epochs[argmin - 1].val_loss) argmin = e + 1;
  const double restored = evaluate(model, val, tc.batch_size).loss;
  check(r, log.best_epoch == argmin && restored == log.epochs[argmin - 1].val_loss,
        "restored model reproduces the epoch-" + std::to_string(log.best_epoch) + " validation loss of " +
            std::to_string(log.epochs.size()) + " epochs (argmin " + std::to_string(argmin) + ")");
  r.seconds = since(t0);
  return r;
}

SuiteResult determinism(const fs::path& work_dir, std::uint64_t seed) {
  const auto t0 = Clock::now();
  SuiteResult r{"determinism", true, {}, 0.0};
  fs::remove_all(work_dir);
  SyntheticConfig sc;
  sc.n_speakers = 3;
  sc.repetitions = 1;
  Manifest m = generate_synthetic_corpus(sc, seed, work_dir / "corpus");

  RunConfig cfg = gate_config(SyntheticTask::detection_xor, Modality::speech_text, seed);
  cfg.train.max_epochs = 3;
  build_feature_cache(m, cfg.frontend, work_dir / "feat_a", 1);
  build_feature_cache(m, cfg.frontend, work_dir / "feat_b", 2);
  std::size_t diff = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto name = feature_file_name(m[i]);
    diff += file_bytes(work_dir / "feat_a" / name) != file_bytes(work_dir / "feat_b" / name);
  }
  check(r, diff == 0, std::to_string(m.size()) + " feature caches (1 vs 2 threads): " + std::to_string(diff) + " differ");

  SplitPlan plan = build_speaker_holdout(m, Task::detection, 1, seed);
  std::ostringstream sink;
  std::array<std::string, 2> run{"run_a", "run_b"};
  for (int k = 0; k < 2; ++k) {
    cfg.features = work_dir / (k ? "feat_b" : "feat_a");
    train_plan(cfg, plan, m, work_dir / run[k], 1, sink);
    write_report(evaluate_plan(plan, m, work_dir / run[k]), work_dir / run[k]);
  }
  const std::string ck = "fold_HOLDOUT.ckpt";
  check(r, file_bytes(work_dir / run[0] / ck) == file_bytes(work_dir / run[1] / ck), "checkpoints byte-identical");
  bool reports = true;
  for (const char* f : {"report.csv", "report.json"})
    reports = reports && file_bytes(work_dir / run[0] / f) == file_bytes(work_dir / run[1] / f);
  check(r, reports, "reports byte-identical");
  r.seconds = since(t0);
  return r;
}

SuiteResult synth(const SynthOptions& opt) {
  const auto t0 = Clock::now();
  SuiteResult r{"synth", true, {}, 0.0};
  for (auto task : opt.tasks)
    for (auto seed : opt.seeds)
      for (auto modality : {Modality::speech, Modality::speech_text}) {
        GateOptions g;
        g.task = task;
        g.modality = modality;
        g.seed = seed;
        g.work_dir = opt.work_dir;
        GateResult res = run_synthetic_gate(g);
        const bool ok = gate_passes(task, modality, res.test_accuracy) && res.seconds <= opt.max_seconds_per_run;
        const char* bound = task == SyntheticTask::detection_xor ? (modality == Modality::speech ? "<= 0.60" : ">= 0.95")
                                                                 : (modality == Modality::speech ? "<= 0.40" : ">= 0.90");
        check(r, ok,
              to_string(task) + " " + to_string(modality) + " seed " + std::to_string(seed) + ": test accuracy " +
                  fmt("%.4f", res.test_accuracy) + " (" + bound + ", n=" + std::to_string(res.n_test) + "), " +
                  std::to_string(res.epochs) + " epochs, " + fmt("%.0f s", res.seconds));
      }
  r.seconds = since(t0);
  return r;
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> n{"grad", "dsp", "bayes", "attention", "splits", "control", "determinism", "synth"};
  return n;
}

}  // namespace dysmm::verify
