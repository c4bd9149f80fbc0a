#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "dysmm/audio.hpp"
#include "dysmm/error.hpp"
#include "dysmm/rng.hpp"

using namespace dysmm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto d = fs::temp_directory_path() / ("dysmm_audio_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
  fs::create_directories(d);
  return d;
}

void put16(std::string& s, unsigned v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put32(std::string& s, unsigned v) {
  put16(s, v & 0xffff);
  put16(s, v >> 16);
}

fs::path write_raw_wav(const std::string& name, unsigned channels, unsigned rate, unsigned bits,
                       const std::vector<int16_t>& samples) {
  std::string body;
  for (auto v : samples) put16(body, static_cast<uint16_t>(v));
  std::string s = "RIFF";
  put32(s, 36 + static_cast<unsigned>(body.size()));
  s += "WAVEfmt ";
  put32(s, 16);
  put16(s, 1);
  put16(s, channels);
  put32(s, rate);
  put32(s, rate * channels * bits / 8);
  put16(s, channels * bits / 8);
  put16(s, bits);
  s += "data";
  put32(s, static_cast<unsigned>(body.size()));
  s += body;
  auto p = temp_dir() / name;
  std::ofstream(p, std::ios::binary) << s;
  return p;
}

// O(n^2) DFT power of a Hann-windowed, zero-padded frame.
std::vector<double> naive_power(const std::vector<double>& frame, std::size_t nfft) {
  const std::size_t n = frame.size();
  std::vector<double> p(nfft / 2 + 1);
  for (std::size_t k = 0; k < p.size(); ++k) {
    std::complex<double> acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double w = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * i / n);
      acc += frame[i] * w * std::polar(1.0, -2 * std::numbers::pi * double(k * i % nfft) / nfft);
    }
    p[k] = std::norm(acc);
  }
  return p;
}

// Triangle built one bin at a time with explicit branches.
double triangle(double f, double lo, double c, double hi) {
  if (f <= lo || f >= hi) return 0.0;
  if (f <= c) return (f - lo) / (c - lo);
  return (hi - f) / (hi - c);
}

std::vector<double> oracle_mel_points(const FrontendConfig& cfg) {
  auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  auto hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  std::vector<double> pts;
  for (std::size_t i = 0; i < cfg.n_mels + 2; ++i)
    pts.push_back(hz(mel(cfg.fmin) + (mel(cfg.fmax) - mel(cfg.fmin)) * double(i) / double(cfg.n_mels + 1)));
  return pts;
}

WaveForm sine(double hz, std::size_t n, double amp = 0.5) {
  WaveForm w;
  for (std::size_t i = 0; i < n; ++i) w.samples.push_back(amp * std::sin(2 * std::numbers::pi * hz * i / kSampleRate));
  return w;
}

}  // namespace

TEST(Wav, SampleScaling) {
  auto p = write_raw_wav("scale.wav", 1, 16000, 16, {16384, -32768, 0, 32767});
  WaveForm w = load_wav(p);
  ASSERT_EQ(w.samples.size(), 4u);
  EXPECT_EQ(w.samples[0], 0.5);
  EXPECT_EQ(w.samples[1], -1.0);
  EXPECT_EQ(w.samples[2], 0.0);
  EXPECT_LT(w.samples[3], 1.0);
}

TEST(Wav, RejectsStereo) {
  auto p = write_raw_wav("stereo.wav", 2, 16000, 16, {1, 2, 3, 4});
  try {
    load_wav(p);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos);
  }
}

TEST(Wav, RejectsWrongRateAndDepth) {
  EXPECT_THROW(load_wav(write_raw_wav("rate.wav", 1, 44100, 16, {1, 2})), FormatError);
  EXPECT_THROW(load_wav(write_raw_wav("depth.wav", 1, 16000, 8, {1, 2})), FormatError);
  auto bad = temp_dir() / "bad.wav";
  std::ofstream(bad, std::ios::binary) << "RIFFxxxxWAVX";
  EXPECT_THROW(load_wav(bad), FormatError);
}

TEST(Wav, SaveLoadKeepsPcmValues) {
  WaveForm w;
  w.samples = {0.5, -1.0, 0.25, -0.125};
  auto p = temp_dir() / "rt.wav";
  save_wav(p, w);
  EXPECT_EQ(load_wav(p).samples, w.samples);
}

TEST(Trim, ZeroPaddedToneKeepsToneWithinOneHop) {
  FrontendConfig cfg;
  WaveForm tone = sine(300, 5000);
  WaveForm padded;
  padded.samples.assign(8000, 0.0);
  padded.samples.insert(padded.samples.end(), tone.samples.begin(), tone.samples.end());
  padded.samples.insert(padded.samples.end(), 8000, 0.0);
  WaveForm t = trim_silence(padded, cfg);
  // Locate the kept segment inside the padded signal.
  const long hop = 160;
  long start = -1;
  for (long s = 0; s + long(t.samples.size()) <= long(padded.samples.size()); ++s)
    if (std::equal(t.samples.begin(), t.samples.end(), padded.samples.begin() + s)) {
      start = s;
      break;
    }
  ASSERT_GE(start, 0);
  const long end = start + long(t.samples.size());
  EXPECT_LE(std::abs(start - 8000), hop);
  EXPECT_LE(std::abs(end - 13000), hop);
}

TEST(Trim, NoSilentEdgesUnchanged) {
  FrontendConfig cfg;
  Rng rng(4);
  WaveForm w;
  for (int i = 0; i < 7777; ++i) w.samples.push_back(rng.uniform(-0.3, 0.3));
  EXPECT_EQ(trim_silence(w, cfg).samples, w.samples);
}

TEST(Trim, AllZeroRejected) {
  FrontendConfig cfg;
  WaveForm w;
  w.samples.assign(4000, 0.0);
  EXPECT_THROW(trim_silence(w, cfg), InvariantError);
}

TEST(Mel, FormulaValues) {
  EXPECT_NEAR(hz_to_mel(1000.0), 999.99, 0.01);
  EXPECT_EQ(hz_to_mel(0.0), 0.0);
  EXPECT_NEAR(mel_to_hz(hz_to_mel(4321.0)), 4321.0, 1e-9);
}

TEST(Mel, FilterbankMatchesTriangleOracleExactly) {
  FrontendConfig cfg;
  Tensor fb = mel_filterbank_matrix(cfg);
  ASSERT_EQ(fb.shape(), (Shape{80, 257}));
  const auto pts = oracle_mel_points(cfg);
  for (std::size_t m = 0; m < 80; ++m) {
    double best = -1;
    std::size_t best_k = 0;
    for (std::size_t k = 0; k < 257; ++k) {
      const double f = double(k) * 16000.0 / 512.0;
      EXPECT_EQ(fb.at(m, k), triangle(f, pts[m], pts[m + 1], pts[m + 2])) << m << "," << k;
      EXPECT_GE(fb.at(m, k), 0.0);
      if (fb.at(m, k) > best) best = fb.at(m, k), best_k = k;
    }
    EXPECT_GT(best, 0.0);
    // The peak sits on one of the two bins bracketing the centre frequency.
    const double centre_bin = pts[m + 1] * 512.0 / 16000.0;
    EXPECT_LE(std::abs(double(best_k) - centre_bin), 1.0) << m;
  }
}

TEST(Mel, TooManyFiltersRejected) {
  FrontendConfig cfg;
  cfg.n_mels = 200;
  EXPECT_THROW(mel_filterbank_matrix(cfg), ConfigError);
}

TEST(LogMel, FrameCounts) {
  FrontendConfig cfg;
  EXPECT_EQ(extract_logmel(sine(440, 16000), cfg).n_frames(), 98u);
  EXPECT_EQ(extract_logmel(sine(440, 400), cfg).n_frames(), 1u);
  EXPECT_THROW(extract_logmel(sine(440, 399), cfg), InvariantError);
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 400 + rng.below(160000 - 400 + 1);
    EXPECT_EQ(frame_count(n, cfg), 1 + (n - 400) / 160);
  }
}

TEST(LogMel, PowerSpectrumMatchesNaiveDft) {
  FrontendConfig cfg;
  LogMelExtractor ex(cfg);
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> frame(400);
    for (auto& v : frame) v = rng.uniform(-1, 1);
    const auto fast = ex.power_spectrum(frame);
    const auto ref = naive_power(frame, 512);
    for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_NEAR(std::sqrt(fast[k]), std::sqrt(ref[k]), 1e-8);
  }
}

TEST(LogMel, SineConcentratesInNearestFilter) {
  FrontendConfig cfg;
  WaveForm w = sine(440, 16000);
  MelSpectrogram mel = extract_logmel(w, cfg);
  const auto pts = oracle_mel_points(cfg);
  std::size_t nearest = 0;
  for (std::size_t m = 0; m < 80; ++m)
    if (std::abs(pts[m + 1] - 440) < std::abs(pts[nearest + 1] - 440)) nearest = m;
  for (std::size_t t = 0; t < mel.n_frames(); ++t) {
    // Oracle: naive DFT + triangle filters on this frame.
    std::vector<double> frame(w.samples.begin() + t * 160, w.samples.begin() + t * 160 + 400);
    const auto p = naive_power(frame, 512);
    std::size_t oracle_best = 0, impl_best = 0;
    double ob = -1e300;
    for (std::size_t m = 0; m < 80; ++m) {
      double e = 0;
      for (std::size_t k = 0; k < 257; ++k) e += triangle(k * 16000.0 / 512, pts[m], pts[m + 1], pts[m + 2]) * p[k];
      if (e > ob) ob = e, oracle_best = m;
      if (mel.values.at(t, m) > mel.values.at(t, impl_best)) impl_best = m;
    }
    EXPECT_EQ(impl_best, oracle_best);
    EXPECT_EQ(impl_best, nearest);
  }
}

TEST(LogMel, DoublingAmplitudeAddsLogFour) {
  FrontendConfig cfg;
  Rng rng(7);
  WaveForm a;
  for (int i = 0; i < 4000; ++i) a.samples.push_back(rng.uniform(-0.2, 0.2));
  WaveForm b = a;
  for (auto& v : b.samples) v *= 2;
  auto ma = extract_logmel(a, cfg), mb = extract_logmel(b, cfg);
  for (std::size_t i = 0; i < ma.values.size(); ++i)
    if (ma.values[i] > std::log(1e-10) + 1) EXPECT_NEAR(mb.values[i] - ma.values[i], std::log(4.0), 1e-9);
}

TEST(LogMel, NearSilentFramesStayFinite) {
  FrontendConfig cfg;
  WaveForm w;
  w.samples.assign(2000, 0.0);
  w.samples[1000] = 1e-12;
  auto m = extract_logmel(w, cfg);
  EXPECT_TRUE(m.values.all_finite());
  EXPECT_DOUBLE_EQ(m.values[0], std::log(1e-10));
}

TEST(LogMel, Deterministic) {
  FrontendConfig cfg;
  auto w = sine(1234, 3000);
  EXPECT_EQ(extract_logmel(w, cfg).values, extract_logmel(w, cfg).values);
}

TEST(FeatureCache, RoundTripAtFloatPrecision) {
  FrontendConfig cfg;
  auto mel = extract_logmel(sine(700, 2000), cfg);
  auto p = temp_dir() / "x.feat";
  write_feature_cache(p, mel);
  auto back = read_feature_cache(p);
  ASSERT_EQ(back.values.shape(), mel.values.shape());
  for (std::size_t i = 0; i < mel.values.size(); ++i)
    EXPECT_EQ(back.values[i], static_cast<double>(static_cast<float>(mel.values[i])));
  EXPECT_EQ(fs::file_size(p), 16 + 4 * mel.values.size());
}

TEST(Normalize, ZeroMeanUnitVariance) {
  Tensor x(Shape{3, 4});
  for (std::size_t i = 0; i < 12; ++i) x[i] = double(i * i);
  Tensor y = normalize_utterance(x);
  double m = 0, v = 0;
  for (double e : y.data()) m += e;
  m /= 12;
  for (double e : y.data()) v += (e - m) * (e - m);
  EXPECT_NEAR(m, 0, 1e-12);
  EXPECT_NEAR(v / 12, 1, 1e-12);
}
