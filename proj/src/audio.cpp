#include "dysmm/audio.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>

#include "binary_io.hpp"
#include "dysmm/error.hpp"

namespace dysmm {

namespace {

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

std::uint32_t u32_at(const std::vector<unsigned char>& b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | static_cast<std::uint32_t>(b[off + 1]) << 8 |
         static_cast<std::uint32_t>(b[off + 2]) << 16 | static_cast<std::uint32_t>(b[off + 3]) << 24;
}

std::uint16_t u16_at(const std::vector<unsigned char>& b, std::size_t off) {
  return static_cast<std::uint16_t>(b[off] | b[off + 1] << 8);
}

}  // namespace

std::size_t FrontendConfig::window_samples() const {
  return static_cast<std::size_t>(std::lround(window_ms * kSampleRate / 1000.0));
}

std::size_t FrontendConfig::hop_samples() const {
  return static_cast<std::size_t>(std::lround(hop_ms * kSampleRate / 1000.0));
}

void FrontendConfig::validate() const {
  if (window_samples() == 0 || hop_samples() == 0) throw ConfigError("frontend: window and hop must be positive");
  if (fft_size < window_samples()) throw ConfigError("frontend: fft_size smaller than the analysis window");
  if (n_mels == 0) throw ConfigError("frontend: n_mels must be positive");
  if (!(fmin >= 0 && fmin < fmax && fmax <= kSampleRate / 2.0))
    throw ConfigError("frontend: need 0 <= fmin < fmax <= sample_rate/2");
  if (trim_threshold_db <= 0) throw ConfigError("frontend: trim_threshold_db must be positive");
  if (max_duration_s <= 0) throw ConfigError("frontend: max_duration_s must be positive");
}

WaveForm load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (b.size() < 12 || std::memcmp(b.data(), "RIFF", 4) != 0 || std::memcmp(b.data() + 8, "WAVE", 4) != 0)
    throw FormatError(name + ": not a RIFF/WAVE file");

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    const std::uint32_t size = u32_at(b, pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > b.size()) throw FormatError(name + ": chunk extends past end of file");
    if (std::memcmp(b.data() + pos, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError(name + ": short fmt chunk");
      format = u16_at(b, body);
      channels = u16_at(b, body + 2);
      rate = u32_at(b, body + 4);
      bits = u16_at(b, body + 14);
      if (format == 0xFFFE && size >= 26) format = u16_at(b, body + 24);  // WAVE_FORMAT_EXTENSIBLE
      have_fmt = true;
    } else if (std::memcmp(b.data() + pos, "data", 4) == 0) {
      if (!have_fmt) throw FormatError(name + ": data chunk before fmt chunk");
      if (format != 1) throw FormatError(name + ": only PCM is supported (format " + std::to_string(format) + ")");
      if (channels != 1) throw FormatError(name + ": expected mono, got " + std::to_string(channels) + " channels");
      if (bits != 16) throw FormatError(name + ": expected 16-bit samples, got " + std::to_string(bits));
      if (rate != kSampleRate)
        throw FormatError(name + ": expected 16000 Hz, got " + std::to_string(rate) + " Hz");
      WaveForm w;
      w.samples.resize(size / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i)
        w.samples[i] = static_cast<std::int16_t>(u16_at(b, body + 2 * i)) / 32768.0;
      return w;
    }
    pos = body + size + (size & 1);
  }
  throw FormatError(name + ": no data chunk");
}

void save_wav(const std::filesystem::path& path, const WaveForm& wave) {
  if (wave.sample_rate != kSampleRate) throw FormatError("save_wav: sample rate must be 16000");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(wave.samples.size() * 2);
  os.write("RIFF", 4);
  io::write_le<std::uint32_t>(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  io::write_le<std::uint32_t>(os, 16);
  io::write_le<std::uint16_t>(os, 1);
  io::write_le<std::uint16_t>(os, 1);
  io::write_le<std::uint32_t>(os, kSampleRate);
  io::write_le<std::uint32_t>(os, kSampleRate * 2);
  io::write_le<std::uint16_t>(os, 2);
  io::write_le<std::uint16_t>(os, 16);
  os.write("data", 4);
  io::write_le<std::uint32_t>(os, data_bytes);
  for (double s : wave.samples) {
    const double scaled = std::round(std::clamp(s, -1.0, 1.0) * 32768.0);
    io::write_le<std::int16_t>(os, static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0)));
  }
  if (!os) throw FormatError("write failed: " + path.string());
}

WaveForm trim_silence(const WaveForm& wave, const FrontendConfig& config) {
  const auto& x = wave.samples;
  if (x.empty()) throw InvariantError("trim_silence: empty waveform");
  const std::size_t win = config.window_samples(), hop = config.hop_samples(), n = x.size();
  const std::size_t frames = n <= win ? 1 : frame_count(n, config);
  std::vector<double> energy(frames, 0.0);
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t lo = t * hop, hi = std::min(n, lo + win);
    double e = 0;
    for (std::size_t i = lo; i < hi; ++i) e += x[i] * x[i];
    energy[t] = e / static_cast<double>(hi - lo);
  }
  const double peak = *std::max_element(energy.begin(), energy.end());
  if (peak <= 0.0) throw InvariantError("trim_silence: input is entirely silent");
  const double floor = peak * std::pow(10.0, -config.trim_threshold_db / 10.0);
  std::size_t first = 0, last = frames - 1;
  while (energy[first] < floor) ++first;
  while (energy[last] < floor) --last;

  // Samples covered only by silent frames are dropped.
  std::size_t start = first == 0 ? 0 : first * hop + (win - hop);
  std::size_t end = last == frames - 1 ? n : last * hop + hop;
  if (start >= end) {
    start = first * hop;
    end = std::min(n, last * hop + win);
  }
  WaveForm out;
  out.sample_rate = wave.sample_rate;
  out.samples.assign(x.begin() + static_cast<std::ptrdiff_t>(start), x.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Tensor mel_filterbank_matrix(const FrontendConfig& config) {
  config.validate();
  const std::size_t bins = config.fft_size / 2 + 1;
  const double mlo = hz_to_mel(config.fmin), mhi = hz_to_mel(config.fmax);
  std::vector<double> pts(config.n_mels + 2);
  for (std::size_t i = 0; i < pts.size(); ++i)
    pts[i] = mel_to_hz(mlo + (mhi - mlo) * static_cast<double>(i) / static_cast<double>(config.n_mels + 1));
  Tensor fb(Shape{config.n_mels, bins});
  for (std::size_t m = 0; m < config.n_mels; ++m) {
    const double lo = pts[m], c = pts[m + 1], hi = pts[m + 2];
    bool any = false;
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * kSampleRate / static_cast<double>(config.fft_size);
      const double w = std::max(0.0, std::min((f - lo) / (c - lo), (hi - f) / (hi - c)));
      fb.at(m, k) = w;
      any = any || w > 0;
    }
    if (!any)
      throw ConfigError("mel filterbank: filter " + std::to_string(m) + " covers no FFT bin; n_mels " +
                        std::to_string(config.n_mels) + " is too large for fft_size " + std::to_string(config.fft_size));
  }
  return fb;
}

std::size_t frame_count(std::size_t n_samples, const FrontendConfig& config) {
  const std::size_t win = config.window_samples(), hop = config.hop_samples();
  if (n_samples < win) return 0;
  return 1 + (n_samples - win) / hop;
}

std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

struct LogMelExtractor::Plan {
  double* in = nullptr;
  fftw_complex* out = nullptr;
  fftw_plan plan = nullptr;
};

LogMelExtractor::LogMelExtractor(const FrontendConfig& config)
    : config_(config), filterbank_(mel_filterbank_matrix(config)), window_(hann_window(config.window_samples())),
      plan_(std::make_unique<Plan>()) {
  const auto n = static_cast<int>(config_.fft_size);
  std::lock_guard lock(fftw_planner_mutex());
  plan_->in = fftw_alloc_real(config_.fft_size);
  plan_->out = fftw_alloc_complex(config_.fft_size / 2 + 1);
  // FFTW_ESTIMATE keeps the chosen algorithm, and thus the rounding, fixed.
  plan_->plan = fftw_plan_dft_r2c_1d(n, plan_->in, plan_->out, FFTW_ESTIMATE);
}

LogMelExtractor::~LogMelExtractor() {
  std::lock_guard lock(fftw_planner_mutex());
  fftw_destroy_plan(plan_->plan);
  fftw_free(plan_->in);
  fftw_free(plan_->out);
}

std::vector<double> LogMelExtractor::power_spectrum(std::span<const double> frame, bool apply_window) {
  if (frame.size() > config_.fft_size) throw ShapeError("power_spectrum: frame longer than fft_size");
  if (apply_window && frame.size() != window_.size()) throw ShapeError("power_spectrum: frame length != window");
  std::fill_n(plan_->in, config_.fft_size, 0.0);
  for (std::size_t i = 0; i < frame.size(); ++i) plan_->in[i] = apply_window ? frame[i] * window_[i] : frame[i];
  fftw_execute(plan_->plan);
  std::vector<double> p(config_.fft_size / 2 + 1);
  for (std::size_t k = 0; k < p.size(); ++k)
    p[k] = plan_->out[k][0] * plan_->out[k][0] + plan_->out[k][1] * plan_->out[k][1];
  return p;
}

MelSpectrogram LogMelExtractor::extract(const WaveForm& wave) {
  if (wave.sample_rate != kSampleRate) throw FormatError("extract_logmel: sample rate must be 16000");
  const std::size_t frames = frame_count(wave.samples.size(), config_);
  if (frames == 0)
    throw InvariantError("extract_logmel: waveform of " + std::to_string(wave.samples.size()) +
                         " samples is shorter than one window");
  const std::size_t win = config_.window_samples(), hop = config_.hop_samples(), bins = filterbank_.dim(1);
  Tensor out(Shape{frames, config_.n_mels});
  for (std::size_t t = 0; t < frames; ++t) {
    const auto p = power_spectrum(std::span<const double>(wave.samples).subspan(t * hop, win));
    for (std::size_t m = 0; m < config_.n_mels; ++m) {
      double e = 0;
      const double* row = filterbank_.data().data() + m * bins;
      for (std::size_t k = 0; k < bins; ++k) e += row[k] * p[k];
      out.at(t, m) = std::log(std::max(e, 1e-10));
    }
  }
  return {std::move(out)};
}

MelSpectrogram extract_logmel(const WaveForm& wave, const FrontendConfig& config) {
  LogMelExtractor ex(config);
  return ex.extract(wave);
}

Tensor normalize_utterance(const Tensor& logmel) {
  double mean = 0;
  for (double v : logmel.data()) mean += v;
  mean /= static_cast<double>(logmel.size());
  double var = 0;
  for (double v : logmel.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(logmel.size());
  const double inv = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
  Tensor out = logmel;
  for (auto& v : out.data()) v = (v - mean) * inv;
  return out;
}

void write_feature_cache(const std::filesystem::path& path, const MelSpectrogram& mel) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os.write("DMEL", 4);
  io::write_le<std::uint32_t>(os, 1);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(mel.n_frames()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(mel.n_mels()));
  for (double v : mel.values.data()) io::write_le<float>(os, static_cast<float>(v));
  if (!os) throw FormatError("write failed: " + path.string());
}

MelSpectrogram read_feature_cache(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DMEL", 4) != 0) throw FormatError(path.string() + ": bad magic");
  const auto version = io::read_le<std::uint32_t>(is, "version");
  if (version != 1) throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  const auto frames = io::read_le<std::uint32_t>(is, "n_frames");
  const auto mels = io::read_le<std::uint32_t>(is, "n_mels");
  if (frames == 0 || mels == 0) throw FormatError(path.string() + ": empty feature matrix");
  Tensor values(Shape{frames, mels});
  for (auto& v : values.data()) v = io::read_le<float>(is, "values");
  return {std::move(values)};
}

}  // namespace dysmm
