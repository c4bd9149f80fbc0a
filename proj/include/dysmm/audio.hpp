#pragma once

// WAV loading, silence trimming and 80-band log-mel features.

#include <cstddef>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "dysmm/tensor.hpp"

namespace dysmm {

inline constexpr int kSampleRate = 16000;

struct WaveForm {
  std::vector<double> samples;  // in [-1, 1)
  int sample_rate = kSampleRate;

  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct FrontendConfig {
  double window_ms = 25.0;
  double hop_ms = 10.0;
  std::size_t n_mels = 80;
  std::size_t fft_size = 512;
  double fmin = 0.0;
  double fmax = 8000.0;
  double trim_threshold_db = 40.0;  // below the loudest frame
  double max_duration_s = 10.0;     // longer utterances are excluded, not truncated
  bool normalize = true;            // per-utterance mean/variance normalisation before the encoder

  std::size_t window_samples() const;
  std::size_t hop_samples() const;
  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

/// Log-energies, shape [n_frames, n_mels].
struct MelSpectrogram {
  Tensor values;

  std::size_t n_frames() const { return values.dim(0); }
  std::size_t n_mels() const { return values.dim(1); }
};

/// Reads RIFF/WAVE PCM-16 mono 16 kHz. Throws FormatError otherwise.
WaveForm load_wav(const std::filesystem::path& path);
/// Writes PCM-16 mono; samples are clipped to [-1, 1) and rounded.
void save_wav(const std::filesystem::path& path, const WaveForm& wave);

/// Removes leading and trailing frames whose RMS level is more than
/// trim_threshold_db below the loudest frame. Frames are window_samples long
/// and advance by hop_samples; the cut lands on the hop grid, so the result
/// keeps at most one hop of silence at each end. Throws InvariantError on an
/// all-silent input.
WaveForm trim_silence(const WaveForm& wave, const FrontendConfig& config);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular filters, shape [n_mels, fft_size/2 + 1]. Filter m rises from
/// point m to point m+1 and falls to point m+2 of n_mels+2 mel-uniform points
/// between fmin and fmax. Throws ConfigError if any row is empty.
Tensor mel_filterbank_matrix(const FrontendConfig& config);

/// 1 + floor((n - window) / hop), or 0 when n < window.
std::size_t frame_count(std::size_t n_samples, const FrontendConfig& config);

/// Periodic Hann window of length n.
std::vector<double> hann_window(std::size_t n);

/// Computes per-frame power spectra and log-mel energies. Owns an FFT plan;
/// one instance per thread.
class LogMelExtractor {
 public:
  explicit LogMelExtractor(const FrontendConfig& config);
  ~LogMelExtractor();
  LogMelExtractor(const LogMelExtractor&) = delete;
  LogMelExtractor& operator=(const LogMelExtractor&) = delete;

  /// |DFT|^2 of a frame (Hann-windowed internally when `apply_window`),
  /// zero-padded to fft_size; fft_size/2 + 1 bins.
  std::vector<double> power_spectrum(std::span<const double> frame, bool apply_window = true);

  /// Requires at least one full window; throws InvariantError otherwise.
  MelSpectrogram extract(const WaveForm& wave);

  const Tensor& filterbank() const { return filterbank_; }
  const FrontendConfig& config() const { return config_; }

 private:
  struct Plan;
  FrontendConfig config_;
  Tensor filterbank_;
  std::vector<double> window_;
  std::unique_ptr<Plan> plan_;
};

MelSpectrogram extract_logmel(const WaveForm& wave, const FrontendConfig& config);

/// Subtracts the utterance mean and divides by its standard deviation (all
/// frames and bands pooled, so spectral shape is preserved).
Tensor normalize_utterance(const Tensor& logmel);

// Feature cache: "DMEL", u32 version, u32 n_frames, u32 n_mels, then
// row-major float32 values; all little-endian.
void write_feature_cache(const std::filesystem::path& path, const MelSpectrogram& mel);
MelSpectrogram read_feature_cache(const std::filesystem::path& path);

}  // namespace dysmm
