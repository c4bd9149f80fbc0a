#pragma once

// Speech encoder, text encoder, cross-attention fusion and classification
// heads, plus the speech-only baseline.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dysmm/autodiff.hpp"
#include "dysmm/text.hpp"

namespace dysmm {

enum class Task { detection, severity };
enum class Modality { speech, speech_text };

std::string to_string(Task task);
std::string to_string(Modality modality);
Task parse_task(const std::string& s);
Modality parse_modality(const std::string& s);

struct ConvLayerConfig {
  std::size_t channels = 16;
  std::size_t kernel = 3;  // odd; padded by kernel/2 on both axes
  std::size_t time_stride = 2;
  std::size_t freq_stride = 2;
};

struct ModelConfig {
  Task task = Task::detection;
  Modality modality = Modality::speech_text;
  std::size_t n_mels = 80;
  std::vector<ConvLayerConfig> conv_layers{{16, 3, 2, 2}, {32, 3, 2, 2}};
  double dropout_rate = 0.2;
  std::size_t gru_hidden = 64;
  std::size_t speech_gru_layers = 2;
  std::size_t text_gru_layers = 1;
  std::size_t embed_dim = 64;
  std::size_t d_model = 128;
  std::vector<std::size_t> head_dims{128, 32};
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  /// 2 for detection, 4 for severity.
  std::size_t n_classes() const { return task == Task::detection ? 2 : 4; }
  /// Width of the output layer: one sigmoid logit or four softmax logits.
  std::size_t head_units() const { return task == Task::detection ? 1 : 4; }
  std::size_t time_downsample() const;
  /// Speech sequence length after the convolution stack: ceil(frames / downsample).
  std::size_t encoded_length(std::size_t n_frames) const;
  bool is_reference() const;
  void validate() const;
  /// Stable text form; feeds config digests.
  std::string canonical() const;
};

/// Parameter count of the default configuration (speech-text, detection).
inline constexpr std::size_t kDefaultParameterCount = 315745;

/// Closed-form number of learnable scalars implied by a configuration.
std::size_t expected_parameter_count(const ModelConfig& config);

/// Padded speech inputs: features [B, T, n_mels] with per-item frame counts.
struct SpeechBatch {
  Tensor features;
  std::vector<std::size_t> lengths;

  std::size_t size() const { return lengths.size(); }
};

/// Padded token ids [B, L] (pad id kPadToken) with per-item lengths.
struct TextBatch {
  std::vector<int> tokens;
  std::size_t max_len = 0;
  std::vector<std::size_t> lengths;

  std::size_t size() const { return lengths.size(); }
};

SpeechBatch make_speech_batch(const std::vector<const Tensor*>& mels);
TextBatch make_text_batch(const std::vector<const TokenSequence*>& words);

/// 1.0 for valid steps, 0.0 for padding; shape [B, max_len].
Tensor length_mask(const std::vector<std::size_t>& lengths, std::size_t max_len);

struct EncodedSpeech {
  Var states;   // [B, Ls, d] (unprojected Bi-GRU states [B, Ls, 2H] in speech-only models)
  Tensor mask;  // [B, Ls]
  Var final;    // [B, 2H] last Bi-GRU layer: forward at last valid step ++ backward at step 0
};

struct EncodedText {
  Var states;  // [B, Lt, d]
  Tensor mask; // [B, Lt]
  Var pooled;  // [B, d]
};

struct FusionOutput {
  Var context;    // [B, Lt, d]
  Var attention;  // [B, Lt, Ls]
};

struct ModelOutput {
  Var logits;  // [B, head_units]
  Var scores;  // sigmoid or softmax of logits
};

/// Tape handles for one GRU direction. Gate order in W/b columns: z, r, candidate.
struct GruVars {
  Var W;     // [in, 3H]
  Var U_zr;  // [H, 2H]
  Var U_h;   // [H, H]
  Var b;     // [3H]
};

/// One step: z, r gates, candidate from r*h, then h' = (1-z) h + z h~.
Var gru_cell(Var x, Var h, const GruVars& p);

struct SequenceStates {
  Var states;  // [B, L, H] or [B, L, 2H]
  Var final;   // [B, H] or [B, 2H]
};

/// Unidirectional GRU over seq [B, L, in]. Masked steps carry the state
/// through unchanged, so `final` is the state at the last valid step.
SequenceStates gru_encode(Var seq, const Tensor& mask, const GruVars& p, bool reverse = false);

/// Forward and backward passes concatenated per step. final is the forward
/// state at the last valid step followed by the backward state at step 0.
SequenceStates bigru_encode(Var seq, const Tensor& mask, const GruVars& fwd, const GruVars& bwd);

/// Threshold 0.5 for detection, argmax (lowest index on ties) for severity.
std::vector<int> decide(const Tensor& scores, Task task);

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }
  std::vector<BatchNormState>& batchnorm_states() { return bn_states_; }
  const std::vector<BatchNormState>& batchnorm_states() const { return bn_states_; }

  EncodedSpeech speech_encode(Tape& tape, const SpeechBatch& batch, Mode mode, Rng& rng);
  EncodedText text_encode(Tape& tape, const TextBatch& batch, Mode mode);
  FusionOutput cross_attention(Tape& tape, const EncodedText& text, const EncodedSpeech& speech);
  ModelOutput classify(Tape& tape, const FusionOutput& fusion, const Tensor& text_mask, Mode mode);
  ModelOutput speech_only_forward(Tape& tape, const SpeechBatch& batch, Mode mode, Rng& rng);

  /// Full forward pass for the configured modality (text ignored for speech-only).
  ModelOutput forward(Tape& tape, const SpeechBatch& speech, const TextBatch& text, Mode mode, Rng& rng);

  GruVars bind_gru(Tape& tape, const std::string& prefix);

 private:
  void add_gru(const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng);
  void add_dense(const std::string& prefix, std::size_t in, std::size_t out, Rng& rng);
  Var dense(Tape& tape, const std::string& prefix, Var x);
  ModelOutput head(Tape& tape, Var features, const std::string& prefix);

  ModelConfig config_;
  ParameterStore params_;
  std::vector<BatchNormState> bn_states_;
};

/// Config digest used to pair checkpoints with the configuration that made them.
std::uint64_t config_digest(const ModelConfig& config);

// Checkpoint: "DCKP", u32 version, u64 config digest, u32 entry count, then per
// entry u32 name length, name bytes, u32 rank, u32 dims, row-major f64 values.
// Entries are the parameters followed by batch-norm running statistics.
void save_checkpoint(const std::filesystem::path& path, const Model& model, std::uint64_t digest);
/// Throws FormatError on malformed input or a digest/shape mismatch.
void load_checkpoint(const std::filesystem::path& path, Model& model, std::uint64_t expected_digest);

}  // namespace dysmm
