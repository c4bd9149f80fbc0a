#include "dysmm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "binary_io.hpp"
#include "dysmm/error.hpp"

namespace dysmm {

std::string to_string(Task task) { return task == Task::detection ? "detection" : "severity"; }
std::string to_string(Modality m) { return m == Modality::speech ? "speech" : "speech-text"; }

Task parse_task(const std::string& s) {
  if (s == "detection") return Task::detection;
  if (s == "severity") return Task::severity;
  throw ConfigError("unknown task '" + s + "' (expected detection|severity)");
}

Modality parse_modality(const std::string& s) {
  if (s == "speech") return Modality::speech;
  if (s == "speech-text" || s == "speech_text") return Modality::speech_text;
  throw ConfigError("unknown modality '" + s + "' (expected speech|speech-text)");
}

std::size_t ModelConfig::time_downsample() const {
  std::size_t d = 1;
  for (const auto& c : conv_layers) d *= c.time_stride;
  return d;
}

std::size_t ModelConfig::encoded_length(std::size_t n_frames) const {
  std::size_t len = n_frames;
  for (const auto& c : conv_layers) len = (len + c.time_stride - 1) / c.time_stride;
  return len;
}

bool ModelConfig::is_reference() const {
  return gru_hidden == 64 && head_dims == std::vector<std::size_t>{128, 32} && dropout_rate == 0.2 &&
         conv_layers.size() == 2 && n_mels == 80;
}

void ModelConfig::validate() const {
  if (n_mels == 0 || gru_hidden == 0 || d_model == 0 || embed_dim == 0)
    throw ConfigError("model: dimensions must be positive");
  if (conv_layers.empty()) throw ConfigError("model: at least one convolution layer is required");
  for (const auto& c : conv_layers) {
    if (c.channels == 0 || c.time_stride == 0 || c.freq_stride == 0)
      throw ConfigError("model: convolution channels and strides must be positive");
    if (c.kernel % 2 == 0) throw ConfigError("model: convolution kernels must be odd");
  }
  if (speech_gru_layers == 0 || text_gru_layers == 0) throw ConfigError("model: need at least one Bi-GRU layer");
  if (dropout_rate < 0 || dropout_rate >= 1) throw ConfigError("model: dropout_rate must be in [0, 1)");
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "task=" << to_string(task) << ";modality=" << to_string(modality) << ";n_mels=" << n_mels << ";conv=";
  for (const auto& c : conv_layers) os << c.channels << '/' << c.kernel << '/' << c.time_stride << '/' << c.freq_stride << ',';
  os << ";dropout=" << dropout_rate << ";gru_hidden=" << gru_hidden << ";speech_gru_layers=" << speech_gru_layers
     << ";text_gru_layers=" << text_gru_layers << ";embed_dim=" << embed_dim << ";d_model=" << d_model << ";head=";
  for (auto h : head_dims) os << h << ',';
  os << ";bn=" << bn_momentum << '/' << bn_eps;
  return os.str();
}

std::uint64_t config_digest(const ModelConfig& config) { return fnv1a64(config.canonical()); }

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t H = c.gru_hidden;
  auto gru = [H](std::size_t in) { return in * 3 * H + H * 2 * H + H * H + 3 * H; };
  auto dense = [](std::size_t in, std::size_t out) { return in * out + out; };
  std::size_t n = 0, in_ch = 1;
  for (const auto& l : c.conv_layers) {
    n += l.channels * in_ch * l.kernel * l.kernel + l.channels + 2 * l.channels;
    in_ch = l.channels;
  }
  std::size_t in = in_ch;
  for (std::size_t i = 0; i < c.speech_gru_layers; ++i) {
    n += 2 * gru(in);
    in = 2 * H;
  }
  std::size_t head_in;
  if (c.modality == Modality::speech_text) {
    n += dense(2 * H, c.d_model);  // speech projection
    n += kEmbeddingRows * c.embed_dim;
    in = c.embed_dim;
    for (std::size_t i = 0; i < c.text_gru_layers; ++i) {
      n += 2 * gru(in);
      in = 2 * H;
    }
    n += 2 * dense(2 * H, c.d_model);          // per-position projection + pooled projection
    n += 3 * c.d_model * c.d_model;            // W_Q, W_K, W_V
    n += gru(c.d_model);                       // classifier GRU
    head_in = H;
  } else {
    head_in = 2 * H;
  }
  for (auto h : c.head_dims) {
    n += dense(head_in, h);
    head_in = h;
  }
  n += dense(head_in, c.head_units());
  return n;
}

// ---------------------------------------------------------------------------
// Batching

Tensor length_mask(const std::vector<std::size_t>& lengths, std::size_t max_len) {
  Tensor m(Shape{lengths.size(), max_len}, 0.0);
  for (std::size_t b = 0; b < lengths.size(); ++b)
    for (std::size_t t = 0; t < std::min(lengths[b], max_len); ++t) m[b * max_len + t] = 1.0;
  return m;
}

SpeechBatch make_speech_batch(const std::vector<const Tensor*>& mels) {
  if (mels.empty()) throw ShapeError("make_speech_batch: empty batch");
  const std::size_t n_mels = mels[0]->dim(1);
  std::size_t max_t = 0;
  for (const Tensor* m : mels) {
    if (m->rank() != 2 || m->dim(1) != n_mels) throw ShapeError("make_speech_batch: inconsistent mel shapes");
    max_t = std::max(max_t, m->dim(0));
  }
  SpeechBatch b{Tensor(Shape{mels.size(), max_t, n_mels}, 0.0), {}};
  for (std::size_t i = 0; i < mels.size(); ++i) {
    std::copy(mels[i]->data().begin(), mels[i]->data().end(), b.features.data().begin() + i * max_t * n_mels);
    b.lengths.push_back(mels[i]->dim(0));
  }
  return b;
}

TextBatch make_text_batch(const std::vector<const TokenSequence*>& words) {
  if (words.empty()) throw ShapeError("make_text_batch: empty batch");
  TextBatch b;
  for (const auto* w : words) b.max_len = std::max(b.max_len, w->size());
  b.tokens.assign(words.size() * b.max_len, kPadToken);
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i]->size() == 0) throw ShapeError("make_text_batch: empty token sequence");
    std::copy(words[i]->tokens.begin(), words[i]->tokens.end(), b.tokens.begin() + i * b.max_len);
    b.lengths.push_back(words[i]->size());
  }
  return b;
}

// ---------------------------------------------------------------------------
// Recurrent building blocks

namespace {

// One step given the precomputed input projection xw = x W + b.
Var gru_step(Var xw, Var h, const GruVars& p) {
  const std::size_t H = h.dim(1);
  Var zr = sigmoid(add(slice(xw, 1, 0, 2 * H), matmul(h, p.U_zr)));
  Var z = slice(zr, 1, 0, H);
  Var r = slice(zr, 1, H, 2 * H);
  Var cand = tanh(add(slice(xw, 1, 2 * H, 3 * H), matmul(mul(r, h), p.U_h)));
  return add(h, mul(z, sub(cand, h)));
}

}  // namespace

Var gru_cell(Var x, Var h, const GruVars& p) {
  if (x.dim(0) != h.dim(0) || x.dim(1) != p.W.dim(0) || p.U_h.dim(0) != h.dim(1))
    throw ShapeError("gru_cell: x " + shape_str(x.shape()) + " h " + shape_str(h.shape()) + " W " +
                     shape_str(p.W.shape()));
  return gru_step(add_bias(matmul(x, p.W), p.b), h, p);
}

namespace {

Var step_of(Var seq, std::size_t t) {
  return reshape(slice(seq, 1, t, t + 1), {seq.dim(0), seq.dim(2)});
}

Var stack_steps(const std::vector<Var>& steps) {
  std::vector<Var> parts;
  parts.reserve(steps.size());
  for (const Var& s : steps) parts.push_back(reshape(s, {s.dim(0), 1, s.dim(1)}));
  return concat(parts, 1);
}

Tensor mask_column(const Tensor& mask, std::size_t t) {
  const std::size_t B = mask.dim(0), L = mask.dim(1);
  Tensor col(Shape{B, 1});
  for (std::size_t b = 0; b < B; ++b) col[b] = mask[b * L + t];
  return col;
}

}  // namespace

SequenceStates gru_encode(Var seq, const Tensor& mask, const GruVars& p, bool reverse) {
  if (seq.value().rank() != 3) throw ShapeError("gru_encode: expected [B, L, in], got " + shape_str(seq.shape()));
  const std::size_t B = seq.dim(0), L = seq.dim(1), H = p.U_h.dim(0);
  if (L == 0) throw ShapeError("gru_encode: empty sequence");
  if (mask.shape() != Shape{B, L}) throw ShapeError("gru_encode: mask shape " + shape_str(mask.shape()));
  Tape& tape = seq.tape();
  // Input projections for all steps at once.
  Var xw = add_bias(matmul(seq, p.W), p.b);
  Var h = tape.constant(Tensor(Shape{B, H}, 0.0));
  std::vector<Var> out(L);
  for (std::size_t i = 0; i < L; ++i) {
    const std::size_t t = reverse ? L - 1 - i : i;
    h = blend(mask_column(mask, t), gru_step(step_of(xw, t), h, p), h);
    out[t] = h;
  }
  return {stack_steps(out), h};
}

SequenceStates bigru_encode(Var seq, const Tensor& mask, const GruVars& fwd, const GruVars& bwd) {
  auto f = gru_encode(seq, mask, fwd, false);
  auto b = gru_encode(seq, mask, bwd, true);
  std::vector<Var> states{f.states, b.states};
  std::vector<Var> finals{f.final, b.final};
  return {concat(states, 2), concat(finals, 1)};
}

std::vector<int> decide(const Tensor& scores, Task task) {
  if (scores.rank() != 2) throw ShapeError("decide: expected [B, units] scores");
  const std::size_t B = scores.dim(0), U = scores.dim(1);
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    if (task == Task::detection) {
      if (U != 1) throw ShapeError("decide: detection expects one unit");
      out[b] = scores[b] >= 0.5 ? 1 : 0;
    } else {
      std::size_t best = 0;
      for (std::size_t u = 1; u < U; ++u)
        if (scores[b * U + u] > scores[b * U + best]) best = u;
      out[b] = static_cast<int>(best);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

namespace {

Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

}  // namespace

void Model::add_gru(const std::string& prefix, std::size_t in, std::size_t H, Rng& rng) {
  params_.add(prefix + ".W", glorot({in, 3 * H}, in, 3 * H, rng));
  params_.add(prefix + ".U_zr", glorot({H, 2 * H}, H, 2 * H, rng));
  params_.add(prefix + ".U_h", glorot({H, H}, H, H, rng));
  params_.add(prefix + ".b", Tensor(Shape{3 * H}, 0.0));
}

void Model::add_dense(const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  params_.add(prefix + ".W", glorot({in, out}, in, out, rng));
  params_.add(prefix + ".b", Tensor(Shape{out}, 0.0));
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng = Rng(seed).split("init");
  const std::size_t H = config_.gru_hidden;
  std::size_t in_ch = 1;
  for (std::size_t i = 0; i < config_.conv_layers.size(); ++i) {
    const auto& l = config_.conv_layers[i];
    const std::string p = "speech_enc.conv" + std::to_string(i + 1);
    const std::size_t k2 = l.kernel * l.kernel;
    params_.add(p + ".kernel", glorot({l.channels, in_ch, l.kernel, l.kernel}, in_ch * k2, l.channels * k2, rng));
    params_.add(p + ".bias", Tensor(Shape{l.channels}, 0.0));
    const std::string bn = "speech_enc.bn" + std::to_string(i + 1);
    params_.add(bn + ".gamma", Tensor(Shape{l.channels}, 1.0));
    params_.add(bn + ".beta", Tensor(Shape{l.channels}, 0.0));
    bn_states_.push_back({Tensor(Shape{l.channels}, 0.0), Tensor(Shape{l.channels}, 1.0)});
    in_ch = l.channels;
  }
  std::size_t in = in_ch;
  for (std::size_t i = 0; i < config_.speech_gru_layers; ++i) {
    const std::string p = "speech_enc.gru" + std::to_string(i + 1);
    add_gru(p + ".fwd", in, H, rng);
    add_gru(p + ".bwd", in, H, rng);
    in = 2 * H;
  }
  std::size_t head_in = 2 * H;
  if (config_.modality == Modality::speech_text) {
    add_dense("speech_enc.proj", 2 * H, config_.d_model, rng);
    params_.add("text_enc.embedding",
                glorot({static_cast<std::size_t>(kEmbeddingRows), config_.embed_dim}, kEmbeddingRows, config_.embed_dim, rng));
    in = config_.embed_dim;
    for (std::size_t i = 0; i < config_.text_gru_layers; ++i) {
      const std::string p = "text_enc.gru" + std::to_string(i + 1);
      add_gru(p + ".fwd", in, H, rng);
      add_gru(p + ".bwd", in, H, rng);
      in = 2 * H;
    }
    add_dense("text_enc.proj", 2 * H, config_.d_model, rng);
    add_dense("text_enc.pool", 2 * H, config_.d_model, rng);
    params_.add("fusion.W_Q", glorot({config_.d_model, config_.d_model}, config_.d_model, config_.d_model, rng));
    params_.add("fusion.W_K", glorot({config_.d_model, config_.d_model}, config_.d_model, config_.d_model, rng));
    params_.add("fusion.W_V", glorot({config_.d_model, config_.d_model}, config_.d_model, config_.d_model, rng));
    add_gru("classifier.gru", config_.d_model, H, rng);
    head_in = H;
  }
  for (std::size_t i = 0; i < config_.head_dims.size(); ++i) {
    add_dense("classifier.dense" + std::to_string(i + 1), head_in, config_.head_dims[i], rng);
    head_in = config_.head_dims[i];
  }
  add_dense("classifier.out", head_in, config_.head_units(), rng);

  if (params_.scalar_count() != expected_parameter_count(config_))
    throw Error("model: built " + std::to_string(params_.scalar_count()) + " parameters, expected " +
                std::to_string(expected_parameter_count(config_)));
}

GruVars Model::bind_gru(Tape& tape, const std::string& prefix) {
  return {tape.parameter(params_, prefix + ".W"), tape.parameter(params_, prefix + ".U_zr"),
          tape.parameter(params_, prefix + ".U_h"), tape.parameter(params_, prefix + ".b")};
}

Var Model::dense(Tape& tape, const std::string& prefix, Var x) {
  return add_bias(matmul(x, tape.parameter(params_, prefix + ".W")), tape.parameter(params_, prefix + ".b"));
}

EncodedSpeech Model::speech_encode(Tape& tape, const SpeechBatch& batch, Mode mode, Rng& rng) {
  const auto& f = batch.features;
  if (f.rank() != 3 || f.dim(2) != config_.n_mels)
    throw ShapeError("speech_encode: features must be [B, T, " + std::to_string(config_.n_mels) + "], got " +
                     shape_str(f.shape()));
  const std::size_t B = f.dim(0);
  for (auto len : batch.lengths)
    if (len < config_.time_downsample() || len > f.dim(1))
      throw ShapeError("speech_encode: " + std::to_string(len) + " frames is too few for time downsampling by " +
                       std::to_string(config_.time_downsample()));

  Var x = tape.constant(f.reshaped({B, 1, f.dim(1), f.dim(2)}));
  std::vector<std::size_t> lengths = batch.lengths;
  for (std::size_t i = 0; i < config_.conv_layers.size(); ++i) {
    const auto& l = config_.conv_layers[i];
    const std::string p = "speech_enc.conv" + std::to_string(i + 1);
    const std::string bn = "speech_enc.bn" + std::to_string(i + 1);
    const std::size_t pad = l.kernel / 2;
    x = conv2d(x, tape.parameter(params_, p + ".kernel"), tape.parameter(params_, p + ".bias"),
               {l.time_stride, l.freq_stride, pad, pad});
    x = relu(x);
    for (auto& len : lengths) len = (len + l.time_stride - 1) / l.time_stride;
    const std::size_t T = x.dim(2);
    Tensor valid = length_mask(lengths, T).reshaped({B, 1, T, 1});
    x = batchnorm(x, tape.parameter(params_, bn + ".gamma"), tape.parameter(params_, bn + ".beta"), bn_states_[i],
                  mode, {config_.bn_momentum, config_.bn_eps}, &valid);
    x = dropout(x, config_.dropout_rate, mode, rng);
    // Padding frames are zeroed so the next layer sees the same values as
    // the zero padding of an unpadded input.
    x = mul_const(x, valid);
  }
  x = permute(mean_axis(x, 3), {0, 2, 1});  // [B, Ls, C]
  const std::size_t Ls = x.dim(1);
  Tensor mask = length_mask(lengths, Ls);

  SequenceStates seq{x, Var()};
  for (std::size_t i = 0; i < config_.speech_gru_layers; ++i) {
    const std::string p = "speech_enc.gru" + std::to_string(i + 1);
    seq = bigru_encode(seq.states, mask, bind_gru(tape, p + ".fwd"), bind_gru(tape, p + ".bwd"));
  }
  Var states = seq.states;
  if (config_.modality == Modality::speech_text) states = dense(tape, "speech_enc.proj", states);
  return {states, std::move(mask), seq.final};
}

EncodedText Model::text_encode(Tape& tape, const TextBatch& batch, Mode) {
  if (config_.modality != Modality::speech_text) throw ConfigError("text_encode: model has no text encoder");
  const std::size_t B = batch.size(), L = batch.max_len;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      const int tok = batch.tokens[b * L + t];
      const bool pad = t >= batch.lengths[b];
      if (pad ? tok != kPadToken : (tok < 0 || tok >= kAlphabetSize))
        throw ShapeError("text_encode: token " + std::to_string(tok) + " out of range");
    }
  Var x = embedding(tape.parameter(params_, "text_enc.embedding"), batch.tokens, {B, L});
  Tensor mask = length_mask(batch.lengths, L);
  SequenceStates seq{x, Var()};
  for (std::size_t i = 0; i < config_.text_gru_layers; ++i) {
    const std::string p = "text_enc.gru" + std::to_string(i + 1);
    seq = bigru_encode(seq.states, mask, bind_gru(tape, p + ".fwd"), bind_gru(tape, p + ".bwd"));
  }
  return {dense(tape, "text_enc.proj", seq.states), std::move(mask), dense(tape, "text_enc.pool", seq.final)};
}

FusionOutput Model::cross_attention(Tape& tape, const EncodedText& text, const EncodedSpeech& speech) {
  const std::size_t d = config_.d_model;
  if (text.states.dim(2) != d || speech.states.dim(2) != d || text.states.dim(0) != speech.states.dim(0))
    throw ShapeError("cross_attention: text " + shape_str(text.states.shape()) + " speech " +
                     shape_str(speech.states.shape()));
  const std::size_t B = speech.states.dim(0), Ls = speech.states.dim(1);
  Var q = matmul(text.states, tape.parameter(params_, "fusion.W_Q"));
  Var k = matmul(speech.states, tape.parameter(params_, "fusion.W_K"));
  Var v = matmul(speech.states, tape.parameter(params_, "fusion.W_V"));
  Var logits = scale(batched_matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor key_mask = speech.mask.reshaped({B, 1, Ls});
  Var weights = masked_softmax(logits, &key_mask, 2);
  return {batched_matmul(weights, v), weights};
}

ModelOutput Model::head(Tape& tape, Var features, const std::string& prefix) {
  Var x = features;
  for (std::size_t i = 0; i < config_.head_dims.size(); ++i)
    x = relu(dense(tape, prefix + ".dense" + std::to_string(i + 1), x));
  Var logits = dense(tape, prefix + ".out", x);
  Var scores = config_.task == Task::detection ? sigmoid(logits) : softmax(logits, 1);
  return {logits, scores};
}

ModelOutput Model::classify(Tape& tape, const FusionOutput& fusion, const Tensor& text_mask, Mode) {
  if (config_.modality != Modality::speech_text) throw ConfigError("classify: model has no fusion classifier");
  auto seq = gru_encode(fusion.context, text_mask, bind_gru(tape, "classifier.gru"));
  return head(tape, seq.final, "classifier");
}

ModelOutput Model::speech_only_forward(Tape& tape, const SpeechBatch& batch, Mode mode, Rng& rng) {
  if (config_.modality != Modality::speech) throw ConfigError("speech_only_forward: model is not speech-only");
  auto enc = speech_encode(tape, batch, mode, rng);
  return head(tape, enc.final, "classifier");
}

ModelOutput Model::forward(Tape& tape, const SpeechBatch& speech, const TextBatch& text, Mode mode, Rng& rng) {
  if (config_.modality == Modality::speech) return speech_only_forward(tape, speech, mode, rng);
  if (speech.size() != text.size()) throw ShapeError("forward: speech and text batch sizes differ");
  auto enc_s = speech_encode(tape, speech, mode, rng);
  auto enc_t = text_encode(tape, text, mode);
  auto fused = cross_attention(tape, enc_t, enc_s);
  return classify(tape, fused, enc_t.mask, mode);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'D', 'C', 'K', 'P'};

std::vector<std::pair<std::string, const Tensor*>> entries(const Model& m) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.name, &p.value);
  for (std::size_t i = 0; i < m.batchnorm_states().size(); ++i) {
    const std::string bn = "speech_enc.bn" + std::to_string(i + 1);
    out.emplace_back(bn + ".running_mean", &m.batchnorm_states()[i].running_mean);
    out.emplace_back(bn + ".running_var", &m.batchnorm_states()[i].running_var);
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, std::uint64_t digest) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os.write(kCheckpointMagic, 4);
  io::write_le<std::uint32_t>(os, 1);
  io::write_le<std::uint64_t>(os, digest);
  const auto list = entries(model);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(list.size()));
  for (const auto& [name, t] : list) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : t->data()) io::write_le<double>(os, v);
  }
  if (!os) throw FormatError("write failed: " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, Model& model, std::uint64_t expected_digest) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError(path.string() + ": not a checkpoint");
  const auto version = io::read_le<std::uint32_t>(is, "version");
  if (version != 1) throw FormatError(path.string() + ": unsupported checkpoint version");
  const auto digest = io::read_le<std::uint64_t>(is, "digest");
  if (digest != expected_digest)
    throw FormatError(path.string() + ": config digest mismatch (checkpoint was written under another configuration)");

  std::map<std::string, Tensor*> targets;
  for (auto& p : model.parameters()) targets[p.name] = &p.value;
  for (std::size_t i = 0; i < model.batchnorm_states().size(); ++i) {
    const std::string bn = "speech_enc.bn" + std::to_string(i + 1);
    targets[bn + ".running_mean"] = &model.batchnorm_states()[i].running_mean;
    targets[bn + ".running_var"] = &model.batchnorm_states()[i].running_var;
  }
  const auto count = io::read_le<std::uint32_t>(is, "entry count");
  if (count != targets.size())
    throw FormatError(path.string() + ": " + std::to_string(count) + " entries, model has " +
                      std::to_string(targets.size()));
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = io::read_le<std::uint32_t>(is, "name length");
    if (len > 4096) throw FormatError(path.string() + ": implausible name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError(path.string() + ": truncated name");
    auto it = targets.find(name);
    if (it == targets.end()) throw FormatError(path.string() + ": unknown entry " + name);
    const auto rank = io::read_le<std::uint32_t>(is, "rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(io::read_le<std::uint32_t>(is, "dim"));
    if (shape != it->second->shape())
      throw FormatError(path.string() + ": shape mismatch for " + name + " " + shape_str(shape));
    for (auto& v : it->second->data()) v = io::read_le<double>(is, "values");
  }
}

}  // namespace dysmm
