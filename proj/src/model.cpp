#include "asr/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace asr {

void ModelConfig::validate() const {
  if (d == 0 || d_ff == 0 || heads == 0 || enc_layers == 0 || dec_layers == 0 ||
      stack_factor == 0 || mel_bins == 0 || vocab_size == 0) {
    throw ConfigError("model config: all sizes and layer counts must be positive");
  }
  if (d % heads != 0) {
    throw ConfigError("model config: d=" + std::to_string(d) + " not divisible by heads=" +
                      std::to_string(heads));
  }
  if (d % 2 != 0) throw ConfigError("model config: d must be even for positional encoding");
  if (dropout < 0.0 || dropout >= 1.0 || char_dropout < 0.0 || char_dropout >= 1.0) {
    throw ConfigError("model config: dropout rates must be in [0, 1)");
  }
  if (stochastic_p != 1.0 && (stochastic_p <= 0.0 || stochastic_p > 1.0)) {
    throw ConfigError("model config: stochastic_p must be in (0, 1) or exactly 1 (disabled)");
  }
}

namespace {

Tensor init_weight(Shape shape, Index fan_in, RngStream& rng) {
  const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t = Tensor::uniform(std::move(shape), -a, a, rng);
  t.set_requires_grad(true);
  return t;
}

Tensor init_zeros(Shape shape) {
  Tensor t{std::move(shape), 0.0};
  t.set_requires_grad(true);
  return t;
}

Tensor init_ones(Shape shape) {
  Tensor t{std::move(shape), 1.0};
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TransformerModel::TransformerModel(ModelConfig config, RngStream init_rng)
    : config_(std::move(config)) {
  config_.validate();
  const Index d = config_.d;
  const Index dff = config_.d_ff;
  const Index in_dim = config_.stack_factor * config_.mel_bins;

  auto reg = [this](const std::string& name, Tensor t) {
    params_.emplace_back(name, t);
    return t;
  };
  auto attn = [&](const std::string& prefix) {
    AttentionParams p;
    p.heads = config_.heads;
    p.wq = reg(prefix + ".wq", init_weight({d, d}, d, init_rng));
    p.bq = reg(prefix + ".bq", init_zeros({d}));
    p.wk = reg(prefix + ".wk", init_weight({d, d}, d, init_rng));
    p.bk = reg(prefix + ".bk", init_zeros({d}));
    p.wv = reg(prefix + ".wv", init_weight({d, d}, d, init_rng));
    p.bv = reg(prefix + ".bv", init_zeros({d}));
    p.wo = reg(prefix + ".wo", init_weight({d, d}, d, init_rng));
    p.bo = reg(prefix + ".bo", init_zeros({d}));
    return p;
  };
  auto ff = [&](const std::string& prefix) {
    FeedForwardParams p;
    p.w1 = reg(prefix + ".w1", init_weight({d, dff}, d, init_rng));
    p.b1 = reg(prefix + ".b1", init_zeros({dff}));
    p.w2 = reg(prefix + ".w2", init_weight({dff, d}, dff, init_rng));
    p.b2 = reg(prefix + ".b2", init_zeros({d}));
    return p;
  };
  auto norm = [&](const std::string& prefix) {
    LayerNormParams p;
    p.gain = reg(prefix + ".gain", init_ones({d}));
    p.bias = reg(prefix + ".bias", init_zeros({d}));
    return p;
  };

  input_proj_w_ = reg("input_proj.w", init_weight({in_dim, d}, in_dim, init_rng));
  input_proj_b_ = reg("input_proj.b", init_zeros({d}));
  for (Index l = 0; l < config_.enc_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    EncoderLayer layer;
    layer.self_attn = attn(p + ".self_attn");
    layer.ff = ff(p + ".ff");
    layer.norm1 = norm(p + ".norm1");
    layer.norm2 = norm(p + ".norm2");
    encoder_.push_back(std::move(layer));
  }
  embedding_ = reg("embedding", init_weight({config_.vocab_size, d}, d, init_rng));
  for (Index l = 0; l < config_.dec_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    DecoderLayer layer;
    layer.self_attn = attn(p + ".self_attn");
    layer.cross_attn = attn(p + ".cross_attn");
    layer.ff = ff(p + ".ff");
    layer.norm1 = norm(p + ".norm1");
    layer.norm2 = norm(p + ".norm2");
    layer.norm3 = norm(p + ".norm3");
    decoder_.push_back(std::move(layer));
  }
  if (!config_.tie_embedding) {
    output_w_ = reg("output_proj.w", init_weight({d, config_.vocab_size}, d, init_rng));
  }
  output_b_ = reg("output_proj.b", init_zeros({config_.vocab_size}));

  if (config_.stochastic_enabled()) {
    enc_policy_ = StochasticPolicy(config_.stochastic_p, config_.enc_layers);
    dec_policy_ = StochasticPolicy(config_.stochastic_p, config_.dec_layers);
  }
}

EncodeOut TransformerModel::encode(const Tensor& features, const std::vector<Index>& frame_lengths,
                                   Mode mode, RngBundle* rng) const {
  if (features.numel() == 0) throw DataError("encode: empty feature input");
  const bool batched = features.rank() == 3;
  if (!batched && features.rank() != 2) {
    throw ShapeError("encode expects [T, mel] or [B, T, mel], got " +
                     shape_str(features.shape()));
  }
  const Index batch = batched ? features.shape()[0] : 1;
  const Index t = features.shape()[batched ? 1 : 0];
  if (features.shape().back() != config_.mel_bins) {
    throw ShapeError("encode: expected " + std::to_string(config_.mel_bins) +
                     " mel bins, got " + shape_str(features.shape()));
  }
  std::vector<Index> lengths = frame_lengths;
  if (lengths.empty()) lengths.assign(batch, t);
  if (lengths.size() != batch) throw ShapeError("encode: one frame length per sequence");

  Tensor x = stack_frames(batched ? features : reshape(features, {1, t, config_.mel_bins}),
                          config_.stack_factor);
  const Index t2 = x.shape()[1];
  std::vector<Index> out_lengths(batch);
  for (Index b = 0; b < batch; ++b) {
    if (lengths[b] == 0 || lengths[b] > t) throw DataError("encode: bad frame length");
    out_lengths[b] = (lengths[b] + config_.stack_factor - 1) / config_.stack_factor;
  }

  // Project up to d before adding the position table; adding at the raw
  // feature scale destabilizes training.
  x = add(matmul(x, input_proj_w_), input_proj_b_);
  x = add(x, positional_encoding(t2, config_.d));
  if (mode == Mode::kTrain && config_.dropout > 0.0) {
    if (rng == nullptr) throw UsageError("encode: train mode requires rng streams");
    x = dropout(x, config_.dropout, mode, rng->dropout);
  }

  Tensor pad = pad_mask_from_lengths(out_lengths, t2);
  LayerOptions opts{config_.dropout, !config_.ln_identity_on_skip};
  for (Index l = 0; l < config_.enc_layers; ++l) {
    x = encoder_layer_forward(x, encoder_[l], &pad, enc_policy_, l + 1, opts, mode, rng);
  }
  return EncodeOut{x, pad, out_lengths};
}

Tensor TransformerModel::embed_targets(const std::vector<int32_t>& ids, Index batch, Index steps,
                                       Mode mode, RngBundle* rng) const {
  Tensor emb = embedding_lookup(embedding_, ids, {batch, steps});
  emb = scale(emb, std::sqrt(static_cast<double>(config_.d)));
  if (mode == Mode::kTrain && config_.char_dropout > 0.0) {
    if (rng == nullptr) throw UsageError("decoder: train mode requires rng streams");
    // Character dropout: zero whole embedding vectors before the position
    // table is added. Pad positions are never selected.
    Tensor mask(Shape{batch, steps, 1}, 1.0);
    double* m = mask.mutable_data().data();
    for (Index i = 0; i < ids.size(); ++i) {
      if (ids[i] == 0) continue;
      if (rng->char_drop.bernoulli(config_.char_dropout)) m[i] = 0.0;
    }
    emb = mul(emb, mask);
  }
  return add(emb, positional_encoding(steps, config_.d));
}

Tensor TransformerModel::output_projection(const Tensor& x) const {
  if (config_.tie_embedding) {
    return add(matmul(x, transpose_last_two(embedding_)), output_b_);
  }
  return add(matmul(x, output_w_), output_b_);
}

Tensor TransformerModel::decode_logits(const EncodeOut& enc, const std::vector<int32_t>& target_ids,
                                       Index batch, Index steps, Mode mode, RngBundle* rng) const {
  if (steps == 0) throw UsageError("decode_logits: empty target sequence");
  if (target_ids.size() != batch * steps) {
    throw ShapeError("decode_logits: expected " + std::to_string(batch * steps) + " ids, got " +
                     std::to_string(target_ids.size()));
  }
  Tensor y = embed_targets(target_ids, batch, steps, mode, rng);
  Tensor causal = causal_mask(steps);
  LayerOptions opts{config_.dropout, !config_.ln_identity_on_skip};
  for (Index l = 0; l < config_.dec_layers; ++l) {
    y = decoder_layer_forward(y, enc.memory, decoder_[l], causal, &enc.memory_pad_mask,
                              dec_policy_, l + 1, opts, mode, rng);
  }
  return output_projection(y);
}

Tensor TransformerModel::forward_teacher_forcing(const Tensor& features,
                                                 const std::vector<int32_t>& target_ids,
                                                 Mode mode, RngBundle* rng) const {
  if (target_ids.empty() || target_ids.front() != 1) {
    throw UsageError("forward_teacher_forcing: targets must begin with the start symbol");
  }
  EncodeOut enc = encode(features, {}, mode, rng);
  Tensor logits = decode_logits(enc, target_ids, 1, target_ids.size(), mode, rng);
  return reshape(logits, {target_ids.size(), config_.vocab_size});
}

Index TransformerModel::parameter_count() const {
  Index n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void TransformerModel::zero_grads() {
  for (auto& [name, t] : params_) t.zero_grad();
}

Index count_parameters(const ModelConfig& config) {
  config.validate();
  const Index d = config.d, dff = config.d_ff, v = config.vocab_size;
  const Index attn = 4 * (d * d + d);
  const Index ff = d * dff + dff + dff * d + d;
  const Index norm = 2 * d;
  const Index enc_layer = attn + ff + 2 * norm;
  const Index dec_layer = 2 * attn + ff + 3 * norm;
  const Index input_proj = config.stack_factor * config.mel_bins * d + d;
  const Index embedding = v * d;
  const Index output = (config.tie_embedding ? 0 : d * v) + v;
  return input_proj + config.enc_layers * enc_layer + embedding +
         config.dec_layers * dec_layer + output;
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

constexpr char kMagic[8] = {'A', 'S', 'R', 'C', 'K', 'P', 'T', '\x01'};

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
std::string read_str(std::istream& is) {
  std::string s(read_u32(is), '\0');
  is.read(s.data(), static_cast<std::streamsize>(s.size()));
  return s;
}

std::map<std::string, std::string> config_entries(const ModelConfig& c) {
  return {
      {"d", std::to_string(c.d)},
      {"d_ff", std::to_string(c.d_ff)},
      {"heads", std::to_string(c.heads)},
      {"enc_layers", std::to_string(c.enc_layers)},
      {"dec_layers", std::to_string(c.dec_layers)},
      {"stack_factor", std::to_string(c.stack_factor)},
      {"mel_bins", std::to_string(c.mel_bins)},
      {"vocab_size", std::to_string(c.vocab_size)},
      {"dropout", std::to_string(c.dropout)},
      {"char_dropout", std::to_string(c.char_dropout)},
      {"stochastic_p", std::to_string(c.stochastic_p)},
      {"ln_identity_on_skip", c.ln_identity_on_skip ? "true" : "false"},
      {"tie_embedding", c.tie_embedding ? "true" : "false"},
  };
}

ModelConfig config_from_entries(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  auto geti = [&](const char* k) { return static_cast<Index>(std::stoull(kv.at(k))); };
  auto getd = [&](const char* k) { return std::stod(kv.at(k)); };
  c.d = geti("d");
  c.d_ff = geti("d_ff");
  c.heads = geti("heads");
  c.enc_layers = geti("enc_layers");
  c.dec_layers = geti("dec_layers");
  c.stack_factor = geti("stack_factor");
  c.mel_bins = geti("mel_bins");
  c.vocab_size = geti("vocab_size");
  c.dropout = getd("dropout");
  c.char_dropout = getd("char_dropout");
  c.stochastic_p = getd("stochastic_p");
  c.ln_identity_on_skip = kv.at("ln_identity_on_skip") == "true";
  c.tie_embedding = kv.at("tie_embedding") == "true";
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model,
                     const std::string& vocab_chars) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  const auto entries = config_entries(model.config());
  write_u32(os, static_cast<uint32_t>(entries.size()));
  for (const auto& [k, v] : entries) {
    write_str(os, k);
    write_str(os, v);
  }
  write_str(os, vocab_chars);
  const auto& params = model.named_parameters();
  write_u32(os, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    write_str(os, name);
    write_u32(os, static_cast<uint32_t>(t.rank()));
    for (Index d : t.shape()) write_u64(os, d);
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) throw DataError("failed writing checkpoint: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw DataError("not a checkpoint file (bad magic): " + path.string());
  }
  std::map<std::string, std::string> kv;
  const uint32_t n_entries = read_u32(is);
  for (uint32_t i = 0; i < n_entries; ++i) {
    std::string k = read_str(is);
    kv[k] = read_str(is);
  }
  LoadedCheckpoint out;
  try {
    out.config = config_from_entries(kv);
  } catch (const std::out_of_range&) {
    throw DataError("checkpoint is missing config entries: " + path.string());
  }
  out.vocab_chars = read_str(is);
  out.model = std::make_shared<TransformerModel>(out.config, RngStream(0));
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : out.model->named_parameters()) by_name.emplace(name, t);
  const uint32_t n_tensors = read_u32(is);
  if (n_tensors != by_name.size()) {
    throw DataError("checkpoint holds " + std::to_string(n_tensors) + " tensors, model needs " +
                    std::to_string(by_name.size()));
  }
  for (uint32_t i = 0; i < n_tensors; ++i) {
    const std::string name = read_str(is);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint has unknown tensor '" + name + "'");
    Shape shape(read_u32(is));
    for (Index& d : shape) d = read_u64(is);
    if (shape != it->second.shape()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                      ", expected " + shape_str(it->second.shape()));
    }
    is.read(reinterpret_cast<char*>(it->second.mutable_data().data()),
            static_cast<std::streamsize>(it->second.numel() * sizeof(double)));
  }
  if (!is) throw DataError("truncated checkpoint: " + path.string());
  return out;
}

}  // namespace asr
